#include "tsd/machine.hpp"

#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tsd/validity.hpp"

namespace tsd {

std::string to_string(const RewriteFlag& f) {
  using T = RewriteFlag::Tag;
  switch (f.tag) {
    case T::None: return "-";
    case T::App: return "@";
    case T::If: return "if";
    case T::Contract: return "C";
    case T::Bang: return "!";
    case T::Mu: return "mu";
    case T::MakeCell: return "m";
    case T::Peek: return "p";
    case T::Link: return "l(" + to_string(f.target) + ")";
    case T::Assign:
      return "a(" + std::to_string(f.value) + "," + to_string(f.target) + ")";
    case T::Root: return "r(" + to_string(f.target) + ")";
    case T::StepPropagate: return "sp";
    case T::StepDone: return "s";
    case T::Dollar: return "$";
  }
  return "?";
}

std::string to_string(const StackElem& e) {
  using T = StackElem::Tag;
  switch (e.tag) {
    case T::Star: return "*";
    case T::LamVal: return "(lam,-)";
    case T::IntPlain: return "(" + std::to_string(e.n) + ",-)";
    case T::IntFlow: return "(" + std::to_string(e.n) + ",g)";
    case T::IntCell: return "(" + std::to_string(e.n) + "," + to_string(e.cell) + ")";
    case T::UnitVal: return "((),-)";
    case T::If0: return "if0";
    case T::If1: return "if1";
  }
  return "?";
}

namespace {

using Tag = NodeKind::Tag;
using FT = RewriteFlag::Tag;
using ST = StackElem::Tag;

struct StuckError {
  std::string why;
};

[[noreturn]] void stuck(const Graph& g, const EvalToken& tok, const std::string& why) {
  std::ostringstream os;
  os << why << " [pos=" << to_string(tok.pos);
  if (g.alive(tok.pos.node)) os << " node=" << kind_label(g.kind(tok.pos.node));
  os << " dir=" << (tok.dir == Direction::Up ? "up" : "down")
     << " flag=" << to_string(tok.flag) << " stack=";
  int shown = 0;
  for (auto it = tok.cstack.rbegin(); it != tok.cstack.rend() && shown < 3; ++it, ++shown)
    os << to_string(*it) << ":";
  os << "...]";
  throw StuckError{os.str()};
}

StackElem& top(Graph& g, EvalToken& tok) {
  if (tok.cstack.empty()) stuck(g, tok, "empty computation stack");
  return tok.cstack.back();
}

// Moves the token across its current edge so the examined endpoint matches
// its direction: up-tokens sit at in-ports, down-tokens at out-ports. A
// down-token at the interface root is the final position.
enum class Norm { Ok, Final };
Norm normalize(Graph& g, EvalToken& tok, const PortRef& root) {
  if (tok.flag.tag != FT::None) return Norm::Ok;  // pinned by the flag
  if (tok.dir == Direction::Up && tok.pos.pol == Pol::Out) {
    auto p = g.peer(tok.pos);
    if (!p) stuck(g, tok, "up token on a dangling out-port");
    tok.pos = *p;
  } else if (tok.dir == Direction::Down && tok.pos.pol == Pol::In) {
    if (tok.pos == root) return Norm::Final;
    auto p = g.peer(tok.pos);
    if (!p) stuck(g, tok, "down token on a dangling in-port");
    tok.pos = *p;
  }
  return Norm::Ok;
}

// ---------------------------------------------------------------------------
// Graph surgery helpers
// ---------------------------------------------------------------------------

PortRef value_box_int(Graph& g, std::int64_t v) {
  NodeId bang = g.add_node(NodeKind::bang());
  BoxId b = g.add_box(bang);
  g.set_box(bang, b);
  NodeId k = g.add_node(NodeKind::constant(v), b);
  g.connect(out_port(bang, 0), in_port(k, 0));
  return in_port(bang, 0);
}

PortRef value_box_unit(Graph& g) {
  NodeId bang = g.add_node(NodeKind::bang());
  BoxId b = g.add_box(bang);
  g.set_box(bang, b);
  NodeId k = g.add_node(NodeKind::unit(), b);
  g.connect(out_port(bang, 0), in_port(k, 0));
  return in_port(bang, 0);
}

// Caps a port that just lost its edge: contraction slots shrink away, any
// other port gets a weakening.
void cap_orphan(Graph& g, PortRef orphan) {
  if (orphan.pol == Pol::In && g.kind(orphan.node).tag == Tag::Contraction) {
    g.contraction_remove_slot(orphan.node, orphan.index);
    return;
  }
  NodeId w = g.add_node(NodeKind::contraction(0), g.box_of(orphan.node));
  g.connect(out_port(w, 0), orphan);
}

// Detaches an operand edge of a node being removed, capping the far side.
void detach_operand(Graph& g, PortRef op_port) {
  if (!g.connected(op_port)) return;
  PortRef peer = g.disconnect(op_port);
  cap_orphan(g, peer);
}

struct Rewirer {
  Graph& g;
  PortRef& root;

  // Wires `provider` to the consumer that used to demand the rewritten node;
  // a missing consumer means the node was at the interface root.
  void bridge(std::optional<PortRef> cons, PortRef provider) {
    if (cons) {
      g.connect(*cons, provider);
    } else {
      g.unregister_interface(root);
      root = provider;
      g.register_interface(root);
    }
  }

  // Disconnects a principal in-port, returning its consumer (nullopt = root).
  std::optional<PortRef> take_consumer(PortRef principal) {
    if (principal == root) return std::nullopt;
    return g.disconnect(principal);
  }
};

// Dissolves a query door: inside bundle connects straight to the provider.
void splice_door(Graph& g, NodeId q) {
  PortRef inside = g.disconnect(in_port(q, 0));
  PortRef outside = g.disconnect(out_port(q, 0));
  g.connect(inside, outside);
}

// Copies `box` and shares each captured provider between the original door
// and the copy's door through a fresh 2-ary contraction.
Graph::CopyResult copy_box_sharing_doors(Graph& g, BoxId box) {
  BoxId parent = g.box(box).parent;
  std::vector<NodeId> doors = g.box(box).doors;
  Graph::CopyResult cr = g.copy_box(box, parent);
  for (size_t i = 0; i < doors.size(); i++) {
    PortRef provider = g.disconnect(out_port(doors[i], 0));
    NodeId share = g.add_node(NodeKind::contraction(2), parent);
    g.connect(in_port(share, 0), out_port(doors[i], 0));
    g.connect(in_port(share, 1), cr.door_out[i]);
    g.connect(out_port(share, 0), provider);
  }
  return cr;
}

bool is_constant_box_root(const Graph& g, PortRef p) {
  if (p.pol != Pol::In || g.kind(p.node).tag != Tag::Bang) return false;
  auto b = g.box_of_bang(p.node);
  if (!b) return false;
  auto inner = g.peer(out_port(p.node, 0));
  if (!inner) return false;
  auto t = g.kind(inner->node).tag;
  return t == Tag::Const || t == Tag::UnitConst;
}

}  // namespace

bool prop_token_final(const EvalToken& tok) {
  return tok.flag.tag == FT::None && tok.dir == Direction::Down &&
         tok.pos == out_port(tok.origin_cell, 0) && tok.cstack.size() == 1 &&
         tok.cstack.back().is_value();
}

// ---------------------------------------------------------------------------
// The transition engine
// ---------------------------------------------------------------------------

StepResult dispatch(Graph& g, EvalToken& tok, Mode mode, PortRef& root,
                    const MachineOptions& opts, const std::set<NodeId>* observed,
                    std::function<void(NodeId, const StackElem&)> observe) {
  Rewirer rw{g, root};
  const bool flow = mode == Mode::Propagate;

  auto ret = [&](const char* id) {
    return StepResult{StepResult::Status::Advanced, id, {}};
  };

  try {
    if (normalize(g, tok, root) == Norm::Final)
      return {StepResult::Status::Final, "final", {}};
    if (flow && prop_token_final(tok)) return {StepResult::Status::Final, "final", {}};

    // ---- rewrite flags --------------------------------------------------
    switch (tok.flag.tag) {
      case FT::Bang: {
        // the flag resets; the boxed value is then examined across the edge
        auto p = g.peer(tok.pos);
        if (!p) stuck(g, tok, "bang flag on dangling port");
        if (g.kind(p->node).tag == Tag::Contraction)
          stuck(g, tok, "bang flag facing a contraction");
        tok.flag = RewriteFlag::none();
        return ret("rw.bang.reset");
      }

      case FT::Contract: {
        auto up = g.peer(tok.pos);
        if (!up) stuck(g, tok, "contraction below a dangling edge");
        NodeId c = tok.pos.node;
        Tag up_tag = g.kind(up->node).tag;

        if (flow) {
          // no copying during propagation; traverse and let the stack return
          tok.flag = RewriteFlag::none();
          return ret("rw.C.reset");
        }
        if (up_tag == Tag::Contraction && up->pol == Pol::In) {
          // fuse the two contractions, keeping the lower node
          NodeId upper = up->node;
          PortRef provider = [&] {
            auto pp = g.peer(out_port(upper, 0));
            if (!pp) stuck(g, tok, "upper contraction dangling");
            return *pp;
          }();
          g.disconnect(out_port(c, 0));
          std::uint16_t n = (std::uint16_t)in_arity(g.kind(upper));
          for (std::uint16_t i = 0; i < n; i++) {
            if (!g.connected(in_port(upper, i))) continue;
            PortRef user = g.disconnect(in_port(upper, i));
            PortRef slot = g.contraction_add_slot(c);
            g.connect(slot, user);
          }
          g.disconnect(out_port(upper, 0));
          g.remove_node(upper);
          g.connect(out_port(c, 0), provider);
          return ret("rw.Cc");
        }
        if (up_tag == Tag::Bang && up->pol == Pol::In && g.box_of_bang(up->node)) {
          BoxId box = *g.box_of_bang(up->node);
          if (tok.bstack.empty()) stuck(g, tok, "contraction with empty box stack");
          PortRef came = tok.bstack.back();
          if (came.node != c) stuck(g, tok, "box stack out of sync");
          std::uint16_t arity = (std::uint16_t)in_arity(g.kind(c));
          if (arity == 1) {
            // redundant unary contraction: remove it
            PortRef user = g.disconnect(in_port(c, 0));
            PortRef box_root = g.disconnect(out_port(c, 0));
            g.remove_node(c);
            g.connect(user, box_root);
            tok.bstack.pop_back();
            tok.pos = box_root;
            tok.dir = Direction::Up;
            tok.flag = RewriteFlag::none();
            return ret("rw.C.bang");
          }
          // copy the box just above: the demanding branch gets its own copy
          Graph::CopyResult cr = copy_box_sharing_doors(g, box);
          PortRef user = g.disconnect(came);
          g.contraction_remove_slot(c, came.index);
          g.connect(user, cr.root);
          tok.bstack.pop_back();
          tok.pos = cr.root;
          tok.dir = Direction::Up;
          tok.flag = RewriteFlag::none();
          return ret("rw.delta");
        }
        tok.flag = RewriteFlag::none();
        return ret("rw.C.reset");
      }

      case FT::App: {
        if (flow) stuck(g, tok, "application during propagation");
        NodeId app = tok.pos.node;
        if (g.kind(app).tag != Tag::App) stuck(g, tok, "@ flag away from an application");
        auto fn = g.peer(out_port(app, 0));
        if (!fn || g.kind(fn->node).tag != Tag::Bang || !g.box_of_bang(fn->node))
          stuck(g, tok, "application of a non-box");
        NodeId bang = fn->node;
        BoxId box = *g.box_of_bang(bang);
        auto lamp = g.peer(out_port(bang, 0));
        if (!lamp || g.kind(lamp->node).tag != Tag::Lam)
          stuck(g, tok, "application of a non-lambda box");
        NodeId lam = lamp->node;

        auto cons = rw.take_consumer(in_port(app, 0));
        PortRef arg = g.disconnect(out_port(app, 1));
        g.disconnect(out_port(app, 0));
        g.remove_node(app);

        std::vector<NodeId> doors = g.box(box).doors;
        for (NodeId q : doors) splice_door(g, q);
        g.disconnect(out_port(bang, 0));
        g.dissolve_box(box);
        for (NodeId q : doors) g.remove_node(q);
        g.remove_node(bang);

        PortRef new_pos{};
        auto body = g.peer(out_port(lam, 0));
        if (!body) stuck(g, tok, "lambda without a body edge");
        if (*body == in_port(lam, 0)) {
          // identity body: the argument is the result
          g.disconnect(out_port(lam, 0));
          rw.bridge(cons, arg);
          new_pos = arg;
        } else {
          PortRef body_root = g.disconnect(out_port(lam, 0));
          PortRef var_bundle = g.disconnect(in_port(lam, 0));
          rw.bridge(cons, body_root);
          g.connect(arg, var_bundle);
          new_pos = body_root;
        }
        g.remove_node(lam);

        tok.pos = new_pos;
        tok.dir = Direction::Up;
        tok.flag = RewriteFlag::none();
        return ret("rw.beta");
      }

      case FT::Mu: {
        if (flow) stuck(g, tok, "recursion during propagation");
        NodeId mu = tok.pos.node;
        if (g.kind(mu).tag != Tag::Rec) stuck(g, tok, "mu flag away from a rec node");
        auto bangp = g.peer(in_port(mu, 1));
        if (!bangp || g.kind(bangp->node).tag != Tag::Bang || !g.box_of_bang(bangp->node))
          stuck(g, tok, "rec node outside a box");
        NodeId bang = bangp->node;
        BoxId box = *g.box_of_bang(bang);

        // the unfolding: one fresh copy of the whole box is the recursive
        // reference; the original opens up
        Graph::CopyResult cr = copy_box_sharing_doors(g, box);

        auto cons = rw.take_consumer(in_port(bang, 0));
        g.disconnect(out_port(bang, 0));  // mu.i1 side

        std::vector<NodeId> doors = g.box(box).doors;
        for (NodeId q : doors) splice_door(g, q);

        PortRef new_pos{};
        auto body = g.peer(out_port(mu, 0));
        if (!body) stuck(g, tok, "rec without a body edge");
        if (*body == in_port(mu, 0)) {
          // body is the recursion variable itself
          g.disconnect(out_port(mu, 0));
          rw.bridge(cons, cr.root);
          new_pos = cr.root;
        } else {
          PortRef body_root = g.disconnect(out_port(mu, 0));
          PortRef var_bundle = g.disconnect(in_port(mu, 0));
          rw.bridge(cons, body_root);
          g.connect(var_bundle, cr.root);
          new_pos = body_root;
        }
        g.dissolve_box(box);
        for (NodeId q : doors) g.remove_node(q);
        g.remove_node(bang);
        g.remove_node(mu);

        tok.pos = new_pos;
        tok.dir = Direction::Up;
        tok.flag = RewriteFlag::none();
        return ret("rw.mu");
      }

      case FT::If: {
        if (flow) stuck(g, tok, "branch pruning during propagation");
        NodeId f = tok.pos.node;
        if (g.kind(f).tag != Tag::If || tok.pos.pol != Pol::Out)
          stuck(g, tok, "if flag away from a branch port");
        std::uint16_t taken = tok.pos.index;  // 1 or 2
        std::uint16_t untaken = taken == 1 ? 2 : 1;
        PortRef taken_root = g.disconnect(out_port(f, taken));
        detach_operand(g, out_port(f, untaken));
        detach_operand(g, out_port(f, 0));
        auto cons = rw.take_consumer(in_port(f, 0));
        g.remove_node(f);
        rw.bridge(cons, taken_root);
        tok.pos = taken_root;
        tok.dir = Direction::Up;
        tok.flag = RewriteFlag::none();
        return ret(taken == 1 ? "rw.if.prune0" : "rw.if.prune1");
      }

      case FT::Dollar: {
        StackElem& t = top(g, tok);
        if (t.tag == ST::IntFlow) {
          // the operator node stays in the dataflow graph
          tok.flag = RewriteFlag::none();
          return ret("flow.op.clear");
        }
        if (flow) stuck(g, tok, "operator over two constant operands during propagation");
        if (t.tag != ST::IntPlain) stuck(g, tok, "operator result of unexpected shape");
        NodeId d = tok.pos.node;
        detach_operand(g, out_port(d, 0));
        detach_operand(g, out_port(d, 1));
        auto cons = rw.take_consumer(in_port(d, 0));
        g.remove_node(d);
        PortRef box_root = value_box_int(g, t.n);
        rw.bridge(cons, box_root);
        tok.pos = box_root;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret("rw.op");
      }

      case FT::Peek: {
        if (flow) stuck(g, tok, "peek during propagation");
        StackElem& t = top(g, tok);
        if (t.tag != ST::IntPlain) stuck(g, tok, "peek of a non-integer");
        NodeId p = tok.pos.node;
        detach_operand(g, out_port(p, 0));
        auto cons = rw.take_consumer(in_port(p, 0));
        g.remove_node(p);
        PortRef box_root = value_box_int(g, t.n);
        rw.bridge(cons, box_root);
        tok.pos = box_root;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret("rw.peek");
      }

      case FT::StepDone: {
        if (flow) stuck(g, tok, "step rewrite during propagation");
        StackElem& t = top(g, tok);
        if (t.tag != ST::IntPlain) stuck(g, tok, "step count of unexpected shape");
        NodeId s = tok.pos.node;
        auto cons = rw.take_consumer(in_port(s, 0));
        g.remove_node(s);
        PortRef box_root = value_box_int(g, t.n);
        rw.bridge(cons, box_root);
        tok.pos = box_root;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret("rw.step");
      }

      case FT::MakeCell: {
        if (flow) stuck(g, tok, "cell creation during propagation");
        StackElem& t = top(g, tok);
        if (t.tag != ST::IntPlain) stuck(g, tok, "cell initializer of unexpected shape");
        NodeId m = tok.pos.node;
        if (g.kind(m).tag != Tag::MakeCellNode) stuck(g, tok, "m flag away from ref");
        g.kind_mut(m) = NodeKind::cell(t.n);
        g.note_cell(m);
        t = StackElem::cellv(t.n, in_port(m, 0));
        tok.flag = RewriteFlag::none();
        // direction stays down; the in-port edge leads back to the consumer
        return ret("rw.makecell");
      }

      case FT::Assign: {
        if (flow) stuck(g, tok, "assignment during propagation");
        NodeId cell = tok.flag.target.node;
        if (!g.alive(cell) || g.kind(cell).tag != Tag::Cell)
          stuck(g, tok, "assignment target is not a live cell");
        g.kind_mut(cell).value = tok.flag.value;
        NodeId a = tok.pos.node;
        detach_operand(g, out_port(a, 0));
        detach_operand(g, out_port(a, 1));
        auto cons = rw.take_consumer(in_port(a, 0));
        g.remove_node(a);
        PortRef box_root = value_box_unit(g);
        rw.bridge(cons, box_root);
        tok.pos = box_root;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret("rw.assign");
      }

      case FT::Link: {
        if (flow) stuck(g, tok, "linking during propagation");
        NodeId cell = tok.flag.target.node;
        if (!g.alive(cell) || g.kind(cell).tag != Tag::Cell)
          stuck(g, tok, "link target is not a live cell");
        NodeId l = tok.pos.node;
        PortRef arg_root = g.disconnect(out_port(l, 1));
        PortRef old_dep = g.disconnect(out_port(cell, 0));
        g.connect(out_port(cell, 0), arg_root);
        cap_orphan(g, old_dep);
        detach_operand(g, out_port(l, 0));
        auto cons = rw.take_consumer(in_port(l, 0));
        g.remove_node(l);
        PortRef box_root = value_box_unit(g);
        rw.bridge(cons, box_root);
        tok.pos = box_root;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret("rw.link");
      }

      case FT::Root: {
        if (flow) stuck(g, tok, "root during propagation");
        NodeId cell = tok.flag.target.node;
        if (!g.alive(cell) || g.kind(cell).tag != Tag::Cell)
          stuck(g, tok, "root target is not a live cell");
        NodeId r = tok.pos.node;
        detach_operand(g, out_port(r, 0));
        auto cons = rw.take_consumer(in_port(r, 0));
        g.remove_node(r);

        auto dep = g.peer(out_port(cell, 0));
        if (!dep) stuck(g, tok, "cell without a dependency edge");
        const char* rule;
        PortRef provider{};
        if (dep->pol == Pol::In && g.kind(dep->node).tag == Tag::Contraction) {
          // already shared: join the existing contraction
          provider = g.contraction_add_slot(dep->node);
          rule = "rw.root.contraction";
        } else if (is_constant_box_root(g, *dep)) {
          // constant dependency: a private copy keeps environments box-free
          BoxId b = *g.box_of_bang(dep->node);
          Graph::CopyResult cr = g.copy_box(b, g.box(b).parent);
          provider = cr.root;
          rule = "rw.root.const";
        } else {
          PortRef old = g.disconnect(out_port(cell, 0));
          NodeId share = g.add_node(NodeKind::contraction(2));
          g.connect(in_port(share, 0), out_port(cell, 0));
          g.connect(out_port(share, 0), old);
          provider = in_port(share, 1);
          rule = "rw.root.other";
        }
        rw.bridge(cons, provider);
        tok.pos = cons ? *cons : provider;
        tok.dir = Direction::Down;
        tok.flag = RewriteFlag::none();
        return ret(rule);
      }

      case FT::StepPropagate:
        stuck(g, tok, "sp flag outside the propagation driver");

      case FT::None:
        break;
    }

    // ---- pass rows -------------------------------------------------------
    NodeId n = tok.pos.node;
    const NodeKind& k = g.kind(n);
    const bool up = tok.dir == Direction::Up;
    const bool in = tok.pos.pol == Pol::In;
    const std::uint16_t ix = tok.pos.index;

    auto need_star = [&] {
      if (top(g, tok).tag != ST::Star) stuck(g, tok, "value demanded without a star");
    };
    auto goto_port = [&](PortRef p, Direction d) {
      tok.pos = p;
      tok.dir = d;
    };

    switch (k.tag) {
      case Tag::Lam: {
        if (flow) stuck(g, tok, "lambda reached during propagation");
        if (in && ix == 1 && up) {
          need_star();
          top(g, tok) = StackElem::lam();
          tok.dir = Direction::Down;
          return ret("pass.lam.i1.up");
        }
        stuck(g, tok, "no lambda rule applies");
      }

      case Tag::Rec: {
        if (flow) stuck(g, tok, "rec reached during propagation");
        if (in && ix == 1 && up) {
          tok.flag = RewriteFlag::simple(FT::Mu);
          return ret("pass.mu.i1.up");
        }
        stuck(g, tok, "no rec rule applies");
      }

      case Tag::App: {
        if (flow) stuck(g, tok, "application reached during propagation");
        if (in && up) {
          goto_port(out_port(n, 1), Direction::Up);
          return ret("pass.app.i0.up");
        }
        if (!in && ix == 1 && !up) {
          StackElem v = top(g, tok);
          if (!v.is_value()) stuck(g, tok, "argument returned a non-value");
          if (observed && observed->count(n) && observe) observe(n, v);
          top(g, tok) = StackElem::star();
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.app.o1.down");
        }
        if (!in && ix == 0 && !up) {
          if (top(g, tok).tag != ST::LamVal)
            stuck(g, tok, "function position returned a non-lambda");
          top(g, tok) = StackElem::star();
          goto_port(in_port(n, 0), Direction::Up);
          tok.flag = RewriteFlag::simple(FT::App);
          return ret("pass.app.o0.down");
        }
        stuck(g, tok, "no application rule applies");
      }

      case Tag::Const: {
        if (in && up) {
          need_star();
          top(g, tok) = StackElem::plain(k.value);
          tok.dir = Direction::Down;
          return ret("pass.const.i0.up");
        }
        stuck(g, tok, "no constant rule applies");
      }

      case Tag::UnitConst: {
        if (in && up) {
          need_star();
          top(g, tok) = StackElem::unit();
          tok.dir = Direction::Down;
          return ret("pass.unit.i0.up");
        }
        stuck(g, tok, "no unit rule applies");
      }

      case Tag::Cell: {
        if (in && up) {
          need_star();
          top(g, tok) = StackElem::cellv(k.value, in_port(n, 0));
          tok.dir = Direction::Down;
          return ret("pass.cell.i0.up");
        }
        stuck(g, tok, "no cell rule applies");
      }

      case Tag::DerefNode: {
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.deref.i0.up");
        }
        if (!in && !up) {
          StackElem& t = top(g, tok);
          if (t.tag != ST::IntCell) stuck(g, tok, "deref of a non-cell");
          t = StackElem::flow(t.n);
          goto_port(in_port(n, 0), Direction::Down);
          return ret("flow.d");
        }
        stuck(g, tok, "no deref rule applies");
      }

      case Tag::PeekNode: {
        if (flow) stuck(g, tok, "peek reached during propagation");
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.peek.i0.up");
        }
        if (!in && !up) {
          StackElem& t = top(g, tok);
          if (t.tag != ST::IntPlain && t.tag != ST::IntFlow)
            stuck(g, tok, "peek of a non-integer");
          t = StackElem::plain(t.n);
          goto_port(in_port(n, 0), Direction::Down);
          tok.flag = RewriteFlag::simple(FT::Peek);
          return ret("pass.peek.o0.down");
        }
        stuck(g, tok, "no peek rule applies");
      }

      case Tag::RootNode: {
        if (flow) stuck(g, tok, "root reached during propagation");
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.root.i0.up");
        }
        if (!in && !up) {
          StackElem& t = top(g, tok);
          if (t.tag != ST::IntCell) stuck(g, tok, "root of a non-cell");
          PortRef i = t.cell;
          t = StackElem::plain(t.n);
          goto_port(in_port(n, 0), Direction::Down);
          tok.flag = RewriteFlag::root(i);
          return ret("pass.root.o0.down");
        }
        stuck(g, tok, "no root rule applies");
      }

      case Tag::MakeCellNode: {
        if (flow) stuck(g, tok, "ref reached during propagation");
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.makecell.i0.up");
        }
        if (!in && !up) {
          StackElem& t = top(g, tok);
          if (t.tag != ST::IntPlain && t.tag != ST::IntFlow)
            stuck(g, tok, "cell initializer is not an integer");
          t = StackElem::plain(t.n);
          goto_port(in_port(n, 0), Direction::Down);
          tok.flag = RewriteFlag::simple(FT::MakeCell);
          return ret("pass.makecell.o0.down");
        }
        stuck(g, tok, "no ref rule applies");
      }

      case Tag::BinOp: {
        if (in && up) {
          goto_port(out_port(n, 1), Direction::Up);
          return ret("pass.binop.i0.up");
        }
        if (!in && ix == 1 && !up) {
          if (!top(g, tok).is_int()) stuck(g, tok, "operator operand is not an integer");
          tok.cstack.push_back(StackElem::star());
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.binop.o1.down");
        }
        if (!in && ix == 0 && !up) {
          if (tok.cstack.size() < 2) stuck(g, tok, "operator with too few operands");
          StackElem l = tok.cstack.back();
          StackElem r = tok.cstack[tok.cstack.size() - 2];
          bool lp = l.tag == ST::IntPlain, rp = r.tag == ST::IntPlain;
          bool lf = l.tag == ST::IntFlow, rf = r.tag == ST::IntFlow;
          if (!(lp || lf) || !(rp || rf))
            stuck(g, tok, "operator operand of unexpected shape");
          std::int64_t v = apply_binop(k.op, l.n, r.n);
          tok.cstack.pop_back();
          tok.cstack.pop_back();
          if (lp && rp) {
            if (flow)
              stuck(g, tok, "operator over two constant operands during propagation");
            tok.cstack.push_back(StackElem::plain(v));
            goto_port(in_port(n, 0), Direction::Down);
            tok.flag = RewriteFlag::simple(FT::Dollar);
            return ret("pass.binop.o0.down");
          }
          tok.cstack.push_back(StackElem::flow(v));
          goto_port(in_port(n, 0), Direction::Down);
          tok.flag = RewriteFlag::simple(FT::Dollar);
          return ret("flow.op");
        }
        stuck(g, tok, "no operator rule applies");
      }

      case Tag::AssignNode:
      case Tag::LinkNode: {
        if (flow) stuck(g, tok, "imperative operation during propagation");
        if (in && up) {
          goto_port(out_port(n, 1), Direction::Up);
          return ret(k.tag == Tag::AssignNode ? "pass.assign.i0.up" : "pass.link.i0.up");
        }
        if (!in && ix == 1 && !up) {
          if (!top(g, tok).is_int()) stuck(g, tok, "second operand is not an integer");
          tok.cstack.push_back(StackElem::star());
          goto_port(out_port(n, 0), Direction::Up);
          return ret(k.tag == Tag::AssignNode ? "pass.assign.o1.down" : "pass.link.o1.down");
        }
        if (!in && ix == 0 && !up) {
          if (tok.cstack.size() < 2) stuck(g, tok, "too few operands");
          StackElem cellv = tok.cstack.back();
          StackElem val = tok.cstack[tok.cstack.size() - 2];
          if (cellv.tag != ST::IntCell) stuck(g, tok, "first operand is not a cell");
          if (!val.is_int()) stuck(g, tok, "second operand is not an integer");
          tok.cstack.pop_back();
          tok.cstack.pop_back();
          tok.cstack.push_back(StackElem::unit());
          goto_port(in_port(n, 0), Direction::Down);
          tok.flag = k.tag == Tag::AssignNode
                         ? RewriteFlag::assign(val.n, cellv.cell)
                         : RewriteFlag::link(cellv.cell);
          return ret(k.tag == Tag::AssignNode ? "pass.assign.o0.down" : "pass.link.o0.down");
        }
        stuck(g, tok, "no rule applies");
      }

      case Tag::If: {
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          return ret("pass.if.i0.up");
        }
        if (!in && ix == 0 && !up) {
          StackElem c = top(g, tok);
          if (c.tag == ST::IntPlain) {
            if (flow) stuck(g, tok, "constant branch condition during propagation");
            top(g, tok) = StackElem::star();
            bool zero = c.n == 0;
            goto_port(out_port(n, zero ? 1 : 2), Direction::Up);
            tok.flag = RewriteFlag::simple(FT::If);
            return ret(zero ? "pass.if.o0.down.false" : "pass.if.o0.down.true");
          }
          if (c.tag == ST::IntFlow) {
            bool zero = c.n == 0;
            top(g, tok) = zero ? StackElem::if0() : StackElem::if1();
            tok.cstack.push_back(StackElem::star());
            goto_port(out_port(n, 1), Direction::Up);
            return ret(zero ? "flow.if.branch0" : "flow.if.branch1");
          }
          stuck(g, tok, "branch condition of unexpected shape");
        }
        if (!in && ix == 1 && !up && tok.flag.tag == FT::None) {
          if (!top(g, tok).is_value()) stuck(g, tok, "branch returned a non-value");
          tok.cstack.push_back(StackElem::star());
          goto_port(out_port(n, 2), Direction::Up);
          return ret("pass.if.o1.down");
        }
        if (!in && ix == 2 && !up) {
          if (tok.cstack.size() < 3) stuck(g, tok, "branch selection with a short stack");
          StackElem x = tok.cstack.back();                       // o2's value (then)
          StackElem y = tok.cstack[tok.cstack.size() - 2];       // o1's value (else)
          StackElem marker = tok.cstack[tok.cstack.size() - 3];
          if (marker.tag != ST::If0 && marker.tag != ST::If1)
            stuck(g, tok, "missing branch marker");
          tok.cstack.pop_back();
          tok.cstack.pop_back();
          tok.cstack.pop_back();
          bool pick_then = marker.tag == ST::If1;
          if (opts.debug_swap_if_branches) pick_then = !pick_then;
          tok.cstack.push_back(pick_then ? x : y);
          goto_port(in_port(n, 0), Direction::Down);
          return ret(marker.tag == ST::If0 ? "flow.if.sel0" : "flow.if.sel1");
        }
        stuck(g, tok, "no branch rule applies");
      }

      case Tag::Contraction: {
        if (in && up) {
          tok.bstack.push_back(tok.pos);
          goto_port(out_port(n, 0), Direction::Up);
          tok.flag = RewriteFlag::simple(FT::Contract);
          return ret("pass.contraction.ik.up");
        }
        if (!in && !up) {
          if (tok.bstack.empty()) stuck(g, tok, "contraction return with empty box stack");
          PortRef back = tok.bstack.back();
          if (back.node != n) stuck(g, tok, "box stack does not match this contraction");
          tok.bstack.pop_back();
          goto_port(back, Direction::Down);
          return ret("pass.contraction.o0.down");
        }
        stuck(g, tok, "no contraction rule applies");
      }

      case Tag::Bang: {
        if (in && up) {
          goto_port(out_port(n, 0), Direction::Up);
          tok.flag = RewriteFlag::simple(FT::Bang);
          return ret("pass.bang.i0.up");
        }
        if (!in && !up) {
          goto_port(in_port(n, 0), Direction::Down);
          return ret("pass.bang.o0.down");
        }
        stuck(g, tok, "no box rule applies");
      }

      case Tag::StepNode: {
        if (flow) stuck(g, tok, "step reached during propagation");
        if (in && up) {
          need_star();
          return {StepResult::Status::Advanced, "switch.sp", {}};  // driver switches
        }
        stuck(g, tok, "no step rule applies");
      }

      case Tag::Query:
        stuck(g, tok, "token reached a box door");
    }
    stuck(g, tok, "no rule applies");
  } catch (const StuckError& e) {
    return {StepResult::Status::Stuck, "stuck", e.why};
  }
}

// ---------------------------------------------------------------------------
// Machine driver
// ---------------------------------------------------------------------------

MachineState Machine::init_state(const TranslationResult& tr) {
  if (!tr.free_var_ports.empty())
    throw std::invalid_argument("init_state: open term (free variables remain)");
  MachineState st;
  st.graph = tr.graph;
  st.root = tr.root;
  st.main.pos = tr.root;
  st.main.dir = Direction::Up;
  st.main.flag = RewriteFlag::none();
  st.main.cstack = {StackElem::star()};
  st.main.bstack = {};
  st.mode = Mode::Construct;
  return st;
}

Machine::Machine(TranslationResult tr, MachineOptions opts)
    : st_(init_state(tr)), opts_(opts), observed_(tr.observed_apps) {}

void Machine::emit_event(const StepResult& r, const EvalToken& before) {
  if (!opts_.sink) return;
  TraceEvent ev;
  ev.seq = seq_;
  ev.mode = st_.mode;
  ev.rule_id = r.rule_id;
  ev.node_kind = st_.graph.alive(before.pos.node)
                     ? kind_label(st_.graph.kind(before.pos.node))
                     : "?";
  ev.port = to_string(before.pos);
  ev.dir = before.dir;
  ev.flag = to_string(before.flag);
  ev.cstack_depth = before.cstack.size();
  ev.bstack_depth = before.bstack.size();
  ev.graph_nodes = st_.graph.node_count();
  opts_.sink->on_event(ev);
}

Outcome Machine::make_stuck(std::string why) {
  Outcome o;
  o.kind = Outcome::Kind::Stuck;
  o.diagnosis = std::move(why);
  o.steps = seq_;
  o.snapshot = std::make_shared<MachineState>(st_);
  return o;
}

std::vector<std::int64_t> Machine::cell_values() const {
  std::vector<std::int64_t> out;
  for (NodeId c : st_.graph.cells())
    if (st_.graph.alive(c)) out.push_back(st_.graph.kind(c).value);
  return out;
}

std::optional<Outcome> Machine::step_once() {
  if (fuel_used_ >= opts_.fuel) {
    Outcome o;
    o.kind = Outcome::Kind::FuelExhausted;
    o.steps = seq_;
    o.snapshot = std::make_shared<MachineState>(st_);
    return o;
  }

  if (st_.mode == Mode::Propagate) {
    auto out = advance_propagation();
    if (out) return out;
    return std::nullopt;
  }

  EvalToken before = st_.main;
  StepResult r = dispatch(
      st_.graph, st_.main, Mode::Construct, st_.root, opts_, &observed_,
      [&](NodeId node, const StackElem& v) {
        observations_.push_back({seq_, node, v});
        if (opts_.sink) opts_.sink->on_observe(seq_, node, v);
      });

  if (r.status == StepResult::Status::Stuck) return make_stuck(r.diagnosis);

  if (r.status == StepResult::Status::Final) {
    if (st_.main.cstack.size() != 1 || !st_.main.cstack.back().is_value())
      return make_stuck("final position with a malformed stack");
    Outcome o;
    o.kind = Outcome::Kind::Final;
    o.value = st_.main.cstack.back();
    o.steps = seq_;
    return o;
  }

  seq_++;
  fuel_used_++;

  if (std::string(r.rule_id) == "switch.sp") {
    // mode switch: spawn one prop token per cell
    st_.main.flag = RewriteFlag::simple(FT::StepPropagate);
    st_.mode = Mode::Propagate;
    st_.props.clear();
    for (NodeId c : st_.graph.cells()) {
      if (!st_.graph.alive(c)) continue;
      EvalToken t;
      t.pos = out_port(c, 0);
      t.dir = Direction::Up;
      t.flag = RewriteFlag::none();
      t.cstack = {StackElem::star()};
      t.origin_cell = c;
      st_.props.push_back(t);
    }
    rr_next_ = 0;
  }

  emit_event(r, before);

  if (opts_.debug_checks) {
    auto bad = st_.graph.well_formed();
    if (!bad.empty()) return make_stuck("well-formedness violated: " + bad.front());
  }
  if (opts_.validate == ValidateLevel::EveryStep) {
    auto rep = check_valid_state(st_);
    if (!rep.pass) return make_stuck("validity: " + rep.violations.front().description);
  }
  if (snapshot_hook_ && st_.mode == Mode::Construct) snapshot_hook_(seq_, st_);
  return std::nullopt;
}

std::optional<Outcome> Machine::advance_propagation() {
  // all tokens final -> commit
  bool all_final = true;
  for (auto& t : st_.props)
    if (!prop_token_final(t)) { all_final = false; break; }

  if (all_final) {
    commit_propagation();
    return std::nullopt;
  }

  std::uint64_t per_token_fuel = 10 * (std::uint64_t)st_.graph.node_count() + 64;

  auto advance_one = [&](EvalToken& t) -> std::optional<Outcome> {
    EvalToken before = t;
    StepResult r = dispatch(st_.graph, t, Mode::Propagate, st_.root, opts_);
    if (r.status == StepResult::Status::Stuck) return make_stuck(r.diagnosis);
    if (r.status == StepResult::Status::Final) return std::nullopt;
    t.transitions++;
    seq_++;
    fuel_used_++;
    prop_transitions_++;
    emit_event(r, before);
    if (t.transitions > per_token_fuel)
      return make_stuck("propagation token exceeded its work bound (cycle without a cell?)");
    return std::nullopt;
  };

  switch (opts_.schedule.kind) {
    case Schedule::Kind::RoundRobin: {
      for (size_t scan = 0; scan < st_.props.size(); scan++) {
        size_t i = (rr_next_ + scan) % st_.props.size();
        if (!prop_token_final(st_.props[i])) {
          rr_next_ = (i + 1) % st_.props.size();
          return advance_one(st_.props[i]);
        }
      }
      return std::nullopt;
    }
    case Schedule::Kind::RandomSeeded: {
      std::vector<size_t> live;
      for (size_t i = 0; i < st_.props.size(); i++)
        if (!prop_token_final(st_.props[i])) live.push_back(i);
      // derive the pick from the seed and progress so replays are stable
      std::mt19937_64 rng(opts_.schedule.seed ^ (seq_ * 0x9e3779b97f4a7c15ull));
      size_t pick = live[rng() % live.size()];
      return advance_one(st_.props[pick]);
    }
    case Schedule::Kind::Concurrent: {
      // independent tokens over a read-only graph; commit happens after join
      int workers = std::max(1, opts_.schedule.workers);
      std::vector<std::thread> threads;
      std::vector<std::optional<Outcome>> fails((size_t)workers);
      for (int w = 0; w < workers; w++) {
        threads.emplace_back([&, w] {
          for (size_t i = w; i < st_.props.size(); i += workers) {
            EvalToken& t = st_.props[i];
            while (!prop_token_final(t)) {
              StepResult r = dispatch(st_.graph, t, Mode::Propagate, st_.root, opts_);
              if (r.status == StepResult::Status::Stuck) {
                fails[w] = Outcome{};
                fails[w]->kind = Outcome::Kind::Stuck;
                fails[w]->diagnosis = r.diagnosis;
                return;
              }
              if (r.status == StepResult::Status::Final) break;
              t.transitions++;
              if (t.transitions > per_token_fuel) {
                fails[w] = Outcome{};
                fails[w]->kind = Outcome::Kind::Stuck;
                fails[w]->diagnosis = "propagation token exceeded its work bound";
                return;
              }
            }
          }
        });
      }
      for (auto& th : threads) th.join();
      for (auto& f : fails)
        if (f) { f->snapshot = std::make_shared<MachineState>(st_); f->steps = seq_; return f; }
      std::uint64_t total = 0;
      for (auto& t : st_.props) total += t.transitions;
      seq_ += total;
      fuel_used_ += total;
      prop_transitions_ += total;
      return std::nullopt;
    }
  }
  return std::nullopt;
}

void Machine::commit_propagation() {
  StepCommit commit;
  for (auto& t : st_.props) {
    NodeId c = t.origin_cell;
    const StackElem& v = t.cstack.back();
    std::int64_t returned = v.is_int() ? v.n : 0;
    std::int64_t old = st_.graph.kind(c).value;
    if (old != returned) {
      st_.graph.kind_mut(c).value = returned;
      commit.updated++;
      commit.changes.emplace_back(c, old, returned);
    }
  }
  for (NodeId c : st_.graph.cells())
    if (st_.graph.alive(c)) commit.post_values.push_back(st_.graph.kind(c).value);
  commits_.push_back(commit);

  st_.props.clear();
  st_.mode = Mode::Construct;

  // Def 3.5(2): the star is consumed; the count (or a boolean) returns
  std::int64_t b = opts_.step_returns_bool ? (commit.updated > 0 ? 1 : 0) : commit.updated;
  if (st_.main.cstack.empty() || st_.main.cstack.back().tag != ST::Star) {
    st_.main.flag = RewriteFlag::none();  // force a stuck diagnosis next step
    return;
  }
  st_.main.cstack.back() = StackElem::plain(b);
  st_.main.dir = Direction::Down;
  st_.main.flag = RewriteFlag::simple(FT::StepDone);
  seq_++;
  fuel_used_++;

  if (opts_.sink) {
    opts_.sink->on_commit(seq_, commit.changes);
    TraceEvent ev;
    ev.seq = seq_;
    ev.mode = Mode::Propagate;
    ev.rule_id = "switch.commit";
    ev.node_kind = "step";
    ev.port = to_string(st_.main.pos);
    ev.dir = st_.main.dir;
    ev.flag = to_string(st_.main.flag);
    ev.cstack_depth = st_.main.cstack.size();
    ev.bstack_depth = st_.main.bstack.size();
    ev.graph_nodes = st_.graph.node_count();
    opts_.sink->on_event(ev);
  }
}

Outcome Machine::run() {
  while (true) {
    auto out = step_once();
    if (out) return *out;
  }
}

RunSummary run_term(const TermPtr& term, MachineOptions opts) {
  TranslationResult tr = translate(term);
  Machine m(std::move(tr), opts);
  RunSummary rs;
  rs.outcome = m.run();
  rs.commits = m.commits();
  rs.observations = m.observations();
  rs.final_cells = m.cell_values();
  for (NodeId c : m.state().graph.cells())
    if (m.state().graph.alive(c)) rs.cell_ids.push_back(c);
  return rs;
}

RunSummary run_program(const std::string& source, MachineOptions opts) {
  TermPtr term = parse(source);
  infer_type(term);
  return run_term(term, opts);
}

}  // namespace tsd
