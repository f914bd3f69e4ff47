#include "tsd/translate.hpp"

#include <stdexcept>

namespace tsd {

namespace {

// Rewrites the term so every primitive occurs fully applied, eta-expanding
// stray partial applications (e.g. a bare `link s` becomes λa. link s a).
TermPtr saturate(const TermPtr& t, int& fresh) {
  if (auto pa = as_full_prim_app(t)) {
    TermPtr cur = mk_op(pa->op);
    for (auto& a : pa->args) cur = mk_app(cur, saturate(a, fresh));
    return cur;
  }
  return std::visit(
      [&](auto&& n) -> TermPtr {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, TOp>) {
          int k = op_arity(n.op);
          if (k == 0) return t;
          std::vector<std::string> names;
          for (int i = 0; i < k; i++)
            names.push_back("$eta" + std::to_string(fresh++));
          TermPtr body = mk_op(n.op);
          for (auto& nm : names) body = mk_app(body, mk_var(nm));
          for (auto it = names.rbegin(); it != names.rend(); ++it)
            body = mk_lam(*it, body);
          return body;
        } else if constexpr (std::is_same_v<T, TApp>) {
          // partial prim app head: rebuild the spine, saturating the head
          return mk_app(saturate(n.fn, fresh), saturate(n.arg, fresh));
        } else if constexpr (std::is_same_v<T, TLam>) {
          return mk_lam(n.name, saturate(n.body, fresh), n.ann);
        } else if constexpr (std::is_same_v<T, TRec>) {
          return mk_rec(n.name, saturate(n.body, fresh), n.ann);
        } else if constexpr (std::is_same_v<T, TIf>) {
          return mk_if(saturate(n.cond, fresh), saturate(n.then_branch, fresh),
                       saturate(n.else_branch, fresh));
        } else {
          return t;
        }
      },
      t->node);
}

class Translator {
 public:
  Translator(Graph& g, const std::set<const Term*>& spine,
             std::set<NodeId>& observed)
      : g_(g), spine_(spine), observed_(observed) {}

  using Uses = std::map<std::string, std::vector<PortRef>>;

  // Builds the graph for `t`. If `consumer` is set, wires the subterm's root
  // to it and returns nothing of interest; otherwise returns the root in-port.
  PortRef build_root(const TermPtr& t, Uses& uses) {
    if (std::holds_alternative<TVar>(t->node)) {
      // a bare variable has no node of its own; anchor it with a wire
      NodeId c = g_.add_node(NodeKind::contraction(1), box_);
      uses[std::get<TVar>(t->node).name].push_back(out_port(c, 0));
      return in_port(c, 0);
    }
    return *emit(t, std::nullopt, uses);
  }

  void build_into(const TermPtr& t, PortRef consumer, Uses& uses) {
    if (auto* v = std::get_if<TVar>(&t->node)) {
      uses[v->name].push_back(consumer);
      return;
    }
    emit(t, consumer, uses);
  }

  // Joins use ports into `service` (an in-port providing the shared value):
  // none -> weakening, one -> direct edge, many -> contraction.
  void bundle(const std::vector<PortRef>& ports, PortRef service) {
    if (ports.empty()) {
      NodeId w = g_.add_node(NodeKind::contraction(0), box_);
      g_.connect(out_port(w, 0), service);
      return;
    }
    if (ports.size() == 1) {
      g_.connect(ports[0], service);
      return;
    }
    NodeId c = g_.add_node(NodeKind::contraction((std::uint16_t)ports.size()), box_);
    for (std::uint16_t i = 0; i < ports.size(); i++)
      g_.connect(ports[i], in_port(c, i));
    g_.connect(out_port(c, 0), service);
  }

  // Exposes the remaining uses as dangling interface ports (one per name).
  std::map<std::string, PortRef> expose_free(const Uses& uses,
                                             const std::vector<std::string>& names) {
    std::map<std::string, PortRef> out;
    for (auto& name : names) {
      auto it = uses.find(name);
      std::vector<PortRef> ports = it == uses.end() ? std::vector<PortRef>{} : it->second;
      PortRef iface;
      if (ports.size() == 1) {
        iface = ports[0];
      } else {
        NodeId c = g_.add_node(NodeKind::contraction((std::uint16_t)ports.size()), box_);
        for (std::uint16_t i = 0; i < ports.size(); i++)
          g_.connect(ports[i], in_port(c, i));
        iface = out_port(c, 0);
      }
      g_.register_interface(iface);
      out[name] = iface;
    }
    return out;
  }

 private:
  std::optional<PortRef> emit(const TermPtr& t, std::optional<PortRef> consumer,
                              Uses& uses) {
    PortRef root = emit_node(t, uses);
    if (consumer) {
      g_.connect(*consumer, root);
      return std::nullopt;
    }
    return root;
  }

  // Creates the top node for a non-variable term and returns its principal
  // in-port, recursing into operands.
  PortRef emit_node(const TermPtr& t, Uses& uses) {
    if (auto pa = as_full_prim_app(t)) return emit_prim(*pa, uses);
    return std::visit(
        [&](auto&& n) -> PortRef {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, TInt>) {
            return value_box(NodeKind::constant(n.value));
          } else if constexpr (std::is_same_v<T, TUnit>) {
            return value_box(NodeKind::unit());
          } else if constexpr (std::is_same_v<T, TLam>) {
            return binder_box(NodeKind::lam(), n.name, n.body, uses);
          } else if constexpr (std::is_same_v<T, TRec>) {
            return binder_box(NodeKind::rec(), n.name, n.body, uses);
          } else if constexpr (std::is_same_v<T, TApp>) {
            NodeId a = g_.add_node(NodeKind::app(), box_);
            if (spine_.count(t.get())) observed_.insert(a);
            build_into(n.arg, out_port(a, 1), uses);
            build_into(n.fn, out_port(a, 0), uses);
            return in_port(a, 0);
          } else if constexpr (std::is_same_v<T, TIf>) {
            NodeId f = g_.add_node(NodeKind::ifnode(), box_);
            build_into(n.cond, out_port(f, 0), uses);
            build_into(n.else_branch, out_port(f, 1), uses);
            build_into(n.then_branch, out_port(f, 2), uses);
            return in_port(f, 0);
          } else if constexpr (std::is_same_v<T, TOp>) {
            if (n.op == Op::Step) {
              NodeId s = g_.add_node(NodeKind::step(), box_);
              return in_port(s, 0);
            }
            throw std::logic_error("unsaturated primitive reached translation");
          } else {
            throw std::logic_error("variable reached emit_node");
          }
        },
        t->node);
  }

  PortRef emit_prim(const PrimApp& pa, Uses& uses) {
    NodeKind kind;
    switch (pa.op) {
      case Op::Ref: kind = NodeKind::makecell(); break;
      case Op::Deref: kind = NodeKind::deref(); break;
      case Op::Root: kind = NodeKind::root(); break;
      case Op::Peek: kind = NodeKind::peek(); break;
      case Op::Link: kind = NodeKind::link(); break;
      case Op::Assign: kind = NodeKind::assign(); break;
      case Op::Step: {
        NodeId s = g_.add_node(NodeKind::step(), box_);
        return in_port(s, 0);
      }
      default: kind = NodeKind::binop(pa.op); break;
    }
    NodeId n = g_.add_node(kind, box_);
    if (pa.args.size() == 2) {
      build_into(pa.args[1], out_port(n, 1), uses);  // right operand
      build_into(pa.args[0], out_port(n, 0), uses);  // left operand
    } else {
      build_into(pa.args[0], out_port(n, 0), uses);
    }
    return in_port(n, 0);
  }

  // A constant wrapped in its own box.
  PortRef value_box(const NodeKind& k) {
    NodeId bang = g_.add_node(NodeKind::bang(), kNoBox);
    BoxId b = g_.add_box(bang, box_);
    g_.set_box(bang, b);
    NodeId v = g_.add_node(k, b);
    g_.connect(out_port(bang, 0), in_port(v, 0));
    return in_port(bang, 0);
  }

  // λ / rec box: binder node + body inside one box; bound-variable uses join
  // at the binder's variable service port; other captured names get doors.
  PortRef binder_box(const NodeKind& k, const std::string& name,
                     const TermPtr& body, Uses& outer) {
    NodeId bang = g_.add_node(NodeKind::bang(), kNoBox);
    BoxId b = g_.add_box(bang, box_);
    g_.set_box(bang, b);
    NodeId binder = g_.add_node(k, b);
    g_.connect(out_port(bang, 0), in_port(binder, 1));

    BoxId saved = box_;
    box_ = b;
    Uses inner;
    build_into(body, out_port(binder, 0), inner);

    auto bound = inner.find(name);
    std::vector<PortRef> bound_ports =
        bound == inner.end() ? std::vector<PortRef>{} : bound->second;
    if (bound != inner.end()) inner.erase(bound);
    bundle(bound_ports, in_port(binder, 0));

    for (auto& [var, ports] : inner) {
      NodeId q = g_.add_node(NodeKind::query(), b);
      g_.add_door(b, q);
      bundle(ports, in_port(q, 0));
      outer[var].push_back(out_port(q, 0));
    }
    box_ = saved;
    return in_port(bang, 0);
  }

  Graph& g_;
  BoxId box_ = kNoBox;
  const std::set<const Term*>& spine_;
  std::set<NodeId>& observed_;
};

}  // namespace

TranslationResult translate(const TermPtr& term, const TypeEnv& env) {
  TranslationResult res;
  int fresh = 0;
  TermPtr t = saturate(term, fresh);

  std::set<const Term*> spine_set;
  for (const Term* s : statement_spine(t)) spine_set.insert(s);

  Translator tr(res.graph, spine_set, res.observed_apps);
  Translator::Uses uses;
  res.root = tr.build_root(t, uses);
  res.graph.register_interface(res.root);

  // bundle free variables into interface ports, one per name in the env
  std::vector<std::string> names = env.names();
  for (auto& [name, ports] : uses) {
    bool in_env = false;
    for (auto& n : names) in_env |= (n == name);
    if (!in_env)
      throw std::logic_error("translate: unbound variable '" + name + "'");
  }
  res.free_var_ports = tr.expose_free(uses, names);
  return res;
}

TranslationResult translate_program(const std::string& source) {
  TermPtr term = parse(source);
  infer_type(term);
  return translate(term);
}

}  // namespace tsd
