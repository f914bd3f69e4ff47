#include "tsd/graph.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace tsd {

int in_arity(const NodeKind& k) {
  using T = NodeKind::Tag;
  switch (k.tag) {
    case T::Lam: case T::Rec: return 2;
    case T::Contraction: return k.fan_in;
    default: return 1;
  }
}

int out_arity(const NodeKind& k) {
  using T = NodeKind::Tag;
  switch (k.tag) {
    case T::Lam: case T::Rec: return 1;
    case T::App: case T::BinOp: case T::AssignNode: case T::LinkNode: return 2;
    case T::If: return 3;
    case T::Const: case T::UnitConst: case T::StepNode: return 0;
    case T::Contraction: case T::Bang: case T::Query: case T::Cell:
    case T::PeekNode: case T::MakeCellNode: case T::RootNode: case T::DerefNode:
      return 1;
  }
  return 0;
}

std::string kind_label(const NodeKind& k) {
  using T = NodeKind::Tag;
  switch (k.tag) {
    case T::Lam: return "lam";
    case T::App: return "app";
    case T::Const: return "const:" + std::to_string(k.value);
    case T::UnitConst: return "unit";
    case T::BinOp: return std::string("op:") + op_name(k.op);
    case T::If: return "if";
    case T::Rec: return "rec";
    case T::Bang: return "bang";
    case T::Query: return "query";
    case T::Contraction: return "contraction:" + std::to_string(k.fan_in);
    case T::Cell: return "cell:" + std::to_string(k.value);
    case T::StepNode: return "step";
    case T::PeekNode: return "peek";
    case T::MakeCellNode: return "ref";
    case T::RootNode: return "root";
    case T::DerefNode: return "deref";
    case T::AssignNode: return "assign";
    case T::LinkNode: return "link";
  }
  return "?";
}

std::string to_string(const PortRef& p) {
  std::ostringstream os;
  os << "n" << p.node << (p.pol == Pol::In ? ".i" : ".o") << p.index;
  return os.str();
}

Graph::Node& Graph::node(NodeId n) {
  if (n == 0 || n >= nodes_.size() || !nodes_[n].alive)
    throw std::logic_error("dead or unknown node " + std::to_string(n));
  return nodes_[n];
}

const Graph::Node& Graph::node(NodeId n) const {
  if (n == 0 || n >= nodes_.size() || !nodes_[n].alive)
    throw std::logic_error("dead or unknown node " + std::to_string(n));
  return nodes_[n];
}

std::optional<PortRef>& Graph::slot(PortRef p) {
  Node& nd = node(p.node);
  auto& v = p.pol == Pol::In ? nd.ins : nd.outs;
  if (p.index >= v.size()) throw std::logic_error("port out of range: " + to_string(p));
  return v[p.index];
}

const std::optional<PortRef>& Graph::slot(PortRef p) const {
  const Node& nd = node(p.node);
  auto& v = p.pol == Pol::In ? nd.ins : nd.outs;
  if (p.index >= v.size()) throw std::logic_error("port out of range: " + to_string(p));
  return v[p.index];
}

NodeId Graph::add_node(const NodeKind& kind, BoxId box) {
  if (nodes_.empty()) nodes_.emplace_back();  // reserve id 0
  NodeId id = (NodeId)nodes_.size();
  Node nd;
  nd.kind = kind;
  nd.box = box;
  nd.ins.resize(in_arity(kind));
  nd.outs.resize(out_arity(kind));
  nd.alive = true;
  nodes_.push_back(std::move(nd));
  live_nodes_++;
  return id;
}

void Graph::remove_node(NodeId n) {
  Node& nd = node(n);
  for (auto& s : nd.ins)
    if (s) throw std::logic_error("remove_node: in-port still connected");
  for (auto& s : nd.outs)
    if (s) throw std::logic_error("remove_node: out-port still connected");
  nd.alive = false;  // tombstone; ids are never reused
  live_nodes_--;
}

bool Graph::alive(NodeId n) const {
  return n != 0 && n < nodes_.size() && nodes_[n].alive;
}

const NodeKind& Graph::kind(NodeId n) const { return node(n).kind; }
NodeKind& Graph::kind_mut(NodeId n) { return node(n).kind; }
BoxId Graph::box_of(NodeId n) const { return node(n).box; }
void Graph::set_box(NodeId n, BoxId b) { node(n).box = b; }

void Graph::connect(PortRef a, PortRef b) {
  auto& sa = slot(a);
  auto& sb = slot(b);
  if (sa) throw std::logic_error("port already connected: " + to_string(a));
  if (sb) throw std::logic_error("port already connected: " + to_string(b));
  sa = b;
  sb = a;
}

PortRef Graph::disconnect(PortRef a) {
  auto& sa = slot(a);
  if (!sa) throw std::logic_error("port not connected: " + to_string(a));
  PortRef b = *sa;
  sa.reset();
  slot(b).reset();
  return b;
}

std::optional<PortRef> Graph::peer(PortRef p) const { return slot(p); }

PortRef Graph::contraction_add_slot(NodeId c) {
  Node& nd = node(c);
  if (nd.kind.tag != NodeKind::Tag::Contraction)
    throw std::logic_error("not a contraction");
  nd.ins.emplace_back();
  nd.kind.fan_in++;
  return in_port(c, (std::uint16_t)(nd.ins.size() - 1));
}

void Graph::contraction_remove_slot(NodeId c, std::uint16_t index) {
  Node& nd = node(c);
  if (nd.kind.tag != NodeKind::Tag::Contraction)
    throw std::logic_error("not a contraction");
  if (index >= nd.ins.size()) throw std::logic_error("slot out of range");
  if (nd.ins[index]) throw std::logic_error("slot still connected");
  nd.ins.erase(nd.ins.begin() + index);
  nd.kind.fan_in--;
  // re-point peers of the shifted slots
  for (std::uint16_t i = index; i < nd.ins.size(); i++) {
    if (nd.ins[i]) slot(*nd.ins[i]) = in_port(c, i);
  }
}

BoxId Graph::add_box(NodeId bang, BoxId parent) {
  if (boxes_.empty()) boxes_.emplace_back();  // reserve id 0
  BoxId id = (BoxId)boxes_.size();
  boxes_.push_back(Box{bang, {}, parent});
  return id;
}

void Graph::add_door(BoxId b, NodeId query) {
  if (!box_alive(b)) throw std::logic_error("dead box");
  boxes_[b]->doors.push_back(query);
}

const Box& Graph::box(BoxId b) const {
  if (!box_alive(b)) throw std::logic_error("dead or unknown box");
  return *boxes_[b];
}

bool Graph::box_alive(BoxId b) const {
  return b != 0 && b < boxes_.size() && boxes_[b].has_value();
}

std::vector<NodeId> Graph::box_members(BoxId b) const {
  std::vector<NodeId> out;
  for (NodeId n = 1; n < nodes_.size(); n++)
    if (nodes_[n].alive && nodes_[n].box == b) out.push_back(n);
  return out;
}

std::vector<NodeId> Graph::box_members_recursive(BoxId b) const {
  std::vector<NodeId> out = box_members(b);
  for (BoxId c = 1; c < boxes_.size(); c++) {
    if (boxes_[c] && boxes_[c]->parent == b) {
      auto sub = box_members_recursive(c);
      out.insert(out.end(), sub.begin(), sub.end());
    }
  }
  return out;
}

std::optional<BoxId> Graph::box_of_bang(NodeId bang) const {
  for (BoxId b = 1; b < boxes_.size(); b++)
    if (boxes_[b] && boxes_[b]->bang == bang) return b;
  return std::nullopt;
}

void Graph::dissolve_box(BoxId b) {
  if (!box_alive(b)) throw std::logic_error("dead box");
  BoxId parent = boxes_[b]->parent;
  for (NodeId n : box_members(b)) nodes_[n].box = parent;
  for (BoxId c = 1; c < boxes_.size(); c++)
    if (boxes_[c] && boxes_[c]->parent == b) boxes_[c]->parent = parent;
  boxes_[b].reset();
}

Graph::CopyResult Graph::copy_box(BoxId b, BoxId parent) {
  CopyResult res;
  std::vector<NodeId> members = box_members_recursive(b);

  // copy nodes
  for (NodeId n : members) {
    NodeId fresh = add_node(nodes_[n].kind, kNoBox);
    res.node_map[n] = fresh;
  }

  // copy the box tree rooted at b
  std::map<BoxId, BoxId> box_map;
  std::function<BoxId(BoxId, BoxId)> copy_tree = [&](BoxId src, BoxId into) {
    const Box& sb = *boxes_[src];
    BoxId fresh = add_box(res.node_map.at(sb.bang), into);
    box_map[src] = fresh;
    for (NodeId d : sb.doors) boxes_[fresh]->doors.push_back(res.node_map.at(d));
    for (BoxId c = 1; c < boxes_.size(); c++)
      if (boxes_[c] && boxes_[c]->parent == src) copy_tree(c, fresh);
    return fresh;
  };
  res.box = copy_tree(b, parent);

  // assign box membership on the copies
  for (NodeId n : members) nodes_[res.node_map.at(n)].box = box_map.at(nodes_[n].box);

  // replicate internal edges (both endpoints inside the copied region)
  auto mapped = [&](PortRef p) -> std::optional<PortRef> {
    auto it = res.node_map.find(p.node);
    if (it == res.node_map.end()) return std::nullopt;
    return PortRef{it->second, p.pol, p.index};
  };
  for (NodeId n : members) {
    const Node& src = nodes_[n];
    auto copy_edges = [&](const std::vector<std::optional<PortRef>>& slots, Pol pol) {
      for (std::uint16_t i = 0; i < slots.size(); i++) {
        if (!slots[i]) continue;
        PortRef here{n, pol, i};
        PortRef there = *slots[i];
        auto mh = mapped(here), mt = mapped(there);
        if (mh && mt) {
          if (!connected(*mh)) connect(*mh, *mt);
        }
      }
    };
    copy_edges(src.ins, Pol::In);
    copy_edges(src.outs, Pol::Out);
  }

  res.root = in_port(box(res.box).bang, 0);
  for (NodeId d : box(res.box).doors) res.door_out.push_back(out_port(d, 0));
  return res;
}

void Graph::delete_subgraph(const std::set<NodeId>& roots,
                            const std::set<PortRef>& boundary) {
  // collect edges leaving the region
  std::vector<PortRef> dangling;
  for (NodeId n : roots) {
    const Node& nd = node(n);
    auto scan = [&](const std::vector<std::optional<PortRef>>& slots, Pol pol) {
      for (std::uint16_t i = 0; i < slots.size(); i++) {
        if (!slots[i]) continue;
        PortRef here{n, pol, i};
        PortRef there = *slots[i];
        if (!roots.count(there.node)) {
          if (!boundary.count(here))
            throw std::logic_error("delete_subgraph: dangling edge at " + to_string(here));
          dangling.push_back(here);
        }
      }
    };
    scan(nd.ins, Pol::In);
    scan(nd.outs, Pol::Out);
  }
  for (PortRef p : dangling) {
    PortRef outsider = disconnect(p);
    NodeId w = add_node(NodeKind::contraction(0), node(outsider.node).box);
    connect(out_port(w, 0), outsider);
  }
  // drop internal edges, then nodes
  for (NodeId n : roots) {
    Node& nd = node(n);
    for (std::uint16_t i = 0; i < nd.ins.size(); i++)
      if (nd.ins[i]) disconnect(in_port(n, i));
    for (std::uint16_t i = 0; i < nd.outs.size(); i++)
      if (nd.outs[i]) disconnect(out_port(n, i));
  }
  // dissolve boxes whose bang died
  for (BoxId b = 1; b < boxes_.size(); b++)
    if (boxes_[b] && roots.count(boxes_[b]->bang)) dissolve_box(b);
  for (NodeId n : roots) remove_node(n);
}

void Graph::register_interface(PortRef p) { interface_.insert(p); }
void Graph::unregister_interface(PortRef p) { interface_.erase(p); }
bool Graph::is_interface(PortRef p) const { return interface_.count(p) > 0; }

std::vector<std::string> Graph::well_formed() const {
  std::vector<std::string> bad;
  for (NodeId n = 1; n < nodes_.size(); n++) {
    if (!nodes_[n].alive) continue;
    const Node& nd = nodes_[n];
    auto scan = [&](const std::vector<std::optional<PortRef>>& slots, Pol pol) {
      for (std::uint16_t i = 0; i < slots.size(); i++) {
        PortRef here{n, pol, i};
        if (!slots[i]) {
          if (!interface_.count(here))
            bad.push_back("open port " + to_string(here) + " (" + kind_label(nd.kind) + ")");
          continue;
        }
        PortRef there = *slots[i];
        if (!alive(there.node)) {
          bad.push_back("edge to dead node at " + to_string(here));
          continue;
        }
        auto back = slot(there);
        if (!back || !(*back == here))
          bad.push_back("asymmetric edge at " + to_string(here));
      }
    };
    scan(nd.ins, Pol::In);
    scan(nd.outs, Pol::Out);
    if (nd.box != kNoBox && !box_alive(nd.box))
      bad.push_back("node n" + std::to_string(n) + " in dead box");
  }
  // box forest sanity: bang and doors belong to the box's parent/this box
  for (BoxId b = 1; b < boxes_.size(); b++) {
    if (!boxes_[b]) continue;
    const Box& bx = *boxes_[b];
    if (!alive(bx.bang)) { bad.push_back("box with dead bang"); continue; }
    if (nodes_[bx.bang].box != b)
      bad.push_back("bang n" + std::to_string(bx.bang) + " not a member of its box");
    for (NodeId d : bx.doors) {
      if (!alive(d) || nodes_[d].box != b)
        bad.push_back("door of box " + std::to_string(b) + " not a member");
    }
    // parent chain must terminate (forest)
    std::set<BoxId> seen;
    BoxId cur = b;
    while (cur != kNoBox) {
      if (!seen.insert(cur).second) { bad.push_back("box cycle"); break; }
      cur = boxes_[cur] ? boxes_[cur]->parent : kNoBox;
    }
  }
  // every Bang/Query must belong to a box boundary
  for (NodeId n = 1; n < nodes_.size(); n++) {
    if (!nodes_[n].alive) continue;
    auto t = nodes_[n].kind.tag;
    if (t == NodeKind::Tag::Bang && !box_of_bang(n))
      bad.push_back("bang n" + std::to_string(n) + " without a box");
    if (t == NodeKind::Tag::Query) {
      bool found = false;
      for (BoxId b = 1; b < boxes_.size() && !found; b++)
        if (boxes_[b])
          for (NodeId d : boxes_[b]->doors)
            if (d == n) { found = true; break; }
      if (!found) bad.push_back("query n" + std::to_string(n) + " without a box");
    }
  }
  return bad;
}

std::vector<NodeId> Graph::node_ids() const {
  std::vector<NodeId> out;
  for (NodeId n = 1; n < nodes_.size(); n++)
    if (nodes_[n].alive) out.push_back(n);
  return out;
}

std::vector<BoxId> Graph::box_ids() const {
  std::vector<BoxId> out;
  for (BoxId b = 1; b < boxes_.size(); b++)
    if (boxes_[b]) out.push_back(b);
  return out;
}

std::uint64_t Graph::structural_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  };
  for (NodeId n = 1; n < nodes_.size(); n++) {
    if (!nodes_[n].alive) continue;
    const Node& nd = nodes_[n];
    mix(n);
    mix((std::uint64_t)nd.kind.tag);
    mix((std::uint64_t)nd.kind.value);
    mix((std::uint64_t)nd.kind.op);
    mix(nd.kind.fan_in);
    mix(nd.box);
    auto mixports = [&](const std::vector<std::optional<PortRef>>& slots) {
      for (auto& s : slots) {
        if (!s) { mix(0xdead); continue; }
        mix(s->node);
        mix((std::uint64_t)s->pol * 131 + s->index);
      }
    };
    mixports(nd.ins);
    mixports(nd.outs);
  }
  return h;
}

Graph Graph::clone() const { return *this; }

}  // namespace tsd
