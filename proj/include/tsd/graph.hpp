#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tsd/syntax.hpp"

namespace tsd {

using NodeId = std::uint32_t;
using BoxId = std::uint32_t;
inline constexpr BoxId kNoBox = 0;

// ---------------------------------------------------------------------------
// Node kinds. Port arities are fixed per kind; contraction arity is dynamic.
//
// Port orientation convention: an in-port is the node's service side (the
// value it provides, drawn at the bottom); out-ports are its demands
// (operands / dependencies, drawn at the top).
// ---------------------------------------------------------------------------

struct NodeKind {
  enum class Tag {
    Lam,          // in: [i0 variable service, i1 principal]; out: [o0 body]
    App,          // in: [i0 principal]; out: [o0 function, o1 argument]
    Const,        // in: [i0]; value
    UnitConst,    // in: [i0]
    BinOp,        // in: [i0]; out: [o0 left, o1 right]
    If,           // in: [i0]; out: [o0 cond, o1 else, o2 then]
    Rec,          // same layout as Lam
    Bang,         // in: [i0 box principal]; out: [o0 into box contents]
    Query,        // in: [i0 inside face]; out: [o0 outside face]
    Contraction,  // in: [i0..ik uses]; out: [o0 shared provider]; 0-ary = weakening
    Cell,         // in: [i0 value service]; out: [o0 dependency]; value
    StepNode,     // in: [i0]
    PeekNode,     // in: [i0]; out: [o0 operand]
    MakeCellNode, // in: [i0]; out: [o0 initializer -> becomes dependency]
    RootNode,     // in: [i0]; out: [o0 operand]
    DerefNode,    // in: [i0]; out: [o0 cell]
    AssignNode,   // in: [i0]; out: [o0 cell, o1 value]
    LinkNode,     // in: [i0]; out: [o0 cell, o1 new dependency]
  };

  Tag tag = Tag::Const;
  std::int64_t value = 0;   // Const, Cell
  Op op = Op::Add;          // BinOp
  std::uint16_t fan_in = 0; // Contraction

  static NodeKind lam() { return {Tag::Lam}; }
  static NodeKind app() { return {Tag::App}; }
  static NodeKind constant(std::int64_t v) { return {Tag::Const, v}; }
  static NodeKind unit() { return {Tag::UnitConst}; }
  static NodeKind binop(Op o) { return {Tag::BinOp, 0, o}; }
  static NodeKind ifnode() { return {Tag::If}; }
  static NodeKind rec() { return {Tag::Rec}; }
  static NodeKind bang() { return {Tag::Bang}; }
  static NodeKind query() { return {Tag::Query}; }
  static NodeKind contraction(std::uint16_t m) { return {Tag::Contraction, 0, Op::Add, m}; }
  static NodeKind cell(std::int64_t v) { return {Tag::Cell, v}; }
  static NodeKind step() { return {Tag::StepNode}; }
  static NodeKind peek() { return {Tag::PeekNode}; }
  static NodeKind makecell() { return {Tag::MakeCellNode}; }
  static NodeKind root() { return {Tag::RootNode}; }
  static NodeKind deref() { return {Tag::DerefNode}; }
  static NodeKind assign() { return {Tag::AssignNode}; }
  static NodeKind link() { return {Tag::LinkNode}; }
};

int in_arity(const NodeKind& k);
int out_arity(const NodeKind& k);
std::string kind_label(const NodeKind& k);

enum class Pol : std::uint8_t { In, Out };

struct PortRef {
  NodeId node = 0;
  Pol pol = Pol::In;
  std::uint16_t index = 0;

  bool operator==(const PortRef&) const = default;
  auto operator<=>(const PortRef&) const = default;
};

inline PortRef in_port(NodeId n, std::uint16_t i = 0) { return {n, Pol::In, i}; }
inline PortRef out_port(NodeId n, std::uint16_t i = 0) { return {n, Pol::Out, i}; }
std::string to_string(const PortRef& p);

struct Box {
  NodeId bang = 0;
  std::vector<NodeId> doors;  // Query nodes, one per captured variable
  BoxId parent = kNoBox;
};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

class Graph {
 public:
  // -- nodes ----------------------------------------------------------------
  NodeId add_node(const NodeKind& kind, BoxId box = kNoBox);
  void remove_node(NodeId n);  // all ports must be disconnected
  bool alive(NodeId n) const;
  const NodeKind& kind(NodeId n) const;
  NodeKind& kind_mut(NodeId n);
  BoxId box_of(NodeId n) const;
  void set_box(NodeId n, BoxId b);

  // -- edges ----------------------------------------------------------------
  void connect(PortRef a, PortRef b);
  PortRef disconnect(PortRef a);  // returns former peer
  std::optional<PortRef> peer(PortRef p) const;
  bool connected(PortRef p) const { return peer(p).has_value(); }

  // -- contraction arity edits ----------------------------------------------
  // Appends a fresh unconnected in-port slot, returns its PortRef.
  PortRef contraction_add_slot(NodeId c);
  // Removes in-port slot `index` (must be disconnected); higher slots shift.
  void contraction_remove_slot(NodeId c, std::uint16_t index);

  // -- boxes ----------------------------------------------------------------
  BoxId add_box(NodeId bang, BoxId parent = kNoBox);
  void add_door(BoxId b, NodeId query);
  void dissolve_box(BoxId b);  // members move to parent; box entry removed
  const Box& box(BoxId b) const;
  bool box_alive(BoxId b) const;
  std::vector<NodeId> box_members(BoxId b) const;          // direct members
  std::vector<NodeId> box_members_recursive(BoxId b) const;
  std::optional<BoxId> box_of_bang(NodeId bang) const;

  // Deep structural copy of a box (including nested boxes). New nodes are
  // created in `parent`. Fresh node count equals the box's node count.
  struct CopyResult {
    BoxId box = kNoBox;
    std::map<NodeId, NodeId> node_map;
    PortRef root;                      // fresh Bang principal in-port
    std::vector<PortRef> door_out;     // fresh doors' outside ports, in order
  };
  CopyResult copy_box(BoxId b, BoxId parent = kNoBox);

  // -- subgraph deletion ------------------------------------------------------
  // Removes `roots` and every edge among them. Edges leaving the region are an
  // error unless listed in `boundary`; boundary peers get weakening caps.
  void delete_subgraph(const std::set<NodeId>& roots,
                       const std::set<PortRef>& boundary = {});

  // -- interface --------------------------------------------------------------
  void register_interface(PortRef p);
  void unregister_interface(PortRef p);
  bool is_interface(PortRef p) const;
  const std::set<PortRef>& interface() const { return interface_; }

  // -- inspection ---------------------------------------------------------------
  std::vector<std::string> well_formed() const;  // empty iff invariants hold
  std::vector<NodeId> node_ids() const;          // live, ascending
  std::vector<BoxId> box_ids() const;            // live, ascending
  std::size_t node_count() const { return live_nodes_; }
  const std::vector<NodeId>& cells() const { return cells_; }  // creation order
  void note_cell(NodeId n) { cells_.push_back(n); }
  std::uint64_t structural_hash() const;

  Graph clone() const;  // deep copy, node/box ids preserved

 private:
  struct Node {
    NodeKind kind;
    BoxId box = kNoBox;
    std::vector<std::optional<PortRef>> ins, outs;
    bool alive = false;
  };

  Node& node(NodeId n);
  const Node& node(NodeId n) const;
  std::optional<PortRef>& slot(PortRef p);
  const std::optional<PortRef>& slot(PortRef p) const;

  std::vector<Node> nodes_;   // index = NodeId; id 0 unused
  std::vector<std::optional<Box>> boxes_;  // index = BoxId; id 0 unused
  std::set<PortRef> interface_;
  std::vector<NodeId> cells_;
  std::size_t live_nodes_ = 0;
};

}  // namespace tsd
