#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tsd/graph.hpp"
#include "tsd/translate.hpp"

namespace tsd {

enum class Direction : std::uint8_t { Up, Down };
enum class Mode : std::uint8_t { Construct, Propagate };

// ---------------------------------------------------------------------------
// Token state
// ---------------------------------------------------------------------------

struct RewriteFlag {
  enum class Tag : std::uint8_t {
    None, App, If, Contract, Bang, Mu,
    MakeCell, Peek, Link, Assign, Root,
    StepPropagate, StepDone, Dollar,
  };
  Tag tag = Tag::None;
  PortRef target{};          // Link / Assign / Root: the cell's in-port
  std::int64_t value = 0;    // Assign: the value being written

  static RewriteFlag none() { return {}; }
  static RewriteFlag simple(Tag t) { return {t}; }
  static RewriteFlag link(PortRef i) { return {Tag::Link, i}; }
  static RewriteFlag assign(std::int64_t n, PortRef i) { return {Tag::Assign, i, n}; }
  static RewriteFlag root(PortRef i) { return {Tag::Root, i}; }
  bool operator==(const RewriteFlag&) const = default;
};

std::string to_string(const RewriteFlag& f);

struct StackElem {
  enum class Tag : std::uint8_t {
    Star,      // ⋆ demand
    LamVal,    // (λ, −)
    IntPlain,  // (n, −)
    IntFlow,   // (n, g)
    IntCell,   // (n, i)
    UnitVal,   // ((), −)
    If0, If1,  // flow-mode branch markers
  };
  Tag tag = Tag::Star;
  std::int64_t n = 0;
  PortRef cell{};

  static StackElem star() { return {}; }
  static StackElem lam() { return {Tag::LamVal}; }
  static StackElem plain(std::int64_t v) { return {Tag::IntPlain, v}; }
  static StackElem flow(std::int64_t v) { return {Tag::IntFlow, v}; }
  static StackElem cellv(std::int64_t v, PortRef i) { return {Tag::IntCell, v, i}; }
  static StackElem unit() { return {Tag::UnitVal}; }
  static StackElem if0() { return {Tag::If0}; }
  static StackElem if1() { return {Tag::If1}; }

  bool is_int() const {
    return tag == Tag::IntPlain || tag == Tag::IntFlow || tag == Tag::IntCell;
  }
  bool is_value() const { return is_int() || tag == Tag::LamVal || tag == Tag::UnitVal; }
  bool operator==(const StackElem&) const = default;
};

std::string to_string(const StackElem& e);

struct EvalToken {
  PortRef pos{};
  Direction dir = Direction::Up;
  RewriteFlag flag{};
  std::vector<StackElem> cstack;  // back() is the top
  std::vector<PortRef> bstack;

  NodeId origin_cell = 0;          // prop tokens: the cell this token serves
  std::uint64_t transitions = 0;   // prop tokens: work counter

  bool operator==(const EvalToken& o) const {
    return pos == o.pos && dir == o.dir && flag == o.flag && cstack == o.cstack &&
           bstack == o.bstack;
  }
};

struct MachineState {
  Graph graph;
  PortRef root{};
  EvalToken main;
  std::vector<EvalToken> props;
  Mode mode = Mode::Construct;
};

// ---------------------------------------------------------------------------
// Outcome & tracing
// ---------------------------------------------------------------------------

struct Outcome {
  enum class Kind { Final, Stuck, FuelExhausted };
  Kind kind = Kind::Stuck;
  StackElem value{};            // Final
  std::uint64_t steps = 0;      // transitions consumed
  std::string diagnosis;        // Stuck
  std::shared_ptr<MachineState> snapshot;  // Stuck / FuelExhausted
};

struct TraceEvent {
  std::uint64_t seq = 0;
  Mode mode = Mode::Construct;
  std::string rule_id;
  std::string node_kind;
  std::string port;
  Direction dir = Direction::Up;
  std::string flag;
  std::size_t cstack_depth = 0;
  std::size_t bstack_depth = 0;
  std::size_t graph_nodes = 0;
};

class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void on_event(const TraceEvent&) {}
  virtual void on_commit(std::uint64_t seq,
                         const std::vector<std::tuple<NodeId, std::int64_t, std::int64_t>>& changes) {}
  virtual void on_observe(std::uint64_t seq, NodeId node, const StackElem& value) {}
};

// ---------------------------------------------------------------------------
// Scheduling of prop tokens
// ---------------------------------------------------------------------------

struct Schedule {
  enum class Kind { RoundRobin, RandomSeeded, Concurrent };
  Kind kind = Kind::RoundRobin;
  std::uint64_t seed = 0;  // RandomSeeded
  int workers = 1;         // Concurrent

  static Schedule round_robin() { return {}; }
  static Schedule random_seeded(std::uint64_t s) { return {Kind::RandomSeeded, s}; }
  static Schedule concurrent(int k) { return {Kind::Concurrent, 0, k}; }
};

enum class ValidateLevel { Off, Commit, EveryStep };

struct MachineOptions {
  std::uint64_t fuel = 10'000'000;
  Schedule schedule = Schedule::round_robin();
  ValidateLevel validate = ValidateLevel::Off;
  bool step_returns_bool = false;
  bool debug_checks = false;            // well-formedness + interface after each transition
  bool debug_swap_if_branches = false;  // mutation-test hook: mis-select flow branches
  TraceSink* sink = nullptr;
};

// ---------------------------------------------------------------------------
// Single-token transition engine, shared by the machine driver (both modes)
// and the standalone propagation scheduler.
// ---------------------------------------------------------------------------

struct StepResult {
  enum class Status { Advanced, Final, Stuck };
  Status status = Status::Advanced;
  const char* rule_id = "";
  std::string diagnosis;
};

// Advances `tok` by one transition in the given mode. Construct mode may
// rewrite the graph (and needs the machine's root + options); flow mode never
// modifies the graph. `root` is the interface in-port carrying the program
// value; it may be rewired by rewrites.
StepResult dispatch(Graph& g, EvalToken& tok, Mode mode, PortRef& root,
                    const MachineOptions& opts,
                    const std::set<NodeId>* observed = nullptr,
                    std::function<void(NodeId, const StackElem&)> observe = nullptr);

// Final^P shape for a prop token: back at its origin cell's out-port, going
// down, no flag, a single value on the stack.
bool prop_token_final(const EvalToken& tok);

// ---------------------------------------------------------------------------
// Machine driver
// ---------------------------------------------------------------------------

struct Observation {
  std::uint64_t seq = 0;
  NodeId node = 0;
  StackElem value{};
};

struct StepCommit {
  std::int64_t updated = 0;
  std::vector<std::int64_t> post_values;  // all cells, creation order
  std::vector<std::tuple<NodeId, std::int64_t, std::int64_t>> changes;
};

class Machine {
 public:
  Machine(TranslationResult tr, MachineOptions opts = {});

  static MachineState init_state(const TranslationResult& tr);

  Outcome run();                       // until Final/Stuck/fuel
  std::optional<Outcome> step_once();  // one transition; outcome when done

  const MachineState& state() const { return st_; }
  MachineState& state_mut() { return st_; }
  const std::vector<Observation>& observations() const { return observations_; }
  const std::vector<StepCommit>& commits() const { return commits_; }
  std::uint64_t transitions() const { return seq_; }
  std::uint64_t propagation_transitions() const { return prop_transitions_; }
  std::vector<std::int64_t> cell_values() const;

  // re-evaluation support: snapshots of construct-mode states seen so far
  using SnapshotHook = std::function<void(std::uint64_t seq, const MachineState&)>;
  void set_snapshot_hook(SnapshotHook h) { snapshot_hook_ = std::move(h); }

 private:
  void emit_event(const StepResult& r, const EvalToken& before);
  std::optional<Outcome> advance_propagation();
  void commit_propagation();
  Outcome make_stuck(std::string why);

  MachineState st_;
  MachineOptions opts_;
  std::set<NodeId> observed_;
  std::vector<Observation> observations_;
  std::vector<StepCommit> commits_;
  std::uint64_t seq_ = 0;
  std::uint64_t prop_transitions_ = 0;
  std::uint64_t fuel_used_ = 0;
  std::size_t rr_next_ = 0;
  SnapshotHook snapshot_hook_;
};

// Convenience: machine observables for differential testing.
struct RunSummary {
  Outcome outcome;
  std::vector<StepCommit> commits;
  std::vector<Observation> observations;
  std::vector<std::int64_t> final_cells;
  std::vector<NodeId> cell_ids;
};

RunSummary run_program(const std::string& source, MachineOptions opts = {});
RunSummary run_term(const TermPtr& term, MachineOptions opts = {});

}  // namespace tsd
