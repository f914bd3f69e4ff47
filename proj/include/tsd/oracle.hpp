#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tsd/syntax.hpp"

namespace tsd {
namespace oracle {

// ---------------------------------------------------------------------------
// Netlist store: cells with adjacency-list dependency expressions. This is a
// deliberately naive evaluator sharing no code with the graph machine.
// ---------------------------------------------------------------------------

struct NetExpr;
using NetExprPtr = std::shared_ptr<const NetExpr>;

struct NetExpr {
  enum class Tag { Const, ReadCell, Op, Select, RootOf };
  Tag tag = Tag::Const;
  std::int64_t value = 0;   // Const
  int cell = -1;            // ReadCell / RootOf
  Op op = Op::Add;          // Op
  NetExprPtr a, b, c;       // Op: a b; Select: a=cond b=then c=else

  static NetExprPtr constant(std::int64_t v);
  static NetExprPtr read(int cell);
  static NetExprPtr binop(Op o, NetExprPtr l, NetExprPtr r);
  static NetExprPtr select(NetExprPtr cond, NetExprPtr then_e, NetExprPtr else_e);
  static NetExprPtr root_of(int cell);  // resolved against the store when built
};

struct NetCell {
  std::int64_t value = 0;
  NetExprPtr dependency;
};

struct NetStore {
  std::vector<NetCell> cells;
  std::int64_t eval(const NetExprPtr& e) const;
};

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

struct Value;
using ValuePtr = std::shared_ptr<const Value>;

struct Value {
  enum class Tag { Int, Unit, Cell, Closure, RecClosure };
  Tag tag = Tag::Int;
  std::int64_t n = 0;       // Int
  bool flow = false;        // Int: part of a live dataflow expression
  NetExprPtr expr;          // Int: the expression edge (flow, or a root capture)
  int cell = -1;            // Cell
  // closures
  std::string name;
  TermPtr body;
  std::shared_ptr<const std::map<std::string, ValuePtr>> env;
};

struct StepRecord {
  std::int64_t updated = 0;
  std::vector<std::int64_t> post_values;  // all cells, creation order
};

struct OracleResult {
  ValuePtr value;             // null if error
  NetStore store;
  std::vector<StepRecord> steps;
  std::optional<std::string> error;  // "fuel" for exhausted recursion budget
};

// Big-step call-by-value evaluation with an explicit dataflow store.
// Effect order matches right-to-left evaluation of applications and operands.
OracleResult oracle_eval(const TermPtr& term, std::uint64_t fuel = 200000);

// ---------------------------------------------------------------------------
// Differential testing against the machine
// ---------------------------------------------------------------------------

struct AgreementReport {
  bool agree = false;
  std::string detail;  // human-readable mismatch description
};

struct MachineObservables {
  enum class Kind { FinalInt, FinalUnit, FinalLam, FinalCell, FuelExhausted, Stuck };
  Kind kind = Kind::Stuck;
  std::int64_t final_int = 0;
  int final_cell = -1;  // creation ordinal
  std::vector<StepRecord> steps;
  std::string diagnosis;
};

AgreementReport compare(const MachineObservables& machine, const OracleResult& oracle);

}  // namespace oracle
}  // namespace tsd
