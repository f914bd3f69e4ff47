#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tsd/machine.hpp"

namespace tsd {
namespace propagation {

struct PropReport {
  struct CellResult {
    NodeId cell = 0;
    std::int64_t old_value = 0;
    std::int64_t returned = 0;
    bool changed = false;
    bool operator==(const CellResult&) const = default;
  };
  std::vector<CellResult> cells;  // creation order
  std::int64_t updated_count = 0;
  std::vector<std::uint64_t> transitions_per_token;
  std::optional<std::string> error;

  bool operator==(const PropReport& o) const {
    return cells == o.cells && updated_count == o.updated_count &&
           transitions_per_token == o.transitions_per_token && error == o.error;
  }
};

// One token per cell out-port: (e, ↑, -, [*], []).
std::vector<EvalToken> init_prop_tokens(const Graph& g);

// Runs every token to its final shape without modifying the graph. All
// schedules produce the same report; Concurrent runs tokens on threads over
// the read-only graph.
PropReport propagate(Graph& g, Schedule schedule = Schedule::round_robin());

// Applies a report: changed cells are rewritten, all at once.
std::int64_t commit(Graph& g, const PropReport& report);

}  // namespace propagation
}  // namespace tsd
