#include "tsd/propagation.hpp"

#include <random>
#include <thread>

namespace tsd {
namespace propagation {

std::vector<EvalToken> init_prop_tokens(const Graph& g) {
  std::vector<EvalToken> out;
  for (NodeId c : g.cells()) {
    if (!g.alive(c)) continue;
    EvalToken t;
    t.pos = out_port(c, 0);
    t.dir = Direction::Up;
    t.flag = RewriteFlag::none();
    t.cstack = {StackElem::star()};
    t.origin_cell = c;
    out.push_back(t);
  }
  return out;
}

PropReport propagate(Graph& g, Schedule schedule) {
  PropReport report;
  std::vector<EvalToken> tokens = init_prop_tokens(g);
  MachineOptions opts;
  PortRef root{};  // flow mode never rewires the interface
  std::uint64_t bound = 10 * (std::uint64_t)g.node_count() + 64;

  auto advance = [&](EvalToken& t) -> bool {  // false = error recorded
    StepResult r = dispatch(g, t, Mode::Propagate, root, opts);
    if (r.status == StepResult::Status::Stuck) {
      report.error = r.diagnosis + " (token of cell n" +
                     std::to_string(t.origin_cell) + ")";
      return false;
    }
    if (r.status != StepResult::Status::Final) t.transitions++;
    if (t.transitions > bound) {
      report.error = "propagation token exceeded its work bound (cell n" +
                     std::to_string(t.origin_cell) + ")";
      return false;
    }
    return true;
  };

  auto live = [&]() {
    std::vector<size_t> idx;
    for (size_t i = 0; i < tokens.size(); i++)
      if (!prop_token_final(tokens[i])) idx.push_back(i);
    return idx;
  };

  switch (schedule.kind) {
    case Schedule::Kind::RoundRobin: {
      size_t next = 0;
      while (!report.error) {
        auto idx = live();
        if (idx.empty()) break;
        // pick the first live token at or after the cursor
        size_t pick = idx[0];
        for (size_t i : idx)
          if (i >= next) { pick = i; break; }
        next = pick + 1;
        if (next >= tokens.size()) next = 0;
        advance(tokens[pick]);
      }
      break;
    }
    case Schedule::Kind::RandomSeeded: {
      std::mt19937_64 rng(schedule.seed);
      while (!report.error) {
        auto idx = live();
        if (idx.empty()) break;
        advance(tokens[idx[rng() % idx.size()]]);
      }
      break;
    }
    case Schedule::Kind::Concurrent: {
      int workers = std::max(1, schedule.workers);
      std::vector<std::thread> threads;
      std::vector<std::optional<std::string>> errors((size_t)workers);
      for (int w = 0; w < workers; w++) {
        threads.emplace_back([&, w] {
          for (size_t i = (size_t)w; i < tokens.size(); i += (size_t)workers) {
            EvalToken& t = tokens[i];
            while (!prop_token_final(t)) {
              StepResult r = dispatch(g, t, Mode::Propagate, root, opts);
              if (r.status == StepResult::Status::Stuck) {
                errors[w] = r.diagnosis;
                return;
              }
              if (r.status == StepResult::Status::Final) break;
              t.transitions++;
              if (t.transitions > bound) {
                errors[w] = "propagation token exceeded its work bound";
                return;
              }
            }
          }
        });
      }
      for (auto& th : threads) th.join();
      for (auto& e : errors)
        if (e && !report.error) report.error = e;
      break;
    }
  }

  for (auto& t : tokens) {
    PropReport::CellResult cr;
    cr.cell = t.origin_cell;
    cr.old_value = g.kind(t.origin_cell).value;
    cr.returned = prop_token_final(t) && t.cstack.back().is_int()
                      ? t.cstack.back().n
                      : cr.old_value;
    cr.changed = cr.returned != cr.old_value;
    if (cr.changed) report.updated_count++;
    report.cells.push_back(cr);
    report.transitions_per_token.push_back(t.transitions);
  }
  return report;
}

std::int64_t commit(Graph& g, const PropReport& report) {
  std::int64_t updated = 0;
  for (auto& cr : report.cells) {
    if (!cr.changed) continue;
    g.kind_mut(cr.cell).value = cr.returned;
    updated++;
  }
  return updated;
}

}  // namespace propagation
}  // namespace tsd
