#pragma once

#include <map>
#include <set>
#include <string>

#include "tsd/graph.hpp"
#include "tsd/syntax.hpp"

namespace tsd {

struct TranslationResult {
  Graph graph;
  PortRef root;  // interface in-port carrying the program's value
  std::map<std::string, PortRef> free_var_ports;
  std::set<NodeId> observed_apps;  // top-level sequencing nodes, for the CLI
};

// Translates a well-typed term to its initial machine graph. Values (lambdas,
// constants, rec) are boxed; shared variables join through contraction nodes;
// unused binders are capped by weakening; captured variables of a box are
// routed through its query doors. Wiring conventions are in TRANSLATION.md.
TranslationResult translate(const TermPtr& term, const TypeEnv& env = {});

// parse + typecheck + translate; tags the top-level statement spine.
// Errors from each stage propagate (ParseError / TypeError).
TranslationResult translate_program(const std::string& source);

}  // namespace tsd
