#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hsets/attribution.hpp"

namespace hsets {

/// Property suite for the set attribution, run on small synthetic networks
/// with exact subset enumeration.
struct AxiomConfig {
  Index instances = 500;    // random networks for axioms 1-5
  Index max_features = 12;  // inputs per network
  Index max_set = 6;
  Index constructed = 50;   // cases for axioms 6-9
  Index m = 50;
  double tau = 1e-3;
  double completeness_eps = 1e-6;
  double equality_tol = 1e-8;
  std::uint64_t seed = 0;
  DirectionalMode mode = DirectionalMode::Absolute;

  void validate() const;
};

struct AxiomResult {
  int axiom = 0;
  std::string name;
  Index checks = 0;
  Index violations = 0;
  double worst = 0.0;  // largest violation magnitude, or largest deviation for equalities
  bool passed() const { return checks > 0 && violations == 0; }
};

struct AxiomReport {
  std::vector<AxiomResult> results;  // axioms 1-9 in order
  bool all_passed() const;
};

AxiomReport run_axiom_suite(const AxiomConfig& config);
void write_axiom_report(std::ostream& os, const AxiomReport& report);

}  // namespace hsets
