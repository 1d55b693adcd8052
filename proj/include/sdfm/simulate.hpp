#pragma once

#include <cstdint>

#include "sdfm/model.hpp"

namespace sdfm {

struct SimulationResult {
  ReturnPanel panel;
  Eigen::VectorXd global_factor;       // f_g over the kept periods
  Eigen::VectorXd continental_factor;  // f_C over the kept periods
};

// Draws the model forward from zero-initialized factors, discards a burn-in
// of 60 periods to remove the start-up transient, and returns the panel of
// observed 24-hr returns together with the factor paths. Deterministic for a
// fixed seed.
SimulationResult simulate(const ModelParams& params, const PanelLayout& layout,
                          std::uint64_t seed);

}  // namespace sdfm
