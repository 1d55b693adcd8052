#pragma once

#include <Eigen/Dense>
#include <array>

#include "sdfm/model.hpp"

namespace sdfm {

// Additive split of each asset's return variance into the part driven by the
// global factor (current value plus two lags), the continental factor, and
// the idiosyncratic error.
struct DecompositionReport {
  // Each matrix is N x 3 indexed by continent: columns are per-asset values.
  std::array<Eigen::VectorXd, 3> var_global;
  std::array<Eigen::VectorXd, 3> var_continental;
  std::array<Eigen::VectorXd, 3> var_idiosyncratic;
  std::array<Eigen::VectorXd, 3> total;
};

DecompositionReport variance_decomposition(const ModelParams& params);

struct Standardization {
  ReturnPanel panel;
  // Per continent: length-N mean and scale; original = standardized * scale + mean.
  std::array<Eigen::VectorXd, 3> mean;
  std::array<Eigen::VectorXd, 3> scale;
};

// Demeans and rescales every asset series to sample mean zero and sample
// variance one over its unmasked observations (1/n variance convention).
// Requires at least two unmasked observations per asset; throws
// degenerate_series_error on a constant series.
Standardization standardize_returns(const ReturnPanel& panel, const PanelLayout& layout);

}  // namespace sdfm
