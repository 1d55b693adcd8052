#include "sdfm/decompose.hpp"

#include <cmath>

#include "sdfm/state_space.hpp"

namespace sdfm {

DecompositionReport variance_decomposition(const ModelParams& params) {
  params.validate();
  const Eigen::Matrix4d state_cov = stationary_state_cov(params.phi);
  const Eigen::Matrix3d global_cov = state_cov.topLeftCorner<3, 3>();

  DecompositionReport rep;
  const int n = params.n_assets();
  for (int c = 0; c < 3; ++c) {
    rep.var_global[c].resize(n);
    rep.var_continental[c].resize(n);
    rep.var_idiosyncratic[c].resize(n);
    rep.total[c].resize(n);
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d zg = params.loadings[c].row(i).head<3>();
      const double vg = zg.dot(global_cov * zg);
      const double vc = params.loadings[c](i, 3) * params.loadings[c](i, 3) * state_cov(3, 3);
      const double ve = params.idio_var[c](i);
      rep.var_global[c](i) = vg;
      rep.var_continental[c](i) = vc;
      rep.var_idiosyncratic[c](i) = ve;
      rep.total[c](i) = vg + vc + ve;
    }
  }
  return rep;
}

Standardization standardize_returns(const ReturnPanel& panel, const PanelLayout& layout) {
  layout.validate();
  if (panel.n_periods() != layout.n_periods || panel.n_assets() != layout.n_assets)
    throw invalid_parameter_error("standardize_returns: panel/layout mismatch");

  const int n = layout.n_assets;
  Standardization out;
  out.panel = panel;
  for (int c = 0; c < 3; ++c) {
    out.mean[c] = Eigen::VectorXd::Zero(n);
    out.scale[c] = Eigen::VectorXd::Ones(n);
  }

  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      double sum = 0.0, sumsq = 0.0;
      int count = 0;
      for (int t = c; t < layout.n_periods; t += 3) {
        if (!panel.observed(t, i)) continue;
        sum += panel.values[t](i);
        sumsq += panel.values[t](i) * panel.values[t](i);
        ++count;
      }
      if (count < 2)
        throw degenerate_series_error("standardize_returns: fewer than two observations");
      const double mean = sum / count;
      const double var = sumsq / count - mean * mean;
      if (var <= 0.0 || !std::isfinite(var))
        throw degenerate_series_error("standardize_returns: zero-variance series");
      const double scale = std::sqrt(var);
      out.mean[c](i) = mean;
      out.scale[c](i) = scale;
      for (int t = c; t < layout.n_periods; t += 3)
        if (panel.observed(t, i)) out.panel.values[t](i) = (panel.values[t](i) - mean) / scale;
    }
  }
  return out;
}

}  // namespace sdfm
