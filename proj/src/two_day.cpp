#include "sdfm/two_day.hpp"

#include <cmath>

namespace sdfm {

Eigen::MatrixXd global_factor_cov(double phi) {
  if (!std::isfinite(phi) || std::abs(phi) >= 1.0)
    throw invalid_parameter_error("global_factor_cov: |phi| must be < 1");
  const double scale = 1.0 / (1.0 - phi * phi);
  Eigen::MatrixXd cov(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) cov(i, j) = scale * std::pow(phi, std::abs(i - j));
  return cov;
}

TwoDayParams build_two_day(const ModelParams& params, const PanelLayout& layout) {
  layout.validate();
  params.validate();
  if (params.n_assets() != layout.n_assets)
    throw invalid_parameter_error("build_two_day: layout/params asset count mismatch");

  const int n = layout.n_assets;
  TwoDayParams td;
  td.n_assets = n;
  td.loading = Eigen::MatrixXd::Zero(6 * n, 14);
  for (int k = 0; k < 6; ++k) {
    const int c = continent_of_block(k);
    for (int lag = 0; lag < 4; ++lag)
      td.loading.block(k * n, factor_column(k, lag), n, 1) = params.loadings[c].col(lag);
  }

  td.factor_cov = Eigen::MatrixXd::Identity(14, 14);
  td.factor_cov.topLeftCorner(8, 8) = global_factor_cov(params.phi);

  td.idio_var.resize(6 * n);
  for (int k = 0; k < 6; ++k) td.idio_var.segment(k * n, n) = params.idio_var[continent_of_block(k)];
  return td;
}

Eigen::MatrixXd implied_covariance(const TwoDayParams& two_day) {
  if (two_day.idio_var.size() != two_day.loading.rows() || two_day.loading.cols() != 14)
    throw invalid_parameter_error("implied_covariance: inconsistent two-day parameters");
  Eigen::MatrixXd cov = two_day.loading * two_day.factor_cov * two_day.loading.transpose();
  cov.diagonal() += two_day.idio_var;
  return 0.5 * (cov + cov.transpose());
}

Eigen::MatrixXd stack_two_day(const ReturnPanel& panel, const PanelLayout& layout) {
  layout.validate();
  if (panel.n_periods() != layout.n_periods || panel.n_assets() != layout.n_assets)
    throw invalid_parameter_error("stack_two_day: panel/layout mismatch");
  if (!panel.fully_observed())
    throw invalid_parameter_error("stack_two_day: complete two-day stacks require an unmasked panel");
  const int n = layout.n_assets;
  const int tf = layout.day_blocks();
  Eigen::MatrixXd stacked(6 * n, tf);
  for (int b = 0; b < tf; ++b)
    for (int k = 0; k < 6; ++k) stacked.block(k * n, b, n, 1) = panel.values[6 * b + k];
  return stacked;
}

}  // namespace sdfm
