#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <vector>

#include "sdfm/kalman.hpp"
#include "sdfm/model.hpp"

namespace sdfm {

struct EmOptions {
  int max_iter = 1000;
  double rel_tol = 1e-8;    // relative log-likelihood change
  double param_tol = 1e-8;  // sup-norm parameter change
  bool trace = true;

  void validate() const {
    if (max_iter < 1) throw invalid_parameter_error("EmOptions: max_iter must be >= 1");
    if (!(rel_tol > 0.0) || !(param_tol > 0.0))
      throw invalid_parameter_error("EmOptions: tolerances must be positive");
  }
};

struct FitResult {
  ModelParams params;
  std::vector<double> loglik_trace;
  bool converged = false;
  int n_iter = 0;
  double foc_residual = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd factors;  // smoothed state means, 4 x T (empty when not requested)
};

// Flat parameter vector used by optimizers and the numerical Hessian:
// loadings row-major per continent, then idiosyncratic variances per
// continent, then phi. Length 15N + 1.
Eigen::VectorXd pack_params(const ModelParams& params);
ModelParams unpack_params(const Eigen::VectorXd& theta, int n_assets);
int packed_dim(int n_assets);

// Sign convention (fixed-signs identification): one global flip pinned by the
// first Asian asset's global loadings, one flip per continental factor pinned
// by the first asset's continental loading.
void normalize_signs(ModelParams& params);
// Resolve the sign indeterminacy against a reference parameter set instead of
// the fixed convention (used when a ground truth is available).
void align_signs_to(ModelParams& params, const ModelParams& reference);

// Fits the restricted model in which, per continent, the three global loading
// columns share one scalar, the continental column shares another and the
// idiosyncratic variances share a third. Used to initialize the EM fits.
ModelParams starting_values(const ReturnPanel& panel, const PanelLayout& layout,
                            const EmOptions& opts = {});

FitResult fit_mle_one_day(const ReturnPanel& panel, const PanelLayout& layout,
                          const EmOptions& opts = {},
                          const std::optional<ModelParams>& start = std::nullopt);

// Expected complete-data log-likelihood (up to a parameter-free constant)
// under E-step moments held fixed; the M-step maximizes this in closed form.
double expected_complete_loglik(const ModelParams& eval, const SmoothedMoments& moments,
                                const ReturnPanel& panel, const PanelLayout& layout);

ModelParams one_day_m_step(const SmoothedMoments& moments, const ReturnPanel& panel,
                           const PanelLayout& layout);

// Exact log-likelihood and its gradient in pack order (the gradient equals
// the expected complete-data score evaluated by one smoother pass).
std::pair<double, Eigen::VectorXd> one_day_loglik_gradient(const ModelParams& params,
                                                           const ReturnPanel& panel,
                                                           const PanelLayout& layout);

}  // namespace sdfm
