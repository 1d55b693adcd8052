#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "sdfm/em.hpp"
#include "sdfm/model.hpp"
#include "sdfm/two_day.hpp"

namespace sdfm {

// One scalar identification restriction on the two-day parameters. The full
// set has exactly 14^2 = 196 members: 156 loading zeros on the first four
// assets, 21 loading equalities across day copies, and 19 restrictions on the
// factor covariance.
struct RestrictionDescriptor {
  enum class Kind { loading_zero, loading_equal, m_zero, m_diag_one, m_equal, m_pair_diff_one };
  Kind kind;
  // loading_zero: lambda_{k1,j}[a1] == 0
  // loading_equal: lambda_{k1,j}[a1] == lambda_{k2,j}[a2]
  // m_zero: M(p,q) == 0 ; m_diag_one: M(p,p) == 1
  // m_equal: M(p,q) == M(p2,q2) ; m_pair_diff_one: M(p,q) - M(p2,q2) == 1
  int k1 = -1, a1 = -1, k2 = -1, a2 = -1, j = -1;
  int p = -1, q = -1, p2 = -1, q2 = -1;
  std::string step;  // provenance label, e.g. "I.3" or "III.2"

  double violation(const TwoDayParams& td) const;
};

// Machine-readable restriction list; requires at least five assets because
// the anchors use the first four assets per continent.
std::vector<RestrictionDescriptor> restriction_set(const PanelLayout& layout);

double max_violation(const TwoDayParams& td, const std::vector<RestrictionDescriptor>& rs);

// Conditional-moment quantities of the stacked blocks under working
// independence, computed through the Woodbury identity (never forms the
// 6N x 6N covariance).
struct TwoDayEStep {
  Eigen::MatrixXd cond_mean;  // 14 x T_f, E[f_t | y_t]
  Eigen::MatrixXd w_fy;       // 14 x 6N, (1/T_f) sum E[f_t y_t']
  Eigen::MatrixXd w_ff;       // 14 x 14, (1/T_f) sum E[f_t f_t']
  Eigen::MatrixXd siginv_y;   // 6N x T_f, Sigma_yy^{-1} Y
  Eigen::MatrixXd m_inv;      // 14 x 14
  double loglik = 0.0;        // working-independence log-likelihood
};

TwoDayEStep two_day_e_step(const TwoDayParams& td, const Eigen::MatrixXd& stacked);

double two_day_pseudo_loglik(const TwoDayParams& td, const Eigen::MatrixXd& stacked);

// Sup-norm residual of the first-order conditions of the stacked likelihood,
// scaled by 1/N.
double qmle_foc_residual(const TwoDayParams& td, const Eigen::MatrixXd& stacked);

struct TwoDayFitResult {
  TwoDayParams params;
  std::vector<double> loglik_trace;
  bool converged = false;
  int n_iter = 0;
  double foc_residual = std::numeric_limits<double>::quiet_NaN();
  // Squared distance left by the rotation search before the exact projection
  // onto the restriction set, and the total squared violation afterwards.
  double rotation_distance = std::numeric_limits<double>::quiet_NaN();
  double rotation_violation = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd factors;  // 14 x T_f GLS path
};

struct QmleOptions {
  EmOptions em;
  double foc_tol = 1e-5;          // stop once the scaled FOC residual is below this
  double rotation_tol = 1e-8;     // total squared violation accepted after rotation
  int rotation_max_iter = 200;
};

// EM on the two-day form imposing all structural restrictions (QMLE-res).
FitResult fit_qmle_res(const ReturnPanel& panel, const PanelLayout& layout,
                       const EmOptions& opts = {},
                       const std::optional<ModelParams>& start = std::nullopt);

// EM on the two-day form imposing only the 196 identification restrictions,
// followed by the numerical rotation enforcing them exactly (QMLE).
TwoDayFitResult fit_qmle(const ReturnPanel& panel, const PanelLayout& layout,
                         const QmleOptions& opts = {},
                         const std::optional<ModelParams>& start = std::nullopt);

// Numerically rotates (Lambda, M) -> (Lambda C, C^{-1} M C^{-T}) to minimize
// the total squared restriction violation; returns the attained value.
double rotate_to_restrictions(TwoDayParams& td, const std::vector<RestrictionDescriptor>& rs,
                              double tol = 1e-8, int max_iter = 200);

// Column-sign groups left free by the restriction set, and the two ways of
// resolving them: a fixed first-asset convention or alignment to a reference.
const std::vector<std::vector<int>>& two_day_sign_groups();
void normalize_two_day_signs(TwoDayParams& td);
void align_two_day_signs_to(TwoDayParams& td, const TwoDayParams& reference);

// GLS factor path, one 14-vector per two-day block.
Eigen::MatrixXd extract_factors_gls(const TwoDayParams& td, const Eigen::MatrixXd& stacked);

// Working-independence log-likelihood and score of the structural
// parameterization (used by the numerical-Hessian standard errors).
std::pair<double, Eigen::VectorXd> qmle_res_loglik_gradient(const ModelParams& params,
                                                            const Eigen::MatrixXd& stacked,
                                                            const PanelLayout& layout);

}  // namespace sdfm
