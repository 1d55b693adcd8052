#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>

#include "sdfm/gamma.hpp"
#include "sdfm/model.hpp"
#include "sdfm/two_day.hpp"

namespace sdfm {

// Asymptotic covariance of one estimated loading row (already divided by the
// number of two-day blocks). Anchored assets (j < 4) carry the extra
// cross-covariance term.
Eigen::MatrixXd se_qmle_loading_cov(const AsymptoticMachinery& mach, const TwoDayParams& td,
                                    int k, int j);

// sqrt(2 sigma^4 / T_f).
double se_qmle_sigma(double sigma2, int t_blocks);

// 105 x 105 covariance of vech(M-hat), divided by T_f.
Eigen::MatrixXd se_qmle_m_cov(const AsymptoticMachinery& mach);

// The AR coefficient implied by the (2,1) entry of the global block, and its
// delta-method standard error from the vech(M) covariance.
double phi_from_m_entry(double m21);
double se_phi_from_m(const AsymptoticMachinery& mach);

// Conditional covariance of the GLS factor estimate at one block, divided by N.
Eigen::MatrixXd se_gls_factor_cov(const AsymptoticMachinery& mach, const Eigen::VectorXd& f_t);

enum class HessianTarget { mle_one_day, qmle_res };

struct StdErrorReport {
  std::array<Eigen::MatrixXd, 3> loading_se;  // N x 4 per continent
  std::array<Eigen::VectorXd, 3> idio_se;
  double phi_se = 0.0;
  Eigen::VectorXd packed_se;  // pack_params order
  std::string method;
  bool nearest_pd_applied = false;
};

// Observed-information standard errors: central differences of the exact
// score of the (pseudo-)log-likelihood on the identified free coordinates.
// Labeled heuristic because no large-N,T theory backs these two estimators.
StdErrorReport se_numerical_hessian(const ModelParams& fit, const ReturnPanel& panel,
                                    const PanelLayout& layout, HessianTarget target);

}  // namespace sdfm
