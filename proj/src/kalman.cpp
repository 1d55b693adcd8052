#include "sdfm/kalman.hpp"

#include <cmath>

namespace sdfm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

inline void symmetrize(Eigen::Matrix4d& m) { m = 0.5 * (m + m.transpose()).eval(); }

// alpha' = T alpha + R eta with the fixed sparsity of the transition.
inline Eigen::Vector4d apply_transition(double phi, const Eigen::Vector4d& x) {
  return {phi * x(0), x(0), x(1), 0.0};
}

inline Eigen::Matrix4d predict_cov(double phi, const Eigen::Matrix4d& p) {
  // T P T' + R R' written out against the sparsity of T.
  Eigen::Matrix4d out = Eigen::Matrix4d::Zero();
  out(0, 0) = phi * phi * p(0, 0) + 1.0;
  out(0, 1) = phi * p(0, 0);
  out(0, 2) = phi * p(0, 1);
  out(1, 0) = out(0, 1);
  out(1, 1) = p(0, 0);
  out(1, 2) = p(0, 1);
  out(2, 0) = out(0, 2);
  out(2, 1) = out(1, 2);
  out(2, 2) = p(1, 1);
  out(3, 3) = 1.0;
  return out;
}

}  // namespace

FilterOutput filter(const StateSpaceSystem& system, const ReturnPanel& panel) {
  const PanelLayout& layout = system.layout;
  if (panel.n_periods() != layout.n_periods || panel.n_assets() != layout.n_assets)
    throw invalid_parameter_error("filter: panel/layout mismatch");
  const int t_total = layout.n_periods;
  const double phi = system.transition(0, 0);

  FilterOutput out;
  out.pred_mean.resize(t_total);
  out.pred_cov.resize(t_total);
  out.filt_mean.resize(t_total);
  out.filt_cov.resize(t_total);
  out.period_loglik = Eigen::VectorXd::Zero(t_total);

  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov = stationary_state_cov(phi);

  for (int t = 0; t < t_total; ++t) {
    out.pred_mean[t] = mean;
    out.pred_cov[t] = cov;

    const Eigen::MatrixXd& obs = system.obs_matrix_of_period(t);
    const Eigen::VectorXd& noise = system.obs_noise_of_period(t);
    double ll = 0.0;
    for (int i = 0; i < obs.rows(); ++i) {
      if (!panel.observed(t, i)) continue;
      const Eigen::Vector4d z = obs.row(i);
      const Eigen::Vector4d pz = cov * z;
      const double innov_var = z.dot(pz) + noise(i);
      if (!(innov_var > 0.0) || !std::isfinite(innov_var))
        throw non_finite_likelihood_error("filter: singular innovation variance");
      const double innov = panel.values[t](i) - z.dot(mean);
      const Eigen::Vector4d gain = pz / innov_var;
      mean += gain * innov;
      Eigen::Matrix4d stabilizer = Eigen::Matrix4d::Identity() - gain * z.transpose();
      cov = stabilizer * cov * stabilizer.transpose() + noise(i) * gain * gain.transpose();
      symmetrize(cov);
      ll -= 0.5 * (kLog2Pi + std::log(innov_var) + innov * innov / innov_var);
    }
    out.period_loglik(t) = ll;
    out.total_loglik += ll;
    out.filt_mean[t] = mean;
    out.filt_cov[t] = cov;

    if (t + 1 < t_total) {
      mean = apply_transition(phi, mean);
      cov = predict_cov(phi, cov);
    }
  }
  return out;
}

SmoothedMoments smooth(const StateSpaceSystem& system, const ReturnPanel& panel) {
  const FilterOutput fwd = filter(system, panel);
  const int t_total = system.layout.n_periods;
  const double phi = system.transition(0, 0);

  SmoothedMoments out;
  out.total_loglik = fwd.total_loglik;
  out.mean.resize(t_total);
  out.second_moment.resize(t_total);
  out.lag_one_cross.assign(t_total, Eigen::Matrix4d::Zero());

  std::vector<Eigen::Matrix4d> smooth_cov(t_total);
  out.mean[t_total - 1] = fwd.filt_mean[t_total - 1];
  smooth_cov[t_total - 1] = fwd.filt_cov[t_total - 1];

  for (int t = t_total - 2; t >= 0; --t) {
    // Gain J_t = P_{t|t} T' inv(P_{t+1|t})
    Eigen::Matrix4d pred_next = fwd.pred_cov[t + 1];
    Eigen::Matrix4d cross = Eigen::Matrix4d::Zero();  // P_{t|t} T'
    const Eigen::Matrix4d& pf = fwd.filt_cov[t];
    for (int r = 0; r < 4; ++r) {
      cross(r, 0) = phi * pf(r, 0);
      cross(r, 1) = pf(r, 0);
      cross(r, 2) = pf(r, 1);
    }
    Eigen::LDLT<Eigen::Matrix4d> ldlt(pred_next);
    if (ldlt.info() != Eigen::Success)
      throw non_finite_likelihood_error("smooth: predicted covariance not factorizable");
    Eigen::Matrix4d gain = ldlt.solve(cross.transpose()).transpose();

    out.mean[t] = fwd.filt_mean[t] + gain * (out.mean[t + 1] - fwd.pred_mean[t + 1]);
    Eigen::Matrix4d cov =
        pf + gain * (smooth_cov[t + 1] - pred_next) * gain.transpose();
    symmetrize(cov);
    smooth_cov[t] = cov;
    out.lag_one_cross[t + 1] =
        smooth_cov[t + 1] * gain.transpose() + out.mean[t + 1] * out.mean[t].transpose();
  }

  for (int t = 0; t < t_total; ++t) {
    Eigen::Matrix4d second = smooth_cov[t] + out.mean[t] * out.mean[t].transpose();
    symmetrize(second);
    out.second_moment[t] = second;
  }
  return out;
}

}  // namespace sdfm
