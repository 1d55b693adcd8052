#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they are used to check. The joint-Gaussian oracle builds the full
// covariance of (states, observations) directly from the model recursion and
// evaluates likelihoods and conditional moments by dense linear algebra.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "sdfm/model.hpp"

namespace oracle {

inline Eigen::Matrix4d transition_of(double phi) {
  Eigen::Matrix4d t = Eigen::Matrix4d::Zero();
  t(0, 0) = phi;
  t(1, 0) = 1.0;
  t(2, 1) = 1.0;
  return t;
}

// Stationary Var(alpha) from the closed form.
inline Eigen::Matrix4d stationary_cov(double phi) {
  const double s = 1.0 / (1.0 - phi * phi);
  Eigen::Matrix4d v = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) v(i, j) = s * std::pow(phi, std::abs(i - j));
  v(3, 3) = 1.0;
  return v;
}

struct JointGaussian {
  Eigen::MatrixXd state_cov;      // 4T x 4T
  Eigen::MatrixXd obs_cov;        // sum(Nt) x sum(Nt), observed rows only
  Eigen::MatrixXd cross;          // 4T x obs
  Eigen::VectorXd obs;            // observed values
  std::vector<int> obs_period;    // period of each observed row
};

// Builds the joint law of all states and the observed (unmasked) entries,
// with the state chain started from its stationary distribution.
inline JointGaussian build_joint(const sdfm::ModelParams& params, const sdfm::PanelLayout& layout,
                                 const sdfm::ReturnPanel& panel) {
  const int t_total = layout.n_periods;
  const Eigen::Matrix4d trans = transition_of(params.phi);
  const Eigen::Matrix4d p_inf = stationary_cov(params.phi);

  // Cov(alpha_s, alpha_u) = P (T')^(u-s) for u >= s under stationarity.
  std::vector<Eigen::Matrix4d> powers(t_total);
  powers[0] = Eigen::Matrix4d::Identity();
  for (int k = 1; k < t_total; ++k) powers[k] = trans * powers[k - 1];

  JointGaussian joint;
  joint.state_cov.resize(4 * t_total, 4 * t_total);
  for (int s = 0; s < t_total; ++s)
    for (int u = 0; u < t_total; ++u) {
      Eigen::Matrix4d block = u >= s ? (p_inf * powers[u - s].transpose()).eval()
                                     : (powers[s - u] * p_inf).eval();
      joint.state_cov.block<4, 4>(4 * s, 4 * u) = block;
    }

  std::vector<std::pair<int, int>> rows;  // (period, asset)
  for (int t = 0; t < t_total; ++t)
    for (int i = 0; i < layout.n_assets; ++i)
      if (panel.observed(t, i)) rows.push_back({t, i});

  const int n_obs = static_cast<int>(rows.size());
  joint.obs.resize(n_obs);
  joint.obs_period.resize(n_obs);
  joint.obs_cov.resize(n_obs, n_obs);
  joint.cross.resize(4 * t_total, n_obs);

  auto loading_row = [&](int t, int i) -> Eigen::RowVector4d {
    return params.loadings[t % 3].row(i);
  };

  for (int a = 0; a < n_obs; ++a) {
    const auto [t, i] = rows[a];
    joint.obs(a) = panel.values[t](i);
    joint.obs_period[a] = t;
    for (int s = 0; s < t_total; ++s)
      joint.cross.block<4, 1>(4 * s, a) =
          joint.state_cov.block<4, 4>(4 * s, 4 * t) * loading_row(t, i).transpose();
    for (int b = 0; b < n_obs; ++b) {
      const auto [u, k] = rows[b];
      double cov = loading_row(t, i) * joint.state_cov.block<4, 4>(4 * t, 4 * u) *
                   loading_row(u, k).transpose();
      if (a == b) cov += params.idio_var[t % 3](i);
      joint.obs_cov(a, b) = cov;
    }
  }
  return joint;
}

inline double dense_loglik(const sdfm::ModelParams& params, const sdfm::PanelLayout& layout,
                           const sdfm::ReturnPanel& panel) {
  const JointGaussian joint = build_joint(params, layout, panel);
  const int n = static_cast<int>(joint.obs.size());
  Eigen::LLT<Eigen::MatrixXd> llt(joint.obs_cov);
  const Eigen::VectorXd solved = llt.solve(joint.obs);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (n * std::log(2.0 * M_PI) + logdet + joint.obs.dot(solved));
}

struct DenseMoments {
  std::vector<Eigen::Vector4d> mean;
  std::vector<Eigen::Matrix4d> second;
  std::vector<Eigen::Matrix4d> lag_cross;  // E[a_t a_{t-1}'|Y], index t >= 1
};

inline DenseMoments dense_smoothed_moments(const sdfm::ModelParams& params,
                                           const sdfm::PanelLayout& layout,
                                           const sdfm::ReturnPanel& panel) {
  const JointGaussian joint = build_joint(params, layout, panel);
  const int t_total = layout.n_periods;
  Eigen::LLT<Eigen::MatrixXd> llt(joint.obs_cov);
  const Eigen::MatrixXd gain = llt.solve(joint.cross.transpose()).transpose();  // 4T x obs
  const Eigen::VectorXd mean_all = gain * joint.obs;
  const Eigen::MatrixXd cov_all = joint.state_cov - gain * joint.cross.transpose();

  DenseMoments m;
  m.mean.resize(t_total);
  m.second.resize(t_total);
  m.lag_cross.assign(t_total, Eigen::Matrix4d::Zero());
  for (int t = 0; t < t_total; ++t) {
    m.mean[t] = mean_all.segment<4>(4 * t);
    m.second[t] = cov_all.block<4, 4>(4 * t, 4 * t) + m.mean[t] * m.mean[t].transpose();
    if (t >= 1)
      m.lag_cross[t] =
          cov_all.block<4, 4>(4 * t, 4 * (t - 1)) + m.mean[t] * m.mean[t - 1].transpose();
  }
  return m;
}

// Covariance of the stacked six-period vector implied by the one-day model at
// stationarity, assembled block by block.
inline Eigen::MatrixXd stacked_covariance(const sdfm::ModelParams& params, int n_assets) {
  const Eigen::Matrix4d trans = transition_of(params.phi);
  const Eigen::Matrix4d p_inf = stationary_cov(params.phi);
  std::vector<Eigen::Matrix4d> powers(6);
  powers[0] = Eigen::Matrix4d::Identity();
  for (int k = 1; k < 6; ++k) powers[k] = trans * powers[k - 1];

  Eigen::MatrixXd cov(6 * n_assets, 6 * n_assets);
  for (int s = 0; s < 6; ++s)
    for (int u = 0; u < 6; ++u) {
      const Eigen::Matrix4d state_cov = u >= s ? (p_inf * powers[u - s].transpose()).eval()
                                               : (powers[s - u] * p_inf).eval();
      Eigen::MatrixXd block = params.loadings[s % 3] * state_cov *
                              params.loadings[u % 3].transpose();
      if (s == u) block.diagonal() += params.idio_var[s % 3];
      cov.block(s * n_assets, u * n_assets, n_assets, n_assets) = block;
    }
  return cov;
}

// Direct evaluation of the variance split of one asset.
inline double direct_global_variance(double phi, const Eigen::Vector4d& z) {
  const double s = 1.0 / (1.0 - phi * phi);
  return s * (z(0) * z(0) + z(1) * z(1) + z(2) * z(2) + 2.0 * phi * z(1) * z(0) +
              2.0 * phi * z(1) * z(2) + 2.0 * phi * phi * z(2) * z(0));
}

inline sdfm::ModelParams random_params(int n_assets, std::mt19937_64& engine,
                                       double phi_bound = 0.9) {
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::uniform_real_distribution<double> var_draw(0.3, 1.5);
  sdfm::ModelParams p = sdfm::ModelParams::zeros(n_assets);
  p.phi = phi_bound * unif(engine);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n_assets; ++i) {
      for (int j = 0; j < 4; ++j) p.loadings[c](i, j) = unif(engine);
      p.idio_var[c](i) = var_draw(engine);
    }
  }
  return p;
}

// Analytic derivative of the AR band entries used to check the numerical
// Jacobian: d/dphi [ phi^d / (1 - phi^2) ].
inline double phi_band_derivative(double phi, int lag_distance) {
  const double omp = 1.0 - phi * phi;
  if (lag_distance == 0) return 2.0 * phi / (omp * omp);
  return (lag_distance * std::pow(phi, lag_distance - 1) * omp +
          2.0 * phi * std::pow(phi, lag_distance)) /
         (omp * omp);
}

}  // namespace oracle
