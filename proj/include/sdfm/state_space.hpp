#pragma once

#include <Eigen/Dense>
#include <array>

#include "sdfm/model.hpp"

namespace sdfm {

// One-day switching state-space form. The state is
// (global factor, its two lags, the active continental factor); the
// observation matrix, its row dimension and the noise covariance cycle
// through the three continents with the period index.
struct StateSpaceSystem {
  static constexpr int kStateDim = 4;
  static constexpr int kShockDim = 2;

  Eigen::Matrix4d transition;                 // phi at (0,0), ones at (1,0),(2,1)
  Eigen::Matrix<double, 4, 2> noise_loading;  // ones at (0,0) and (3,1)
  std::array<Eigen::MatrixXd, 3> obs_matrix;  // Z^c, N x 4
  std::array<Eigen::VectorXd, 3> obs_noise;   // diag of Sigma_c
  PanelLayout layout;

  const Eigen::MatrixXd& obs_matrix_of_period(int t) const { return obs_matrix[t % 3]; }
  const Eigen::VectorXd& obs_noise_of_period(int t) const { return obs_noise[t % 3]; }
};

StateSpaceSystem build_state_space(const ModelParams& params, const PanelLayout& layout);

// Unconditional Var(alpha_t) of the stationary state recursion, obtained from
// the 16x16 linear system in vec form. Throws singular_solve_error when
// |phi| >= 1.
Eigen::Matrix4d stationary_state_cov(double phi);

}  // namespace sdfm
