#include "sdfm/state_space.hpp"

#include <cmath>

namespace sdfm {

StateSpaceSystem build_state_space(const ModelParams& params, const PanelLayout& layout) {
  layout.validate();
  params.validate();
  if (params.n_assets() != layout.n_assets)
    throw invalid_parameter_error("build_state_space: layout/params asset count mismatch");

  StateSpaceSystem sys;
  sys.layout = layout;
  sys.transition.setZero();
  sys.transition(0, 0) = params.phi;
  sys.transition(1, 0) = 1.0;
  sys.transition(2, 1) = 1.0;
  sys.noise_loading.setZero();
  sys.noise_loading(0, 0) = 1.0;
  sys.noise_loading(3, 1) = 1.0;
  for (int c = 0; c < 3; ++c) {
    sys.obs_matrix[c] = params.loadings[c];
    sys.obs_noise[c] = params.idio_var[c];
  }
  return sys;
}

Eigen::Matrix4d stationary_state_cov(double phi) {
  if (!std::isfinite(phi) || std::abs(phi) >= 1.0)
    throw singular_solve_error("stationary_state_cov: |phi| >= 1 has no stationary solution");

  Eigen::Matrix4d trans = Eigen::Matrix4d::Zero();
  trans(0, 0) = phi;
  trans(1, 0) = 1.0;
  trans(2, 1) = 1.0;
  Eigen::Matrix<double, 4, 2> noise = Eigen::Matrix<double, 4, 2>::Zero();
  noise(0, 0) = 1.0;
  noise(3, 1) = 1.0;

  // vec(P) solves (I16 - T (x) T) vec(P) = (R (x) R) vec(I2)
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(16, 16);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      lhs.block<4, 4>(4 * i, 4 * j) -= trans(i, j) * trans;
  Eigen::MatrixXd rr = noise * noise.transpose();  // since Var(eta) = I2
  Eigen::VectorXd rhs(16);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) rhs(4 * j + i) = rr(i, j);

  Eigen::FullPivLU<Eigen::MatrixXd> lu(lhs);
  if (!lu.isInvertible())
    throw singular_solve_error("stationary_state_cov: singular vec-equation");
  Eigen::VectorXd v = lu.solve(rhs);

  Eigen::Matrix4d cov;
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) cov(i, j) = v(4 * j + i);
  return 0.5 * (cov + cov.transpose());
}

}  // namespace sdfm
