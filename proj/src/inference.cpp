#include "sdfm/inference.hpp"

#include <cmath>
#include <functional>

#include "sdfm/em.hpp"
#include "sdfm/qmle.hpp"

namespace sdfm {

namespace {

// (lambda' (x) I_14) Gamma: 14 x 336, a lambda-weighted sum of row blocks.
Eigen::MatrixXd lambda_contraction(const AsymptoticMachinery& mach, const Eigen::VectorXd& lam) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(14, 336);
  for (int p = 0; p < 14; ++p)
    if (lam(p) != 0.0) out += lam(p) * mach.gamma.middleRows(14 * p, 14);
  return out;
}

// (Sigma_dagger (x) M) applied on the right: scales 14-column blocks.
Eigen::MatrixXd apply_noise_cov(const AsymptoticMachinery& mach, const Eigen::MatrixXd& rows) {
  Eigen::MatrixXd out(rows.rows(), 336);
  for (int m = 0; m < 24; ++m)
    out.middleCols(14 * m, 14) =
        mach.sigma_dagger(m) * rows.middleCols(14 * m, 14) * mach.factor_cov;
  return out;
}

}  // namespace

Eigen::MatrixXd se_qmle_loading_cov(const AsymptoticMachinery& mach, const TwoDayParams& td,
                                    int k, int j) {
  const int n = mach.n_assets;
  const Eigen::VectorXd lam = td.loading.row(rowblock_index(k, j, n));
  const double sigma2 = td.idio_var(rowblock_index(k, j, n));

  const Eigen::MatrixXd contracted = lambda_contraction(mach, lam);
  Eigen::MatrixXd cov = apply_noise_cov(mach, contracted) * contracted.transpose();
  cov += mach.m_inv * sigma2;
  if (j < 4) {
    // cov_{k,j} = (lambda' (x) I) Gamma (iota (x) I) sigma^2: one column block.
    const Eigen::MatrixXd cross = sigma2 * contracted.middleCols(14 * (4 * k + j), 14);
    cov += cross + cross.transpose();
  }
  cov /= mach.t_blocks;
  return 0.5 * (cov + cov.transpose());
}

double se_qmle_sigma(double sigma2, int t_blocks) {
  if (!(sigma2 > 0.0)) throw invalid_parameter_error("se_qmle_sigma: variance must be positive");
  return std::sqrt(2.0 * sigma2 * sigma2 / t_blocks);
}

Eigen::MatrixXd se_qmle_m_cov(const AsymptoticMachinery& mach) {
  // -2 D+ (I (x) M) Gamma, rows indexed by vech.
  const Eigen::MatrixXd dplus = duplication_pinv(14);
  Eigen::MatrixXd kron_rows(196, 336);
  for (int col_block = 0; col_block < 14; ++col_block)
    kron_rows.middleRows(14 * col_block, 14) =
        mach.factor_cov * mach.gamma.middleRows(14 * col_block, 14);
  const Eigen::MatrixXd g_m = -2.0 * dplus * kron_rows;
  Eigen::MatrixXd cov = apply_noise_cov(mach, g_m) * g_m.transpose() / mach.t_blocks;
  return 0.5 * (cov + cov.transpose());
}

double phi_from_m_entry(double m21) {
  if (m21 == 0.0) return 0.0;
  const double root = (-1.0 + std::sqrt(1.0 + 4.0 * m21 * m21)) / (2.0 * m21);
  return root;
}

double se_phi_from_m(const AsymptoticMachinery& mach) {
  const Eigen::MatrixXd cov = se_qmle_m_cov(mach);
  const double var_m21 = cov(vech_index(1, 0, 14), vech_index(1, 0, 14));
  const double phi = phi_from_m_entry(mach.factor_cov(1, 0));
  const double slope = (1.0 + phi * phi) / std::pow(1.0 - phi * phi, 2);
  return std::sqrt(std::max(var_m21, 0.0)) / slope;
}

Eigen::MatrixXd se_gls_factor_cov(const AsymptoticMachinery& mach, const Eigen::VectorXd& f_t) {
  // Delta (f' (x) I) K Gamma (S (x) M) Gamma' K' (f (x) I) + Q^{-1}, over N.
  // K_{14,14} vec(A) = vec(A'): (f' (x) I)K Gamma picks Gamma rows of A'(i,j).
  Eigen::MatrixXd contracted = Eigen::MatrixXd::Zero(14, 336);
  for (int i = 0; i < 14; ++i) {
    // Row i of (f' (x) I)K Gamma is the functional of (A' f)(i).
    for (int j = 0; j < 14; ++j)
      if (f_t(j) != 0.0)
        contracted.row(i) += f_t(j) * mach.gamma.row(AsymptoticMachinery::row_of(j, i));
  }
  Eigen::MatrixXd cov = mach.delta * apply_noise_cov(mach, contracted) * contracted.transpose();

  Eigen::LDLT<Eigen::MatrixXd> q_ldlt(mach.q_hat);
  if (q_ldlt.info() != Eigen::Success || !q_ldlt.isPositive())
    throw singular_solve_error("se_gls_factor_cov: Q not positive definite");
  cov += q_ldlt.solve(Eigen::MatrixXd::Identity(14, 14));
  cov /= mach.n_assets;
  return 0.5 * (cov + cov.transpose());
}

StdErrorReport se_numerical_hessian(const ModelParams& fit, const ReturnPanel& panel,
                                    const PanelLayout& layout, HessianTarget target) {
  const int n = layout.n_assets;
  const int dim = packed_dim(n);
  const Eigen::VectorXd theta0 = pack_params(fit);

  Eigen::MatrixXd stacked;  // only needed on the two-day path
  if (target == HessianTarget::qmle_res) stacked = stack_two_day(panel, layout);

  auto gradient = [&](const Eigen::VectorXd& theta) -> Eigen::VectorXd {
    const ModelParams params = unpack_params(theta, n);
    if (target == HessianTarget::mle_one_day)
      return one_day_loglik_gradient(params, panel, layout).second;
    return qmle_res_loglik_gradient(params, stacked, layout).second;
  };

  // H = -(d score / d theta) by central differences, column by column.
  Eigen::MatrixXd hessian(dim, dim);
  for (int i = 0; i < dim; ++i) {
    const double step = 1e-4 * std::max(1.0, std::abs(theta0(i)));
    Eigen::VectorXd up = theta0, down = theta0;
    up(i) += step;
    down(i) -= step;
    hessian.col(i) = -(gradient(up) - gradient(down)) / (2.0 * step);
  }
  hessian = 0.5 * (hessian + hessian.transpose()).eval();

  StdErrorReport report;
  report.method = target == HessianTarget::mle_one_day
                      ? "numerical-hessian (heuristic, exact likelihood)"
                      : "numerical-hessian (heuristic, working-independence likelihood)";

  Eigen::LLT<Eigen::MatrixXd> llt(hessian);
  Eigen::MatrixXd info = hessian;
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hessian);
    const double floor = 1e-10 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(floor);
    info = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
    report.nearest_pd_applied = true;
  }

  const Eigen::MatrixXd cov =
      Eigen::LDLT<Eigen::MatrixXd>(info).solve(Eigen::MatrixXd::Identity(dim, dim));
  report.packed_se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();

  int at = 0;
  for (int c = 0; c < 3; ++c) {
    report.loading_se[c].resize(n, 4);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 4; ++j) report.loading_se[c](i, j) = report.packed_se(at++);
  }
  for (int c = 0; c < 3; ++c) {
    report.idio_se[c].resize(n);
    for (int i = 0; i < n; ++i) report.idio_se[c](i) = report.packed_se(at++);
  }
  report.phi_se = report.packed_se(at);
  return report;
}

}  // namespace sdfm
