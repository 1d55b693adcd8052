#include "sdfm/qmle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace sdfm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kVarFloor = 1e-10;
constexpr double kPhiBound = 0.99;

void append_zero(std::vector<RestrictionDescriptor>& out, const char* step, int k,
                 std::initializer_list<int> rows_a, std::initializer_list<int> assets) {
  for (int j : assets)
    for (int a : rows_a) {
      RestrictionDescriptor d;
      d.kind = RestrictionDescriptor::Kind::loading_zero;
      d.k1 = k;
      d.a1 = a;
      d.j = j;
      d.step = step;
      out.push_back(d);
    }
}

void append_equal(std::vector<RestrictionDescriptor>& out, const char* step, int k1, int a1,
                  int k2, int a2, std::initializer_list<int> assets) {
  for (int j : assets) {
    RestrictionDescriptor d;
    d.kind = RestrictionDescriptor::Kind::loading_equal;
    d.k1 = k1;
    d.a1 = a1;
    d.k2 = k2;
    d.a2 = a2;
    d.j = j;
    d.step = step;
    out.push_back(d);
  }
}

void append_m(std::vector<RestrictionDescriptor>& out, RestrictionDescriptor::Kind kind,
              const char* step, int p, int q, int p2 = -1, int q2 = -1) {
  RestrictionDescriptor d;
  d.kind = kind;
  d.p = p;
  d.q = q;
  d.p2 = p2;
  d.q2 = q2;
  d.step = step;
  out.push_back(d);
}

}  // namespace

double RestrictionDescriptor::violation(const TwoDayParams& td) const {
  const int n = td.n_assets;
  switch (kind) {
    case Kind::loading_zero:
      return td.loading(rowblock_index(k1, j, n), a1);
    case Kind::loading_equal:
      return td.loading(rowblock_index(k1, j, n), a1) - td.loading(rowblock_index(k2, j, n), a2);
    case Kind::m_zero:
      return td.factor_cov(p, q);
    case Kind::m_diag_one:
      return td.factor_cov(p, p) - 1.0;
    case Kind::m_equal:
      return td.factor_cov(p, q) - td.factor_cov(p2, q2);
    case Kind::m_pair_diff_one:
      return td.factor_cov(p, q) - td.factor_cov(p2, q2) - 1.0;
  }
  return 0.0;
}

std::vector<RestrictionDescriptor> restriction_set(const PanelLayout& layout) {
  layout.validate();
  if (layout.n_assets < 5)
    throw layout_too_small_error("restriction_set: anchors need at least 5 assets");

  std::vector<RestrictionDescriptor> rs;
  rs.reserve(196);

  // Zero restrictions on the first four assets (indices 0-based throughout).
  append_zero(rs, "I.1", 0, {0, 1, 2, 3, 4, 8, 9, 10, 11, 12}, {0, 1, 2, 3});
  append_zero(rs, "I.2", 5, {3, 4, 5, 6, 7, 9, 10, 11, 12, 13}, {0, 1, 2, 3});
  append_zero(rs, "I.3", 3, {5, 6, 7, 9, 11, 12, 13}, {0, 1, 2});
  append_zero(rs, "I.4", 3, {0, 1, 8}, {0, 1, 2, 3});
  append_zero(rs, "I.5", 2, {2}, {0, 1, 2});
  append_zero(rs, "I.6", 2, {6, 7, 13}, {0, 1});
  append_zero(rs, "I.7", 1, {3, 10}, {0, 1});
  append_zero(rs, "I.8", 1, {7, 13}, {0, 1});
  append_zero(rs, "I.9", 4, {0, 8}, {0, 1});
  append_zero(rs, "I.10", 4, {4}, {0, 1});
  append_zero(rs, "I.11", 4, {10}, {0, 1});
  append_zero(rs, "I.12", 4, {5, 6, 7, 11, 12, 13}, {0});
  append_zero(rs, "I.13", 2, {0, 1, 8, 9, 10, 12}, {0});
  append_zero(rs, "I.14", 1, {0, 1, 2, 8, 9, 11}, {0});

  // Equalities tying the two day copies of the same loading.
  append_equal(rs, "II.1", 5, 8, 2, 11, {0, 1});
  append_equal(rs, "II.2", 3, 10, 0, 13, {0, 1});
  append_equal(rs, "II.3", 5, 0, 2, 3, {0, 1});
  append_equal(rs, "II.4", 5, 1, 2, 4, {0, 1, 2});
  append_equal(rs, "II.5", 5, 2, 2, 5, {0, 1, 2, 3});
  append_equal(rs, "II.6", 0, 7, 3, 4, {0, 1});
  append_equal(rs, "II.7", 0, 6, 3, 3, {0, 1, 2});
  append_equal(rs, "II.8", 0, 5, 3, 2, {0, 1, 2});

  // Factor-covariance restrictions.
  using K = RestrictionDescriptor::Kind;
  append_m(rs, K::m_equal, "III.1", 3, 3, 5, 5);
  append_m(rs, K::m_equal, "III.1", 3, 3, 4, 4);
  append_m(rs, K::m_pair_diff_one, "III.1", 3, 3, 5, 3);
  append_m(rs, K::m_zero, "III.2", 3, 11, -1, -1);
  append_m(rs, K::m_zero, "III.2", 4, 11, -1, -1);
  append_m(rs, K::m_zero, "III.2", 5, 11, -1, -1);
  append_m(rs, K::m_zero, "III.2", 1, 9, -1, -1);
  append_m(rs, K::m_zero, "III.2", 2, 9, -1, -1);
  append_m(rs, K::m_zero, "III.2", 3, 9, -1, -1);
  append_m(rs, K::m_zero, "III.2", 2, 10, -1, -1);
  append_m(rs, K::m_zero, "III.2", 3, 10, -1, -1);
  append_m(rs, K::m_zero, "III.2", 4, 10, -1, -1);
  append_m(rs, K::m_zero, "III.2", 4, 12, -1, -1);
  append_m(rs, K::m_zero, "III.2", 5, 12, -1, -1);
  append_m(rs, K::m_zero, "III.2", 6, 12, -1, -1);
  append_m(rs, K::m_diag_one, "III.3", 9, 9);
  append_m(rs, K::m_diag_one, "III.3", 10, 10);
  append_m(rs, K::m_diag_one, "III.3", 11, 11);
  append_m(rs, K::m_diag_one, "III.3", 12, 12);

  return rs;
}

double max_violation(const TwoDayParams& td, const std::vector<RestrictionDescriptor>& rs) {
  double worst = 0.0;
  for (const auto& d : rs) worst = std::max(worst, std::abs(d.violation(td)));
  return worst;
}

TwoDayEStep two_day_e_step(const TwoDayParams& td, const Eigen::MatrixXd& stacked) {
  const int rows = td.rows();
  const int t_blocks = static_cast<int>(stacked.cols());
  if (stacked.rows() != rows) throw invalid_parameter_error("two_day_e_step: dimension mismatch");

  TwoDayEStep e;
  const Eigen::VectorXd inv_var = td.idio_var.cwiseInverse();
  Eigen::MatrixXd siginv_loading = inv_var.asDiagonal() * td.loading;      // 6N x 14
  Eigen::MatrixXd gram = td.loading.transpose() * siginv_loading;          // 14 x 14

  Eigen::LDLT<Eigen::MatrixXd> m_ldlt(td.factor_cov);
  if (m_ldlt.info() != Eigen::Success || !m_ldlt.isPositive())
    throw invalid_parameter_error("two_day_e_step: factor covariance not positive definite");
  e.m_inv = m_ldlt.solve(Eigen::MatrixXd::Identity(14, 14));

  Eigen::MatrixXd core_inv = e.m_inv + gram;
  Eigen::LDLT<Eigen::MatrixXd> core_ldlt(core_inv);
  if (core_ldlt.info() != Eigen::Success)
    throw non_finite_likelihood_error("two_day_e_step: singular Woodbury core");

  // C1 = L' Sigma_ee^{-1} Y ; conditional mean path = M(I - G core^{-1}) C1.
  Eigen::MatrixXd c1 = siginv_loading.transpose() * stacked;              // 14 x T_f
  Eigen::MatrixXd core_c1 = core_ldlt.solve(c1);                          // 14 x T_f
  e.cond_mean = td.factor_cov * (c1 - gram * core_c1);                    // 14 x T_f
  e.w_fy = e.cond_mean * stacked.transpose() / t_blocks;                  // 14 x 6N

  // w_ff = M - B'(Lambda M) + cond_mean cond_mean'/T_f with
  // B' = M(I - G core^{-1}) L' Sigma_ee^{-1}.
  Eigen::MatrixXd bt_lambda = td.factor_cov * (gram - gram * core_ldlt.solve(gram));
  e.w_ff = td.factor_cov - bt_lambda * td.factor_cov +
           e.cond_mean * e.cond_mean.transpose() / t_blocks;
  e.w_ff = 0.5 * (e.w_ff + e.w_ff.transpose()).eval();

  e.siginv_y = inv_var.asDiagonal() * stacked - siginv_loading * core_c1;  // 6N x T_f

  // log|Sigma_yy| = log|Sigma_ee| + log|M| + log|M^{-1} + G|.
  double logdet = td.idio_var.array().log().sum();
  logdet += m_ldlt.vectorD().array().log().sum();
  logdet += core_ldlt.vectorD().array().log().sum();
  const double trace_term = (stacked.array() * e.siginv_y.array()).sum() / t_blocks;
  e.loglik = -0.5 * t_blocks * (rows * kLog2Pi + logdet + trace_term);
  return e;
}

double two_day_pseudo_loglik(const TwoDayParams& td, const Eigen::MatrixXd& stacked) {
  return two_day_e_step(td, stacked).loglik;
}

namespace {

double foc_residual_from(const TwoDayParams& td, const Eigen::MatrixXd& stacked,
                         const TwoDayEStep& e) {
  const int t_blocks = static_cast<int>(stacked.cols());
  const int n = td.n_assets;
  // F1 = Lambda' Sigma_yy^{-1} (S_yy - Sigma_yy) = M^{-1} w_fy - Lambda'.
  Eigen::MatrixXd f1 = e.m_inv * e.w_fy - td.loading.transpose();
  // F2 = diag(Sigma_yy^{-1}) - diag(Sigma_yy^{-1} S_yy Sigma_yy^{-1}).
  const Eigen::VectorXd inv_var = td.idio_var.cwiseInverse();
  Eigen::MatrixXd siginv_loading = inv_var.asDiagonal() * td.loading;
  Eigen::MatrixXd gram = td.loading.transpose() * siginv_loading;
  Eigen::LDLT<Eigen::MatrixXd> core_ldlt(e.m_inv + gram);
  Eigen::MatrixXd half = core_ldlt.solve(siginv_loading.transpose());  // 14 x 6N
  double worst2 = 0.0;
  for (int r = 0; r < td.rows(); ++r) {
    const double d1 = inv_var(r) - siginv_loading.row(r).dot(half.col(r));
    const double d2 = e.siginv_y.row(r).squaredNorm() / t_blocks;
    worst2 = std::max(worst2, std::abs(d1 - d2));
  }
  return std::max(f1.cwiseAbs().maxCoeff(), worst2) / n;
}

// phi objective of the working-independence likelihood: only the 8x8 global
// block of M depends on phi, whose inverse is the AR(1) tridiagonal band.
double phi_objective(double phi, double interior_sq, double offdiag_sum) {
  return -std::log(1.0 - phi * phi) + phi * phi * interior_sq - 2.0 * phi * offdiag_sum;
}

double minimize_phi(const Eigen::MatrixXd& w_ff, double fallback) {
  const double interior = w_ff.diagonal().segment(1, 6).sum();
  double offdiag = 0.0;
  for (int i = 0; i < 7; ++i) offdiag += w_ff(i, i + 1);

  const double inv_gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -kPhiBound, hi = kPhiBound;
  double x1 = hi - inv_gr * (hi - lo), x2 = lo + inv_gr * (hi - lo);
  double f1 = phi_objective(x1, interior, offdiag), f2 = phi_objective(x2, interior, offdiag);
  for (int it = 0; it < 80; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_gr * (hi - lo);
      f1 = phi_objective(x1, interior, offdiag);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_gr * (hi - lo);
      f2 = phi_objective(x2, interior, offdiag);
    }
  }
  double phi = 0.5 * (lo + hi);
  // Local Newton refinement on the smooth one-dimensional objective.
  for (int it = 0; it < 4; ++it) {
    const double omp = 1.0 - phi * phi;
    const double g = 2.0 * phi / omp + 2.0 * phi * interior - 2.0 * offdiag;
    const double h = 2.0 * (1.0 + phi * phi) / (omp * omp) + 2.0 * interior;
    if (!(h > 0.0)) break;
    const double next = std::clamp(phi - g / h, -kPhiBound, kPhiBound);
    if (std::abs(next - phi) < 1e-14) {
      phi = next;
      break;
    }
    phi = next;
  }
  if (phi_objective(phi, interior, offdiag) > phi_objective(fallback, interior, offdiag))
    return fallback;  // never move uphill
  return phi;
}

double sup_change_model(const ModelParams& a, const ModelParams& b) {
  double d = std::abs(a.phi - b.phi);
  for (int c = 0; c < 3; ++c) {
    d = std::max(d, (a.loadings[c] - b.loadings[c]).cwiseAbs().maxCoeff());
    d = std::max(d, (a.idio_var[c] - b.idio_var[c]).cwiseAbs().maxCoeff());
  }
  return d;
}

}  // namespace

double qmle_foc_residual(const TwoDayParams& td, const Eigen::MatrixXd& stacked) {
  const TwoDayEStep e = two_day_e_step(td, stacked);
  return foc_residual_from(td, stacked, e);
}

FitResult fit_qmle_res(const ReturnPanel& panel, const PanelLayout& layout, const EmOptions& opts,
                       const std::optional<ModelParams>& start) {
  opts.validate();
  const Eigen::MatrixXd stacked = stack_two_day(panel, layout);
  const int n = layout.n_assets;
  const int t_blocks = layout.day_blocks();
  const Eigen::VectorXd s_diag = stacked.rowwise().squaredNorm() / t_blocks;

  ModelParams params = start ? *start : starting_values(panel, layout, opts);
  params.validate();
  normalize_signs(params);

  FitResult result;
  double prev_loglik = -std::numeric_limits<double>::infinity();

  int iter = 0;
  for (; iter < opts.max_iter; ++iter) {
    const TwoDayParams td = build_two_day(params, layout);
    const TwoDayEStep e = two_day_e_step(td, stacked);
    if (opts.trace) result.loglik_trace.push_back(e.loglik);

    ModelParams next = params;
    // Loading rows: each structural row appears in two day blocks with the
    // same idiosyncratic variance, so the weights cancel.
    for (int c = 0; c < 3; ++c) {
      const int k1 = c, k2 = c + 3;
      Eigen::Matrix4d lhs_base = Eigen::Matrix4d::Zero();
      std::array<std::array<int, 4>, 2> cols{};
      for (int lag = 0; lag < 4; ++lag) {
        cols[0][lag] = factor_column(k1, lag);
        cols[1][lag] = factor_column(k2, lag);
      }
      for (int r = 0; r < 4; ++r)
        for (int s = 0; s < 4; ++s)
          lhs_base(r, s) =
              e.w_ff(cols[0][r], cols[0][s]) + e.w_ff(cols[1][r], cols[1][s]);
      Eigen::LDLT<Eigen::Matrix4d> ldlt(lhs_base);
      if (ldlt.info() != Eigen::Success)
        throw singular_moment_error("fit_qmle_res: singular loading system");
      for (int j = 0; j < n; ++j) {
        Eigen::Vector4d rhs;
        for (int r = 0; r < 4; ++r)
          rhs(r) = e.w_fy(cols[0][r], rowblock_index(k1, j, n)) +
                   e.w_fy(cols[1][r], rowblock_index(k2, j, n));
        next.loadings[c].row(j) = ldlt.solve(rhs);
      }
    }

    // Idiosyncratic variances: average the two day copies.
    const TwoDayParams td_new = build_two_day(next, layout);
    for (int c = 0; c < 3; ++c) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k : {c, c + 3}) {
          const int r = rowblock_index(k, j, n);
          const Eigen::VectorXd lam = td_new.loading.row(r);
          acc += s_diag(r) - 2.0 * lam.dot(e.w_fy.col(r)) + lam.dot(e.w_ff * lam);
        }
        next.idio_var[c](j) = std::max(acc / 2.0, kVarFloor);
      }
    }

    next.phi = minimize_phi(e.w_ff, params.phi);
    normalize_signs(next);

    const bool loglik_ok = iter > 0 && std::abs(e.loglik - prev_loglik) <=
                                           opts.rel_tol * (1.0 + std::abs(e.loglik));
    const bool param_ok = sup_change_model(next, params) <= opts.param_tol;
    prev_loglik = e.loglik;
    params = next;
    if (loglik_ok || param_ok) {
      result.converged = true;
      ++iter;
      break;
    }
  }

  result.n_iter = iter;
  result.params = params;
  const TwoDayParams td = build_two_day(params, layout);
  const TwoDayEStep e = two_day_e_step(td, stacked);
  if (opts.trace) result.loglik_trace.push_back(e.loglik);
  result.foc_residual = foc_residual_from(td, stacked, e);
  result.factors = e.cond_mean;
  return result;
}

namespace {

// Free-coordinate structure of a first-four asset in one continent under the
// zero and equality restrictions: lambda_{k,j} = S_k theta for the two day
// blocks, encoded as (factor index -> parameter class) maps.
struct AnchorGroup {
  int continent = 0;
  int asset = 0;
  std::array<int, 2> blocks{};
  std::array<std::vector<std::pair<int, int>>, 2> coord_class;  // (factor idx, class)
  int n_free = 0;
};

std::vector<AnchorGroup> build_anchor_groups(const std::vector<RestrictionDescriptor>& rs) {
  std::vector<AnchorGroup> groups;
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < 4; ++j) {
      AnchorGroup g;
      g.continent = c;
      g.asset = j;
      g.blocks = {c, c + 3};

      auto zeroed = [&](int k, int a) {
        for (const auto& d : rs)
          if (d.kind == RestrictionDescriptor::Kind::loading_zero && d.k1 == k && d.a1 == a &&
              d.j == j)
            return true;
        return false;
      };

      // Class per free coordinate; equality ties merge classes across blocks.
      std::map<std::pair<int, int>, int> cls;
      auto cls_of = [&](int k, int a) -> int& { return cls[{k, a}]; };
      int next_cls = 0;
      for (int side = 0; side < 2; ++side)
        for (int a = 0; a < 14; ++a)
          if (!zeroed(g.blocks[side], a)) cls_of(g.blocks[side], a) = -1;
      for (const auto& d : rs) {
        if (d.kind != RestrictionDescriptor::Kind::loading_equal || d.j != j) continue;
        const bool ours = (d.k1 == g.blocks[0] || d.k1 == g.blocks[1]);
        if (!ours) continue;
        // Both coordinates must be free; assign a common class.
        auto it1 = cls.find({d.k1, d.a1});
        auto it2 = cls.find({d.k2, d.a2});
        if (it1 == cls.end() || it2 == cls.end())
          throw invalid_parameter_error("restriction set ties a zeroed coordinate");
        if (it1->second < 0 && it2->second < 0) {
          it1->second = it2->second = next_cls++;
        } else if (it1->second < 0) {
          it1->second = it2->second;
        } else if (it2->second < 0) {
          it2->second = it1->second;
        }
      }
      for (auto& [key, value] : cls)
        if (value < 0) value = next_cls++;
      g.n_free = next_cls;
      for (int side = 0; side < 2; ++side)
        for (int a = 0; a < 14; ++a) {
          auto it = cls.find({g.blocks[side], a});
          if (it != cls.end()) g.coord_class[side].push_back({a, it->second});
        }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

}  // namespace

namespace {

// One EM pass of the restricted stacked-likelihood problem, given the E-step
// quantities at the input parameters.
TwoDayParams qmle_em_update(const TwoDayParams& td, const TwoDayEStep& e,
                            const std::vector<AnchorGroup>& groups,
                            const Eigen::VectorXd& s_diag) {
  const int n = td.n_assets;
  const int rows = td.rows();
  TwoDayParams next = td;

  Eigen::MatrixXd new_loading = Eigen::MatrixXd::Zero(rows, 14);
  // Anchored assets: restricted weighted least squares per tie group.
  for (const auto& g : groups) {
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(g.n_free, g.n_free);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(g.n_free);
    for (int side = 0; side < 2; ++side) {
      const int r = rowblock_index(g.blocks[side], g.asset, n);
      const double w = 1.0 / td.idio_var(r);
      for (const auto& [a1, c1] : g.coord_class[side]) {
        rhs(c1) += w * e.w_fy(a1, r);
        for (const auto& [a2, c2] : g.coord_class[side]) lhs(c1, c2) += w * e.w_ff(a1, a2);
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
    if (ldlt.info() != Eigen::Success)
      throw singular_moment_error("fit_qmle: singular anchored loading system");
    Eigen::VectorXd theta = ldlt.solve(rhs);
    for (int side = 0; side < 2; ++side) {
      const int r = rowblock_index(g.blocks[side], g.asset, n);
      for (const auto& [a, c] : g.coord_class[side]) new_loading(r, a) = theta(c);
    }
  }
  // Free assets: unrestricted row-wise regression on the factor stack.
  Eigen::LDLT<Eigen::MatrixXd> wff_ldlt(e.w_ff);
  if (wff_ldlt.info() != Eigen::Success)
    throw singular_moment_error("fit_qmle: singular factor second moment");
  for (int k = 0; k < 6; ++k)
    for (int j = 4; j < n; ++j) {
      const int r = rowblock_index(k, j, n);
      new_loading.row(r) = wff_ldlt.solve(e.w_fy.col(r)).transpose();
    }

  next.loading = std::move(new_loading);
  next.factor_cov = e.w_ff;
  for (int r = 0; r < rows; ++r) {
    const Eigen::VectorXd lam = next.loading.row(r);
    next.idio_var(r) = std::max(
        s_diag(r) - 2.0 * lam.dot(e.w_fy.col(r)) + lam.dot(e.w_ff * lam), kVarFloor);
  }
  return next;
}

// Linear combination of two-day parameter sets used by the accelerated EM.
TwoDayParams td_combine(const TwoDayParams& base, double a1, const TwoDayParams& d1, double a2,
                        const TwoDayParams& d2) {
  TwoDayParams out = base;
  out.loading += a1 * d1.loading + a2 * d2.loading;
  out.factor_cov += a1 * d1.factor_cov + a2 * d2.factor_cov;
  out.idio_var += a1 * d1.idio_var + a2 * d2.idio_var;
  return out;
}

TwoDayParams td_diff(const TwoDayParams& x, const TwoDayParams& y) {
  TwoDayParams out = x;
  out.loading -= y.loading;
  out.factor_cov -= y.factor_cov;
  out.idio_var -= y.idio_var;
  return out;
}

double td_norm(const TwoDayParams& x) {
  return std::sqrt(x.loading.squaredNorm() + x.factor_cov.squaredNorm() +
                   x.idio_var.squaredNorm());
}

// Profile maximum likelihood of the unrestricted stacked factor model: for
// fixed uniquenesses D the optimal loading has the closed eigen form, so the
// likelihood is maximized over log D alone. On the profile path the loading
// first-order condition holds identically and the D-gradient equals the
// remaining diagonal first-order condition.
struct ProfileMlResult {
  Eigen::VectorXd uniquenesses;  // d
  Eigen::MatrixXd loading_b;     // 6N x 14, factor covariance I
  double loglik = 0.0;
  double foc = 0.0;  // scaled sup-norm of the diagonal FOC
  int n_iter = 0;
};

class ProfileMl {
 public:
  ProfileMl(const Eigen::MatrixXd& stacked, int n_assets)
      : n_(n_assets),
        rows_(static_cast<int>(stacked.rows())),
        t_blocks_(static_cast<int>(stacked.cols())),
        scaled_y_(stacked / std::sqrt(static_cast<double>(t_blocks_))),
        s_diag_(stacked.rowwise().squaredNorm() / t_blocks_),
        floor_(1e-4 * s_diag_.cwiseMax(1e-8)),
        subspace_(Eigen::MatrixXd::Zero(rows_, kSubspace)) {
    // Deterministic subspace seed refreshed by the first evaluation.
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < kSubspace; ++j)
        subspace_(i, j) = std::cos(0.7 * (i + 1) * (j + 1));
  }

  bool at_boundary(const Eigen::VectorXd& d) const {
    return (d.array() <= 2.0 * floor_.array()).any();
  }

  // Top eigenpairs of diag(s) scaled_y scaled_y' diag(s) by warm-started
  // subspace iteration; never forms the full matrix.
  void top_eigs(const Eigen::VectorXd& inv_sd, Eigen::VectorXd& values,
                Eigen::MatrixXd& vectors) {
    Eigen::MatrixXd q = subspace_;
    // Re-orthonormalize the warm start.
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(q);
    q = qr.householderQ() * Eigen::MatrixXd::Identity(rows_, kSubspace);

    Eigen::VectorXd ritz_prev = Eigen::VectorXd::Zero(kFactors);
    for (int sweep = 0; sweep < 400; ++sweep) {
      Eigen::MatrixXd z = inv_sd.asDiagonal() * q;
      z = scaled_y_ * (scaled_y_.transpose() * z);
      z = inv_sd.asDiagonal() * z;
      Eigen::HouseholderQR<Eigen::MatrixXd> qr2(z);
      q = qr2.householderQ() * Eigen::MatrixXd::Identity(rows_, kSubspace);

      Eigen::MatrixXd w = inv_sd.asDiagonal() * q;
      w = scaled_y_ * (scaled_y_.transpose() * w);
      w = inv_sd.asDiagonal() * w;
      Eigen::MatrixXd small = q.transpose() * w;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (small + small.transpose()));
      // Descending order.
      Eigen::VectorXd vals = eig.eigenvalues().reverse();
      Eigen::MatrixXd rot = eig.eigenvectors().rowwise().reverse();
      q = (q * rot).eval();
      const Eigen::VectorXd ritz = vals.head(kFactors);
      const double change = (ritz - ritz_prev).cwiseAbs().maxCoeff();
      ritz_prev = ritz;
      if (sweep >= 2 && change < 1e-12 * std::max(1.0, ritz.cwiseAbs().maxCoeff())) break;
    }
    subspace_ = q;  // warm start for the next evaluation
    values = ritz_prev;
    vectors = q.leftCols(kFactors);
  }

  // Profile discrepancy G = log|D| + tr(R) + sum_{j<=14} (log th_j - th_j + 1)
  // and its gradient in log D.
  bool evaluate(const Eigen::VectorXd& log_d, double* value, Eigen::VectorXd* grad,
                Eigen::VectorXd* theta_out = nullptr, Eigen::MatrixXd* vec_out = nullptr) {
    const Eigen::VectorXd d = log_d.array().exp();
    if (!d.allFinite() || (d.array() <= floor_.array()).any()) return false;
    const Eigen::VectorXd inv_sd = d.cwiseSqrt().cwiseInverse();
    Eigen::VectorXd theta;
    Eigen::MatrixXd q;
    top_eigs(inv_sd, theta, q);

    double g_val = log_d.sum() + (s_diag_.array() / d.array()).sum();
    for (int j = 0; j < kFactors; ++j)
      if (theta(j) > 1.0 + 1e-12) g_val += std::log(theta(j)) - theta(j) + 1.0;
    if (!std::isfinite(g_val)) return false;
    *value = g_val;
    if (grad) {
      grad->resize(rows_);
      for (int i = 0; i < rows_; ++i) {
        double acc = 1.0 - s_diag_(i) / d(i);
        for (int j = 0; j < kFactors; ++j)
          if (theta(j) > 1.0 + 1e-12) acc += (theta(j) - 1.0) * q(i, j) * q(i, j);
        (*grad)(i) = acc;
      }
    }
    if (theta_out) *theta_out = theta;
    if (vec_out) *vec_out = q;
    return true;
  }

  ProfileMlResult solve(const Eigen::VectorXd& d0, double foc_tol, int max_iter) {
    Eigen::VectorXd x = d0.cwiseMax(3.0 * floor_).array().log();
    double f = 0.0;
    Eigen::VectorXd g;
    if (!evaluate(x, &f, &g))
      throw non_finite_likelihood_error("fit_qmle: invalid profile start");

    std::vector<Eigen::VectorXd> s_hist, y_hist;
    std::vector<double> rho_hist;
    ProfileMlResult out;

    int it = 0;
    for (; it < max_iter; ++it) {
      // Scaled diagonal FOC: entries of F2 are grad_i / d_i.
      const Eigen::VectorXd d = x.array().exp();
      const double foc = (g.array() / d.array()).abs().maxCoeff() / n_;
      if (foc <= foc_tol && it > 0) break;

      Eigen::VectorXd q = g;
      std::vector<double> alpha(s_hist.size());
      for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
        alpha[i] = rho_hist[i] * s_hist[i].dot(q);
        q -= alpha[i] * y_hist[i];
      }
      if (!s_hist.empty())
        q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      for (std::size_t i = 0; i < s_hist.size(); ++i)
        q += (alpha[i] - rho_hist[i] * y_hist[i].dot(q)) * s_hist[i];
      Eigen::VectorXd direction = -q;
      if (direction.dot(g) >= 0.0) direction = -g;

      double step = s_hist.empty() ? 1.0 / (1.0 + g.cwiseAbs().maxCoeff()) : 1.0;
      bool ok = false;
      double f_new = 0.0;
      Eigen::VectorXd g_new, x_new;
      for (int bt = 0; bt < 60; ++bt) {
        x_new = x + step * direction;
        if (evaluate(x_new, &f_new, &g_new) &&
            f_new <= f + 1e-4 * step * direction.dot(g)) {
          ok = true;
          break;
        }
        step *= 0.5;
      }
      if (!ok) break;
      const Eigen::VectorXd s_vec = x_new - x;
      const Eigen::VectorXd y_vec = g_new - g;
      const double sy = s_vec.dot(y_vec);
      if (sy > 1e-14) {
        s_hist.push_back(s_vec);
        y_hist.push_back(y_vec);
        rho_hist.push_back(1.0 / sy);
        if (s_hist.size() > 10) {
          s_hist.erase(s_hist.begin());
          y_hist.erase(y_hist.begin());
          rho_hist.erase(rho_hist.begin());
        }
      }
      x = x_new;
      f = f_new;
      g = g_new;
    }

    // Final evaluation with the converged subspace.
    Eigen::VectorXd theta;
    Eigen::MatrixXd vectors;
    if (!evaluate(x, &f, &g, &theta, &vectors))
      throw non_finite_likelihood_error("fit_qmle: profile evaluation failed");
    if (theta(kFactors - 1) <= 1.0 + 1e-8)
      throw singular_moment_error(
          "fit_qmle: the data do not support fourteen factors (boundary solution)");
    if (at_boundary(x.array().exp()))
      throw singular_moment_error(
          "fit_qmle: a uniqueness collapsed to its floor (Heywood case)");

    out.uniquenesses = x.array().exp();
    out.loading_b = out.uniquenesses.cwiseSqrt().asDiagonal() * vectors *
                    (theta.array() - 1.0).sqrt().matrix().asDiagonal();
    out.loglik = -0.5 * t_blocks_ * (rows_ * kLog2Pi + f);
    const Eigen::VectorXd d = x.array().exp();
    out.foc = (g.array() / d.array()).abs().maxCoeff() / n_;
    out.n_iter = it;
    return out;
  }

 private:
  static constexpr int kFactors = 14;
  static constexpr int kSubspace = 20;
  int n_;
  int rows_;
  int t_blocks_;
  Eigen::MatrixXd scaled_y_;
  Eigen::VectorXd s_diag_;
  Eigen::VectorXd floor_;
  Eigen::MatrixXd subspace_;
};

// Re-applies the fixed covariance entries on a candidate (diagonal) base.
void project_diag_fixups(Eigen::MatrixXd& m) {
  for (int p = 9; p <= 12; ++p) m(p, p) = 1.0;
  const double v = std::max((m(3, 3) + m(4, 4) + m(5, 5)) / 3.0, 1.05);
  m(3, 3) = m(4, 4) = m(5, 5) = v;
  m(5, 3) = m(3, 5) = v - 1.0;
}

// Exact projection onto the restriction set: anchored loading entries are
// zeroed, tied pairs averaged, and the restricted covariance entries set to
// their exact values with a minimal symmetric adjustment.
void project_onto_restrictions(TwoDayParams& td, const std::vector<RestrictionDescriptor>& rs) {
  const int n = td.n_assets;
  for (const auto& d : rs) {
    using K = RestrictionDescriptor::Kind;
    switch (d.kind) {
      case K::loading_zero:
        td.loading(rowblock_index(d.k1, d.j, n), d.a1) = 0.0;
        break;
      case K::loading_equal: {
        const int r1 = rowblock_index(d.k1, d.j, n);
        const int r2 = rowblock_index(d.k2, d.j, n);
        const double mean = 0.5 * (td.loading(r1, d.a1) + td.loading(r2, d.a2));
        td.loading(r1, d.a1) = mean;
        td.loading(r2, d.a2) = mean;
        break;
      }
      case K::m_zero:
        td.factor_cov(d.p, d.q) = 0.0;
        td.factor_cov(d.q, d.p) = 0.0;
        break;
      case K::m_diag_one:
        td.factor_cov(d.p, d.p) = 1.0;
        break;
      default:
        break;  // the coupled global-block equalities are handled below
    }
  }
  // M(3,3) = M(4,4) = M(5,5) = v with v - M(5,3) = 1, adjusted minimally.
  const double a = (td.factor_cov(3, 3) + td.factor_cov(4, 4) + td.factor_cov(5, 5)) / 3.0;
  const double b = td.factor_cov(5, 3);
  const double shift = 0.5 * (1.0 - (a - b));
  const double v = a + shift;
  const double b_new = b - shift;
  td.factor_cov(3, 3) = td.factor_cov(4, 4) = td.factor_cov(5, 5) = v;
  td.factor_cov(5, 3) = td.factor_cov(3, 5) = b_new;

  // Keep the covariance positive definite: shrink the free entries toward the
  // projected diagonal until a Cholesky succeeds. The subsequent restricted
  // re-maximization re-optimizes all free entries anyway.
  TwoDayParams base = td;
  Eigen::MatrixXd diag_only = Eigen::MatrixXd(td.factor_cov.diagonal().cwiseMax(0.05).asDiagonal());
  base.factor_cov = diag_only;
  project_diag_fixups(base.factor_cov);
  for (double t = 1.0; t >= -1e-9; t -= 0.1) {
    Eigen::MatrixXd blend = t * td.factor_cov + (1.0 - t) * base.factor_cov;
    Eigen::LLT<Eigen::MatrixXd> llt(blend);
    if (llt.info() == Eigen::Success) {
      td.factor_cov = blend;
      return;
    }
  }
  td.factor_cov = base.factor_cov;
}

// Free coordinates of the restricted problem: one slot per anchored tie
// class, the unrestricted loading rows, vech of the factor covariance less
// its fixed entries, and the idiosyncratic variances. Used to re-maximize the
// likelihood on the restriction set after the projection.
struct RestrictedCoordinates {
  const std::vector<AnchorGroup>* groups = nullptr;
  int n = 0;
  std::vector<int> group_offset;
  int free_rows_offset = 0;
  int m_offset = 0;
  int sigma_offset = 0;
  int dim = 0;
  // vech slots of M that stay free, and whether the shared global diagonal
  // value (entries (3,3),(4,4),(5,5) with (5,3) = value - 1) is packed.
  std::vector<std::pair<int, int>> m_free;

  void init(const std::vector<AnchorGroup>& g, int n_assets,
            const std::vector<RestrictionDescriptor>& rs) {
    groups = &g;
    n = n_assets;
    int at = 0;
    for (const auto& grp : g) {
      group_offset.push_back(at);
      at += grp.n_free;
    }
    free_rows_offset = at;
    at += 6 * (n - 4) * 14;

    std::set<std::pair<int, int>> fixed;
    for (const auto& d : rs) {
      using K = RestrictionDescriptor::Kind;
      if (d.kind == K::m_zero) fixed.insert({std::max(d.p, d.q), std::min(d.p, d.q)});
      if (d.kind == K::m_diag_one) fixed.insert({d.p, d.p});
    }
    // The coupled global-block entries are driven by one shared value.
    fixed.insert({3, 3});
    fixed.insert({4, 4});
    fixed.insert({5, 5});
    fixed.insert({5, 3});
    m_offset = at;
    for (int q = 0; q < 14; ++q)
      for (int p = q; p < 14; ++p)
        if (!fixed.count({p, q})) m_free.push_back({p, q});
    at += static_cast<int>(m_free.size()) + 1;  // plus the shared diagonal value
    sigma_offset = at;
    at += 6 * n;
    dim = at;
  }

  int shared_slot() const { return m_offset + static_cast<int>(m_free.size()); }

  Eigen::VectorXd pack(const TwoDayParams& td) const {
    Eigen::VectorXd x(dim);
    for (std::size_t gi = 0; gi < groups->size(); ++gi) {
      const auto& g = (*groups)[gi];
      for (int side = 0; side < 2; ++side) {
        const int r = rowblock_index(g.blocks[side], g.asset, n);
        for (const auto& [a, cls] : g.coord_class[side])
          x(group_offset[gi] + cls) = td.loading(r, a);
      }
    }
    int at = free_rows_offset;
    for (int k = 0; k < 6; ++k)
      for (int j = 4; j < n; ++j)
        for (int a = 0; a < 14; ++a) x(at++) = td.loading(rowblock_index(k, j, n), a);
    for (std::size_t i = 0; i < m_free.size(); ++i)
      x(m_offset + i) = td.factor_cov(m_free[i].first, m_free[i].second);
    x(shared_slot()) = td.factor_cov(3, 3);
    for (int r = 0; r < 6 * n; ++r) x(sigma_offset + r) = td.idio_var(r);
    return x;
  }

  TwoDayParams unpack(const Eigen::VectorXd& x) const {
    TwoDayParams td;
    td.n_assets = n;
    td.loading = Eigen::MatrixXd::Zero(6 * n, 14);
    td.factor_cov = Eigen::MatrixXd::Zero(14, 14);
    td.idio_var.resize(6 * n);
    for (std::size_t gi = 0; gi < groups->size(); ++gi) {
      const auto& g = (*groups)[gi];
      for (int side = 0; side < 2; ++side) {
        const int r = rowblock_index(g.blocks[side], g.asset, n);
        for (const auto& [a, cls] : g.coord_class[side])
          td.loading(r, a) = x(group_offset[gi] + cls);
      }
    }
    int at = free_rows_offset;
    for (int k = 0; k < 6; ++k)
      for (int j = 4; j < n; ++j)
        for (int a = 0; a < 14; ++a) td.loading(rowblock_index(k, j, n), a) = x(at++);
    for (int p = 9; p <= 12; ++p) td.factor_cov(p, p) = 1.0;
    for (std::size_t i = 0; i < m_free.size(); ++i) {
      td.factor_cov(m_free[i].first, m_free[i].second) = x(m_offset + i);
      td.factor_cov(m_free[i].second, m_free[i].first) = x(m_offset + i);
    }
    const double v = x(shared_slot());
    td.factor_cov(3, 3) = td.factor_cov(4, 4) = td.factor_cov(5, 5) = v;
    td.factor_cov(5, 3) = td.factor_cov(3, 5) = v - 1.0;
    for (int r = 0; r < 6 * n; ++r) td.idio_var(r) = x(sigma_offset + r);
    return td;
  }
};

// Likelihood and gradient on the restricted coordinates via
// d loglik = (T_f/2) tr(G dSigma), G = Sigma^{-1} S Sigma^{-1} - Sigma^{-1}.
bool restricted_eval(const RestrictedCoordinates& coords, const Eigen::VectorXd& x,
                     const Eigen::MatrixXd& stacked, double* loglik, Eigen::VectorXd* grad) {
  const int n = coords.n;
  const int rows = 6 * n;
  const int t_blocks = static_cast<int>(stacked.cols());
  const TwoDayParams td = coords.unpack(x);
  if ((td.idio_var.array() <= 0.0).any()) return false;

  const Eigen::VectorXd inv_var = td.idio_var.cwiseInverse();
  const Eigen::MatrixXd siginv_loading = inv_var.asDiagonal() * td.loading;
  const Eigen::MatrixXd gram = td.loading.transpose() * siginv_loading;
  Eigen::LDLT<Eigen::MatrixXd> m_ldlt(td.factor_cov);
  if (m_ldlt.info() != Eigen::Success || !m_ldlt.isPositive()) return false;
  const Eigen::MatrixXd m_inv = m_ldlt.solve(Eigen::MatrixXd::Identity(14, 14));
  Eigen::LDLT<Eigen::MatrixXd> core_ldlt(m_inv + gram);
  if (core_ldlt.info() != Eigen::Success || !core_ldlt.isPositive()) return false;

  const Eigen::MatrixXd c1 = siginv_loading.transpose() * stacked;
  const Eigen::MatrixXd core_c1 = core_ldlt.solve(c1);
  const Eigen::MatrixXd siginv_y = inv_var.asDiagonal() * stacked - siginv_loading * core_c1;
  const Eigen::MatrixXd w = siginv_loading - siginv_loading * core_ldlt.solve(gram);

  double logdet = td.idio_var.array().log().sum();
  logdet += m_ldlt.vectorD().array().log().sum();
  logdet += core_ldlt.vectorD().array().log().sum();
  const double trace_term = (stacked.array() * siginv_y.array()).sum() / t_blocks;
  *loglik = -0.5 * t_blocks * (rows * kLog2Pi + logdet + trace_term);
  if (!std::isfinite(*loglik)) return false;
  if (!grad) return true;

  const Eigen::MatrixXd yt_w = stacked.transpose() * w;
  const Eigen::MatrixXd g_lambda = siginv_y * yt_w / t_blocks - w;
  const Eigen::MatrixXd g_lambda_m = g_lambda * td.factor_cov;
  const Eigen::MatrixXd lt_g_l =
      yt_w.transpose() * yt_w / t_blocks - td.loading.transpose() * w;
  const Eigen::MatrixXd half = core_ldlt.solve(siginv_loading.transpose());

  grad->setZero(coords.dim);
  for (std::size_t gi = 0; gi < coords.groups->size(); ++gi) {
    const auto& g = (*coords.groups)[gi];
    for (int side = 0; side < 2; ++side) {
      const int r = rowblock_index(g.blocks[side], g.asset, n);
      for (const auto& [a, cls] : g.coord_class[side])
        (*grad)(coords.group_offset[gi] + cls) += t_blocks * g_lambda_m(r, a);
    }
  }
  int at = coords.free_rows_offset;
  for (int k = 0; k < 6; ++k)
    for (int j = 4; j < n; ++j) {
      const int r = rowblock_index(k, j, n);
      for (int a = 0; a < 14; ++a) (*grad)(at++) = t_blocks * g_lambda_m(r, a);
    }
  for (std::size_t i = 0; i < coords.m_free.size(); ++i) {
    const auto [p, q] = coords.m_free[i];
    (*grad)(coords.m_offset + i) = (p == q ? 0.5 : 1.0) * t_blocks * lt_g_l(p, q);
  }
  // Shared global diagonal value: moves (3,3),(4,4),(5,5) and (5,3),(3,5).
  (*grad)(coords.shared_slot()) =
      0.5 * t_blocks * (lt_g_l(3, 3) + lt_g_l(4, 4) + lt_g_l(5, 5)) +
      t_blocks * lt_g_l(5, 3);
  for (int r = 0; r < rows; ++r) {
    const double d1 = inv_var(r) - siginv_loading.row(r).dot(half.col(r));
    const double d2 = siginv_y.row(r).squaredNorm() / t_blocks;
    (*grad)(coords.sigma_offset + r) = 0.5 * t_blocks * (d2 - d1);
  }
  return true;
}

// L-BFGS ascent on the restriction set from a warm start; the final point
// satisfies every restriction by construction. The coordinates are scaled by
// square-root curvature estimates, which tames the wide spread between
// loading, covariance and variance directions.
TwoDayParams restricted_polish(const RestrictedCoordinates& coords, const TwoDayParams& start,
                               const Eigen::MatrixXd& stacked, int max_iter) {
  const int t_blocks = static_cast<int>(stacked.cols());
  Eigen::VectorXd scale = Eigen::VectorXd::Ones(coords.dim);
  {
    Eigen::LDLT<Eigen::MatrixXd> m_ldlt(start.factor_cov);
    const Eigen::MatrixXd m_inv = m_ldlt.solve(Eigen::MatrixXd::Identity(14, 14));
    const int n = coords.n;
    for (std::size_t gi = 0; gi < coords.groups->size(); ++gi) {
      const auto& g = (*coords.groups)[gi];
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(g.n_free);
      for (int side = 0; side < 2; ++side) {
        const int r = rowblock_index(g.blocks[side], g.asset, n);
        for (const auto& [a, cls] : g.coord_class[side])
          acc(cls) += t_blocks * start.factor_cov(a, a) / start.idio_var(r);
      }
      for (int c = 0; c < g.n_free; ++c)
        scale(coords.group_offset[gi] + c) = std::sqrt(std::max(acc(c), 1e-8));
    }
    int at = coords.free_rows_offset;
    for (int k = 0; k < 6; ++k)
      for (int j = 4; j < n; ++j) {
        const int r = rowblock_index(k, j, n);
        for (int a = 0; a < 14; ++a)
          scale(at++) = std::sqrt(
              std::max(t_blocks * start.factor_cov(a, a) / start.idio_var(r), 1e-8));
      }
    for (std::size_t i = 0; i < coords.m_free.size(); ++i) {
      const auto [p, q] = coords.m_free[i];
      const double curv =
          (p == q ? 0.5 : 1.0) * t_blocks *
          (m_inv(p, p) * m_inv(q, q) + m_inv(p, q) * m_inv(p, q));
      scale(coords.m_offset + i) = std::sqrt(std::max(curv, 1e-8));
    }
    scale(coords.shared_slot()) =
        std::sqrt(std::max(2.0 * t_blocks * m_inv(3, 3) * m_inv(3, 3), 1e-8));
    for (int r = 0; r < 6 * n; ++r)
      scale(coords.sigma_offset + r) = std::sqrt(
          std::max(0.5 * t_blocks / std::pow(start.idio_var(r), 2), 1e-8));
  }

  // Work in scaled coordinates z = scale .* x.
  auto eval_scaled = [&](const Eigen::VectorXd& z, double* f_out,
                         Eigen::VectorXd* g_out) -> bool {
    const Eigen::VectorXd x_raw = z.cwiseQuotient(scale);
    if (!restricted_eval(coords, x_raw, stacked, f_out, g_out)) return false;
    if (g_out) *g_out = g_out->cwiseQuotient(scale);
    return true;
  };

  Eigen::VectorXd x = coords.pack(start).cwiseProduct(scale);
  double f = 0.0;
  Eigen::VectorXd g(coords.dim);
  if (!eval_scaled(x, &f, &g))
    throw non_finite_likelihood_error("fit_qmle: invalid restricted polish start");

  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho_hist;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty())
      q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t i = 0; i < s_hist.size(); ++i)
      q += (alpha[i] - rho_hist[i] * y_hist[i].dot(q)) * s_hist[i];
    Eigen::VectorXd direction = q;
    if (direction.dot(g) <= 0.0) direction = g;

    double step = s_hist.empty() ? 1.0 / (1.0 + g.cwiseAbs().maxCoeff()) : 1.0;
    double f_new = 0.0;
    Eigen::VectorXd g_new, x_new;
    bool ok = false;
    for (int bt = 0; bt < 60; ++bt) {
      x_new = x + step * direction;
      if (eval_scaled(x_new, &f_new, &g_new) &&
          f_new >= f + 1e-4 * step * direction.dot(g)) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok && !s_hist.empty()) {
      // Stale curvature: drop the history and retry along the gradient.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      direction = g;
      step = 1.0 / (1.0 + g.cwiseAbs().maxCoeff());
      for (int bt = 0; bt < 60; ++bt) {
        x_new = x + step * direction;
        if (eval_scaled(x_new, &f_new, &g_new) &&
            f_new >= f + 1e-4 * step * direction.dot(g)) {
          ok = true;
          break;
        }
        step *= 0.5;
      }
    }
    if (!ok) break;
    const Eigen::VectorXd s_vec = x_new - x;
    const Eigen::VectorXd y_vec = g - g_new;
    const double sy = s_vec.dot(y_vec);
    if (sy > 1e-14) {
      s_hist.push_back(s_vec);
      y_hist.push_back(y_vec);
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > 10) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    x = x_new;
    f = f_new;
    g = g_new;
    if (g.cwiseAbs().maxCoeff() < 1e-10 * (1.0 + std::abs(f))) break;
  }
  return coords.unpack(x.cwiseQuotient(scale));
}

}  // namespace

TwoDayFitResult fit_qmle(const ReturnPanel& panel, const PanelLayout& layout,
                         const QmleOptions& opts, const std::optional<ModelParams>& start) {
  opts.em.validate();
  const auto rs = restriction_set(layout);
  const auto groups = build_anchor_groups(rs);
  const Eigen::MatrixXd stacked = stack_two_day(panel, layout);
  const int t_blocks = layout.day_blocks();
  const Eigen::VectorXd s_diag = stacked.rowwise().squaredNorm() / t_blocks;

  ModelParams init = start ? *start : starting_values(panel, layout, opts.em);
  TwoDayParams td = build_two_day(init, layout);

  TwoDayFitResult result;
  double foc = std::numeric_limits<double>::infinity();
  double prev_loglik = -std::numeric_limits<double>::infinity();

  // The plain EM crawls along weakly identified scale directions, so the
  // iteration is wrapped in a squared-extrapolation scheme with a monotone
  // safeguard: an extrapolated point is accepted only when its likelihood is
  // at least the plain two-step value.
  auto em_step = [&](const TwoDayParams& at, double* loglik_out) {
    const TwoDayEStep e = two_day_e_step(at, stacked);
    if (loglik_out) *loglik_out = e.loglik;
    return qmle_em_update(at, e, groups, s_diag);
  };

  // Warm-start phase: the EM is reliable from the structural start but slows
  // to a crawl near the optimum, where the quasi-Newton polish takes over.
  const int warm_start_iters = std::min(opts.em.max_iter, 200);
  int iter = 0;
  bool converged = false;
  while (iter < warm_start_iters && !converged) {
    double l0 = 0.0;
    const TwoDayEStep e0 = two_day_e_step(td, stacked);
    l0 = e0.loglik;
    foc = foc_residual_from(td, stacked, e0);
    if (opts.em.trace) result.loglik_trace.push_back(l0);
    const bool loglik_ok = iter > 0 && std::abs(l0 - prev_loglik) <=
                                           opts.em.rel_tol * (1.0 + std::abs(l0));
    prev_loglik = l0;
    if (foc <= opts.foc_tol || (loglik_ok && foc <= 1e-4)) {
      converged = true;
      break;
    }

    const TwoDayParams theta1 = qmle_em_update(td, e0, groups, s_diag);
    ++iter;
    double l1 = 0.0;
    const TwoDayParams theta2 = em_step(theta1, &l1);
    ++iter;

    const TwoDayParams r = td_diff(theta1, td);
    const TwoDayParams v = td_diff(td_diff(theta2, theta1), r);
    const double vnorm = td_norm(v);
    bool accepted = false;
    if (vnorm > 0.0) {
      const double alpha = std::min(-1.0, -td_norm(r) / vnorm);
      TwoDayParams trial = td_combine(td, -2.0 * alpha, r, alpha * alpha, v);
      if ((trial.idio_var.array() > 0.0).all()) {
        try {
          double l_trial = 0.0;
          const TwoDayParams stabilized = em_step(trial, &l_trial);
          ++iter;
          if (l_trial >= l1) {
            td = stabilized;
            accepted = true;
          }
        } catch (const std::exception&) {
          // fall back to the plain step
        }
      }
    }
    if (!accepted) td = theta2;
  }

  result.n_iter = iter;
  result.converged = converged;
  result.foc_residual = foc;

  // The EM alone crawls once it reaches the flat neighborhood of the optimum.
  // The profile solver drives the first-order conditions to tolerance; the EM
  // iterate then serves as the rotation reference.
  if (foc > opts.foc_tol) {
    ProfileMl profile(stacked, layout.n_assets);
    const ProfileMlResult prof = profile.solve(td.idio_var, opts.foc_tol, 600);
    result.n_iter += prof.n_iter;
    result.converged = prof.foc <= std::max(10.0 * opts.foc_tol, 1e-4);

    // Orient the factored solution toward the conforming EM iterate before
    // enforcing the restrictions exactly (least-squares alignment; the
    // factored loading carries identity factor covariance).
    const Eigen::MatrixXd gram = prof.loading_b.transpose() * prof.loading_b;
    const Eigen::MatrixXd target = prof.loading_b.transpose() * td.loading;
    const Eigen::MatrixXd c0 = Eigen::LDLT<Eigen::MatrixXd>(gram).solve(target);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(c0);
    if (!lu.isInvertible())
      throw rotation_failure_error("fit_qmle: degenerate alignment rotation");
    const Eigen::MatrixXd c0_inv = lu.inverse();

    td.loading = prof.loading_b * c0;
    td.factor_cov = c0_inv * c0_inv.transpose();
    td.factor_cov = 0.5 * (td.factor_cov + td.factor_cov.transpose()).eval();
    td.idio_var = prof.uniquenesses;
    if (opts.em.trace) result.loglik_trace.push_back(prof.loglik);
  }

  // Distance-minimizing rotation toward the restriction set. An exact
  // intersection generally does not exist in finite samples, so the minimized
  // distance is followed by an exact projection and a re-maximization on the
  // restriction set, which restores the first-order conditions while keeping
  // every restriction exact. When the rotation search finds no usable
  // minimum, the conforming EM iterate serves as the polish start instead.
  TwoDayParams em_iterate = td;
  try {
    result.rotation_distance =
        rotate_to_restrictions(td, rs, 1e-2, opts.rotation_max_iter);
  } catch (const rotation_failure_error&) {
    td = em_iterate;
    result.rotation_distance = std::numeric_limits<double>::quiet_NaN();
  }
  project_onto_restrictions(td, rs);
  {
    RestrictedCoordinates coords;
    coords.init(groups, layout.n_assets, rs);
    td = restricted_polish(coords, td, stacked, 500);
  }
  double violation_ssq = 0.0;
  for (const auto& d : rs) {
    const double v = d.violation(td);
    violation_ssq += v * v;
  }
  result.rotation_violation = violation_ssq;
  normalize_two_day_signs(td);
  result.params = td;
  result.foc_residual = qmle_foc_residual(td, stacked);
  result.converged = result.converged && result.foc_residual <= 1e-4 &&
                     violation_ssq <= opts.rotation_tol;
  result.factors = extract_factors_gls(td, stacked);
  return result;
}

double rotate_to_restrictions(TwoDayParams& td, const std::vector<RestrictionDescriptor>& rs,
                              double tol, int max_iter) {
  const int n = td.n_assets;

  // The loading zeros and equalities are homogeneous linear constraints on C,
  // so admissible rotations form a linear subspace; its dimension matches the
  // count of factor-covariance restrictions. The search then runs over that
  // subspace with only the covariance violations as residuals.
  std::vector<const RestrictionDescriptor*> m_restrictions;
  std::vector<Eigen::RowVectorXd> linear_rows;
  for (const auto& d : rs) {
    using K = RestrictionDescriptor::Kind;
    if (d.kind == K::loading_zero) {
      const auto lam = td.loading.row(rowblock_index(d.k1, d.j, n));
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(196);
      for (int u = 0; u < 14; ++u) row(d.a1 * 14 + u) = lam(u);
      linear_rows.push_back(row);
    } else if (d.kind == K::loading_equal) {
      const auto l1 = td.loading.row(rowblock_index(d.k1, d.j, n));
      const auto l2 = td.loading.row(rowblock_index(d.k2, d.j, n));
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(196);
      for (int u = 0; u < 14; ++u) {
        row(d.a1 * 14 + u) += l1(u);
        row(d.a2 * 14 + u) -= l2(u);
      }
      linear_rows.push_back(row);
    } else {
      m_restrictions.push_back(&d);
    }
  }
  const int n_m = static_cast<int>(m_restrictions.size());

  Eigen::MatrixXd constraints(linear_rows.size(), 196);
  for (std::size_t i = 0; i < linear_rows.size(); ++i) constraints.row(i) = linear_rows[i];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(constraints, Eigen::ComputeFullV);
  int rank = 0;
  for (int i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()(i) > 1e-10 * svd.singularValues()(0)) ++rank;
  const int null_dim = 196 - rank;
  if (null_dim != n_m)
    throw rotation_failure_error("rotate_to_restrictions: degenerate loading constraints");
  const Eigen::MatrixXd null_basis = svd.matrixV().rightCols(null_dim);  // 196 x n_m

  auto c_of = [&](const Eigen::VectorXd& beta) {
    Eigen::MatrixXd c_mat(14, 14);
    const Eigen::VectorXd flat = null_basis * beta;
    for (int v = 0; v < 14; ++v)
      for (int u = 0; u < 14; ++u) c_mat(u, v) = flat(v * 14 + u);  // C(u,v) at v*14+u
    return c_mat;
  };

  auto residual = [&](const Eigen::VectorXd& beta, Eigen::VectorXd& out) -> bool {
    const Eigen::MatrixXd c_mat = c_of(beta);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(c_mat);
    if (!lu.isInvertible()) return false;
    const Eigen::MatrixXd x = lu.inverse();
    const Eigen::MatrixXd m_rot = x * td.factor_cov * x.transpose();
    out.resize(n_m);
    for (int i = 0; i < n_m; ++i) {
      const auto& d = *m_restrictions[i];
      using K = RestrictionDescriptor::Kind;
      switch (d.kind) {
        case K::m_zero: out(i) = m_rot(d.p, d.q); break;
        case K::m_diag_one: out(i) = m_rot(d.p, d.p) - 1.0; break;
        case K::m_equal: out(i) = m_rot(d.p, d.q) - m_rot(d.p2, d.q2); break;
        case K::m_pair_diff_one: out(i) = m_rot(d.p, d.q) - m_rot(d.p2, d.q2) - 1.0; break;
        default: out(i) = 0.0; break;
      }
      if (!std::isfinite(out(i))) return false;
    }
    return true;
  };

  // Analytic Jacobian of the covariance residuals on the reduced
  // coordinates: dM' = -X dC M' - M' dC' X' with X = C^{-1}.
  auto jacobian = [&](const Eigen::VectorXd& beta, Eigen::MatrixXd& jac) -> bool {
    const Eigen::MatrixXd c_mat = c_of(beta);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(c_mat);
    if (!lu.isInvertible()) return false;
    const Eigen::MatrixXd x = lu.inverse();
    const Eigen::MatrixXd m_rot = x * td.factor_cov * x.transpose();
    jac.resize(n_m, n_m);
    for (int j = 0; j < n_m; ++j) {
      Eigen::MatrixXd dc(14, 14);
      for (int v = 0; v < 14; ++v)
        for (int u = 0; u < 14; ++u) dc(u, v) = null_basis(v * 14 + u, j);
      const Eigen::MatrixXd half = x * dc * m_rot;
      const Eigen::MatrixXd dm = -half - half.transpose();
      for (int i = 0; i < n_m; ++i) {
        const auto& d = *m_restrictions[i];
        using K = RestrictionDescriptor::Kind;
        switch (d.kind) {
          case K::m_zero: jac(i, j) = dm(d.p, d.q); break;
          case K::m_diag_one: jac(i, j) = dm(d.p, d.p); break;
          case K::m_equal: jac(i, j) = dm(d.p, d.q) - dm(d.p2, d.q2); break;
          case K::m_pair_diff_one: jac(i, j) = dm(d.p, d.q) - dm(d.p2, d.q2); break;
          default: jac(i, j) = 0.0; break;
        }
      }
    }
    return true;
  };

  // A stall is usable only when the implied rotation stays well conditioned;
  // the residuals constrain just the restricted covariance entries, so an
  // unguarded search can drift to near-singular rotations.
  auto sane = [&](const Eigen::VectorXd& beta) -> bool {
    const Eigen::MatrixXd c_mat = c_of(beta);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(c_mat);
    if (!lu.isInvertible()) return false;
    const Eigen::MatrixXd x = lu.inverse();
    const Eigen::MatrixXd m_rot = x * td.factor_cov * x.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m_rot);
    return eig.eigenvalues().minCoeff() > 2e-2 && eig.eigenvalues().maxCoeff() < 1e3;
  };

  // Ridge-homotopy Gauss-Newton: each stage minimizes |r|^2 + mu |beta-ref|^2
  // with shrinking mu, which keeps the path inside the well-conditioned
  // valley around the reference instead of sliding into degenerate rotations.
  auto solve_from = [&](Eigen::VectorXd& beta, double* final_ssq) -> bool {
    const Eigen::VectorXd ref = beta;
    Eigen::VectorXd r;
    if (!residual(beta, r)) return false;
    double mu = 1e-2 * std::max(r.squaredNorm(), 1e-8) / std::max(1.0, ref.squaredNorm());
    for (int stage = 0; stage < 12; ++stage, mu *= 0.1) {
      double obj = r.squaredNorm() + mu * (beta - ref).squaredNorm();
      for (int it = 0; it < max_iter; ++it) {
        Eigen::MatrixXd jac;
        if (!jacobian(beta, jac)) return false;
        bool stepped = false;
        double damping = 1e-10;
        Eigen::MatrixXd jtj = jac.transpose() * jac;
        jtj.diagonal().array() += mu;
        const Eigen::VectorXd jtr = jac.transpose() * r + mu * (beta - ref);
        const double radius = std::max(0.5 * beta.norm(), 0.5);
        for (int attempt = 0; attempt < 24; ++attempt) {
          Eigen::MatrixXd lhs = jtj;
          lhs.diagonal().array() += damping * (jtj.diagonal().array().abs() + 1e-14);
          Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
          if (ldlt.info() != Eigen::Success) {
            damping *= 30.0;
            continue;
          }
          Eigen::VectorXd delta = ldlt.solve(-jtr);
          if (delta.norm() > radius) {
            damping *= 30.0;
            continue;
          }
          Eigen::VectorXd r_try;
          const Eigen::VectorXd beta_try = beta + delta;
          if (residual(beta_try, r_try)) {
            const double obj_try =
                r_try.squaredNorm() + mu * (beta_try - ref).squaredNorm();
            if (obj_try < obj) {
              beta = beta_try;
              r = r_try;
              obj = obj_try;
              stepped = true;
              break;
            }
          }
          damping *= 30.0;
        }
        if (!stepped) break;
        if (obj < 1e-28) break;
      }
      if (!sane(beta)) break;  // keep the last sane stage result
    }
    *final_ssq = r.squaredNorm();
    return *final_ssq <= tol && sane(beta);
  };

  // Start at the subspace point closest to the identity, then jittered
  // restarts scaled to it.
  Eigen::VectorXd ident_flat(196);
  for (int v = 0; v < 14; ++v)
    for (int u = 0; u < 14; ++u) ident_flat(v * 14 + u) = (u == v) ? 1.0 : 0.0;
  const Eigen::VectorXd beta0 = null_basis.transpose() * ident_flat;

  double best_ssq = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_beta;
  std::mt19937_64 jitter_engine(12345);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double scale0 = std::max(beta0.norm(), 1.0);
  for (int attempt = 0; attempt < 24; ++attempt) {
    Eigen::VectorXd beta = beta0;
    if (attempt > 0) {
      const double jitter = scale0 * (attempt < 8 ? 0.1 : attempt < 16 ? 0.4 : 1.0);
      for (int i = 0; i < beta.size(); ++i) beta(i) += jitter * gauss(jitter_engine);
    }
    double ssq = std::numeric_limits<double>::infinity();
    if (solve_from(beta, &ssq)) {
      best_ssq = ssq;
      best_beta = beta;
      break;
    }
    if (ssq < best_ssq && sane(beta)) {
      best_ssq = ssq;
      best_beta = beta;
    }
  }
  if (!(best_ssq <= tol))
  {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", best_ssq);
    throw rotation_failure_error(
        std::string("rotate_to_restrictions: stalled at squared violation ") + buf);
  }

  const Eigen::MatrixXd c_mat = c_of(best_beta);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(c_mat);
  const Eigen::MatrixXd x = lu.inverse();
  td.loading = (td.loading * c_mat).eval();
  Eigen::MatrixXd m_rot = x * td.factor_cov * x.transpose();
  td.factor_cov = 0.5 * (m_rot + m_rot.transpose());
  return best_ssq;
}

const std::vector<std::vector<int>>& two_day_sign_groups() {
  // Column-sign changes that leave every one of the 196 restrictions
  // invariant: equality ties glue columns, and the unit difference
  // restriction on the global block glues columns 3 and 5.
  static const std::vector<std::vector<int>> groups = {
      {0, 2, 3, 5, 6}, {1, 4, 7}, {8, 11}, {9}, {10, 13}, {12}};
  return groups;
}

namespace {

void flip_two_day(TwoDayParams& td, const std::vector<int>& cols) {
  for (int c : cols) {
    td.loading.col(c) *= -1.0;
    td.factor_cov.row(c) *= -1.0;
    td.factor_cov.col(c) *= -1.0;
  }
}

}  // namespace

void normalize_two_day_signs(TwoDayParams& td) {
  const int n = td.n_assets;
  // Reference entry per free sign group: a designated first-asset loading.
  const std::vector<std::pair<int, int>> pins = {
      {rowblock_index(0, 0, n), 5},  {rowblock_index(0, 0, n), 7},
      {rowblock_index(2, 0, n), 11}, {rowblock_index(4, 0, n), 9},
      {rowblock_index(0, 0, n), 13}, {rowblock_index(1, 0, n), 12}};
  const auto& groups = two_day_sign_groups();
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (td.loading(pins[g].first, pins[g].second) < 0.0) flip_two_day(td, groups[g]);
}

void align_two_day_signs_to(TwoDayParams& td, const TwoDayParams& reference) {
  for (const auto& group : two_day_sign_groups()) {
    double dot = 0.0;
    for (int c : group) dot += td.loading.col(c).dot(reference.loading.col(c));
    if (dot < 0.0) flip_two_day(td, group);
  }
}

Eigen::MatrixXd extract_factors_gls(const TwoDayParams& td, const Eigen::MatrixXd& stacked) {
  if (stacked.rows() != td.rows())
    throw invalid_parameter_error("extract_factors_gls: dimension mismatch");
  const Eigen::VectorXd inv_var = td.idio_var.cwiseInverse();
  const Eigen::MatrixXd siginv_loading = inv_var.asDiagonal() * td.loading;
  const Eigen::MatrixXd gram = td.loading.transpose() * siginv_loading;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw singular_solve_error("extract_factors_gls: Lambda' Sigma^{-1} Lambda singular");
  return ldlt.solve(siginv_loading.transpose() * stacked);
}

std::pair<double, Eigen::VectorXd> qmle_res_loglik_gradient(const ModelParams& params,
                                                            const Eigen::MatrixXd& stacked,
                                                            const PanelLayout& layout) {
  const int n = layout.n_assets;
  const int t_blocks = layout.day_blocks();
  const TwoDayParams td = build_two_day(params, layout);
  const TwoDayEStep e = two_day_e_step(td, stacked);
  const Eigen::VectorXd s_diag = stacked.rowwise().squaredNorm() / t_blocks;

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(packed_dim(n));
  int at = 0;
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < n; ++j) {
      Eigen::Vector4d g = Eigen::Vector4d::Zero();
      for (int k : {c, c + 3}) {
        const int r = rowblock_index(k, j, n);
        const Eigen::VectorXd lam = td.loading.row(r);
        const Eigen::VectorXd resid = e.w_fy.col(r) - e.w_ff * lam;
        for (int lag = 0; lag < 4; ++lag) g(lag) += resid(factor_column(k, lag));
      }
      g *= t_blocks / params.idio_var[c](j);
      for (int lag = 0; lag < 4; ++lag) grad(at++) = g(lag);
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < n; ++j) {
      double resid = 0.0;
      for (int k : {c, c + 3}) {
        const int r = rowblock_index(k, j, n);
        const Eigen::VectorXd lam = td.loading.row(r);
        resid += s_diag(r) - 2.0 * lam.dot(e.w_fy.col(r)) + lam.dot(e.w_ff * lam);
      }
      const double v = params.idio_var[c](j);
      grad(at++) = -0.5 * t_blocks * (2.0 / v - resid / (v * v));
    }
  }
  const double interior = e.w_ff.diagonal().segment(1, 6).sum();
  double offdiag = 0.0;
  for (int i = 0; i < 7; ++i) offdiag += e.w_ff(i, i + 1);
  const double phi = params.phi;
  grad(at) = -0.5 * t_blocks *
             (2.0 * phi / (1.0 - phi * phi) + 2.0 * phi * interior - 2.0 * offdiag);
  return {e.loglik, grad};
}

}  // namespace sdfm
