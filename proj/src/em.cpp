#include "sdfm/em.hpp"

#include <algorithm>
#include <cmath>

#include "sdfm/state_space.hpp"

namespace sdfm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kPhiCap = 0.999;
constexpr double kVarFloor = 1e-10;
constexpr double kMonotoneSlack = 1e-6;

double sup_change(const ModelParams& a, const ModelParams& b) {
  double d = std::abs(a.phi - b.phi);
  for (int c = 0; c < 3; ++c) {
    d = std::max(d, (a.loadings[c] - b.loadings[c]).cwiseAbs().maxCoeff());
    d = std::max(d, (a.idio_var[c] - b.idio_var[c]).cwiseAbs().maxCoeff());
  }
  return d;
}

struct ContinentMoments {
  // Sums over the continent's periods of smoothed state moments and data
  // cross products; per-asset versions carry masked data.
  Eigen::Matrix4d state_sq = Eigen::Matrix4d::Zero();       // sum E[aa'] (all periods)
  Eigen::MatrixXd cross;                                    // 4 x N, sum E[a] y_i
  Eigen::VectorXd ssq;                                      // per-asset sum y^2
  std::vector<Eigen::Matrix4d> state_sq_row;                // per-asset, masked path only
  Eigen::VectorXi count;                                    // per-asset observations
  bool masked = false;
};

std::array<ContinentMoments, 3> accumulate_moments(const SmoothedMoments& moments,
                                                   const ReturnPanel& panel,
                                                   const PanelLayout& layout) {
  const int n = layout.n_assets;
  const bool full = panel.fully_observed();
  std::array<ContinentMoments, 3> acc;
  for (int c = 0; c < 3; ++c) {
    acc[c].cross = Eigen::MatrixXd::Zero(4, n);
    acc[c].ssq = Eigen::VectorXd::Zero(n);
    acc[c].count = Eigen::VectorXi::Zero(n);
    acc[c].masked = !full;
    if (!full) acc[c].state_sq_row.assign(n, Eigen::Matrix4d::Zero());
  }
  for (int t = 0; t < layout.n_periods; ++t) {
    const int c = t % 3;
    acc[c].state_sq += moments.second_moment[t];
    const Eigen::Vector4d& m = moments.mean[t];
    for (int i = 0; i < n; ++i) {
      if (!panel.observed(t, i)) continue;
      const double y = panel.values[t](i);
      acc[c].cross.col(i) += m * y;
      acc[c].ssq(i) += y * y;
      acc[c].count(i) += 1;
      if (!full) acc[c].state_sq_row[i] += moments.second_moment[t];
    }
  }
  return acc;
}

}  // namespace

int packed_dim(int n_assets) { return 15 * n_assets + 1; }

Eigen::VectorXd pack_params(const ModelParams& params) {
  const int n = params.n_assets();
  Eigen::VectorXd theta(packed_dim(n));
  int at = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 4; ++j) theta(at++) = params.loadings[c](i, j);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i) theta(at++) = params.idio_var[c](i);
  theta(at) = params.phi;
  return theta;
}

ModelParams unpack_params(const Eigen::VectorXd& theta, int n_assets) {
  if (theta.size() != packed_dim(n_assets))
    throw invalid_parameter_error("unpack_params: wrong length");
  ModelParams p = ModelParams::zeros(n_assets);
  int at = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n_assets; ++i)
      for (int j = 0; j < 4; ++j) p.loadings[c](i, j) = theta(at++);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n_assets; ++i) p.idio_var[c](i) = theta(at++);
  p.phi = theta(at);
  return p;
}

void normalize_signs(ModelParams& params) {
  // One sign degree of freedom for the global factor (its lags move with it)
  // and one per continental factor. The pins are the first asset's designated
  // loadings; the global pin sums the three Asian global columns so it stays
  // stable when a single entry is near zero.
  const double gpin = params.loadings[kAsia].row(0).head<3>().sum();
  if (gpin < 0.0)
    for (int c = 0; c < 3; ++c) params.loadings[c].leftCols<3>() *= -1.0;
  for (int c = 0; c < 3; ++c)
    if (params.loadings[c](0, 3) < 0.0) params.loadings[c].col(3) *= -1.0;
}

void align_signs_to(ModelParams& params, const ModelParams& reference) {
  double gdot = 0.0;
  for (int c = 0; c < 3; ++c)
    gdot += (params.loadings[c].leftCols<3>().array() * reference.loadings[c].leftCols<3>().array())
                .sum();
  if (gdot < 0.0)
    for (int c = 0; c < 3; ++c) params.loadings[c].leftCols<3>() *= -1.0;
  for (int c = 0; c < 3; ++c)
    if (params.loadings[c].col(3).dot(reference.loadings[c].col(3)) < 0.0)
      params.loadings[c].col(3) *= -1.0;
}

ModelParams one_day_m_step(const SmoothedMoments& moments, const ReturnPanel& panel,
                           const PanelLayout& layout) {
  const int n = layout.n_assets;
  const auto acc = accumulate_moments(moments, panel, layout);
  ModelParams out = ModelParams::zeros(n);

  for (int c = 0; c < 3; ++c) {
    Eigen::LDLT<Eigen::Matrix4d> shared;
    if (!acc[c].masked) {
      shared.compute(acc[c].state_sq);
      if (shared.info() != Eigen::Success || !shared.isPositive())
        throw singular_moment_error("m-step: singular smoothed second-moment sum");
    }
    for (int i = 0; i < n; ++i) {
      if (acc[c].count(i) == 0)
        throw singular_moment_error("m-step: asset with no observations");
      Eigen::Vector4d z;
      Eigen::Matrix4d row_sq;
      if (acc[c].masked) {
        row_sq = acc[c].state_sq_row[i];
        Eigen::LDLT<Eigen::Matrix4d> ldlt(row_sq);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
          throw singular_moment_error("m-step: singular per-asset moment matrix");
        z = ldlt.solve(acc[c].cross.col(i));
      } else {
        row_sq = acc[c].state_sq;
        z = shared.solve(acc[c].cross.col(i));
      }
      out.loadings[c].row(i) = z;
      const double resid =
          acc[c].ssq(i) - 2.0 * z.dot(acc[c].cross.col(i)) + z.dot(row_sq * z);
      out.idio_var[c](i) = std::max(resid / acc[c].count(i), kVarFloor);
    }
  }

  double num = 0.0, den = 0.0;
  for (int t = 0; t < layout.n_periods; ++t) {
    num += moments.second_moment[t](0, 1);
    den += moments.second_moment[t](1, 1);
  }
  if (!(den > 0.0)) throw singular_moment_error("m-step: degenerate lagged factor moment");
  out.phi = std::clamp(num / den, -kPhiCap, kPhiCap);
  return out;
}

double expected_complete_loglik(const ModelParams& eval, const SmoothedMoments& moments,
                                const ReturnPanel& panel, const PanelLayout& layout) {
  const int n = layout.n_assets;
  double q = 0.0;
  for (int t = 0; t < layout.n_periods; ++t) {
    const int c = t % 3;
    const Eigen::Vector4d& m = moments.mean[t];
    const Eigen::Matrix4d& sq = moments.second_moment[t];
    for (int i = 0; i < n; ++i) {
      if (!panel.observed(t, i)) continue;
      const Eigen::Vector4d z = eval.loadings[c].row(i);
      const double y = panel.values[t](i);
      const double expect_sq = y * y - 2.0 * y * z.dot(m) + z.dot(sq * z);
      q -= 0.5 * (kLog2Pi + std::log(eval.idio_var[c](i)) + expect_sq / eval.idio_var[c](i));
    }
    // Global-factor innovation term; the continental one is parameter free.
    q -= 0.5 * (sq(0, 0) - 2.0 * eval.phi * sq(0, 1) + eval.phi * eval.phi * sq(1, 1));
  }
  return q;
}

FitResult fit_mle_one_day(const ReturnPanel& panel, const PanelLayout& layout,
                          const EmOptions& opts, const std::optional<ModelParams>& start) {
  opts.validate();
  layout.validate();
  ModelParams params = start ? *start : starting_values(panel, layout, opts);
  params.validate();
  normalize_signs(params);

  FitResult result;
  double prev_loglik = -std::numeric_limits<double>::infinity();
  ModelParams prev = params;

  int iter = 0;
  for (; iter < opts.max_iter; ++iter) {
    const StateSpaceSystem sys = build_state_space(params, layout);
    const SmoothedMoments moments = smooth(sys, panel);
    const double loglik = moments.total_loglik;
    if (!std::isfinite(loglik))
      throw non_finite_likelihood_error("fit_mle_one_day: non-finite log-likelihood");
    if (opts.trace) result.loglik_trace.push_back(loglik);
    if (iter > 0 && loglik < prev_loglik - kMonotoneSlack)
      throw non_monotone_likelihood_error("fit_mle_one_day: EM log-likelihood decreased");

    ModelParams next = one_day_m_step(moments, panel, layout);
    normalize_signs(next);

    const bool loglik_ok = iter > 0 && std::abs(loglik - prev_loglik) <=
                                           opts.rel_tol * (1.0 + std::abs(loglik));
    const bool param_ok = sup_change(next, params) <= opts.param_tol;
    prev_loglik = loglik;
    prev = params;
    params = next;
    if (loglik_ok || param_ok) {
      result.converged = true;
      ++iter;
      break;
    }
  }

  result.n_iter = iter;
  result.params = params;

  // Final likelihood and smoothed factor path at the returned parameters.
  const StateSpaceSystem sys = build_state_space(params, layout);
  const SmoothedMoments moments = smooth(sys, panel);
  if (opts.trace) result.loglik_trace.push_back(moments.total_loglik);
  result.factors.resize(4, layout.n_periods);
  for (int t = 0; t < layout.n_periods; ++t) result.factors.col(t) = moments.mean[t];
  return result;
}

ModelParams starting_values(const ReturnPanel& panel, const PanelLayout& layout,
                            const EmOptions& opts) {
  opts.validate();
  layout.validate();
  if (panel.n_periods() != layout.n_periods || panel.n_assets() != layout.n_assets)
    throw invalid_parameter_error("starting_values: panel/layout mismatch");
  if (layout.day_blocks() < 12)
    throw invalid_parameter_error("starting_values: need at least 12 two-day blocks");

  const int n = layout.n_assets;

  // Sanity scan: every asset series must vary.
  std::array<double, 3> avg_var{};
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      double sum = 0.0, ssq = 0.0;
      int cnt = 0;
      for (int t = c; t < layout.n_periods; t += 3) {
        if (!panel.observed(t, i)) continue;
        sum += panel.values[t](i);
        ssq += panel.values[t](i) * panel.values[t](i);
        ++cnt;
      }
      if (cnt < 2) throw degenerate_input_error("starting_values: too few observations");
      const double var = ssq / cnt - (sum / cnt) * (sum / cnt);
      if (!(var > 0.0)) throw degenerate_input_error("starting_values: zero-variance asset");
      avg_var[c] += var / n;
    }
  }

  // Restricted model: per continent one scalar for the global columns, one
  // for the continental column, one idiosyncratic variance.
  std::array<double, 3> a, b, s;
  for (int c = 0; c < 3; ++c) {
    a[c] = std::sqrt(std::max(avg_var[c] / 5.0, 1e-4));
    b[c] = a[c];
    s[c] = std::max(avg_var[c] / 2.0, 1e-4);
  }
  double phi = 0.0;

  auto expand = [&]() {
    ModelParams p = ModelParams::zeros(n, phi);
    for (int c = 0; c < 3; ++c) {
      p.loadings[c].leftCols<3>().setConstant(a[c]);
      p.loadings[c].col(3).setConstant(b[c]);
      p.idio_var[c].setConstant(s[c]);
    }
    return p;
  };

  double prev_loglik = -std::numeric_limits<double>::infinity();
  bool converged = false;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    const ModelParams params = expand();
    const StateSpaceSystem sys = build_state_space(params, layout);
    const SmoothedMoments moments = smooth(sys, panel);
    if (iter > 0 &&
        std::abs(moments.total_loglik - prev_loglik) <=
            std::max(opts.rel_tol, 1e-7) * (1.0 + std::abs(moments.total_loglik))) {
      converged = true;
      break;
    }
    prev_loglik = moments.total_loglik;

    // Restricted M-step: g = sum of the three global states, h = continental.
    for (int c = 0; c < 3; ++c) {
      double sgg = 0.0, sgh = 0.0, shh = 0.0, syg = 0.0, syh = 0.0, ssq = 0.0;
      double nobs = 0.0, wgg = 0.0, wgh = 0.0, whh = 0.0;
      for (int t = c; t < layout.n_periods; t += 3) {
        const Eigen::Matrix4d& sq = moments.second_moment[t];
        const Eigen::Vector4d& m = moments.mean[t];
        const double gg = sq.topLeftCorner<3, 3>().sum();
        const double gh = sq.block<3, 1>(0, 3).sum();
        const double hh = sq(3, 3);
        const double gmean = m.head<3>().sum();
        const int cnt = panel.observed_count(t);
        double ysum = 0.0;
        for (int i = 0; i < n; ++i) {
          if (!panel.observed(t, i)) continue;
          ysum += panel.values[t](i);
          ssq += panel.values[t](i) * panel.values[t](i);
        }
        sgg += gg;
        sgh += gh;
        shh += hh;
        syg += gmean * ysum;
        syh += m(3) * ysum;
        nobs += cnt;
        wgg += cnt * gg;
        wgh += cnt * gh;
        whh += cnt * hh;
      }
      Eigen::Matrix2d lhs;
      lhs << wgg, wgh, wgh, whh;
      Eigen::Vector2d rhs(syg, syh);
      Eigen::Vector2d ab = lhs.ldlt().solve(rhs);
      a[c] = ab(0);
      b[c] = ab(1);
      const double resid = ssq - 2.0 * a[c] * syg - 2.0 * b[c] * syh + a[c] * a[c] * wgg +
                           2.0 * a[c] * b[c] * wgh + b[c] * b[c] * whh;
      s[c] = std::max(resid / nobs, kVarFloor);
    }
    double num = 0.0, den = 0.0;
    for (int t = 0; t < layout.n_periods; ++t) {
      num += moments.second_moment[t](0, 1);
      den += moments.second_moment[t](1, 1);
    }
    phi = std::clamp(num / den, -kPhiCap, kPhiCap);
  }
  if (!converged)
    throw non_convergence_error("starting_values: restricted EM did not converge");

  ModelParams out = expand();
  normalize_signs(out);
  return out;
}

std::pair<double, Eigen::VectorXd> one_day_loglik_gradient(const ModelParams& params,
                                                           const ReturnPanel& panel,
                                                           const PanelLayout& layout) {
  const StateSpaceSystem sys = build_state_space(params, layout);
  const SmoothedMoments moments = smooth(sys, panel);
  const int n = layout.n_assets;
  const auto acc = accumulate_moments(moments, panel, layout);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(packed_dim(n));
  int at = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector4d z = params.loadings[c].row(i);
      const Eigen::Matrix4d& sq = acc[c].masked ? acc[c].state_sq_row[i] : acc[c].state_sq;
      const Eigen::Vector4d g = (acc[c].cross.col(i) - sq * z) / params.idio_var[c](i);
      for (int j = 0; j < 4; ++j) grad(at++) = g(j);
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector4d z = params.loadings[c].row(i);
      const Eigen::Matrix4d& sq = acc[c].masked ? acc[c].state_sq_row[i] : acc[c].state_sq;
      const double resid =
          acc[c].ssq(i) - 2.0 * z.dot(acc[c].cross.col(i)) + z.dot(sq * z);
      const double v = params.idio_var[c](i);
      grad(at++) = -0.5 * acc[c].count(i) / v + 0.5 * resid / (v * v);
    }
  }
  double num = 0.0, den = 0.0;
  for (int t = 0; t < layout.n_periods; ++t) {
    num += moments.second_moment[t](0, 1);
    den += moments.second_moment[t](1, 1);
  }
  grad(at) = num - params.phi * den;
  return {moments.total_loglik, grad};
}

}  // namespace sdfm
