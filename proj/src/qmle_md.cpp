#include "sdfm/qmle_md.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sdfm/inference.hpp"

namespace sdfm {

void append_loading_row(Selector& sel, int k, int j) {
  for (int comp = 0; comp < 14; ++comp) sel.push_back(SelectorEntry::loading(k, j, comp));
}

Selector loading_selector(int continent, int asset, const PanelLayout& layout) {
  layout.validate();
  if (layout.n_assets < 5)
    throw layout_too_small_error("loading_selector: needs at least 5 assets");
  if (asset < 0 || asset >= layout.n_assets)
    throw index_error("loading_selector: asset out of range");

  Selector sel;
  append_loading_row(sel, continent, asset);
  append_loading_row(sel, continent + 3, asset);
  for (int other = 0; other < 3; ++other) {
    if (other == continent) continue;
    for (int j : {0, 4}) {
      append_loading_row(sel, other, j);
      append_loading_row(sel, other + 3, j);
    }
  }
  return sel;
}

Selector phi_selector(const PanelLayout& layout) {
  layout.validate();
  Selector sel;
  for (int k = 0; k < 6; ++k) append_loading_row(sel, k, 0);
  for (int q = 0; q < 14; ++q)
    for (int p = q; p < 14; ++p) sel.push_back(SelectorEntry::m_entry(p, q));
  return sel;
}

int ThetaMap::z_offset(int continent, int asset) const {
  for (std::size_t i = 0; i < z_blocks.size(); ++i)
    if (z_blocks[i] == std::make_pair(continent, asset)) return 4 * static_cast<int>(i);
  throw index_error("ThetaMap: loading block not present");
}

int ThetaMap::sigma_offset(int k, int j) const {
  const int base = phi_offset() + (has_phi ? 1 : 0);
  for (std::size_t i = 0; i < sigmas.size(); ++i)
    if (sigmas[i] == std::make_pair(k, j)) return base + static_cast<int>(i);
  throw index_error("ThetaMap: sigma entry not present");
}

ThetaMap theta_map_for(const Selector& sel) {
  if (sel.empty()) throw index_error("theta_map_for: empty selector");
  ThetaMap map;
  for (const auto& e : sel) {
    switch (e.kind) {
      case SelectorEntry::Kind::loading: {
        const std::pair<int, int> key{continent_of_block(e.k), e.j};
        if (std::find(map.z_blocks.begin(), map.z_blocks.end(), key) == map.z_blocks.end())
          map.z_blocks.push_back(key);
        break;
      }
      case SelectorEntry::Kind::m_entry:
        map.has_phi = true;
        break;
      case SelectorEntry::Kind::sigma2: {
        const std::pair<int, int> key{e.k, e.j};
        if (std::find(map.sigmas.begin(), map.sigmas.end(), key) == map.sigmas.end())
          map.sigmas.push_back(key);
        break;
      }
    }
  }
  return map;
}

Eigen::VectorXd assemble_h(const TwoDayParams& fit, const Selector& sel) {
  if (sel.empty()) throw index_error("assemble_h: empty selector");
  const int n = fit.n_assets;
  Eigen::VectorXd h(sel.size());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const auto& e = sel[i];
    switch (e.kind) {
      case SelectorEntry::Kind::loading: {
        if (e.k < 0 || e.k >= 6 || e.j < 0 || e.j >= n || e.comp < 0 || e.comp >= 14)
          throw index_error("assemble_h: loading index out of range");
        h(i) = fit.loading(rowblock_index(e.k, e.j, n), e.comp);
        break;
      }
      case SelectorEntry::Kind::sigma2:
        if (e.k < 0 || e.k >= 6 || e.j < 0 || e.j >= n)
          throw index_error("assemble_h: sigma index out of range");
        h(i) = fit.idio_var(rowblock_index(e.k, e.j, n));
        break;
      case SelectorEntry::Kind::m_entry:
        if (e.p < 0 || e.p >= 14 || e.q < 0 || e.q >= 14)
          throw index_error("assemble_h: covariance index out of range");
        h(i) = fit.factor_cov(e.p, e.q);
        break;
    }
  }
  return h;
}

Eigen::VectorXd h_of_theta(const Eigen::VectorXd& theta, const Selector& sel,
                           const ThetaMap& map) {
  if (theta.size() != map.dim()) throw invalid_parameter_error("h_of_theta: theta length");
  double phi = 0.0;
  if (map.has_phi) {
    phi = theta(map.phi_offset());
    if (std::abs(phi) >= 1.0) throw invalid_parameter_error("h_of_theta: |phi| must be < 1");
  }

  Eigen::VectorXd h(sel.size());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const auto& e = sel[i];
    switch (e.kind) {
      case SelectorEntry::Kind::loading: {
        const int off = map.z_offset(continent_of_block(e.k), e.j);
        double value = 0.0;
        for (int lag = 0; lag < 4; ++lag)
          if (factor_column(e.k, lag) == e.comp) value = theta(off + lag);
        h(i) = value;
        break;
      }
      case SelectorEntry::Kind::sigma2:
        h(i) = theta(map.sigma_offset(e.k, e.j));
        break;
      case SelectorEntry::Kind::m_entry: {
        if (e.p < 8 && e.q < 8)
          h(i) = std::pow(phi, std::abs(e.p - e.q)) / (1.0 - phi * phi);
        else
          h(i) = (e.p == e.q) ? 1.0 : 0.0;
        break;
      }
    }
  }
  return h;
}

Eigen::MatrixXd jacobian_h(const Eigen::VectorXd& theta, const Selector& sel,
                           const ThetaMap& map) {
  const int c1 = static_cast<int>(sel.size());
  const int c2 = map.dim();
  Eigen::MatrixXd jac(c1, c2);
  for (int i = 0; i < c2; ++i) {
    const double step = 1e-6 * std::max(1.0, std::abs(theta(i)));
    auto central = [&](double h_step) {
      Eigen::VectorXd up = theta, down = theta;
      up(i) += h_step;
      down(i) -= h_step;
      return ((h_of_theta(up, sel, map) - h_of_theta(down, sel, map)) / (2.0 * h_step)).eval();
    };
    const Eigen::VectorXd coarse = central(step);
    const Eigen::VectorXd fine = central(0.5 * step);
    jac.col(i) = (4.0 * fine - coarse) / 3.0;
  }
  return jac;
}

Eigen::VectorXd md_theta_start(const TwoDayParams& fit, const ThetaMap& map) {
  const int n = fit.n_assets;
  Eigen::VectorXd theta(map.dim());
  for (std::size_t b = 0; b < map.z_blocks.size(); ++b) {
    const auto [c, j] = map.z_blocks[b];
    for (int lag = 0; lag < 4; ++lag) {
      const double day1 = fit.loading(rowblock_index(c, j, n), factor_column(c, lag));
      const double day2 = fit.loading(rowblock_index(c + 3, j, n), factor_column(c + 3, lag));
      theta(4 * b + lag) = 0.5 * (day1 + day2);
    }
  }
  if (map.has_phi)
    theta(map.phi_offset()) =
        std::clamp(phi_from_m_entry(fit.factor_cov(1, 0)), -0.98, 0.98);
  for (std::size_t s = 0; s < map.sigmas.size(); ++s) {
    const auto [k, j] = map.sigmas[s];
    theta(map.phi_offset() + (map.has_phi ? 1 : 0) + s) =
        fit.idio_var(rowblock_index(k, j, n));
  }
  return theta;
}

Eigen::MatrixXd estimate_h_cov(const TwoDayParams& fit, const Selector& sel,
                               const AsymptoticMachinery& mach, bool* ridged) {
  const int n = fit.n_assets;
  const int c1 = static_cast<int>(sel.size());

  // zeta-functional per entry plus the independent-noise parts: a loading
  // component adds M^{-1} row applied to its own row noise, a variance adds
  // its own chi-square fluctuation. Cross moments follow from Gaussianity.
  Eigen::MatrixXd a_rows = Eigen::MatrixXd::Zero(c1, 336);
  std::vector<int> u_row(c1, -1);    // stacked row whose noise enters
  std::vector<int> u_comp(c1, -1);   // M^{-1} row index
  std::vector<int> v_row(c1, -1);    // sigma2 entries

  // Cached contraction (lambda_{k,j}' (x) I) Gamma per used row.
  std::map<int, Eigen::MatrixXd> contraction;
  auto contraction_for = [&](int r) -> const Eigen::MatrixXd& {
    auto it = contraction.find(r);
    if (it != contraction.end()) return it->second;
    const Eigen::VectorXd lam = fit.loading.row(r);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(14, 336);
    for (int p = 0; p < 14; ++p)
      if (lam(p) != 0.0) g += lam(p) * mach.gamma.middleRows(14 * p, 14);
    return contraction.emplace(r, std::move(g)).first->second;
  };

  Eigen::MatrixXd g_m;  // -2 D+ (I (x) M) Gamma, built on demand
  auto m_rows = [&]() -> const Eigen::MatrixXd& {
    if (g_m.size() == 0) {
      Eigen::MatrixXd kron_rows(196, 336);
      for (int cb = 0; cb < 14; ++cb)
        kron_rows.middleRows(14 * cb, 14) =
            mach.factor_cov * mach.gamma.middleRows(14 * cb, 14);
      g_m = -2.0 * duplication_pinv(14) * kron_rows;
    }
    return g_m;
  };

  for (int i = 0; i < c1; ++i) {
    const auto& e = sel[i];
    switch (e.kind) {
      case SelectorEntry::Kind::loading: {
        const int r = rowblock_index(e.k, e.j, n);
        a_rows.row(i) = contraction_for(r).row(e.comp);
        u_row[i] = r;
        u_comp[i] = e.comp;
        break;
      }
      case SelectorEntry::Kind::m_entry:
        a_rows.row(i) = m_rows().row(vech_index(e.p, e.q, 14));
        break;
      case SelectorEntry::Kind::sigma2:
        v_row[i] = rowblock_index(e.k, e.j, n);
        break;
    }
  }

  // (Sigma_dagger (x) M) a_j'
  Eigen::MatrixXd weighted(c1, 336);
  for (int m = 0; m < 24; ++m)
    weighted.middleCols(14 * m, 14) =
        mach.sigma_dagger(m) * a_rows.middleCols(14 * m, 14) * mach.factor_cov;

  Eigen::MatrixXd cov = a_rows * weighted.transpose();

  auto dagger_of_row = [&](int r) -> int {
    const int k = block_of_row(r, n), j = asset_of_row(r, n);
    return j < 4 ? 4 * k + j : -1;
  };

  for (int i = 0; i < c1; ++i) {
    for (int j = 0; j < c1; ++j) {
      // Own-noise covariance of two loading components sharing a row.
      if (u_row[i] >= 0 && u_row[i] == u_row[j])
        cov(i, j) += fit.idio_var(u_row[i]) * mach.m_inv(u_comp[i], u_comp[j]);
      // Cross term between a zeta functional and a first-four-asset noise.
      if (u_row[j] >= 0) {
        const int m = dagger_of_row(u_row[j]);
        if (m >= 0)
          cov(i, j) += fit.idio_var(u_row[j]) *
                       a_rows(i, AsymptoticMachinery::col_of(m, u_comp[j]));
      }
      if (u_row[i] >= 0) {
        const int m = dagger_of_row(u_row[i]);
        if (m >= 0)
          cov(i, j) += fit.idio_var(u_row[i]) *
                       a_rows(j, AsymptoticMachinery::col_of(m, u_comp[i]));
      }
      if (v_row[i] >= 0 && v_row[i] == v_row[j]) {
        const double s2 = fit.idio_var(v_row[i]);
        cov(i, j) += 2.0 * s2 * s2;
      }
    }
  }
  cov = 0.5 * (cov + cov.transpose()).eval();

  bool needed_ridge = false;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    const double eps = 1e-8 * std::max(cov.trace(), 1.0) / c1;
    cov.diagonal().array() += eps;
    needed_ridge = true;
  }
  if (ridged) *ridged = needed_ridge;
  return cov;
}

MdResult solve_md(const MinimumDistanceProblem& problem) {
  const int c1 = static_cast<int>(problem.selector.size());
  const int c2 = problem.map.dim();
  if (c2 >= c1)
    throw invalid_parameter_error("solve_md: structural dimension must be below selector size");

  Eigen::VectorXd b = problem.theta_start;
  auto objective = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd g = problem.h_hat - h_of_theta(theta, problem.selector, problem.map);
    return g.dot(problem.weight * g);
  };

  MdResult result;
  double obj = objective(b);
  Eigen::MatrixXd jac;
  int it = 0;
  for (; it < 200; ++it) {
    jac = jacobian_h(b, problem.selector, problem.map);
    const Eigen::MatrixXd jtw = jac.transpose() * problem.weight;
    const Eigen::MatrixXd normal = jtw * jac;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw singular_solve_error("solve_md: Jacobian not of full column rank");
    const Eigen::VectorXd resid =
        problem.h_hat - h_of_theta(b, problem.selector, problem.map);
    Eigen::VectorXd delta = ldlt.solve(jtw * resid);

    double scale = 1.0;
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      Eigen::VectorXd trial = b + scale * delta;
      if (problem.map.has_phi)
        trial(problem.map.phi_offset()) =
            std::clamp(trial(problem.map.phi_offset()), -0.995, 0.995);
      const double trial_obj = objective(trial);
      if (trial_obj <= obj) {
        const bool small_step = (scale * delta).cwiseAbs().maxCoeff() < 1e-12;
        const bool small_gain = obj - trial_obj < 1e-15 * (1.0 + std::abs(obj));
        b = trial;
        obj = trial_obj;
        accepted = true;
        if (small_step || small_gain) result.converged = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) {
      // No descent available: accept as converged when the step is tiny.
      result.converged = delta.cwiseAbs().maxCoeff() < 1e-8;
      break;
    }
    if (result.converged) break;
  }
  if (!result.converged) throw non_convergence_error("solve_md: exceeded 200 iterations");

  jac = jacobian_h(b, problem.selector, problem.map);
  const Eigen::MatrixXd jtw = jac.transpose() * problem.weight;
  const Eigen::MatrixXd normal = jtw * jac;
  const Eigen::MatrixXd normal_inv =
      Eigen::LDLT<Eigen::MatrixXd>(normal).solve(Eigen::MatrixXd::Identity(c2, c2));
  Eigen::MatrixXd o_cov =
      normal_inv * jtw * problem.h_cov * jtw.transpose() * normal_inv / problem.t_blocks;
  result.o_cov = 0.5 * (o_cov + o_cov.transpose());
  result.theta_check = b;
  result.objective = obj;
  result.n_iter = it;
  return result;
}

}  // namespace sdfm
