#include "sdfm/gamma.hpp"

#include <cmath>
#include <vector>

namespace sdfm {

int vech_index(int i, int j, int n) {
  if (j > i) std::swap(i, j);
  return j * n - j * (j - 1) / 2 + (i - j);
}

Eigen::MatrixXd duplication_matrix(int n) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n * n, n * (n + 1) / 2);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) d(j * n + i, vech_index(i, j, n)) = 1.0;
  return d;
}

Eigen::MatrixXd duplication_pinv(int n) {
  const Eigen::MatrixXd d = duplication_matrix(n);
  Eigen::VectorXd counts = (d.transpose() * d).diagonal();
  return counts.cwiseInverse().asDiagonal() * d.transpose();
}

Eigen::MatrixXd commutation_matrix(int m, int n) {
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(m * n, m * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) k(i * n + j, j * m + i) = 1.0;
  return k;
}

namespace {

// Square inverse with a condition-number guard for the anchor submatrices.
Eigen::MatrixXd guarded_inverse(const Eigen::MatrixXd& m, const char* where) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smax = svd.singularValues()(0);
  const double smin = svd.singularValues()(svd.singularValues().size() - 1);
  if (!(smin > 0.0) || smax / smin > 1e10)
    throw singular_anchor_error(std::string("build_gamma: ill-conditioned anchor at ") + where);
  return svd.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

struct GammaBuilder {
  const TwoDayParams& td;
  Eigen::MatrixXd rows;           // 196 x 336 accumulating functionals
  std::vector<char> solved;       // per A entry
  Eigen::MatrixXd m_inv;          // 14 x 14
  std::array<Eigen::MatrixXd, 6> block;  // Lambda_k, 14 x N

  explicit GammaBuilder(const TwoDayParams& params)
      : td(params),
        rows(Eigen::MatrixXd::Zero(196, 336)),
        solved(196, 0) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(td.factor_cov);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw invalid_parameter_error("build_gamma: factor covariance not positive definite");
    m_inv = ldlt.solve(Eigen::MatrixXd::Identity(14, 14));
    const int n = td.n_assets;
    for (int k = 0; k < 6; ++k) block[k] = td.loading.middleRows(k * n, n).transpose();
  }

  int idx(int i, int j) const { return AsymptoticMachinery::row_of(i, j); }

  const Eigen::RowVectorXd a_row(int i, int j) const {
    if (!solved[idx(i, j)])
      throw std::logic_error("build_gamma: entry used before being solved");
    return rows.row(idx(i, j));
  }

  // Functional of F_k(a, c) = [M^{-1} (1/T_f) sum_t f_t e_{kN+c,t}]_a.
  Eigen::RowVectorXd f_term(int k, int a, int c) const {
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(336);
    const int m = 4 * k + c;
    for (int i = 0; i < 14; ++i) out(AsymptoticMachinery::col_of(m, i)) = m_inv(a, i);
    return out;
  }

  void set_entry(int i, int j, const Eigen::RowVectorXd& value) {
    rows.row(idx(i, j)) = value;
    solved[idx(i, j)] = 1;
  }

  // Zero-restriction solve: A(a, b2) = -(A(a, b1) L_k(b1, c) + F_k(a, c)) L_k(b2, c)^{-1}.
  void step_zero(const char* where, int k, const std::vector<int>& a_list,
                 const std::vector<int>& b1, const std::vector<int>& b2,
                 const std::vector<int>& c_list) {
    const int nc = static_cast<int>(c_list.size());
    Eigen::MatrixXd anchor(static_cast<int>(b2.size()), nc);
    for (std::size_t r = 0; r < b2.size(); ++r)
      for (int ci = 0; ci < nc; ++ci) anchor(r, ci) = block[k](b2[r], c_list[ci]);
    const Eigen::MatrixXd anchor_inv = guarded_inverse(anchor, where);

    for (int a : a_list) {
      std::vector<Eigen::RowVectorXd> g(nc, Eigen::RowVectorXd::Zero(336));
      for (int ci = 0; ci < nc; ++ci) {
        for (int beta : b1) g[ci] += a_row(a, beta) * block[k](beta, c_list[ci]);
        g[ci] += f_term(k, a, c_list[ci]);
      }
      for (std::size_t bi = 0; bi < b2.size(); ++bi) {
        Eigen::RowVectorXd value = Eigen::RowVectorXd::Zero(336);
        for (int ci = 0; ci < nc; ++ci) value -= g[ci] * anchor_inv(ci, bi);
        set_entry(a, b2[bi], value);
      }
    }
  }

  // Equality-restriction solve for row `row_a` of A:
  // A(row_a, target) = (A(row_b, y) L_kb(y, c) + F_kb(row_b, c)
  //                     - A(row_a, other) L_ka(other, c) - F_ka(row_a, c)) L_ka(target, c)^{-1}
  void step_equal(const char* where, int ka, int row_a, const std::vector<int>& target,
                  const std::vector<int>& other, int kb, int row_b, const std::vector<int>& y,
                  const std::vector<int>& c_list) {
    const int nc = static_cast<int>(c_list.size());
    Eigen::MatrixXd anchor(static_cast<int>(target.size()), nc);
    for (std::size_t r = 0; r < target.size(); ++r)
      for (int ci = 0; ci < nc; ++ci) anchor(r, ci) = block[ka](target[r], c_list[ci]);
    const Eigen::MatrixXd anchor_inv = guarded_inverse(anchor, where);

    std::vector<Eigen::RowVectorXd> g(nc, Eigen::RowVectorXd::Zero(336));
    for (int ci = 0; ci < nc; ++ci) {
      for (int beta : y) g[ci] += a_row(row_b, beta) * block[kb](beta, c_list[ci]);
      g[ci] += f_term(kb, row_b, c_list[ci]);
      for (int beta : other) g[ci] -= a_row(row_a, beta) * block[ka](beta, c_list[ci]);
      g[ci] -= f_term(ka, row_a, c_list[ci]);
    }
    for (std::size_t ti = 0; ti < target.size(); ++ti) {
      Eigen::RowVectorXd value = Eigen::RowVectorXd::Zero(336);
      for (int ci = 0; ci < nc; ++ci) value += g[ci] * anchor_inv(ci, ti);
      set_entry(row_a, target[ti], value);
    }
  }

  // Zero restrictions in M: solve A(a, col) from M(a,:) A(:,col) + A(col,a)' = 0.
  void step_m_zero(const char* where, int col, const std::vector<int>& a_list) {
    const auto& m = td.factor_cov;
    const int na = static_cast<int>(a_list.size());
    Eigen::MatrixXd lhs(na, na);
    for (int r = 0; r < na; ++r)
      for (int s = 0; s < na; ++s) lhs(r, s) = m(a_list[r], a_list[s]);
    const Eigen::MatrixXd lhs_inv = guarded_inverse(lhs, where);

    std::vector<Eigen::RowVectorXd> rhs(na, Eigen::RowVectorXd::Zero(336));
    for (int r = 0; r < na; ++r) {
      const int i = a_list[r];
      for (int k = 0; k < 14; ++k) {
        if (std::find(a_list.begin(), a_list.end(), k) != a_list.end()) continue;
        if (m(i, k) != 0.0) rhs[r] -= a_row(k, col) * m(i, k);
      }
      rhs[r] -= a_row(col, i);
    }
    for (int r = 0; r < na; ++r) {
      Eigen::RowVectorXd value = Eigen::RowVectorXd::Zero(336);
      for (int s = 0; s < na; ++s) value += lhs_inv(r, s) * rhs[s];
      set_entry(a_list[r], col, value);
    }
  }

  void run() {
    const std::vector<int> c2{0, 1}, c3{0, 1, 2}, c4{0, 1, 2, 3}, c1{0};

    // Step I: zero restrictions per the anchor table.
    step_zero("I.1", 0, {0, 1, 2, 3, 4, 8, 9, 10, 11, 12}, {}, {5, 6, 7, 13}, c4);
    step_zero("I.2", 5, {3, 4, 5, 6, 7, 9, 10, 11, 12, 13}, {}, {0, 1, 2, 8}, c4);
    step_zero("I.3", 3, {5, 6, 7, 9, 11, 12, 13}, {2}, {3, 4, 10}, c3);
    step_zero("I.4", 3, {0, 1, 8}, {}, {2, 3, 4, 10}, c4);
    step_zero("I.5", 2, {2}, {5}, {3, 4, 11}, c3);
    step_zero("I.6", 2, {6, 7, 13}, {3, 4}, {5, 11}, c2);
    step_zero("I.7", 1, {3, 10}, {5, 6}, {4, 12}, c2);
    step_zero("I.8", 1, {7, 13}, {4, 5}, {6, 12}, c2);
    step_zero("I.9", 4, {0, 8}, {2, 3}, {1, 9}, c2);
    step_zero("I.10", 4, {4}, {1, 2}, {3, 9}, c2);
    step_zero("I.11", 4, {10}, {1, 2}, {3, 9}, c2);
    step_zero("I.12", 4, {5, 6, 7, 11, 12, 13}, {1, 2, 3}, {9}, c1);
    step_zero("I.13", 2, {0, 1, 8, 9, 10, 12}, {3, 4, 5}, {11}, c1);
    step_zero("I.14", 1, {0, 1, 2, 8, 9, 11}, {4, 5, 6}, {12}, c1);

    // Step II: unit-diagonal restrictions on the continental block give
    // vanishing fluctuation for the four diagonal entries.
    for (int j : {9, 10, 11, 12}) set_entry(j, j, Eigen::RowVectorXd::Zero(336));

    // Step III: equality of the continental loading across day copies for the
    // first two American and Asian assets.
    step_equal("III.1", 5, 8, {0, 8}, {1, 2}, 2, 11, {3, 4, 5, 11}, c2);
    step_equal("III.2", 0, 13, {7, 13}, {5, 6}, 3, 10, {2, 3, 4, 10}, c2);

    // Step IV: zero restrictions in the global/continental covariance block.
    step_m_zero("IV.12", 11, {2, 3, 4});
    step_m_zero("IV.10", 9, {1, 2, 3});
    step_m_zero("IV.11", 10, {3, 4, 5});
    step_m_zero("IV.13", 12, {4, 5, 6});

    // Step V: the two coupled diagonal restrictions of the global block.
    {
      const auto& m = td.factor_cov;
      Eigen::Matrix2d lhs;
      lhs << m(3, 3), -m(5, 5), 2.0 * m(3, 3) - m(5, 3), -m(3, 5);
      const Eigen::Matrix2d lhs_inv = guarded_inverse(lhs, "V.1");

      Eigen::RowVectorXd rhs1 = Eigen::RowVectorXd::Zero(336);
      Eigen::RowVectorXd rhs2 = Eigen::RowVectorXd::Zero(336);
      for (int k = 0; k < 14; ++k) {
        if (k != 5 && m(5, k) != 0.0) rhs1 += m(5, k) * a_row(k, 5);
        if (k != 3 && m(3, k) != 0.0) rhs1 -= m(3, k) * a_row(k, 3);
        if (k != 5 && m(3, k) != 0.0) rhs2 += m(3, k) * a_row(k, 5);
        if (k != 3 && (2.0 * m(3, k) - m(5, k)) != 0.0)
          rhs2 -= (2.0 * m(3, k) - m(5, k)) * a_row(k, 3);
      }
      set_entry(3, 3, lhs_inv(0, 0) * rhs1 + lhs_inv(0, 1) * rhs2);
      set_entry(5, 5, lhs_inv(1, 0) * rhs1 + lhs_inv(1, 1) * rhs2);
    }
    {
      const auto& m = td.factor_cov;
      Eigen::RowVectorXd rhs = Eigen::RowVectorXd::Zero(336);
      for (int k = 0; k < 14; ++k)
        if (m(3, k) != 0.0) rhs += m(3, k) * a_row(k, 3);
      for (int k = 0; k < 14; ++k)
        if (k != 4 && m(4, k) != 0.0) rhs -= m(4, k) * a_row(k, 4);
      set_entry(4, 4, rhs / m(4, 4));
    }

    // Step VI: remaining equalities across day copies.
    step_equal("VI.1", 5, 0, {0, 8}, {1, 2}, 2, 3, {3, 4, 5, 11}, c2);
    step_equal("VI.2", 5, 1, {0, 1, 8}, {2}, 2, 4, {3, 4, 5, 11}, c3);
    step_equal("VI.4", 5, 2, {0, 1, 2, 8}, {}, 2, 5, {3, 4, 5, 11}, c4);
    step_equal("VI.5", 0, 7, {7, 13}, {5, 6}, 3, 4, {2, 3, 4, 10}, c2);
    step_equal("VI.6", 0, 6, {6, 7, 13}, {5}, 3, 3, {2, 3, 4, 10}, c3);
    step_equal("VI.7", 0, 5, {6, 7, 13}, {5}, 3, 2, {2, 3, 4, 10}, c3);

    for (int e = 0; e < 196; ++e)
      if (!solved[e]) throw std::logic_error("build_gamma: unsolved rotation entry");
  }
};

}  // namespace

AsymptoticMachinery build_gamma(const TwoDayParams& two_day, const PanelLayout& layout) {
  layout.validate();
  if (layout.n_assets < 5)
    throw layout_too_small_error("build_gamma: anchors need at least 5 assets");
  if (two_day.n_assets != layout.n_assets)
    throw invalid_parameter_error("build_gamma: layout mismatch");

  GammaBuilder builder(two_day);
  builder.run();

  AsymptoticMachinery mach;
  mach.gamma = std::move(builder.rows);
  mach.factor_cov = two_day.factor_cov;
  mach.m_inv = builder.m_inv;
  mach.n_assets = layout.n_assets;
  mach.t_blocks = layout.day_blocks();
  mach.delta = static_cast<double>(layout.n_assets) / layout.day_blocks();

  mach.sigma_dagger.resize(24);
  for (int k = 0; k < 6; ++k)
    for (int q = 0; q < 4; ++q)
      mach.sigma_dagger(4 * k + q) = two_day.idio_var(k * layout.n_assets + q);

  const Eigen::VectorXd inv_var = two_day.idio_var.cwiseInverse();
  mach.q_hat = two_day.loading.transpose() * (inv_var.asDiagonal() * two_day.loading) /
               layout.n_assets;
  return mach;
}

}  // namespace sdfm
