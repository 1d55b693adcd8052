#pragma once

#include <Eigen/Dense>

#include "sdfm/model.hpp"
#include "sdfm/two_day.hpp"

namespace sdfm {

// Linear-algebra helpers for symmetric-matrix asymptotics.
Eigen::MatrixXd duplication_matrix(int n);        // n^2 x n(n+1)/2
Eigen::MatrixXd duplication_pinv(int n);          // n(n+1)/2 x n^2
Eigen::MatrixXd commutation_matrix(int m, int n); // mn x mn
int vech_index(int i, int j, int n);              // lower-triangle position

// The 196 x 336 matrix expressing the rotation fluctuation vec(A) as a linear
// functional of the stacked factor/error cross moments of the first four
// assets per row block, together with the plug-in pieces entering the
// asymptotic variance formulas.
struct AsymptoticMachinery {
  Eigen::MatrixXd gamma;         // 196 x 336
  Eigen::VectorXd sigma_dagger;  // 24 idiosyncratic variances (4 per block)
  Eigen::MatrixXd factor_cov;    // M used for the construction
  Eigen::MatrixXd m_inv;
  Eigen::MatrixXd q_hat;         // (1/N) Lambda' Sigma_ee^{-1} Lambda
  int n_assets = 0;
  int t_blocks = 0;
  double delta = 0.0;  // N / T_f

  // Row of gamma holding the coefficient functional of A(i,j) (column-major).
  static int row_of(int i, int j) { return j * 14 + i; }
  // Column of gamma holding e^dagger component m times factor component i.
  static int col_of(int m, int i) { return m * 14 + i; }
};

// Executes the identification solve order numerically with plug-in loadings
// and factor covariance. Requires N >= 5; throws singular_anchor_error when a
// required loading submatrix is ill conditioned.
AsymptoticMachinery build_gamma(const TwoDayParams& two_day, const PanelLayout& layout);

}  // namespace sdfm
