#pragma once

#include <Eigen/Dense>

#include "sdfm/model.hpp"

namespace sdfm {

// Stacked two-day representation: six consecutive periods form one block
// observation of dimension 6N loading on a 14-dimensional factor stack
// (eight consecutive global-factor values, newest first, followed by the six
// continental factors, newest first).
struct TwoDayParams {
  Eigen::MatrixXd loading;     // Lambda, 6N x 14
  Eigen::MatrixXd factor_cov;  // M, 14 x 14, blockdiag(AR-band, I6)
  Eigen::VectorXd idio_var;    // Sigma_ee diagonal, length 6N
  int n_assets = 0;

  int rows() const { return static_cast<int>(loading.rows()); }
};

// Row-block coordinates: block k in 0..5, asset j in 0..N-1 <-> stacked row.
inline int rowblock_index(int k, int j, int n_assets) { return k * n_assets + j; }
inline int block_of_row(int m, int n_assets) { return m / n_assets; }
inline int asset_of_row(int m, int n_assets) { return m % n_assets; }
// Continent owning row block k (blocks cycle A,E,U,A,E,U).
inline int continent_of_block(int k) { return k % 3; }

// Factor-stack column occupied by loading column `lag` (0..2 global lags,
// 3 = continental) in row block k.
inline int factor_column(int k, int lag) { return lag < 3 ? (5 - k) + lag : 13 - k; }

// 8x8 covariance of eight consecutive values of the stationary global factor.
Eigen::MatrixXd global_factor_cov(double phi);

TwoDayParams build_two_day(const ModelParams& params, const PanelLayout& layout);

// Lambda * M * Lambda' + diag(Sigma_ee); symmetric positive definite.
Eigen::MatrixXd implied_covariance(const TwoDayParams& two_day);

// Stack an unmasked panel into its 6N x T_f block form (column per block).
Eigen::MatrixXd stack_two_day(const ReturnPanel& panel, const PanelLayout& layout);

}  // namespace sdfm
