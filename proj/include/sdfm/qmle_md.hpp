#pragma once

#include <Eigen/Dense>
#include <vector>

#include "sdfm/gamma.hpp"
#include "sdfm/model.hpp"
#include "sdfm/two_day.hpp"

namespace sdfm {

// One coordinate of the stacked estimate vector h-hat: a loading-row
// component, an idiosyncratic variance, or a factor-covariance entry.
struct SelectorEntry {
  enum class Kind { loading, sigma2, m_entry };
  Kind kind;
  int k = -1, j = -1, comp = -1;  // loading: block, asset, factor component; sigma2: (k, j)
  int p = -1, q = -1;             // m_entry

  static SelectorEntry loading(int k, int j, int comp) {
    return {Kind::loading, k, j, comp, -1, -1};
  }
  static SelectorEntry sigma2(int k, int j) { return {Kind::sigma2, k, j, -1, -1, -1}; }
  static SelectorEntry m_entry(int p, int q) { return {Kind::m_entry, -1, -1, -1, p, q}; }
};

using Selector = std::vector<SelectorEntry>;

// Appends the 14 components of one loading row.
void append_loading_row(Selector& sel, int k, int j);

// Per-asset loading selector: the asset's own two day rows plus the anchor
// and fifth-asset rows of the other two continents.
Selector loading_selector(int continent, int asset, const PanelLayout& layout);
// Selector targeting the AR coefficient: the first asset's six rows plus the
// half-vectorized factor covariance.
Selector phi_selector(const PanelLayout& layout);

// Structural coordinates that the selected entries depend on: distinct
// (continent, asset) loading rows, the AR coefficient when any covariance
// entry is selected, and the selected idiosyncratic variances, in that order.
struct ThetaMap {
  std::vector<std::pair<int, int>> z_blocks;  // (continent, asset)
  bool has_phi = false;
  std::vector<std::pair<int, int>> sigmas;  // (k, j)

  int dim() const {
    return 4 * static_cast<int>(z_blocks.size()) + (has_phi ? 1 : 0) +
           static_cast<int>(sigmas.size());
  }
  int z_offset(int continent, int asset) const;
  int phi_offset() const { return 4 * static_cast<int>(z_blocks.size()); }
  int sigma_offset(int k, int j) const;
};

ThetaMap theta_map_for(const Selector& sel);

Eigen::VectorXd assemble_h(const TwoDayParams& fit, const Selector& sel);
Eigen::VectorXd h_of_theta(const Eigen::VectorXd& theta, const Selector& sel, const ThetaMap& map);
// Central differences with one Richardson refinement.
Eigen::MatrixXd jacobian_h(const Eigen::VectorXd& theta, const Selector& sel, const ThetaMap& map);

// Structural start implied by the QMLE fit (loading rows read off the two day
// copies, phi from the (2,1) covariance entry, variances pass through).
Eigen::VectorXd md_theta_start(const TwoDayParams& fit, const ThetaMap& map);

// Asymptotic covariance of sqrt(T_f)(h-hat - h) assembled from the joint
// representation of the selected entries. Sets *ridged when the matrix had to
// be regularized to become invertible (routine when the selector includes
// restricted coordinates, whose fluctuation is exactly zero).
Eigen::MatrixXd estimate_h_cov(const TwoDayParams& fit, const Selector& sel,
                               const AsymptoticMachinery& mach, bool* ridged = nullptr);

struct MinimumDistanceProblem {
  Eigen::VectorXd h_hat;
  Selector selector;
  ThetaMap map;
  Eigen::VectorXd theta_start;
  Eigen::MatrixXd weight;  // W, c1 x c1 symmetric positive definite
  Eigen::MatrixXd h_cov;   // script-H
  int t_blocks = 0;
};

struct MdResult {
  Eigen::VectorXd theta_check;
  Eigen::MatrixXd o_cov;  // c2 x c2, already divided by T_f
  double objective = 0.0;
  int n_iter = 0;
  bool converged = false;
};

// Gauss-Newton with step halving on the weighted projection objective.
MdResult solve_md(const MinimumDistanceProblem& problem);

}  // namespace sdfm
