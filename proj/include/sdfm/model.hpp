#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sdfm/errors.hpp"

namespace sdfm {

// Continents in closing-time order within a day. Period t (0-based) belongs
// to continent t % 3; the unit of t is one third of a calendar day, and the
// cycle always starts at Asia. No weekend calendar.
enum Continent : int { kAsia = 0, kEurope = 1, kUs = 2 };

inline const char* continent_code(int c) {
  static const char* codes[3] = {"A", "E", "U"};
  return codes[c];
}

struct PanelLayout {
  int n_assets = 0;   // N, common across the three continents
  int n_periods = 0;  // T, must be a multiple of 6 so day pairs are whole

  int continent_of(int t) const { return t % 3; }
  int day_blocks() const { return n_periods / 6; }  // T_f
  int periods_per_continent() const { return n_periods / 3; }

  void validate() const {
    if (n_assets < 1) throw invalid_parameter_error("layout: n_assets must be positive");
    if (n_periods < 6 || n_periods % 6 != 0)
      throw invalid_parameter_error("layout: n_periods must be a positive multiple of 6");
  }
};

// Structural parameter set: AR coefficient of the global factor, one N x 4
// loading matrix per continent (columns: current/lag-1/lag-2 global loadings
// and the continental loading), and the diagonal idiosyncratic variances.
struct ModelParams {
  double phi = 0.0;
  std::array<Eigen::MatrixXd, 3> loadings;  // each N x 4
  std::array<Eigen::VectorXd, 3> idio_var;  // each length N, entries > 0

  int n_assets() const { return static_cast<int>(loadings[0].rows()); }

  void validate() const {
    if (!std::isfinite(phi) || std::abs(phi) >= 1.0)
      throw invalid_parameter_error("params: |phi| must be < 1");
    const int n = n_assets();
    for (int c = 0; c < 3; ++c) {
      if (loadings[c].rows() != n || loadings[c].cols() != 4)
        throw invalid_parameter_error("params: loadings must be N x 4 for every continent");
      if (!loadings[c].allFinite())
        throw invalid_parameter_error("params: non-finite loading entry");
      if (idio_var[c].size() != n)
        throw invalid_parameter_error("params: idio_var length mismatch");
      if (!idio_var[c].allFinite() || (idio_var[c].array() <= 0.0).any())
        throw invalid_parameter_error("params: idiosyncratic variances must be positive");
    }
  }

  static ModelParams zeros(int n_assets, double phi = 0.0) {
    ModelParams p;
    p.phi = phi;
    for (int c = 0; c < 3; ++c) {
      p.loadings[c] = Eigen::MatrixXd::Zero(n_assets, 4);
      p.idio_var[c] = Eigen::VectorXd::Ones(n_assets);
    }
    return p;
  }
};

// Observed 24-hr log returns. values[t] holds the N returns of the continent
// whose market closes at period t; mask[t][i] is true when the entry is
// observed. Masked entries carry no numeric meaning.
struct ReturnPanel {
  std::vector<Eigen::VectorXd> values;
  std::vector<std::vector<char>> mask;

  int n_periods() const { return static_cast<int>(values.size()); }
  int n_assets() const { return values.empty() ? 0 : static_cast<int>(values[0].size()); }
  bool observed(int t, int i) const { return mask[t][i] != 0; }

  bool fully_observed() const {
    for (const auto& m : mask)
      for (char v : m)
        if (!v) return false;
    return true;
  }

  int observed_count(int t) const {
    int n = 0;
    for (char v : mask[t]) n += (v != 0);
    return n;
  }

  static ReturnPanel zeros(int n_assets, int n_periods) {
    ReturnPanel p;
    p.values.assign(n_periods, Eigen::VectorXd::Zero(n_assets));
    p.mask.assign(n_periods, std::vector<char>(n_assets, 1));
    return p;
  }
};

}  // namespace sdfm
