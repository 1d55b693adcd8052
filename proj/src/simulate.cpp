#include "sdfm/simulate.hpp"

#include <random>

#include "sdfm/rng.hpp"

namespace sdfm {

namespace {
constexpr int kBurnIn = 60;  // multiple of 6 so the kept sample starts at Asia
}

SimulationResult simulate(const ModelParams& params, const PanelLayout& layout,
                          std::uint64_t seed) {
  layout.validate();
  params.validate();
  if (params.n_assets() != layout.n_assets)
    throw invalid_parameter_error("simulate: layout/params asset count mismatch");

  const int n = layout.n_assets;
  const int t_total = layout.n_periods + kBurnIn;
  auto engine = make_engine(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Factor recursions with f_g, f_C := 0 before the first period. The draw
  // order is fixed: per period, the two factor shocks then the N asset shocks.
  Eigen::VectorXd fg(t_total), fc(t_total);
  SimulationResult out;
  out.panel = ReturnPanel::zeros(n, layout.n_periods);

  for (int t = 0; t < t_total; ++t) {
    const double eta_g = gauss(engine);
    const double eta_c = gauss(engine);
    fg(t) = (t == 0 ? 0.0 : params.phi * fg(t - 1)) + eta_g;
    fc(t) = eta_c;

    const double fg_lag1 = t >= 1 ? fg(t - 1) : 0.0;
    const double fg_lag2 = t >= 2 ? fg(t - 2) : 0.0;

    const int c = t % 3;
    Eigen::VectorXd y = params.loadings[c].col(0) * fg(t) +
                        params.loadings[c].col(1) * fg_lag1 +
                        params.loadings[c].col(2) * fg_lag2 +
                        params.loadings[c].col(3) * fc(t);
    for (int i = 0; i < n; ++i) y(i) += std::sqrt(params.idio_var[c](i)) * gauss(engine);

    if (t >= kBurnIn) out.panel.values[t - kBurnIn] = y;
  }

  out.global_factor = fg.tail(layout.n_periods);
  out.continental_factor = fc.tail(layout.n_periods);
  return out;
}

}  // namespace sdfm
