#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "sdfm/kalman.hpp"
#include "sdfm/simulate.hpp"

using namespace sdfm;

namespace {

ReturnPanel random_panel(const PanelLayout& layout, std::mt19937_64& engine) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  ReturnPanel panel = ReturnPanel::zeros(layout.n_assets, layout.n_periods);
  for (int t = 0; t < layout.n_periods; ++t)
    for (int i = 0; i < layout.n_assets; ++i) panel.values[t](i) = gauss(engine);
  return panel;
}

}  // namespace

TEST_CASE("filter log-likelihood equals the dense joint-Gaussian density") {
  std::mt19937_64 engine(101);
  PanelLayout layout{3, 18};
  for (int rep = 0; rep < 50; ++rep) {
    ModelParams p = oracle::random_params(3, engine);
    SimulationResult sim = simulate(p, layout, 1000 + rep);
    const FilterOutput out = filter(build_state_space(p, layout), sim.panel);
    const double dense = oracle::dense_loglik(p, layout, sim.panel);
    CHECK(out.total_loglik == doctest::Approx(dense).epsilon(1e-10));
    CHECK(std::abs(out.total_loglik - dense) < 1e-8);
    CHECK(out.total_loglik == doctest::Approx(out.period_loglik.sum()).epsilon(1e-12));
  }
}

TEST_CASE("smoothed moments equal the dense conditional moments") {
  std::mt19937_64 engine(202);
  PanelLayout layout{3, 18};
  for (int rep = 0; rep < 50; ++rep) {
    ModelParams p = oracle::random_params(3, engine);
    SimulationResult sim = simulate(p, layout, 2000 + rep);
    const SmoothedMoments mom = smooth(build_state_space(p, layout), sim.panel);
    const oracle::DenseMoments dense = oracle::dense_smoothed_moments(p, layout, sim.panel);
    for (int t = 0; t < layout.n_periods; ++t) {
      CHECK((mom.mean[t] - dense.mean[t]).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((mom.second_moment[t] - dense.second[t]).cwiseAbs().maxCoeff() < 1e-8);
      if (t >= 1)
        CHECK((mom.lag_one_cross[t] - dense.lag_cross[t]).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("masked entries are equivalent to deleted rows") {
  std::mt19937_64 engine(303);
  PanelLayout layout{4, 24};
  ModelParams p = oracle::random_params(4, engine);
  SimulationResult sim = simulate(p, layout, 7);

  ReturnPanel masked = sim.panel;
  masked.mask[5] = {0, 1, 0, 1};
  masked.mask[11] = {1, 0, 1, 1};
  masked.mask[14] = {0, 0, 0, 0};  // a fully masked period

  const FilterOutput out = filter(build_state_space(p, layout), masked);
  const double dense = oracle::dense_loglik(p, layout, masked);
  CHECK(out.total_loglik == doctest::Approx(dense).epsilon(1e-10));
  CHECK(out.period_loglik(14) == 0.0);

  const SmoothedMoments mom = smooth(build_state_space(p, layout), masked);
  const oracle::DenseMoments dmom = oracle::dense_smoothed_moments(p, layout, masked);
  for (int t = 0; t < layout.n_periods; ++t)
    CHECK((mom.mean[t] - dmom.mean[t]).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("zero loadings decouple the observations") {
  PanelLayout layout{2, 12};
  ModelParams p = ModelParams::zeros(2, 0.4);
  for (int c = 0; c < 3; ++c) p.idio_var[c] << 0.5, 2.0;
  std::mt19937_64 engine(404);
  ReturnPanel panel = random_panel(layout, engine);

  const FilterOutput out = filter(build_state_space(p, layout), panel);
  double direct = 0.0;
  for (int t = 0; t < layout.n_periods; ++t)
    for (int i = 0; i < 2; ++i) {
      const double v = p.idio_var[t % 3](i);
      direct += -0.5 * (std::log(2.0 * M_PI) + std::log(v) +
                        panel.values[t](i) * panel.values[t](i) / v);
    }
  CHECK(out.total_loglik == doctest::Approx(direct).epsilon(1e-12));

  // Smoothed states stay at the prior: mean zero, stationary variance.
  const SmoothedMoments mom = smooth(build_state_space(p, layout), panel);
  CHECK(mom.mean[4].cwiseAbs().maxCoeff() < 1e-12);
  CHECK((mom.second_moment[4] - oracle::stationary_cov(0.4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("noiseless limit recovers the simulated states") {
  PanelLayout layout{5, 120};
  std::mt19937_64 engine(505);
  ModelParams p = oracle::random_params(5, engine, 0.5);
  for (int c = 0; c < 3; ++c) p.idio_var[c].setConstant(1e-10);
  SimulationResult sim = simulate(p, layout, 9);
  const SmoothedMoments mom = smooth(build_state_space(p, layout), sim.panel);
  // With five informative rows per period and variance 1e-10 the smoother
  // pins the full state path (after the initial ramp-up).
  for (int t = 6; t < layout.n_periods; ++t) {
    CHECK(std::abs(mom.mean[t](0) - sim.global_factor(t)) < 1e-3);
    CHECK(std::abs(mom.mean[t](3) - sim.continental_factor(t)) < 1e-3);
  }
}

TEST_CASE("log-likelihood invariant to asset order within a period") {
  std::mt19937_64 engine(606);
  PanelLayout layout{4, 18};
  ModelParams p = oracle::random_params(4, engine);
  SimulationResult sim = simulate(p, layout, 12);
  const double base = filter(build_state_space(p, layout), sim.panel).total_loglik;

  // Reverse the asset order everywhere.
  ModelParams q = p;
  ReturnPanel reversed = sim.panel;
  for (int c = 0; c < 3; ++c) {
    q.loadings[c] = p.loadings[c].colwise().reverse().eval();
    q.idio_var[c] = p.idio_var[c].reverse().eval();
  }
  for (int t = 0; t < layout.n_periods; ++t)
    reversed.values[t] = sim.panel.values[t].reverse().eval();
  const double flipped = filter(build_state_space(q, layout), reversed).total_loglik;
  CHECK(base == doctest::Approx(flipped).epsilon(1e-12));
  CHECK(std::abs(base - flipped) < 1e-10);
}
