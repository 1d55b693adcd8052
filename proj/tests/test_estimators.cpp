#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "sdfm/em.hpp"
#include "sdfm/qmle.hpp"
#include "sdfm/simulate.hpp"
#include "sdfm/state_space.hpp"

using namespace sdfm;

namespace {

ModelParams restricted_truth() {
  ModelParams p = ModelParams::zeros(4, 0.3);
  const double a[3] = {0.6, 0.4, 0.7};
  const double b[3] = {0.8, 0.5, 0.6};
  const double s[3] = {0.9, 1.2, 0.7};
  for (int c = 0; c < 3; ++c) {
    p.loadings[c].leftCols<3>().setConstant(a[c]);
    p.loadings[c].col(3).setConstant(b[c]);
    p.idio_var[c].setConstant(s[c]);
  }
  return p;
}

double sup_diff(const ModelParams& x, const ModelParams& y) {
  double d = std::abs(x.phi - y.phi);
  for (int c = 0; c < 3; ++c) {
    d = std::max(d, (x.loadings[c] - y.loadings[c]).cwiseAbs().maxCoeff());
    d = std::max(d, (x.idio_var[c] - y.idio_var[c]).cwiseAbs().maxCoeff());
  }
  return d;
}

}  // namespace

TEST_CASE("starting values recover a restricted-model truth") {
  const ModelParams truth = restricted_truth();
  PanelLayout layout{4, 3000};
  SimulationResult sim = simulate(truth, layout, 42);
  const ModelParams start = starting_values(sim.panel, layout);

  for (int c = 0; c < 3; ++c) {
    CHECK(start.loadings[c](0, 0) ==
          doctest::Approx(truth.loadings[c](0, 0)).epsilon(0.10));
    CHECK(start.loadings[c](0, 3) ==
          doctest::Approx(truth.loadings[c](0, 3)).epsilon(0.10));
    CHECK(start.idio_var[c](0) == doctest::Approx(truth.idio_var[c](0)).epsilon(0.10));
    // Restricted structure: all rows alike.
    CHECK(start.loadings[c](1, 1) == start.loadings[c](0, 1));
  }
  CHECK(std::abs(start.phi) < 1.0);
  for (int c = 0; c < 3; ++c) CHECK((start.idio_var[c].array() > 0.0).all());
}

TEST_CASE("starting values reject degenerate input") {
  PanelLayout layout{2, 120};
  SimulationResult sim = simulate(restricted_truth(), PanelLayout{4, 120}, 1);
  ReturnPanel panel = ReturnPanel::zeros(2, 120);
  for (int t = 0; t < 120; ++t) {
    panel.values[t](0) = sim.panel.values[t](0);
    panel.values[t](1) = 1.0;  // constant series
  }
  CHECK_THROWS_AS(starting_values(panel, layout), degenerate_input_error);

  // Too few two-day blocks.
  PanelLayout tiny{2, 24};
  ReturnPanel small = ReturnPanel::zeros(2, 24);
  CHECK_THROWS_AS(starting_values(small, tiny), invalid_parameter_error);
}

TEST_CASE("EM trace is nondecreasing on random fits") {
  std::mt19937_64 engine(77);
  PanelLayout layout{5, 240};
  for (int rep = 0; rep < 5; ++rep) {
    ModelParams truth = oracle::random_params(5, engine, 0.6);
    for (int c = 0; c < 3; ++c)
      truth.loadings[c] = truth.loadings[c].cwiseAbs().eval();  // keep signal positive
    SimulationResult sim = simulate(truth, layout, 900 + rep);
    EmOptions opts;
    opts.max_iter = 150;
    opts.rel_tol = 1e-9;
    const FitResult fit = fit_mle_one_day(sim.panel, layout, opts);
    REQUIRE(fit.loglik_trace.size() >= 2);
    for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
      CHECK(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-8);
  }
}

TEST_CASE("M-step maximizes the expected complete log-likelihood") {
  std::mt19937_64 engine(88);
  PanelLayout layout{4, 240};
  ModelParams truth = oracle::random_params(4, engine, 0.5);
  SimulationResult sim = simulate(truth, layout, 5);

  ModelParams at = oracle::random_params(4, engine, 0.5);
  const SmoothedMoments moments = smooth(build_state_space(at, layout), sim.panel);
  const ModelParams best = one_day_m_step(moments, sim.panel, layout);
  const double q_best = expected_complete_loglik(best, moments, sim.panel, layout);

  auto perturbed_q = [&](auto&& modify) {
    ModelParams p = best;
    modify(p);
    return expected_complete_loglik(p, moments, sim.panel, layout);
  };

  for (const double eps : {1e-5, -1e-5}) {
    CHECK(perturbed_q([&](ModelParams& p) { p.phi += eps; }) <= q_best + 1e-10);
    CHECK(perturbed_q([&](ModelParams& p) { p.loadings[0](1, 2) += eps; }) <= q_best + 1e-10);
    CHECK(perturbed_q([&](ModelParams& p) { p.loadings[2](3, 0) += eps; }) <= q_best + 1e-10);
    CHECK(perturbed_q([&](ModelParams& p) { p.idio_var[1](0) += eps; }) <= q_best + 1e-10);
    CHECK(perturbed_q([&](ModelParams& p) { p.idio_var[2](2) += eps; }) <= q_best + 1e-10);
  }
}

TEST_CASE("EM started at the generating parameters barely moves") {
  // Self-consistency: with a long sample the refit gain per scalar
  // observation stays below 1e-4.
  ModelParams truth = ModelParams::zeros(3, 0.3);
  truth.loadings[0] << 0.5, 0.3, 0.2, 0.7, 0.4, 0.5, 0.1, 0.6, 0.6, 0.2, 0.4, 0.5;
  truth.loadings[1] << 0.4, 0.5, 0.3, 0.4, 0.7, 0.2, 0.3, 0.5, 0.2, 0.6, 0.5, 0.3;
  truth.loadings[2] << 0.6, 0.2, 0.5, 0.3, 0.3, 0.4, 0.6, 0.4, 0.5, 0.5, 0.2, 0.6;
  for (int c = 0; c < 3; ++c) truth.idio_var[c] << 0.8, 1.1, 0.6;

  PanelLayout layout{3, 150000};
  SimulationResult sim = simulate(truth, layout, 2024);
  EmOptions opts;
  opts.max_iter = 300;
  const FitResult fit = fit_mle_one_day(sim.panel, layout, opts, truth);
  const double gain = fit.loglik_trace.back() - fit.loglik_trace.front();
  CHECK(gain >= -1e-6);
  CHECK(gain / (3.0 * layout.n_periods) < 1e-4);
}

TEST_CASE("sign convention is enforced and flip-invariant") {
  std::mt19937_64 engine(99);
  PanelLayout layout{4, 240};
  ModelParams truth = oracle::random_params(4, engine, 0.5);
  for (int c = 0; c < 3; ++c) truth.loadings[c] = truth.loadings[c].cwiseAbs().eval();
  SimulationResult sim = simulate(truth, layout, 3);

  ModelParams start = starting_values(sim.panel, layout);
  ModelParams flipped = start;
  for (int c = 0; c < 3; ++c) flipped.loadings[c] *= -1.0;  // flips all four factors

  EmOptions opts;
  opts.max_iter = 60;
  const FitResult a = fit_mle_one_day(sim.panel, layout, opts, start);
  const FitResult b = fit_mle_one_day(sim.panel, layout, opts, flipped);
  CHECK(sup_diff(a.params, b.params) < 1e-8);
}

TEST_CASE("QMLE-res at the truth moves by the sampling-noise order") {
  std::mt19937_64 engine(111);
  PanelLayout layout{6, 6000};
  ModelParams truth = oracle::random_params(6, engine, 0.4);
  for (int c = 0; c < 3; ++c) truth.loadings[c] = truth.loadings[c].cwiseAbs().eval();
  SimulationResult sim = simulate(truth, layout, 8);

  EmOptions opts;
  opts.max_iter = 1;
  opts.trace = false;
  const FitResult one_step = fit_qmle_res(sim.panel, layout, opts, truth);
  const double scale = 1.0 / std::sqrt(static_cast<double>(layout.day_blocks()));
  CHECK(sup_diff(one_step.params, truth) < 8.0 * scale);
}

TEST_CASE("QMLE-res and MLE-one-day agree at phi = 0") {
  std::mt19937_64 engine(123);
  PanelLayout layout{8, 2250};
  ModelParams truth = ModelParams::zeros(8, 0.0);
  std::uniform_real_distribution<double> unif(0.1, 0.9);
  std::uniform_real_distribution<double> var_draw(0.3, 1.5);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 4; ++j) truth.loadings[c](i, j) = unif(engine);
      truth.idio_var[c](i) = var_draw(engine);
    }
  SimulationResult sim = simulate(truth, layout, 4);

  EmOptions opts;
  opts.rel_tol = 1e-9;
  const ModelParams start = starting_values(sim.panel, layout, opts);
  FitResult mle = fit_mle_one_day(sim.panel, layout, opts, start);
  FitResult res = fit_qmle_res(sim.panel, layout, opts, start);
  align_signs_to(mle.params, truth);
  align_signs_to(res.params, truth);

  double abs_diff = 0.0;
  int count = 0;
  for (int c = 0; c < 3; ++c) {
    abs_diff += (mle.params.loadings[c] - res.params.loadings[c]).cwiseAbs().sum();
    count += 8 * 4;
  }
  CHECK(abs_diff / count < 0.02);
}

TEST_CASE("fit result exposes smoothed factors") {
  PanelLayout layout{4, 240};
  SimulationResult sim = simulate(restricted_truth(), layout, 6);
  EmOptions opts;
  opts.max_iter = 30;
  const FitResult fit = fit_mle_one_day(sim.panel, layout, opts);
  REQUIRE(fit.factors.rows() == 4);
  REQUIRE(fit.factors.cols() == layout.n_periods);
  // The smoothed global factor tracks the simulated one reasonably well.
  double corr_num = 0.0, corr_a = 0.0, corr_b = 0.0;
  for (int t = 0; t < layout.n_periods; ++t) {
    corr_num += fit.factors(0, t) * sim.global_factor(t);
    corr_a += fit.factors(0, t) * fit.factors(0, t);
    corr_b += sim.global_factor(t) * sim.global_factor(t);
  }
  CHECK(std::abs(corr_num) / std::sqrt(corr_a * corr_b) > 0.75);
}
