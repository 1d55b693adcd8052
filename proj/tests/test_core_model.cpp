#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "sdfm/decompose.hpp"
#include "sdfm/simulate.hpp"
#include "sdfm/state_space.hpp"
#include "sdfm/two_day.hpp"

using namespace sdfm;

namespace {

ModelParams simple_params(int n, double phi) {
  ModelParams p = ModelParams::zeros(n, phi);
  for (int c = 0; c < 3; ++c) {
    p.loadings[c].setConstant(0.5);
    p.idio_var[c].setConstant(1.0);
  }
  return p;
}

}  // namespace

TEST_CASE("state space matrices match the closed form") {
  PanelLayout layout{2, 12};
  ModelParams p = simple_params(2, 0.3);
  StateSpaceSystem sys = build_state_space(p, layout);

  CHECK(sys.transition(0, 0) == doctest::Approx(0.3));
  CHECK(sys.transition(0, 1) == 0.0);
  CHECK(sys.transition(1, 0) == 1.0);
  CHECK(sys.transition(2, 1) == 1.0);
  CHECK(sys.transition.row(3).cwiseAbs().sum() == 0.0);

  p.phi = 0.0;
  sys = build_state_space(p, layout);
  CHECK(sys.transition.cwiseAbs().sum() == 2.0);  // only the two shift ones

  // R always has exactly two unit entries.
  CHECK(sys.noise_loading.cwiseAbs().sum() == 2.0);
  CHECK(sys.noise_loading(0, 0) == 1.0);
  CHECK(sys.noise_loading(3, 1) == 1.0);

  p.phi = 1.01;
  CHECK_THROWS_AS(build_state_space(p, layout), invalid_parameter_error);
  p.phi = 0.3;
  p.idio_var[1](0) = 0.0;
  CHECK_THROWS_AS(build_state_space(p, layout), invalid_parameter_error);
}

TEST_CASE("two-day factor covariance") {
  PanelLayout layout{1, 12};
  ModelParams p = simple_params(1, 0.0);
  TwoDayParams td = build_two_day(p, layout);
  CHECK((td.factor_cov - Eigen::MatrixXd::Identity(14, 14)).cwiseAbs().maxCoeff() == 0.0);

  p.phi = 0.3;
  td = build_two_day(p, layout);
  CHECK(td.factor_cov(0, 1) == doctest::Approx(0.3 / (1.0 - 0.09)).epsilon(1e-14));
  CHECK(td.factor_cov(0, 7) == doctest::Approx(std::pow(0.3, 7) / 0.91).epsilon(1e-12));
  CHECK(td.factor_cov.bottomRightCorner(6, 6).isIdentity(0.0));
}

TEST_CASE("two-day loading pattern at N=1") {
  PanelLayout layout{1, 12};
  ModelParams p = ModelParams::zeros(1, 0.3);
  for (int c = 0; c < 3; ++c) {
    p.loadings[c] << 1.0, 2.0, 3.0, 4.0;
    p.idio_var[c].setConstant(1.0);
  }
  TwoDayParams td = build_two_day(p, layout);
  REQUIRE(td.loading.rows() == 6);
  REQUIRE(td.loading.cols() == 14);

  // First row block: nonzeros exactly in columns 6,7,8,14 (1-based).
  for (int a = 0; a < 14; ++a) {
    const bool expected_nonzero = (a == 5 || a == 6 || a == 7 || a == 13);
    CHECK((td.loading(0, a) != 0.0) == expected_nonzero);
  }
  CHECK(td.loading(0, 5) == 1.0);
  CHECK(td.loading(0, 6) == 2.0);
  CHECK(td.loading(0, 7) == 3.0);
  CHECK(td.loading(0, 13) == 4.0);
}

TEST_CASE("two-day loading zero pattern holds for random parameters") {
  std::mt19937_64 engine(7);
  PanelLayout layout{4, 24};
  for (int rep = 0; rep < 25; ++rep) {
    ModelParams p = oracle::random_params(4, engine);
    TwoDayParams td = build_two_day(p, layout);
    for (int k = 0; k < 6; ++k)
      for (int j = 0; j < 4; ++j)
        for (int a = 0; a < 14; ++a) {
          bool structural = false;
          for (int lag = 0; lag < 4; ++lag)
            if (factor_column(k, lag) == a) structural = true;
          if (!structural) CHECK(td.loading(rowblock_index(k, j, 4), a) == 0.0);
        }
    // Structural positions carry the right parameter values.
    for (int k = 0; k < 6; ++k)
      for (int j = 0; j < 4; ++j)
        for (int lag = 0; lag < 4; ++lag)
          CHECK(td.loading(rowblock_index(k, j, 4), factor_column(k, lag)) ==
                p.loadings[continent_of_block(k)](j, lag));
  }
}

TEST_CASE("implied covariance simple cases") {
  PanelLayout layout{2, 12};
  ModelParams p = ModelParams::zeros(2, 0.0);
  for (int c = 0; c < 3; ++c) p.idio_var[c] << 0.7, 1.3;
  TwoDayParams td = build_two_day(p, layout);
  Eigen::MatrixXd cov = implied_covariance(td);
  CHECK((cov - Eigen::MatrixXd(td.idio_var.asDiagonal())).cwiseAbs().maxCoeff() == 0.0);

  // One unit loading column with identity factor covariance adds a rank-one
  // block on the two Asia day rows.
  p.loadings[0](0, 0) = 1.0;
  td = build_two_day(p, layout);
  cov = implied_covariance(td);
  CHECK(cov(0, 0) == doctest::Approx(1.7));
  CHECK(cov(3 * 2, 3 * 2) == doctest::Approx(1.7));  // day-two Asia copy
  CHECK(cov(0, 1) == 0.0);
}

TEST_CASE("implied covariance equals the stacked one-day covariance") {
  std::mt19937_64 engine(11);
  PanelLayout layout{3, 12};
  for (int rep = 0; rep < 50; ++rep) {
    ModelParams p = oracle::random_params(3, engine, 0.95);
    const Eigen::MatrixXd direct = oracle::stacked_covariance(p, 3);
    const Eigen::MatrixXd implied = implied_covariance(build_two_day(p, layout));
    CHECK((direct - implied).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("factor covariance stays positive definite near the unit root") {
  PanelLayout layout{1, 12};
  for (double phi : {-1.0 + 1e-6, -0.9, -0.5, 0.0, 0.5, 0.9, 1.0 - 1e-6}) {
    ModelParams p = simple_params(1, phi);
    TwoDayParams td = build_two_day(p, layout);
    Eigen::LLT<Eigen::MatrixXd> llt(td.factor_cov);
    CHECK(llt.info() == Eigen::Success);
  }
}

TEST_CASE("implied covariance matches simulated two-day stacks") {
  // Monte Carlo oracle: one million stacked blocks.
  const int n = 2;
  const int t_blocks = 1000000;
  PanelLayout layout{n, 6 * t_blocks};
  std::mt19937_64 engine(3);
  ModelParams p = oracle::random_params(n, engine, 0.6);
  SimulationResult sim = simulate(p, layout, 99);
  const Eigen::MatrixXd stacked = stack_two_day(sim.panel, layout);
  const Eigen::MatrixXd sample =
      stacked * stacked.transpose() / static_cast<double>(t_blocks);
  const Eigen::MatrixXd implied = implied_covariance(build_two_day(p, layout));
  // Entry scale is O(1); Monte Carlo error at 1e6 draws is about 1e-3 with
  // dependence inflation, so compare at 2e-2.
  CHECK((sample - implied).cwiseAbs().maxCoeff() < 2e-2);
}

TEST_CASE("simulation basic properties") {
  PanelLayout layout{3, 900};

  // All-zero loadings with unit variances give iid standard normals.
  ModelParams p = ModelParams::zeros(3, 0.3);
  SimulationResult sim = simulate(p, layout, 5);
  double sum = 0.0, ssq = 0.0;
  int count = 0;
  for (int t = 0; t < layout.n_periods; ++t)
    for (int i = 0; i < 3; ++i) {
      sum += sim.panel.values[t](i);
      ssq += sim.panel.values[t](i) * sim.panel.values[t](i);
      ++count;
    }
  const double mean = sum / count;
  const double var = ssq / count - mean * mean;
  CHECK(std::abs(mean) < 0.08);
  CHECK(std::abs(var - 1.0) < 0.12);

  // Determinism.
  SimulationResult sim2 = simulate(p, layout, 5);
  CHECK(sim.panel.values[10] == sim2.panel.values[10]);
  CHECK(sim.global_factor == sim2.global_factor);

  // White-noise global factor at phi = 0.
  PanelLayout long_layout{1, 60000};
  ModelParams q = ModelParams::zeros(1, 0.0);
  SimulationResult sw = simulate(q, long_layout, 17);
  double lag_cov = 0.0, var_f = 0.0;
  for (int t = 1; t < long_layout.n_periods; ++t) {
    lag_cov += sw.global_factor(t) * sw.global_factor(t - 1);
    var_f += sw.global_factor(t) * sw.global_factor(t);
  }
  CHECK(std::abs(lag_cov / var_f) < 0.02);
}

TEST_CASE("long-run simulated variance matches the decomposition") {
  // Scaled-down version of the simulation design with a long sample.
  const int n = 6;
  PanelLayout layout{n, 75000};
  std::mt19937_64 engine(21);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ModelParams p = ModelParams::zeros(n, 0.3);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 4; ++j) p.loadings[c](i, j) = 0.6 * unit(engine) + 0.1;
      p.idio_var[c](i) = 0.2 + 1.8 * unit(engine);
    }
  }
  SimulationResult sim = simulate(p, layout, 31);
  DecompositionReport rep = variance_decomposition(p);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      double ssq = 0.0, sum = 0.0;
      int count = 0;
      for (int t = c; t < layout.n_periods; t += 3) {
        sum += sim.panel.values[t](i);
        ssq += sim.panel.values[t](i) * sim.panel.values[t](i);
        ++count;
      }
      const double var = ssq / count - (sum / count) * (sum / count);
      CHECK(var == doctest::Approx(rep.total[c](i)).epsilon(0.05));
    }
  }
}

TEST_CASE("variance decomposition closed-form cases") {
  // Pure continental loading.
  ModelParams p = ModelParams::zeros(1, 0.3);
  p.loadings[0](0, 3) = 1.0;
  p.idio_var[0](0) = 1e-12;
  p.idio_var[1](0) = p.idio_var[2](0) = 1.0;
  DecompositionReport rep = variance_decomposition(p);
  CHECK(rep.var_continental[0](0) == doctest::Approx(1.0));
  CHECK(rep.var_global[0](0) == doctest::Approx(0.0));

  // phi = 0: global part is the squared norm of the global loadings.
  ModelParams q = ModelParams::zeros(1, 0.0);
  q.loadings[1].row(0) << 0.2, -0.4, 0.6, 0.0;
  DecompositionReport rep2 = variance_decomposition(q);
  CHECK(rep2.var_global[1](0) == doctest::Approx(0.04 + 0.16 + 0.36));

  // phi = 0.3 closed form.
  ModelParams r = ModelParams::zeros(1, 0.3);
  r.loadings[2].row(0) << 1.0, 1.0, 0.0, 0.0;
  r.idio_var[2](0) = 0.5;
  DecompositionReport rep3 = variance_decomposition(r);
  CHECK(rep3.var_global[2](0) == doctest::Approx((1.0 + 1.0 + 2.0 * 0.3) / (1.0 - 0.09)));
  CHECK(rep3.total[2](0) ==
        doctest::Approx(rep3.var_global[2](0) + rep3.var_continental[2](0) + 0.5));
}

TEST_CASE("decomposition additivity and the oracle formula on random draws") {
  std::mt19937_64 engine(13);
  for (int rep = 0; rep < 30; ++rep) {
    ModelParams p = oracle::random_params(3, engine, 0.95);
    DecompositionReport r = variance_decomposition(p);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 3; ++i) {
        CHECK(r.total[c](i) == doctest::Approx(r.var_global[c](i) + r.var_continental[c](i) +
                                               r.var_idiosyncratic[c](i))
                                   .epsilon(1e-12));
        CHECK(r.var_global[c](i) ==
              doctest::Approx(oracle::direct_global_variance(p.phi, p.loadings[c].row(i)))
                  .epsilon(1e-10));
      }
  }
}

TEST_CASE("standardize_returns") {
  PanelLayout layout{1, 6};
  ReturnPanel panel = ReturnPanel::zeros(1, 6);
  // Asia series (periods 0 and 3): values 1, 3.
  panel.values[0](0) = 1.0;
  panel.values[3](0) = 3.0;
  panel.values[1](0) = -1.0;
  panel.values[4](0) = 1.0;
  panel.values[2](0) = 10.0;
  panel.values[5](0) = 30.0;

  Standardization std1 = standardize_returns(panel, layout);
  CHECK(std1.panel.values[0](0) == doctest::Approx(-1.0));
  CHECK(std1.panel.values[3](0) == doctest::Approx(1.0));
  CHECK(std1.mean[0](0) == doctest::Approx(2.0));
  // Back-transformation recovers the original series.
  CHECK(std1.panel.values[0](0) * std1.scale[0](0) + std1.mean[0](0) == doctest::Approx(1.0));

  // Idempotence.
  Standardization std2 = standardize_returns(std1.panel, layout);
  for (int t = 0; t < 6; ++t)
    CHECK(std2.panel.values[t](0) == doctest::Approx(std1.panel.values[t](0)).epsilon(1e-12));

  // Constant series.
  panel.values[0](0) = 2.0;
  panel.values[3](0) = 2.0;
  CHECK_THROWS_AS(standardize_returns(panel, layout), degenerate_series_error);
}

TEST_CASE("decomposition rejects unit roots") {
  CHECK_THROWS_AS(stationary_state_cov(1.0), singular_solve_error);
}
