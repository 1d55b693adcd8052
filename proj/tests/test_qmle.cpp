#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "sdfm/qmle.hpp"
#include "sdfm/simulate.hpp"
#include "sdfm/two_day.hpp"

using namespace sdfm;

namespace {

ModelParams positive_truth(int n, double phi, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  std::uniform_real_distribution<double> unif(0.15, 0.95);
  std::uniform_real_distribution<double> var_draw(0.3, 1.6);
  ModelParams p = ModelParams::zeros(n, phi);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 4; ++j) p.loadings[c](i, j) = unif(engine);
      p.idio_var[c](i) = var_draw(engine);
    }
  return p;
}

}  // namespace

TEST_CASE("restriction set has exactly 196 descriptors") {
  PanelLayout layout{6, 120};
  const auto rs = restriction_set(layout);
  CHECK(rs.size() == 196);

  int zeros = 0, equals = 0, m_restrictions = 0;
  for (const auto& d : rs) {
    switch (d.kind) {
      case RestrictionDescriptor::Kind::loading_zero: ++zeros; break;
      case RestrictionDescriptor::Kind::loading_equal: ++equals; break;
      default: ++m_restrictions; break;
    }
  }
  CHECK(zeros == 156);
  CHECK(equals == 21);
  CHECK(m_restrictions == 19);

  // Step I.1 content: block 1 (index 0), factor rows {1..5,9..13} (1-based),
  // assets {1..4}.
  std::set<std::pair<int, int>> i1;
  for (const auto& d : rs)
    if (d.step == "I.1") {
      CHECK(d.k1 == 0);
      i1.insert({d.a1, d.j});
    }
  CHECK(i1.size() == 40);
  const std::set<int> expected_rows{0, 1, 2, 3, 4, 8, 9, 10, 11, 12};
  for (const auto& [a, j] : i1) {
    CHECK(expected_rows.count(a) == 1);
    CHECK(j >= 0);
    CHECK(j <= 3);
  }

  PanelLayout small{4, 120};
  CHECK_THROWS_AS(restriction_set(small), layout_too_small_error);
}

TEST_CASE("the true structure satisfies every restriction") {
  PanelLayout layout{6, 120};
  const auto rs = restriction_set(layout);
  std::mt19937_64 engine(5);
  for (int rep = 0; rep < 10; ++rep) {
    ModelParams p = oracle::random_params(6, engine, 0.9);
    const TwoDayParams td = build_two_day(p, layout);
    CHECK(max_violation(td, rs) < 1e-12);
  }
}

TEST_CASE("two-day E-step matches the dense conditional-moment formulas") {
  std::mt19937_64 engine(6);
  PanelLayout layout{3, 60};
  ModelParams p = oracle::random_params(3, engine, 0.6);
  SimulationResult sim = simulate(p, layout, 44);
  const TwoDayParams td = build_two_day(p, layout);
  const Eigen::MatrixXd stacked = stack_two_day(sim.panel, layout);
  const int t_blocks = layout.day_blocks();

  const TwoDayEStep e = two_day_e_step(td, stacked);

  // Dense reference.
  const Eigen::MatrixXd sigma_yy = implied_covariance(td);
  const Eigen::MatrixXd s_yy = stacked * stacked.transpose() / t_blocks;
  const Eigen::MatrixXd siginv = sigma_yy.ldlt().solve(Eigen::MatrixXd::Identity(18, 18));
  const Eigen::MatrixXd w_fy_dense = td.factor_cov * td.loading.transpose() * siginv * s_yy;
  const Eigen::MatrixXd proj = td.factor_cov * td.loading.transpose() * siginv;
  const Eigen::MatrixXd w_ff_dense = td.factor_cov -
                                     proj * td.loading * td.factor_cov +
                                     proj * s_yy * proj.transpose();
  CHECK((e.w_fy - w_fy_dense).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((e.w_ff - w_ff_dense).cwiseAbs().maxCoeff() < 1e-9);

  // Pseudo log-likelihood against a dense evaluation.
  double logdet = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(sigma_yy);
  for (int i = 0; i < 18; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double dense_ll =
      -0.5 * t_blocks *
      (18 * std::log(2.0 * M_PI) + logdet + (s_yy * siginv).trace());
  CHECK(e.loglik == doctest::Approx(dense_ll).epsilon(1e-10));
}

TEST_CASE("QMLE converges to the first-order conditions and the restriction set") {
  PanelLayout layout{10, 1800};
  const ModelParams truth = positive_truth(10, 0.3, 77);
  SimulationResult sim = simulate(truth, layout, 21);

  QmleOptions opts;
  const TwoDayFitResult fit = fit_qmle(sim.panel, layout, opts, truth);
  CHECK(fit.converged);
  CHECK(fit.foc_residual < 1e-4);
  CHECK(fit.rotation_violation < 1e-8);

  const auto rs = restriction_set(layout);
  CHECK(max_violation(fit.params, rs) < 1e-6);

  // The fit stays in the neighborhood of the truth (signs aligned).
  TwoDayFitResult aligned = fit;
  const TwoDayParams truth_td = build_two_day(truth, layout);
  align_two_day_signs_to(aligned.params, truth_td);
  CHECK((aligned.params.loading - truth_td.loading).cwiseAbs().maxCoeff() < 0.75);
}

TEST_CASE("QMLE is invariant to a sign flip of the start") {
  PanelLayout layout{10, 1800};
  const ModelParams truth = positive_truth(10, 0.25, 31);
  SimulationResult sim = simulate(truth, layout, 13);

  QmleOptions opts;
  ModelParams flipped = truth;
  for (int c = 0; c < 3; ++c) flipped.loadings[c] *= -1.0;

  const TwoDayFitResult a = fit_qmle(sim.panel, layout, opts, truth);
  const TwoDayFitResult b = fit_qmle(sim.panel, layout, opts, flipped);
  CHECK((a.params.loading - b.params.loading).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((a.params.factor_cov - b.params.factor_cov).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("GLS factor extraction") {
  PanelLayout layout{5, 120};
  const ModelParams params = positive_truth(5, 0.3, 9);
  const TwoDayParams td = build_two_day(params, layout);

  // Noiseless data reproduces the factors exactly.
  std::mt19937_64 engine(14);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd f(14, 7);
  for (int b = 0; b < 7; ++b)
    for (int i = 0; i < 14; ++i) f(i, b) = gauss(engine);
  const Eigen::MatrixXd clean = td.loading * f;
  const Eigen::MatrixXd recovered = extract_factors_gls(td, clean);
  CHECK((recovered - f).cwiseAbs().maxCoeff() < 1e-10);

  // Scaling equivariance: scaling one factor column by c scales the
  // extracted factor by 1/c.
  TwoDayParams scaled = td;
  scaled.loading.col(2) *= 2.0;
  const Eigen::MatrixXd rescaled = extract_factors_gls(scaled, clean);
  CHECK((rescaled.row(2) * 2.0 - recovered.row(2)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("rotation failure surfaces as an error") {
  PanelLayout layout{5, 120};
  const ModelParams params = positive_truth(5, 0.3, 10);
  TwoDayParams td = build_two_day(params, layout);
  // An absurd tolerance cannot be met.
  const auto rs = restriction_set(layout);
  TwoDayParams distorted = td;
  distorted.loading.setRandom();
  distorted.factor_cov = Eigen::MatrixXd::Identity(14, 14) * 2.0;
  CHECK_THROWS_AS(rotate_to_restrictions(distorted, rs, 1e-30, 2), rotation_failure_error);
}
