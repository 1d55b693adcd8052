#include "sdfm/montecarlo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "sdfm/gamma.hpp"
#include "sdfm/inference.hpp"
#include "sdfm/qmle.hpp"
#include "sdfm/qmle_md.hpp"
#include "sdfm/rng.hpp"
#include "sdfm/simulate.hpp"

namespace sdfm {

const char* estimator_name(McEstimator e) {
  switch (e) {
    case McEstimator::mle_one_day: return "mle-one-day";
    case McEstimator::qmle_res: return "qmle-res";
    case McEstimator::qmle_md: return "qmle-md";
  }
  return "?";
}

McEstimator estimator_from_name(const std::string& name) {
  if (name == "mle-one-day") return McEstimator::mle_one_day;
  if (name == "qmle-res") return McEstimator::qmle_res;
  if (name == "qmle-md") return McEstimator::qmle_md;
  throw invalid_parameter_error("unknown estimator: " + name);
}

ModelParams draw_dgp(const McDesign& design, std::uint64_t rep_seed) {
  design.validate();
  const int n = design.n_assets;
  auto engine = make_engine(derive_seed(rep_seed, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> var_draw(0.2, 2.0);

  ModelParams params = ModelParams::zeros(n, design.phi);
  for (int c = 0; c < 3; ++c) {
    std::array<double, 4> shift;
    for (int j = 0; j < 4; ++j) shift[j] = unit(engine);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 4; ++j)
        params.loadings[c](i, j) = 0.6 * unit(engine) + 0.6 * shift[j] - 0.2;
    for (int i = 0; i < n; ++i) params.idio_var[c](i) = var_draw(engine);

    // The four smallest idiosyncratic variances lead, ascending; the rest
    // keep their original order.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> by_var = order;
    std::stable_sort(by_var.begin(), by_var.end(), [&](int a, int b) {
      return params.idio_var[c](a) < params.idio_var[c](b);
    });
    std::vector<char> leading(n, 0);
    std::vector<int> rearranged;
    for (int r = 0; r < std::min(4, n); ++r) {
      rearranged.push_back(by_var[r]);
      leading[by_var[r]] = 1;
    }
    for (int i = 0; i < n; ++i)
      if (!leading[i]) rearranged.push_back(i);

    Eigen::MatrixXd z = params.loadings[c];
    Eigen::VectorXd v = params.idio_var[c];
    for (int i = 0; i < n; ++i) {
      params.loadings[c].row(i) = z.row(rearranged[i]);
      params.idio_var[c](i) = v(rearranged[i]);
    }
  }
  return params;
}

namespace {

struct Accum {
  double sum_sq = 0.0;
  double sum_se = 0.0;
  double sum_cover = 0.0;
  long count = 0;

  void add(double est, double truth, double se) {
    const double err = est - truth;
    sum_sq += err * err;
    sum_se += se;
    sum_cover += (std::abs(err) <= 1.96 * se) ? 1.0 : 0.0;
    count += 1;
  }

  void merge(const Accum& other) {
    sum_sq += other.sum_sq;
    sum_se += other.sum_se;
    sum_cover += other.sum_cover;
    count += other.count;
  }
};

constexpr int kRows = 14;  // 12 loading groups + variances + phi

struct RepOutcome {
  std::vector<std::array<Accum, kRows>> rows;  // per estimator
  std::vector<char> failed;
  std::vector<std::string> message;
};

void run_structural_estimator(const McDesign& design, const PanelLayout& layout,
                              const ReturnPanel& panel, const ModelParams& truth,
                              const ModelParams& start, McEstimator which,
                              std::array<Accum, kRows>& rows) {
  EmOptions opts;
  FitResult fit = which == McEstimator::mle_one_day
                      ? fit_mle_one_day(panel, layout, opts, start)
                      : fit_qmle_res(panel, layout, opts, start);
  align_signs_to(fit.params, truth);
  const StdErrorReport se = se_numerical_hessian(
      fit.params, panel, layout,
      which == McEstimator::mle_one_day ? HessianTarget::mle_one_day : HessianTarget::qmle_res);

  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < design.n_assets; ++i) {
      for (int lag = 0; lag < 4; ++lag)
        rows[4 * c + lag].add(fit.params.loadings[c](i, lag), truth.loadings[c](i, lag),
                              se.loading_se[c](i, lag));
      rows[12].add(fit.params.idio_var[c](i), truth.idio_var[c](i), se.idio_se[c](i));
    }
  rows[13].add(fit.params.phi, truth.phi, se.phi_se);
}

void run_qmle_md(const McDesign& design, const PanelLayout& layout, const ReturnPanel& panel,
                 const ModelParams& truth, const ModelParams& start,
                 std::array<Accum, kRows>& rows) {
  const int n = design.n_assets;
  const int t_blocks = layout.day_blocks();
  QmleOptions qopts;
  qopts.em.max_iter = 5000;

  TwoDayFitResult fit = fit_qmle(panel, layout, qopts, start);
  const TwoDayParams truth_td = build_two_day(truth, layout);
  align_two_day_signs_to(fit.params, truth_td);
  const AsymptoticMachinery mach = build_gamma(fit.params, layout);

  auto solve_for = [&](const Selector& sel) {
    MinimumDistanceProblem problem;
    problem.selector = sel;
    problem.map = theta_map_for(sel);
    problem.h_hat = assemble_h(fit.params, sel);
    problem.h_cov = estimate_h_cov(fit.params, sel, mach);
    problem.weight = Eigen::LDLT<Eigen::MatrixXd>(problem.h_cov)
                         .solve(Eigen::MatrixXd::Identity(sel.size(), sel.size()));
    problem.weight = 0.5 * (problem.weight + problem.weight.transpose()).eval();
    problem.theta_start = md_theta_start(fit.params, problem.map);
    problem.t_blocks = t_blocks;
    return solve_md(problem);
  };

  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < n; ++j) {
      const Selector sel = loading_selector(c, j, layout);
      const MdResult md = solve_for(sel);
      const ThetaMap map = theta_map_for(sel);
      const int off = map.z_offset(c, j);
      for (int lag = 0; lag < 4; ++lag)
        rows[4 * c + lag].add(md.theta_check(off + lag), truth.loadings[c](j, lag),
                              std::sqrt(std::max(md.o_cov(off + lag, off + lag), 0.0)));
    }

  {
    const Selector sel = phi_selector(layout);
    const MdResult md = solve_for(sel);
    const ThetaMap map = theta_map_for(sel);
    const int off = map.phi_offset();
    rows[13].add(md.theta_check(off), truth.phi,
                 std::sqrt(std::max(md.o_cov(off, off), 0.0)));
  }

  // Idiosyncratic variances pass through from the QMLE; all 6N day copies are
  // scored against their structural values.
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < n; ++j) {
      const double est = fit.params.idio_var(rowblock_index(k, j, n));
      rows[12].add(est, truth.idio_var[continent_of_block(k)](j),
                   se_qmle_sigma(est, t_blocks));
    }
}

RepOutcome run_rep(const McDesign& design, int rep) {
  const std::uint64_t rep_seed = derive_seed(design.seed, static_cast<std::uint64_t>(rep));
  const PanelLayout layout{design.n_assets, design.n_periods};
  RepOutcome outcome;
  outcome.rows.resize(design.estimators.size());
  outcome.failed.assign(design.estimators.size(), 0);
  outcome.message.assign(design.estimators.size(), "");

  ModelParams truth;
  SimulationResult sim;
  ModelParams start;
  try {
    truth = draw_dgp(design, rep_seed);
    sim = simulate(truth, layout, derive_seed(rep_seed, 1));
    start = starting_values(sim.panel, layout);
  } catch (const std::exception& ex) {
    for (std::size_t e = 0; e < design.estimators.size(); ++e) {
      outcome.failed[e] = 1;
      outcome.message[e] = ex.what();
    }
    return outcome;
  }

  for (std::size_t e = 0; e < design.estimators.size(); ++e) {
    try {
      if (design.estimators[e] == McEstimator::qmle_md)
        run_qmle_md(design, layout, sim.panel, truth, start, outcome.rows[e]);
      else
        run_structural_estimator(design, layout, sim.panel, truth, start, design.estimators[e],
                                 outcome.rows[e]);
    } catch (const std::exception& ex) {
      outcome.failed[e] = 1;
      outcome.message[e] = ex.what();
      outcome.rows[e] = {};
    }
  }
  return outcome;
}

}  // namespace

MetricsReport run_study(const McDesign& design) {
  design.validate();
  const int n_est = static_cast<int>(design.estimators.size());

  std::vector<RepOutcome> outcomes(design.n_reps);
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  const int threads = std::max(1, std::min(design.threads > 0 ? design.threads : hw,
                                           design.n_reps));
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= design.n_reps) return;
      outcomes[rep] = run_rep(design, rep);
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  MetricsReport report;
  report.design = design;
  report.n_reps = design.n_reps;
  report.failures.assign(n_est, 0);
  report.failure_messages.assign(n_est, "");
  report.row_labels = {"z^A_0", "z^A_1", "z^A_2", "z^A_3", "z^E_0", "z^E_1", "z^E_2",
                       "z^E_3", "z^U_0", "z^U_1", "z^U_2", "z^U_3", "Sigma_c", "phi"};

  std::vector<std::array<Accum, kRows>> totals(n_est);
  for (const auto& outcome : outcomes) {
    for (int e = 0; e < n_est; ++e) {
      if (outcome.failed[e]) {
        report.failures[e] += 1;
        if (report.failure_messages[e].empty()) report.failure_messages[e] = outcome.message[e];
        continue;
      }
      for (int r = 0; r < kRows; ++r) totals[e][r].merge(outcome.rows[e][r]);
    }
  }

  for (int e = 0; e < n_est; ++e)
    if (report.failures[e] * 20 > design.n_reps)  // more than 5%
      throw non_convergence_error(std::string("run_study: estimator ") +
                                  estimator_name(design.estimators[e]) +
                                  " failed in more than 5% of replications: " +
                                  report.failure_messages[e]);

  report.table.assign(kRows, std::vector<GroupMetrics>(n_est));
  for (int r = 0; r < kRows; ++r)
    for (int e = 0; e < n_est; ++e) {
      const Accum& acc = totals[e][r];
      GroupMetrics g;
      if (acc.count > 0) {
        g.rmse = std::sqrt(acc.sum_sq / acc.count);
        g.ave_se = acc.sum_se / acc.count;
        g.cove = acc.sum_cover / acc.count;
      }
      report.table[r][e] = g;
    }
  return report;
}

namespace {

std::string fixed6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

std::string emit_table(const MetricsReport& report, TableFormat format) {
  const int n_est = static_cast<int>(report.design.estimators.size());
  if (format == TableFormat::csv) {
    std::ostringstream out;
    out << "group";
    for (int e = 0; e < n_est; ++e) {
      const std::string name = estimator_name(report.design.estimators[e]);
      out << "," << name << "_rmse," << name << "_ave_se," << name << "_cove";
    }
    out << "\n";
    for (std::size_t r = 0; r < report.row_labels.size(); ++r) {
      out << report.row_labels[r];
      for (int e = 0; e < n_est; ++e) {
        const GroupMetrics& g = report.table[r][e];
        out << "," << fixed6(g.rmse) << "," << fixed6(g.ave_se) << "," << fixed6(g.cove);
      }
      out << "\n";
    }
    return out.str();
  }
  if (format == TableFormat::json) {
    nlohmann::json j;
    j["n_assets"] = report.design.n_assets;
    j["n_periods"] = report.design.n_periods;
    j["phi"] = report.design.phi;
    j["n_reps"] = report.design.n_reps;
    j["rows"] = nlohmann::json::array();
    for (std::size_t r = 0; r < report.row_labels.size(); ++r) {
      nlohmann::json row;
      row["group"] = report.row_labels[r];
      for (int e = 0; e < n_est; ++e) {
        nlohmann::json cell;
        cell["rmse"] = report.table[r][e].rmse;
        cell["ave_se"] = report.table[r][e].ave_se;
        cell["cove"] = report.table[r][e].cove;
        row[estimator_name(report.design.estimators[e])] = cell;
      }
      j["rows"].push_back(row);
    }
    return j.dump(2) + "\n";
  }

  std::ostringstream out;
  out << "N=" << report.design.n_assets << ", T=" << report.design.n_periods << ", "
      << report.n_reps << " replications\n";
  out << "           ";
  for (int e = 0; e < n_est; ++e) {
    char buf[80];
    std::snprintf(buf, sizeof buf, " | %-32s", estimator_name(report.design.estimators[e]));
    out << buf;
  }
  out << "\n" << "group      ";
  for (int e = 0; e < n_est; ++e) out << " |       RMSE     Ave.se       Cove";
  out << "\n";
  for (std::size_t r = 0; r < report.row_labels.size(); ++r) {
    char label[32];
    std::snprintf(label, sizeof label, "%-11s", report.row_labels[r].c_str());
    out << label;
    for (int e = 0; e < n_est; ++e) {
      const GroupMetrics& g = report.table[r][e];
      char buf[80];
      std::snprintf(buf, sizeof buf, " | %10.4f %10.4f %10.4f", g.rmse, g.ave_se, g.cove);
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::string run_manifest_json(const MetricsReport& report) {
  nlohmann::json j;
  j["design"]["n_assets"] = report.design.n_assets;
  j["design"]["n_periods"] = report.design.n_periods;
  j["design"]["phi"] = report.design.phi;
  j["design"]["n_reps"] = report.design.n_reps;
  j["design"]["seed"] = report.design.seed;
  j["design"]["estimators"] = nlohmann::json::array();
  for (auto e : report.design.estimators)
    j["design"]["estimators"].push_back(estimator_name(e));
  j["failures"] = report.failures;
  j["standard_errors"] = {
      {"mle-one-day", "numerical Hessian of the exact log-likelihood (heuristic)"},
      {"qmle-res", "numerical Hessian of the working-independence log-likelihood (heuristic)"},
      {"qmle-md", "minimum-distance sandwich with efficient weighting; variances use the "
                  "chi-square limit of the QMLE"}};
  j["software"] = "sdfm 0.1.0";
  return j.dump(2) + "\n";
}

}  // namespace sdfm
