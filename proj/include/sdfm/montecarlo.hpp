#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdfm/em.hpp"
#include "sdfm/model.hpp"

namespace sdfm {

enum class McEstimator { mle_one_day, qmle_res, qmle_md };

const char* estimator_name(McEstimator e);
McEstimator estimator_from_name(const std::string& name);

struct McDesign {
  int n_assets = 50;
  int n_periods = 750;
  double phi = 0.3;
  int n_reps = 200;
  std::uint64_t seed = 1;
  std::vector<McEstimator> estimators{McEstimator::mle_one_day};
  int threads = 0;  // 0 = hardware concurrency

  void validate() const {
    if (n_reps < 1) throw invalid_parameter_error("McDesign: n_reps must be >= 1");
    if (n_periods < 6 || n_periods % 6 != 0)
      throw invalid_parameter_error("McDesign: n_periods must be a multiple of 6");
    if (n_assets < 1) throw invalid_parameter_error("McDesign: n_assets must be positive");
    if (estimators.empty()) throw invalid_parameter_error("McDesign: no estimators requested");
  }
};

struct GroupMetrics {
  double rmse = 0.0;
  double ave_se = 0.0;
  double cove = 0.0;
};

// Report rows follow the published layout: the twelve loading groups
// (continent-major, loading column within), then the pooled idiosyncratic
// variances, then the AR coefficient.
struct MetricsReport {
  McDesign design;
  std::vector<std::string> row_labels;                // 14 rows
  std::vector<std::vector<GroupMetrics>> table;       // [row][estimator]
  std::vector<int> failures;                          // per estimator
  std::vector<std::string> failure_messages;          // first message per estimator
  int n_reps = 0;
};

// Parameter draw of the simulation design: idiosyncratic variances uniform on
// [0.2, 2], loadings 0.6 a + 0.6 d - 0.2 with independent uniform[0,1] draws
// (d shared within a loading column per continent), and assets reordered so
// the four smallest variances lead each continent.
ModelParams draw_dgp(const McDesign& design, std::uint64_t rep_seed);

MetricsReport run_study(const McDesign& design);

enum class TableFormat { csv, json, text };
std::string emit_table(const MetricsReport& report, TableFormat format);

// Design, seed, software and standard-error provenance for a run.
std::string run_manifest_json(const MetricsReport& report);

}  // namespace sdfm
