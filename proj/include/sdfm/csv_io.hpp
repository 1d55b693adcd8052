#pragma once

#include <array>
#include <string>
#include <vector>

#include "sdfm/model.hpp"

namespace sdfm {

struct IngestConfig {
  bool percent = false;  // returns given in percentage points
  enum class Missing { mask, drop_day } missing = Missing::mask;
};

struct AssetRegistry {
  std::array<std::vector<std::string>, 3> names;  // per continent, panel order
  std::vector<std::string> dates;                 // ascending
};

struct IngestResult {
  ReturnPanel panel;
  PanelLayout layout;
  AssetRegistry registry;
  std::array<Eigen::VectorXd, 3> missing_rate;  // per continent, per asset
};

// Long-form CSV with header date,continent,asset,return. Dates are ISO-8601
// (lexicographic order is chronological); continents are A, E, U; missing
// rows become masked entries. Duplicate keys raise schema_error with the
// offending line number. Trailing dates are dropped if needed so the period
// count is a multiple of 6.
IngestResult ingest_csv(const std::string& path, const IngestConfig& config = {});

// Wide form: one file per continent with header date,<asset>,<asset>,...
// Empty cells are masked.
IngestResult ingest_wide(const std::array<std::string, 3>& paths,
                         const IngestConfig& config = {});

// Inverse of ingest_csv for unmasked entries (long form, full precision).
std::string panel_to_csv(const ReturnPanel& panel, const PanelLayout& layout,
                         const AssetRegistry& registry);

AssetRegistry default_registry(const PanelLayout& layout);

// Writes via a temporary file plus rename so interrupted runs leave no
// partial output.
void atomic_write(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

std::string format_full(double x);  // round-trip precision

}  // namespace sdfm
