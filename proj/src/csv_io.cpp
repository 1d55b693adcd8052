#include "sdfm/csv_io.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace sdfm {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

int continent_from_code(const std::string& code, int line_no) {
  if (code == "A") return 0;
  if (code == "E") return 1;
  if (code == "U") return 2;
  throw schema_error("line " + std::to_string(line_no) + ": continent must be A, E or U, got '" +
                     code + "'");
}

double parse_return(const std::string& text, int line_no) {
  try {
    std::size_t used = 0;
    const double value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw schema_error("line " + std::to_string(line_no) + ": bad numeric value '" + text + "'");
  }
}

IngestResult assemble(const std::vector<std::string>& dates,
                      const std::array<std::vector<std::string>, 3>& names,
                      const std::map<std::tuple<int, int, int>, double>& cells,
                      const IngestConfig& config) {
  const std::size_t n_assets = names[0].size();
  for (int c = 1; c < 3; ++c)
    if (names[c].size() != n_assets)
      throw schema_error("all three continents must carry the same number of assets (got " +
                         std::to_string(names[0].size()) + "/" + std::to_string(names[1].size()) +
                         "/" + std::to_string(names[2].size()) + ")");
  if (n_assets == 0) throw schema_error("no assets found");

  // Whole days only: trim trailing dates until the period count divides by 6.
  std::size_t n_dates = dates.size();
  while (n_dates > 0 && (3 * n_dates) % 6 != 0) --n_dates;
  if (n_dates < 2) throw schema_error("need at least two whole days of data");

  IngestResult out;
  out.layout.n_assets = static_cast<int>(n_assets);
  out.layout.n_periods = static_cast<int>(3 * n_dates);
  out.panel = ReturnPanel::zeros(out.layout.n_assets, out.layout.n_periods);
  out.registry.dates.assign(dates.begin(), dates.begin() + n_dates);
  out.registry.names = names;

  const double unit = config.percent ? 0.01 : 1.0;
  for (int c = 0; c < 3; ++c) out.missing_rate[c] = Eigen::VectorXd::Zero(out.layout.n_assets);

  for (std::size_t d = 0; d < n_dates; ++d) {
    for (int c = 0; c < 3; ++c) {
      const int t = static_cast<int>(3 * d + c);
      for (std::size_t i = 0; i < n_assets; ++i) {
        const auto it = cells.find({static_cast<int>(d), c, static_cast<int>(i)});
        if (it == cells.end()) {
          out.panel.mask[t][i] = 0;
          out.missing_rate[c](static_cast<int>(i)) += 1.0;
        } else {
          out.panel.values[t](static_cast<int>(i)) = it->second * unit;
        }
      }
    }
  }
  for (int c = 0; c < 3; ++c) out.missing_rate[c] /= static_cast<double>(n_dates);

  if (config.missing == IngestConfig::Missing::drop_day) {
    // Drop whole two-day blocks containing any masked entry.
    std::vector<int> keep;
    for (int b = 0; b < out.layout.day_blocks(); ++b) {
      bool complete = true;
      for (int t = 6 * b; t < 6 * (b + 1); ++t)
        if (out.panel.observed_count(t) != out.layout.n_assets) complete = false;
      if (complete) keep.push_back(b);
    }
    if (keep.empty()) throw schema_error("drop-day policy removed every two-day block");
    ReturnPanel filtered = ReturnPanel::zeros(out.layout.n_assets,
                                              static_cast<int>(6 * keep.size()));
    std::vector<std::string> kept_dates;
    for (std::size_t b = 0; b < keep.size(); ++b) {
      for (int k = 0; k < 6; ++k)
        filtered.values[6 * b + k] = out.panel.values[6 * keep[b] + k];
      kept_dates.push_back(out.registry.dates[2 * keep[b]]);
      kept_dates.push_back(out.registry.dates[2 * keep[b] + 1]);
    }
    out.panel = std::move(filtered);
    out.registry.dates = std::move(kept_dates);
    out.layout.n_periods = out.panel.n_periods();
  }
  return out;
}

}  // namespace

IngestResult ingest_csv(const std::string& path, const IngestConfig& config) {
  std::ifstream in(path);
  if (!in) throw schema_error("cannot open " + path);

  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw schema_error(path + ": empty file");
  ++line_no;
  const auto header = split_csv_line(line);
  if (header.size() != 4 || header[0] != "date" || header[1] != "continent" ||
      header[2] != "asset" || header[3] != "return")
    throw schema_error(path + ": header must be date,continent,asset,return");

  std::set<std::string> date_set;
  std::array<std::set<std::string>, 3> name_sets;
  struct Row {
    std::string date;
    int continent;
    std::string asset;
    double value;
    int line_no;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 4)
      throw schema_error("line " + std::to_string(line_no) + ": expected 4 fields");
    const int c = continent_from_code(fields[1], line_no);
    rows.push_back({fields[0], c, fields[2], parse_return(fields[3], line_no), line_no});
    date_set.insert(fields[0]);
    name_sets[c].insert(fields[2]);
  }
  for (int c = 0; c < 3; ++c)
    if (name_sets[c].empty())
      throw schema_error(std::string("continent ") + continent_code(c) + " has no data rows");

  std::vector<std::string> dates(date_set.begin(), date_set.end());
  std::array<std::vector<std::string>, 3> names;
  for (int c = 0; c < 3; ++c) names[c].assign(name_sets[c].begin(), name_sets[c].end());

  std::map<std::string, int> date_index;
  for (std::size_t d = 0; d < dates.size(); ++d) date_index[dates[d]] = static_cast<int>(d);
  std::array<std::map<std::string, int>, 3> name_index;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < names[c].size(); ++i)
      name_index[c][names[c][i]] = static_cast<int>(i);

  std::map<std::tuple<int, int, int>, double> cells;
  for (const auto& row : rows) {
    const std::tuple<int, int, int> key{date_index[row.date], row.continent,
                                        name_index[row.continent][row.asset]};
    if (cells.count(key))
      throw schema_error("line " + std::to_string(row.line_no) + ": duplicate (date,continent,asset)");
    cells[key] = row.value;
  }
  return assemble(dates, names, cells, config);
}

IngestResult ingest_wide(const std::array<std::string, 3>& paths, const IngestConfig& config) {
  std::set<std::string> date_set;
  std::array<std::vector<std::string>, 3> names;
  std::array<std::map<std::string, std::vector<std::pair<int, double>>, std::less<>>, 3> by_date;

  for (int c = 0; c < 3; ++c) {
    std::ifstream in(paths[c]);
    if (!in) throw schema_error("cannot open " + paths[c]);
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line)) throw schema_error(paths[c] + ": empty file");
    ++line_no;
    auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "date")
      throw schema_error(paths[c] + ": header must be date,<asset>,...");
    names[c].assign(header.begin() + 1, header.end());
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      const auto fields = split_csv_line(line);
      if (fields.size() != header.size())
        throw schema_error(paths[c] + " line " + std::to_string(line_no) + ": field count");
      if (by_date[c].count(fields[0]))
        throw schema_error(paths[c] + " line " + std::to_string(line_no) + ": duplicate date");
      std::vector<std::pair<int, double>> present;
      for (std::size_t i = 1; i < fields.size(); ++i)
        if (!fields[i].empty())
          present.push_back({static_cast<int>(i - 1), parse_return(fields[i], line_no)});
      by_date[c][fields[0]] = std::move(present);
      date_set.insert(fields[0]);
    }
  }

  std::vector<std::string> dates(date_set.begin(), date_set.end());
  std::map<std::string, int> date_index;
  for (std::size_t d = 0; d < dates.size(); ++d) date_index[dates[d]] = static_cast<int>(d);

  std::map<std::tuple<int, int, int>, double> cells;
  for (int c = 0; c < 3; ++c)
    for (const auto& [date, entries] : by_date[c])
      for (const auto& [asset, value] : entries)
        cells[{date_index[date], c, asset}] = value;
  return assemble(dates, names, cells, config);
}

AssetRegistry default_registry(const PanelLayout& layout) {
  AssetRegistry reg;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < layout.n_assets; ++i)
      reg.names[c].push_back(std::string(continent_code(c)) + std::to_string(i + 1));
  for (int d = 0; d < layout.n_periods / 3; ++d) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "d%06d", d + 1);
    reg.dates.push_back(buf);
  }
  return reg;
}

std::string panel_to_csv(const ReturnPanel& panel, const PanelLayout& layout,
                         const AssetRegistry& registry) {
  std::ostringstream out;
  out << "date,continent,asset,return\n";
  for (int t = 0; t < layout.n_periods; ++t) {
    const int c = t % 3;
    const int d = t / 3;
    for (int i = 0; i < layout.n_assets; ++i) {
      if (!panel.observed(t, i)) continue;
      out << registry.dates[d] << "," << continent_code(c) << "," << registry.names[c][i] << ","
          << format_full(panel.values[t](i)) << "\n";
    }
  }
  return out.str();
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::string format_full(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace sdfm
