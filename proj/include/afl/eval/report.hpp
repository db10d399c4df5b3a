#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "afl/tensor.hpp"
#include "json.hpp"

namespace afl::eval {

struct ReportEntry {
  std::string configuration;
  uint64_t seed = 0;
  std::vector<double> values;  // aligned with MetricReport::metric_names
};

struct Aggregate {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
};

// Per-seed metric values of one experiment, grouped by configuration.
struct MetricReport {
  std::string experiment;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> metric_names;
  std::vector<std::string> configurations;
  std::vector<ReportEntry> entries;
  // Kept out of the deterministic files.
  double wall_clock_seconds = 0.0;

  void add(const std::string& configuration, uint64_t seed, std::vector<double> values);
  std::vector<double> values(const std::string& configuration, const std::string& metric) const;
  Aggregate aggregate(const std::string& configuration, const std::string& metric) const;
  double median(const std::string& configuration, const std::string& metric) const {
    return aggregate(configuration, metric).median;
  }
  std::size_t metric_index(const std::string& metric) const;
};

// Median and quartiles with linear interpolation between order statistics.
Aggregate aggregate_of(std::vector<double> v);

// Fixed header: experiment,configuration,seed,<metrics...>
std::string to_csv(const MetricReport& r);
// One record per (seed, configuration).
std::string to_jsonl(const MetricReport& r);
// Config snapshot, metric names, configuration order and aggregates.
std::string to_summary(const MetricReport& r);

// Writes <experiment>.csv, .jsonl, .summary.json and .timing.json.
void write_report(const MetricReport& r, const std::filesystem::path& dir);
// Rebuilds a report from its .summary.json and .jsonl files.
MetricReport load_report(const std::filesystem::path& dir, const std::string& experiment);

struct ScatterLayer {
  std::string name;
  std::string colour;
  Tensor points;  // [n, 2]
};

// One <g> group per layer; the view box is fitted to the first layer.
std::string scatter_svg(const std::string& title, const std::vector<ScatterLayer>& layers);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
// Shortest text that parses back to the same double.
std::string format_number(double v);

}  // namespace afl::eval
