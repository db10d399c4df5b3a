#include "afl/eval/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "afl/error.hpp"

namespace afl::eval {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void MetricReport::add(const std::string& configuration, uint64_t seed, std::vector<double> values) {
  if (values.size() != metric_names.size()) throw ShapeError("report entry has the wrong number of metrics");
  if (std::find(configurations.begin(), configurations.end(), configuration) == configurations.end()) {
    configurations.push_back(configuration);
  }
  entries.push_back({configuration, seed, std::move(values)});
}

std::size_t MetricReport::metric_index(const std::string& metric) const {
  auto it = std::find(metric_names.begin(), metric_names.end(), metric);
  if (it == metric_names.end()) throw NotFoundError("report has no metric '" + metric + "'");
  return static_cast<std::size_t>(it - metric_names.begin());
}

std::vector<double> MetricReport::values(const std::string& configuration, const std::string& metric) const {
  const std::size_t k = metric_index(metric);
  std::vector<double> out;
  for (const auto& e : entries)
    if (e.configuration == configuration) out.push_back(e.values[k]);
  if (out.empty()) throw NotFoundError("report has no configuration '" + configuration + "'");
  return out;
}

Aggregate MetricReport::aggregate(const std::string& configuration, const std::string& metric) const {
  return aggregate_of(values(configuration, metric));
}

Aggregate aggregate_of(std::vector<double> v) {
  if (v.empty()) throw ShapeError("aggregate of no values");
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {q(0.5), q(0.25), q(0.75)};
}

std::string to_csv(const MetricReport& r) {
  std::ostringstream o;
  o << "experiment,configuration,seed";
  for (const auto& m : r.metric_names) o << "," << m;
  o << "\n";
  for (const auto& e : r.entries) {
    o << r.experiment << "," << e.configuration << "," << e.seed;
    for (double v : e.values) o << "," << format_number(v);
    o << "\n";
  }
  return o.str();
}

std::string to_jsonl(const MetricReport& r) {
  std::string out;
  for (const auto& e : r.entries) {
    nlohmann::ordered_json j;
    j["experiment"] = r.experiment;
    j["configuration"] = e.configuration;
    j["seed"] = e.seed;
    for (std::size_t k = 0; k < r.metric_names.size(); ++k) j[r.metric_names[k]] = e.values[k];
    out += j.dump() + "\n";
  }
  return out;
}

std::string to_summary(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["experiment"] = r.experiment;
  j["config"] = r.config;
  j["metrics"] = r.metric_names;
  j["configurations"] = r.configurations;
  nlohmann::ordered_json agg = nlohmann::ordered_json::object();
  for (const auto& c : r.configurations) {
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& m : r.metric_names) {
      const auto a = r.aggregate(c, m);
      per[m] = {{"median", a.median}, {"q1", a.q1}, {"q3", a.q3}, {"iqr", a.iqr()}};
    }
    agg[c] = per;
  }
  j["aggregates"] = agg;
  return j.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error("short write to '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_report(const MetricReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / (r.experiment + ".csv"), to_csv(r));
  write_text(dir / (r.experiment + ".jsonl"), to_jsonl(r));
  write_text(dir / (r.experiment + ".summary.json"), to_summary(r));
  nlohmann::json t = {{"experiment", r.experiment}, {"wall_clock_seconds", r.wall_clock_seconds}};
  write_text(dir / (r.experiment + ".timing.json"), t.dump() + "\n");
}

MetricReport load_report(const std::filesystem::path& dir, const std::string& experiment) {
  MetricReport r;
  try {
    const auto summary = nlohmann::json::parse(read_text(dir / (experiment + ".summary.json")));
    r.experiment = summary.at("experiment").get<std::string>();
    r.config = summary.at("config");
    r.metric_names = summary.at("metrics").get<std::vector<std::string>>();
    std::istringstream lines(read_text(dir / (experiment + ".jsonl")));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      std::vector<double> vals;
      for (const auto& m : r.metric_names) vals.push_back(j.at(m).get<double>());
      r.add(j.at("configuration").get<std::string>(), j.at("seed").get<uint64_t>(), std::move(vals));
    }
    if (r.configurations != summary.at("configurations").get<std::vector<std::string>>()) {
      throw Error("report '" + experiment + "' lists configurations its records do not match");
    }
    const auto timing = dir / (experiment + ".timing.json");
    if (std::filesystem::exists(timing)) {
      r.wall_clock_seconds = nlohmann::json::parse(read_text(timing)).at("wall_clock_seconds").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("report '" + experiment + "' is malformed: " + e.what());
  }
  return r;
}

std::string scatter_svg(const std::string& title, const std::vector<ScatterLayer>& layers) {
  if (layers.empty()) throw ShapeError("scatter needs at least one layer");
  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  const Tensor& frame = layers.front().points;
  for (int64_t i = 0; i < frame.dim(0); ++i)
    for (int k = 0; k < 2; ++k) {
      lo[k] = std::min(lo[k], frame[2 * i + k]);
      hi[k] = std::max(hi[k], frame[2 * i + k]);
    }
  const double pad = 0.1 * std::max(hi[0] - lo[0], hi[1] - lo[1]) + 1e-9;
  const double x0 = lo[0] - pad, y0 = lo[1] - pad;
  const double w = hi[0] - lo[0] + 2 * pad, h = hi[1] - lo[1] + 2 * pad;
  const double size = 480.0, s = size / std::max(w, h);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 40
    << "\" viewBox=\"0 0 " << size << " " << size + 40 << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"8\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (const auto& layer : layers) {
    if (layer.points.shape().size() != 2 || layer.points.dim(1) != 2) throw ShapeError("scatter layers must be [n, 2]");
    o << "<g id=\"" << layer.name << "\" fill=\"" << layer.colour << "\" fill-opacity=\"0.5\">\n";
    for (int64_t i = 0; i < layer.points.dim(0); ++i) {
      const double px = (layer.points[2 * i] - x0) * s;
      const double py = 40 + (h - (layer.points[2 * i + 1] - y0)) * s;
      // clip points far outside the frame so one outlier cannot bloat the file
      if (px < -size || px > 2 * size || py < -size || py > 2 * size) continue;
      char buf[96];
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"1.2\"/>\n", px, py);
      o << buf;
    }
    o << "</g>\n";
  }
  int row = 0;
  for (const auto& layer : layers) {
    o << "<text x=\"" << size - 110 << "\" y=\"" << 20 + 14 * row++ << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
      << layer.colour << "\">" << layer.name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace afl::eval
