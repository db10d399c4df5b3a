#include "afl/training/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "afl/error.hpp"

namespace afl::training {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

int64_t to_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a seed, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

TrainConfig ExperimentConfig::phase2_of(const TrainConfig& p1) {
  TrainConfig c = p1;
  c.phase = 2;
  return c;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto both = [&](auto&& fn) {
    fn(phase1);
    fn(phase2);
  };
  if (key == "arch") {
    if (value != "toy" && value != "dcgan") throw ConfigError("arch: expected toy or dcgan, got '" + value + "'");
    arch = value;
  } else if (key == "width") {
    width = to_int(key, value);
  } else if (key == "image_size") {
    dcgan.image_size = to_int(key, value);
  } else if (key == "base_channels") {
    dcgan.base_channels = to_int(key, value);
  } else if (key == "n_taps") {
    dcgan.n_taps = static_cast<int>(to_int(key, value));
  } else if (key == "spectral_norm") {
    dcgan.spectral_norm = to_bool(key, value);
  } else if (key == "variant") {
    variant = feedback::parse_variant(value);
  } else if (key == "loss") {
    const auto kind = parse_loss(value);
    TrainConfig d = TrainConfig::defaults(kind);
    d.batch_size = phase1.batch_size;
    d.iterations = phase1.iterations;
    d.log_every = phase1.log_every;
    phase1 = d;
    TrainConfig d2 = phase2_of(d);
    d2.iterations = phase2.iterations;
    d2.d_sees_y0 = phase2.d_sees_y0;
    phase2 = d2;
  } else if (key == "gp_lambda") {
    const double v = to_double(key, value);
    both([&](TrainConfig& c) { c.gp_lambda = v; });
  } else if (key == "lr") {
    const double v = to_double(key, value);
    both([&](TrainConfig& c) { c.lr = v; });
  } else if (key == "beta1") {
    const double v = to_double(key, value);
    both([&](TrainConfig& c) { c.beta1 = v; });
  } else if (key == "beta2") {
    const double v = to_double(key, value);
    both([&](TrainConfig& c) { c.beta2 = v; });
  } else if (key == "batch_size") {
    const auto v = static_cast<int>(to_int(key, value));
    both([&](TrainConfig& c) { c.batch_size = v; });
  } else if (key == "d_steps_per_g_step") {
    const auto v = static_cast<int>(to_int(key, value));
    both([&](TrainConfig& c) { c.d_steps_per_g_step = v; });
  } else if (key == "phase1_iterations") {
    phase1.iterations = static_cast<int>(to_int(key, value));
  } else if (key == "phase2_iterations") {
    phase2.iterations = static_cast<int>(to_int(key, value));
  } else if (key == "phase2_d_sees_y0") {
    phase2.d_sees_y0 = to_bool(key, value);
  } else if (key == "log_every") {
    const auto v = static_cast<int>(to_int(key, value));
    both([&](TrainConfig& c) { c.log_every = v; });
  } else if (key == "iterations") {
    loop.iterations = static_cast<int>(to_int(key, value));
  } else if (key == "alpha") {
    loop.alpha_global = to_double(key, value);
  } else if (key.rfind("alpha.", 0) == 0 && key.size() > 6) {
    loop.alpha_overrides[key.substr(6)] = to_double(key, value);
  } else if (key == "seeds") {
    seeds.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) seeds.push_back(to_u64(key, trim(item)));
  } else if (key == "eval_samples") {
    eval_samples = to_int(key, value);
  } else if (key == "variance_multiplier") {
    variance_multiplier = to_double(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": repeated key '" + key + "'");
    entries.emplace_back(std::move(key), std::move(value));
  }
  ExperimentConfig c;
  for (const auto& [k, v] : entries)
    if (k == "loss") c.set(k, v);
  for (const auto& [k, v] : entries)
    if (k != "loss") c.set(k, v);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::validate() const {
  if (arch == "toy" && width < 1) throw ConfigError("width must be positive");
  phase1.validate();
  phase2.validate();
  if (loop.iterations < 0) throw ConfigError("iterations must be non-negative");
  auto check_alpha = [](const std::string& what, double a) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError(what + " must lie in [0, 1]");
  };
  check_alpha("alpha", loop.alpha_global);
  for (const auto& [k, a] : loop.alpha_overrides) check_alpha("alpha." + k, a);
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (eval_samples < 2) throw ConfigError("eval_samples must be at least 2");
  if (!(variance_multiplier > 0.0)) throw ConfigError("variance_multiplier must be positive");
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream o;
  o << "arch = " << arch << "\n";
  if (arch == "toy") {
    o << "width = " << width << "\n";
  } else {
    o << "image_size = " << dcgan.image_size << "\nbase_channels = " << dcgan.base_channels
      << "\nn_taps = " << dcgan.n_taps << "\nspectral_norm = " << (dcgan.spectral_norm ? "true" : "false") << "\n";
  }
  o << "variant = " << feedback::variant_name(variant) << "\n";
  o << "loss = " << loss_name(phase1.loss) << "\n";
  o << "gp_lambda = " << fmt(phase1.gp_lambda) << "\n";
  o << "lr = " << fmt(phase1.lr) << "\n";
  o << "beta1 = " << fmt(phase1.beta1) << "\n";
  o << "beta2 = " << fmt(phase1.beta2) << "\n";
  o << "batch_size = " << phase1.batch_size << "\n";
  o << "d_steps_per_g_step = " << phase1.d_steps_per_g_step << "\n";
  o << "phase1_iterations = " << phase1.iterations << "\n";
  o << "phase2_iterations = " << phase2.iterations << "\n";
  o << "phase2_d_sees_y0 = " << (phase2.d_sees_y0 ? "true" : "false") << "\n";
  o << "log_every = " << phase1.log_every << "\n";
  o << "iterations = " << loop.iterations << "\n";
  o << "alpha = " << fmt(loop.alpha_global) << "\n";
  for (const auto& [k, a] : loop.alpha_overrides) o << "alpha." << k << " = " << fmt(a) << "\n";
  o << "seeds = ";
  for (std::size_t i = 0; i < seeds.size(); ++i) o << (i ? "," : "") << seeds[i];
  o << "\neval_samples = " << eval_samples << "\n";
  o << "variance_multiplier = " << fmt(variance_multiplier) << "\n";
  return o.str();
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  std::istringstream in(to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

nets::GanPair ExperimentConfig::make_pair() const {
  if (arch == "toy") return nets::build_toy_pair(width);
  return nets::build_dcgan_pair(dcgan);
}

TrainConfig ExperimentConfig::phase1_for(uint64_t seed) const {
  TrainConfig c = phase1;
  c.seed = seed;
  return c;
}

TrainConfig ExperimentConfig::phase2_for(uint64_t seed) const {
  TrainConfig c = phase2;
  c.seed = seed;
  return c;
}

}  // namespace afl::training
