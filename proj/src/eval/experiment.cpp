#include "afl/eval/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "afl/error.hpp"
#include "afl/eval/data.hpp"

namespace afl::eval {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

MetricReport new_report(const std::string& experiment, const training::ExperimentConfig& cfg,
                        std::vector<std::string> metrics = kAllMetrics) {
  MetricReport r;
  r.experiment = experiment;
  r.config = cfg.to_json();
  r.metric_names = std::move(metrics);
  return r;
}

std::vector<double> metric_values(const Tensor& y, const EnergyReference& ref, uint64_t seed) {
  const auto m = compare(y, ref, seed);
  return {m.energy_distance, m.mmd_rbf, m.sliced_wasserstein};
}

Tensor roll_rows(const Tensor& t, int64_t by) {
  const int64_t n = t.dim(0);
  const int64_t row = static_cast<int64_t>(t.size()) / n;
  Tensor out(t.shape());
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = (i + by) % n;
    std::copy_n(t.values().begin() + src * row, row, out.values().begin() + i * row);
  }
  return out;
}

feedback::LoopConfig with_alpha(const feedback::LoopConfig& base, double alpha) {
  feedback::LoopConfig c = base;
  c.alpha_global = alpha;
  c.alpha_overrides.clear();
  return c;
}

// Generator output without any feedback.
Tensor baseline(const feedback::AflModel& m, const Tensor& x) {
  feedback::LoopConfig off;
  off.iterations = 0;
  return feedback::afl_generate(m, x, off).final();
}

}  // namespace

training::Sampler data_sampler(const training::ExperimentConfig& cfg) {
  if (cfg.arch == "toy") return swiss_roll_sampler();
  return shapes_sampler(cfg.dcgan.image_size);
}

training::Checkpoint train_afl(const training::ExperimentConfig& cfg, uint64_t seed,
                               const training::Progress& progress) {
  cfg.validate();
  const auto data = data_sampler(cfg);
  auto p1 = training::train_phase1(cfg.make_pair(), data, cfg.phase1_for(seed), progress);
  auto modules = training::default_modules(p1, cfg.variant, seed);
  return training::train_phase2(p1, std::move(modules), data, cfg.phase2_for(seed), progress);
}

std::vector<SeedModel> train_seeds(const training::ExperimentConfig& cfg, const training::Progress& progress) {
  std::vector<SeedModel> out;
  for (uint64_t s : cfg.seeds) out.push_back({s, train_afl(cfg, s, progress)});
  return out;
}

Tensor eval_real(const training::ExperimentConfig& cfg, uint64_t seed, int64_t n) {
  Rng rng(seed, "eval:real");
  return data_sampler(cfg)(rng, n);
}

Tensor eval_latent(const nets::Network& g, uint64_t seed, int64_t n, double variance_multiplier) {
  if (!(variance_multiplier > 0.0)) throw ConfigError("variance multiplier must be positive");
  Rng rng(seed, "eval:latent");
  return training::sample_latent(g, rng, n, std::sqrt(variance_multiplier));
}

feedback::Trace noise_feedback_generate(const feedback::AflModel& model, const Tensor& x,
                                        const feedback::LoopConfig& cfg, Rng& rng) {
  if (cfg.iterations < 0) throw ConfigError("iterations must be non-negative");
  feedback::Trace tr;
  feedback::GeneratorPass pass = feedback::inject(model, {}, with_alpha(cfg, 0.0), x);
  tr.outputs.push_back(pass.y);
  const int64_t n = x.dim(0);
  for (int t = 0; t < cfg.iterations; ++t) {
    feedback::TapValues theta;
    for (const auto& f : model.modules) {
      if (cfg.alpha(f.name()) == 0.0) continue;
      Shape s{n};
      const auto& ts = model.d.tap_shape(f.binding().disc);
      s.insert(s.end(), ts.begin(), ts.end());
      theta[f.binding().disc] = rng.normal_tensor(s);
    }
    auto c = feedback::corrections(model, theta, pass.gen_taps, cfg);
    pass = feedback::inject(model, c, cfg, x);
    tr.outputs.push_back(pass.y);
    tr.corrections.push_back(std::move(c));
  }
  return tr;
}

MetricReport run_toy_experiment(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models) {
  const auto t0 = Clock::now();
  auto r = new_report("toy", cfg);
  for (const auto& sm : models) {
    const auto& m = sm.ckpt.model;
    const EnergyReference ref(eval_real(cfg, sm.seed, cfg.eval_samples));
    for (double mult : {1.0, cfg.variance_multiplier}) {
      const std::string suffix = mult == 1.0 ? "" : "_shift";
      const Tensor x = eval_latent(m.g, sm.seed, cfg.eval_samples, mult);
      r.add("baseline" + suffix, sm.seed, metric_values(baseline(m, x), ref, sm.seed));
      r.add("afl" + suffix, sm.seed, metric_values(feedback::afl_generate(m, x, cfg.loop).final(), ref, sm.seed));
    }
  }
  r.wall_clock_seconds = seconds_since(t0);
  return r;
}

MetricReport run_sanity_checks(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models) {
  const auto t0 = Clock::now();
  auto r = new_report("sanity", cfg);
  for (const auto& sm : models) {
    const auto& m = sm.ckpt.model;
    const EnergyReference ref(eval_real(cfg, sm.seed, cfg.eval_samples));
    const Tensor x = eval_latent(m.g, sm.seed, cfg.eval_samples);
    r.add("correct", sm.seed, metric_values(feedback::afl_generate(m, x, cfg.loop).final(), ref, sm.seed));
    // the wrong sample is another generated point: D sees y_0 of the next row
    const Tensor wrong = roll_rows(baseline(m, x), 1);
    r.add("shuffled", sm.seed,
          metric_values(feedback::feedback_switch_generate(m, x, wrong, cfg.loop).final(), ref, sm.seed));
    Rng noise(sm.seed, "eval:noise_feedback");
    r.add("noise", sm.seed, metric_values(noise_feedback_generate(m, x, cfg.loop, noise).final(), ref, sm.seed));
  }
  r.wall_clock_seconds = seconds_since(t0);
  return r;
}

std::string alpha_label(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "alpha=%.2g", alpha);
  return buf;
}

std::vector<double> default_alpha_grid() {
  std::vector<double> a;
  for (int i = 0; i <= 10; ++i) a.push_back(i / 10.0);
  return a;
}

std::vector<double> default_switch_grid() { return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}; }

MetricReport run_alpha_sweep(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models,
                             const std::vector<double>& alphas) {
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("sweep alphas must lie in [0, 1]");
  const auto t0 = Clock::now();
  auto r = new_report("sweep", cfg);
  for (const auto& sm : models) {
    const auto& m = sm.ckpt.model;
    const EnergyReference ref(eval_real(cfg, sm.seed, cfg.eval_samples));
    const Tensor x = eval_latent(m.g, sm.seed, cfg.eval_samples);
    r.add("baseline", sm.seed, metric_values(baseline(m, x), ref, sm.seed));
    for (double a : alphas) {
      r.add(alpha_label(a), sm.seed,
            metric_values(feedback::afl_generate(m, x, with_alpha(cfg.loop, a)).final(), ref, sm.seed));
    }
  }
  r.wall_clock_seconds = seconds_since(t0);
  return r;
}

MetricReport run_ablation(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models) {
  const auto t0 = Clock::now();
  auto r = new_report("ablation", cfg);
  for (const auto& sm : models) {
    const auto& m = sm.ckpt.model;
    const EnergyReference ref(eval_real(cfg, sm.seed, cfg.eval_samples));
    const Tensor x = eval_latent(m.g, sm.seed, cfg.eval_samples);
    r.add("none", sm.seed, metric_values(feedback::afl_generate(m, x, feedback::ablate(m, std::nullopt, cfg.loop)).final(), ref, sm.seed));
    for (const auto& name : m.module_names()) {
      r.add(name, sm.seed, metric_values(feedback::afl_generate(m, x, feedback::ablate(m, name, cfg.loop)).final(), ref, sm.seed));
    }
    r.add("all", sm.seed, metric_values(feedback::afl_generate(m, x, cfg.loop).final(), ref, sm.seed));
  }
  r.wall_clock_seconds = seconds_since(t0);
  return r;
}

MetricReport run_switching(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models,
                           const std::vector<double>& alphas) {
  const auto t0 = Clock::now();
  auto r = new_report("switch", cfg, {"reference_distance"});
  for (const auto& sm : models) {
    const auto& m = sm.ckpt.model;
    const Tensor x = eval_latent(m.g, sm.seed, cfg.eval_samples);
    Rng ref_rng(sm.seed, "eval:reference");
    const Tensor reference = data_sampler(cfg)(ref_rng, cfg.eval_samples);
    for (double a : alphas) {
      const Tensor y = feedback::feedback_switch_generate(m, x, reference, with_alpha(cfg.loop, a)).final();
      r.add(alpha_label(a), sm.seed, {mean_nearest_distance(y, reference)});
    }
  }
  r.wall_clock_seconds = seconds_since(t0);
  return r;
}

std::string toy_scatter(const training::ExperimentConfig& cfg, const SeedModel& sm, double variance_multiplier,
                        int64_t n_points) {
  const auto& m = sm.ckpt.model;
  const Tensor x = eval_latent(m.g, sm.seed, n_points, variance_multiplier);
  char title[96];
  std::snprintf(title, sizeof title, "seed %llu, input variance x%g", static_cast<unsigned long long>(sm.seed),
                variance_multiplier);
  return scatter_svg(title, {{"real", "#777777", eval_real(cfg, sm.seed, n_points)},
                             {"baseline", "#d62728", baseline(m, x)},
                             {"afl", "#1f77b4", feedback::afl_generate(m, x, cfg.loop).final()}});
}

}  // namespace afl::eval
