#include <chrono>
#include <cmath>
#include <limits>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "afl/ad/gradcheck.hpp"
#include "afl/error.hpp"
#include "afl/eval/experiment.hpp"
#include "afl/nets/spectral_norm.hpp"
#include "afl/service/service.hpp"
#include "afl/training/config.hpp"
#include "afl/training/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/jacobi.hpp"
#include "support/op_registry.hpp"
#include "support/parity.hpp"

using namespace afl;
namespace fs = std::filesystem;

namespace {

constexpr double kOpTolerance = 1e-4;
constexpr double kPenaltyTolerance = 1e-3;
constexpr int kGradPoints = 10;
constexpr double kGradRuntimeSeconds = 60.0;
constexpr int kDeactivationInputs = 100;
constexpr double kSwissRollRatio = 0.8;
constexpr double kSwissRollTargetSeconds = 900.0;
constexpr double kSnTolerance = 0.01;
constexpr int kSnMatrices = 20;
constexpr int kSnIterations = 50;
constexpr int kPersistenceInputs = 20;
constexpr int kParityCases = 5;
constexpr int64_t kServiceSwitchSamples = 256;

int failures = 0;

void verdict(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

template <typename F>
double seconds(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

void gradient_oracle() {
  int checks = 0, failed = 0;
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](const std::string& name, const ad::GradCheckReport& rep, double tol) {
    ++checks;
    if (!rep.passed || !(rep.max_rel_error < tol)) ++failed;
    if (rep.max_rel_error > worst) {
      worst = rep.max_rel_error;
      worst_name = name;
    }
  };
  const double elapsed = seconds([&] {
    for (const auto& c : testing::op_registry()) {
      for (int p = 0; p < kGradPoints; ++p) {
        Rng rng(1000 + p, c.name);
        ad::Bindings point;
        auto b = testing::build_case(c, rng, point);
        note(c.name, ad::finite_diff_check(b.graph, b.loss, point, kOpTolerance), kOpTolerance);
      }
    }
    for (auto kind : {training::LossKind::kBce, training::LossKind::kWganGp}) {
      for (int s = 0; s < kGradPoints; ++s) {
        ad::Graph g;
        auto r = g.param("real");
        auto f = g.param("fake");
        auto l = training::adversarial_losses(g, kind, r, f);
        Rng rng(s, "acceptance:loss");
        ad::Bindings b{{"real", rng.normal_tensor({6, 1}, 2.0)}, {"fake", rng.normal_tensor({6, 1}, 2.0)}};
        const std::string name(training::loss_name(kind));
        note(name + ".d", ad::finite_diff_check(g, l.d_loss, b, kOpTolerance), kOpTolerance);
        b.erase("real");
        note(name + ".g", ad::finite_diff_check(g, l.g_loss, b, kOpTolerance), kOpTolerance);
      }
    }
    nets::Network critic("C", {2}, {nets::dense("fc1", 2, 16), nets::tanh_layer("t1"), nets::dense("fc2", 16, 16),
                                    nets::tanh_layer("t2"), nets::dense("fc3", 16, 1)});
    for (int s = 0; s < kGradPoints; ++s) {
      critic.init(s);
      Rng rng(s, "acceptance:gp");
      for (auto& [_, t] : critic.params())
        for (double& e : t.values()) e = 0.5 * rng.normal();
      ad::Graph g;
      auto r = g.input("real");
      auto f = g.input("fake");
      auto e = g.input("eps");
      auto pen = training::gradient_penalty(g, critic, r, f, e, 10.0);
      ad::Bindings b;
      critic.bind(b);
      b["real"] = rng.normal_tensor({4, 2});
      b["fake"] = rng.normal_tensor({4, 2});
      b["eps"] = rng.uniform_tensor({4});
      note("gradient_penalty", ad::finite_diff_check(g, pen, b, kPenaltyTolerance), kPenaltyTolerance);
    }
  });
  verdict("gradient oracle", failed == 0 && elapsed < kGradRuntimeSeconds,
          std::to_string(checks - failed) + "/" + std::to_string(checks) + " checks, worst rel err " +
              fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1f s", elapsed));
}

// 16px conv pair, BCE, a few iterations of both phases. Returns both
// checkpoints so the freeze can be checked directly.
std::pair<training::Checkpoint, training::Checkpoint> small_image_run() {
  auto cfg = training::ExperimentConfig::parse(
      "arch = dcgan\nimage_size = 16\nbase_channels = 4\nn_taps = 4\nloss = bce\nbatch_size = 16\n"
      "phase1_iterations = 20\nphase2_iterations = 20\nlog_every = 10\n");
  auto p1 = training::train_phase1(cfg.make_pair(), eval::data_sampler(cfg), cfg.phase1_for(0));
  auto p2 = training::train_phase2(p1, training::default_modules(p1, cfg.variant, 0), eval::data_sampler(cfg),
                                   cfg.phase2_for(0));
  return {std::move(p1), std::move(p2)};
}

bool same_generator(const nets::Network& a, const nets::Network& b) {
  if (a.params().size() != b.params().size()) return false;
  for (const auto& [k, t] : a.params())
    if (!b.params().count(k) || !t.bit_equal(b.params().at(k))) return false;
  for (const auto& [k, s] : a.running_stats()) {
    if (!b.running_stats().count(k)) return false;
    const auto& o = b.running_stats().at(k);
    if (!s.mean.bit_equal(o.mean) || !s.var.bit_equal(o.var)) return false;
  }
  return true;
}

void freeze(const training::Checkpoint& img_p1, const training::Checkpoint& img_p2) {
  auto cfg = training::ExperimentConfig::parse("batch_size = 64\nphase1_iterations = 200\nphase2_iterations = 50\n");
  auto p1 = training::train_phase1(cfg.make_pair(), eval::data_sampler(cfg), cfg.phase1_for(1));
  auto p2 = training::train_phase2(p1, training::default_modules(p1, cfg.variant, 1), eval::data_sampler(cfg),
                                   cfg.phase2_for(1));
  const bool toy = same_generator(p1.model.g, p2.model.g);
  const bool img = same_generator(img_p1.model.g, img_p2.model.g);
  // the discriminator keeps training, the modules move
  const bool d_moved = !same_generator(p1.model.d, p2.model.d);
  verdict("freeze", toy && img && d_moved,
          std::string("toy G ") + (toy ? "bit-identical" : "CHANGED") + " over 50 updates, image G " +
              (img ? "bit-identical" : "CHANGED") + " over 20 updates, D " + (d_moved ? "updated" : "NOT updated"));
}

// Not gating: kept modules of a trained 4-tap model give distinct outputs.
void ablation_info(const training::Checkpoint& img) {
  Rng rng(0, "acceptance:ablation");
  const Tensor x = training::sample_latent(img.model.g, rng, 8);
  std::vector<Tensor> outs;
  for (const auto& name : img.model.module_names()) {
    outs.push_back(feedback::afl_generate(img.model, x, feedback::ablate(img.model, name)).final());
  }
  double smallest = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < outs[i].size(); ++k) d = std::max(d, std::abs(outs[i][k] - outs[j][k]));
      smallest = std::min(smallest, d);
    }
  std::printf("  info: smallest pairwise max-abs difference between single-module ablations: %.3e\n", smallest);
}

void deactivation(const training::Checkpoint& toy, const training::Checkpoint& img) {
  int bad = 0, total = 0;
  for (const auto* c : {&toy, &img}) {
    for (int s = 0; s < kDeactivationInputs; ++s) {
      Rng rng(s, "acceptance:deactivation");
      const Tensor x = training::sample_latent(c->model.g, rng, 8);
      const Tensor base = nets::run(c->model.g, x).output;
      feedback::LoopConfig off;
      off.alpha_global = 0.0;
      feedback::LoopConfig none;
      none.iterations = 0;
      total += 2;
      bad += !feedback::afl_generate(c->model, x, off).final().bit_equal(base);
      bad += !feedback::afl_generate(c->model, x, none).final().bit_equal(base);
    }
  }
  verdict("deactivation identity", bad == 0,
          std::to_string(total - bad) + "/" + std::to_string(total) +
              " bit-identical (alpha = 0 and T = 0, 100 inputs each on toy and 4-tap image checkpoints)");
}

void spectral_norm() {
  Rng rng(2024, "acceptance:sn");
  double worst = 0.0;
  int bad = 0;
  for (int trial = 0; trial < kSnMatrices; ++trial) {
    const int64_t rows = 1 + static_cast<int64_t>(rng.below(16));
    const int64_t cols = 1 + static_cast<int64_t>(rng.below(16));
    const Tensor w = rng.normal_tensor({rows, cols});
    const double oracle = testing::jacobi_top_singular_value(w);
    auto st = nets::make_sn_state(w.shape(), static_cast<uint64_t>(trial), kSnIterations);
    const double rel = std::abs(nets::spectral_normalize(w, st).sigma - oracle) / oracle;
    worst = std::max(worst, rel);
    bad += !(rel <= kSnTolerance);
  }
  verdict("spectral norm", bad == 0,
          std::to_string(kSnMatrices - bad) + "/" + std::to_string(kSnMatrices) + " matrices within 1%, worst " +
              fmt("%.2e", worst) + " after 50 power iterations");
}

void persistence(const training::Checkpoint& ckpt) {
  testing::TempDir dir("acceptance_persist");
  const auto path = dir.path / "model.afl";
  training::save_checkpoint(ckpt, path);
  const auto back = training::load_checkpoint(path);
  int same = 0;
  for (int s = 0; s < kPersistenceInputs; ++s) {
    Rng rng(s, "acceptance:persist");
    const Tensor x = training::sample_latent(ckpt.model.g, rng, 16);
    same += feedback::afl_generate(back.model, x, {}).final().bit_equal(feedback::afl_generate(ckpt.model, x, {}).final());
  }

  const auto bytes = training::serialize(ckpt);
  std::vector<std::vector<uint8_t>> corrupt;
  for (int i = 0; i < 10; ++i) {
    auto b = bytes;
    b[(b.size() - 1) * i / 9] ^= 0x10;
    corrupt.push_back(b);
  }
  for (std::size_t len : {std::size_t{0}, std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    corrupt.emplace_back(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
  }
  int rejected = 0;
  for (const auto& b : corrupt) {
    try {
      training::deserialize(b);
    } catch (const CheckpointError&) {
      ++rejected;
    }
  }
  // a corrupted file next to a good one: only the good one is served
  {
    std::ofstream f(dir.path / "broken.afl", std::ios::binary);
    f.write(reinterpret_cast<const char*>(corrupt[4].data()), static_cast<std::streamsize>(corrupt[4].size()));
  }
  service::Service svc({.checkpoint_dir = dir.path});
  const auto snap = svc.snapshot();
  const bool isolated = snap->checkpoints.size() == 1 && snap->checkpoints.count("model") && snap->rejected.count("broken") &&
                        svc.generate(R"({"checkpoint_id":"model"})").status == 200;
  verdict("persistence", same == kPersistenceInputs && rejected == static_cast<int>(corrupt.size()) && isolated,
          std::to_string(same) + "/20 inputs bit-identical after reload, " + std::to_string(rejected) + "/" +
              std::to_string(corrupt.size()) + " corrupted or truncated files rejected, service " +
              (isolated ? "kept the good checkpoint only" : "did NOT isolate the corrupted file"));
}

void service_parity(const std::string& cli) {
  testing::TempDir dir("acceptance_parity");
  testing::write_fixtures(dir.path);
  const auto cases = testing::check_parity(cli, dir.path);
  int equal = 0;
  std::string detail;
  for (const auto& c : cases) {
    equal += c.equal;
    detail += " " + c.name + (c.equal ? "=" : "!=");
  }
  verdict("service parity", equal == kParityCases && static_cast<int>(cases.size()) == kParityCases,
          std::to_string(equal) + "/" + std::to_string(cases.size()) + " byte-identical:" + detail);
}

std::vector<eval::SeedModel> toy_models(const training::ExperimentConfig& cfg, const std::string& cache) {
  std::vector<eval::SeedModel> out;
  for (uint64_t s : cfg.seeds) {
    const fs::path path = cache.empty() ? fs::path() : fs::path(cache) / ("seed" + std::to_string(s) + ".afl");
    if (!cache.empty() && fs::exists(path)) {
      auto c = training::load_checkpoint(path);
      if (c.meta.value("config", nlohmann::json()) == cfg.phase2_for(s).to_json()) {
        out.push_back({s, std::move(c)});
        continue;
      }
    }
    out.push_back({s, eval::train_afl(cfg, s)});
    if (!cache.empty()) {
      fs::create_directories(cache);
      training::save_checkpoint(out.back().ckpt, path);
    }
    std::fprintf(stderr, "trained seed %llu\n", static_cast<unsigned long long>(s));
  }
  return out;
}

std::string medians(const eval::MetricReport& r, const std::vector<std::string>& configs, const std::string& metric) {
  std::ostringstream o;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    o << (i ? ", " : "") << configs[i] << " " << fmt("%.4f", r.median(configs[i], metric));
  }
  return o.str();
}

// Returns the seed-0 checkpoint for the remaining criteria.
training::Checkpoint toy_criteria(const std::string& cache, const std::string& out_dir) {
  const training::ExperimentConfig cfg;  // 8K + 8K, alpha 0.2, T = 1, seeds 0-4, 1e4 samples, x5
  std::vector<eval::SeedModel> models;
  const double train_s = seconds([&] { models = toy_models(cfg, cache); });

  eval::MetricReport toy;
  const double toy_s = seconds([&] { toy = eval::run_toy_experiment(cfg, models); });
  const std::string ed = "energy_distance";
  const double base = toy.median("baseline", ed), afl = toy.median("afl", ed);
  verdict("swiss roll", afl <= kSwissRollRatio * base,
          "median ED afl " + fmt("%.4f", afl) + " vs baseline " + fmt("%.4f", base) + ", ratio " +
              fmt("%.3f", afl / base) + " (need <= 0.8); train " + fmt("%.0f s", train_s) + " + eval " +
              fmt("%.0f s", toy_s) + " (target " + fmt("%.0f s", kSwissRollTargetSeconds) + ")");
  // not gating: the loop unrolled further at the default gain
  std::vector<std::vector<double>> by_t(4);
  for (const auto& m : models) {
    const eval::EnergyReference real(eval::eval_real(cfg, m.seed, cfg.eval_samples));
    feedback::LoopConfig loop = cfg.loop;
    loop.iterations = 3;
    const auto tr = feedback::afl_generate(m.ckpt.model, eval::eval_latent(m.ckpt.model.g, m.seed, cfg.eval_samples), loop);
    for (int t = 0; t <= 3; ++t) by_t[t].push_back(real.distance(tr.outputs[t]));
  }
  std::vector<double> untrained;
  for (const auto& m : models) {
    auto pair = cfg.make_pair();
    pair.g.init(m.seed);
    pair.g.set_mode(nets::Mode::kEval);
    const eval::EnergyReference real(eval::eval_real(cfg, m.seed, cfg.eval_samples));
    untrained.push_back(real.distance(nets::run(pair.g, eval::eval_latent(pair.g, m.seed, cfg.eval_samples)).output));
  }
  std::printf("  info: median ED untrained G %.4f vs trained baseline %.4f\n", eval::aggregate_of(untrained).median, base);
  std::printf("  info: median ED by loop iterate T=0..3: %.4f %.4f %.4f %.4f\n", eval::aggregate_of(by_t[0]).median,
              eval::aggregate_of(by_t[1]).median, eval::aggregate_of(by_t[2]).median, eval::aggregate_of(by_t[3]).median);
  const double base5 = toy.median("baseline_shift", ed), afl5 = toy.median("afl_shift", ed);
  verdict("variance shift", afl5 < base5,
          "inputs x5 variance: median ED afl " + fmt("%.4f", afl5) + " vs baseline " + fmt("%.4f", base5));

  const auto sanity = eval::run_sanity_checks(cfg, models);
  const double c = sanity.median("correct", ed), s = sanity.median("shuffled", ed), n = sanity.median("noise", ed);
  verdict("sanity ordering", c < s && s < n,
          "median ED " + medians(sanity, {"correct", "shuffled", "noise"}, ed) + " (need correct < shuffled < noise)");

  const auto grid = eval::default_alpha_grid();
  const auto sweep = eval::run_alpha_sweep(cfg, models, grid);
  bool anchor = true;
  for (const auto& m : sweep.metric_names) anchor = anchor && sweep.values(eval::alpha_label(0.0), m) == sweep.values("baseline", m);
  const double sweep_base = sweep.median("baseline", ed);
  double best = sweep_base;
  std::string best_label = "none";
  for (double a : grid) {
    if (a == 0.0) continue;
    const double v = sweep.median(eval::alpha_label(a), ed);
    if (v < best) {
      best = v;
      best_label = eval::alpha_label(a);
    }
  }
  verdict("alpha sweep", anchor && best < sweep_base,
          std::string("alpha=0 ") + (anchor ? "equals" : "DIFFERS FROM") + " baseline on every seed and metric; best " +
              best_label + " median ED " + fmt("%.4f", best) + " vs baseline " + fmt("%.4f", sweep_base));

  const auto switch_grid = eval::default_switch_grid();
  const auto sw = eval::run_switching(cfg, models, switch_grid);
  bool monotone = true;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < switch_grid.size(); ++i) {
    labels.push_back(eval::alpha_label(switch_grid[i]));
    if (i && sw.median(labels[i], "reference_distance") > sw.median(labels[i - 1], "reference_distance")) {
      monotone = false;
    }
  }
  // same property through the service, one request per seed and gain
  testing::TempDir served("acceptance_switch");
  for (const auto& m : models) training::save_checkpoint(m.ckpt, served.path / ("seed" + std::to_string(m.seed) + ".afl"));
  service::Service svc({.checkpoint_dir = served.path});
  std::vector<double> service_medians;
  bool service_monotone = true, service_ok = true;
  for (double a : switch_grid) {
    std::vector<double> per_seed;
    for (const auto& m : models) {
      Rng rng(m.seed, "acceptance:service_reference");
      const Tensor ref = eval::data_sampler(cfg)(rng, kServiceSwitchSamples);
      nlohmann::json pts = nlohmann::json::array();
      for (int64_t i = 0; i < ref.dim(0); ++i) pts.push_back({ref.at(i, 0), ref.at(i, 1)});
      const nlohmann::json req = {{"checkpoint_id", "seed" + std::to_string(m.seed)}, {"seed", m.seed},
                                  {"n_samples", kServiceSwitchSamples}, {"alpha_global", a},
                                  {"reference", {{"points", pts}}}};
      const auto res = svc.generate(req.dump());
      if (res.status != 200) {
        service_ok = false;
        continue;
      }
      per_seed.push_back(nlohmann::json::parse(res.body)["metric_vs_reference"].get<double>());
    }
    service_medians.push_back(per_seed.empty() ? 0.0 : eval::aggregate_of(per_seed).median);
    if (service_medians.size() > 1 && service_medians.back() > service_medians[service_medians.size() - 2]) {
      service_monotone = false;
    }
  }
  std::string service_detail;
  for (std::size_t i = 0; i < labels.size(); ++i) service_detail += (i ? ", " : "") + labels[i] + " " + fmt("%.4f", service_medians[i]);
  verdict("feedback switching", monotone && service_monotone && service_ok,
          "median distance to reference " + medians(sw, labels, "reference_distance") + "; via service " +
              service_detail + " (need non-increasing)");

  if (!out_dir.empty()) {
    for (const eval::MetricReport* r : std::initializer_list<const eval::MetricReport*>{&toy, &sanity, &sweep, &sw}) {
      eval::write_report(*r, out_dir);
    }
  }
  return std::move(models.front().ckpt);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria, one PASS/FAIL line each"};
  std::string cache, out_dir, cli = AFL_CLI;
  bool skip_toy = false;
  app.add_option("--cache-dir", cache, "reuse or store the trained toy checkpoints here");
  app.add_option("--out-dir", out_dir, "also write the toy reports here");
  app.add_option("--cli", cli, "afl command-line binary");
  app.add_flag("--skip-toy", skip_toy, "skip the criteria that train the five toy seeds");
  CLI11_PARSE(app, argc, argv);

  try {
    gradient_oracle();
    auto [img_p1, img_p2] = small_image_run();
    freeze(img_p1, img_p2);
    ablation_info(img_p2);
    spectral_norm();

    training::Checkpoint toy;
    if (!skip_toy) {
      toy = toy_criteria(cache, out_dir);
    } else {
      toy = testing::random_checkpoint(nets::build_toy_pair(), 5);
    }
    // round trip through a file, as served
    testing::TempDir dir("acceptance_models");
    training::save_checkpoint(img_p2, dir.path / "img.afl");
    training::save_checkpoint(toy, dir.path / "toy.afl");
    deactivation(training::load_checkpoint(dir.path / "toy.afl"), training::load_checkpoint(dir.path / "img.afl"));
    persistence(toy);
    service_parity(cli);
  } catch (const std::exception& e) {
    verdict("harness", false, e.what());
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
