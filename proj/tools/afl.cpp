#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "afl/error.hpp"
#include "afl/eval/experiment.hpp"
#include "afl/service/service.hpp"
#include "afl/training/config.hpp"

namespace fs = std::filesystem;
using namespace afl;

namespace {

// Config keys exposed as --flags; alpha.<module> goes through --set.
const std::vector<std::string> kFlagKeys = {
    "arch", "width", "image_size", "base_channels", "n_taps", "spectral_norm", "variant", "loss",
    "gp_lambda", "lr", "beta1", "beta2", "batch_size", "d_steps_per_g_step", "phase1_iterations",
    "phase2_iterations", "phase2_d_sees_y0", "log_every", "iterations", "alpha", "eval_samples",
    "variance_multiplier"};

struct RunArgs {
  std::string config_file;
  std::string seeds;
  std::string out_dir;
  std::string checkpoints;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  bool quiet = false;
};

void add_run_options(CLI::App* cmd, RunArgs& a, bool needs_out = true) {
  cmd->add_option("--config", a.config_file, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seeds, "comma separated seeds")->required();
  auto* out = cmd->add_option("--out-dir", a.out_dir, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--set", a.sets, "extra key=value config overrides");
  cmd->add_flag("--quiet", a.quiet, "no training progress on stderr");
  for (const auto& key : kFlagKeys) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    cmd->add_option_function<std::string>(flag, [&a, key](const std::string& v) { a.flags[key] = v; },
                                          "config key " + key);
  }
}

training::ExperimentConfig build_config(const RunArgs& a) {
  auto cfg = a.config_file.empty() ? training::ExperimentConfig{} : training::ExperimentConfig::load(a.config_file);
  // loss first, matching the file parser
  if (auto it = a.flags.find("loss"); it != a.flags.end()) cfg.set("loss", it->second);
  for (const auto& [k, v] : a.flags)
    if (k != "loss") cfg.set(k, v);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.set("seeds", a.seeds);
  cfg.validate();
  return cfg;
}

training::Progress progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const training::StepLog& s) {
    std::fprintf(stderr, "phase %d step %d d_loss %.5f g_loss %.5f\n", s.phase, s.step, s.d_loss, s.g_loss);
  };
}

fs::path checkpoint_path(const fs::path& dir, uint64_t seed) { return dir / ("seed" + std::to_string(seed) + ".afl"); }

// Loads the seeds' checkpoints from --checkpoints, or trains them and saves
// under <out>/checkpoints.
std::vector<eval::SeedModel> obtain_models(const training::ExperimentConfig& cfg, const RunArgs& a) {
  std::vector<eval::SeedModel> out;
  if (!a.checkpoints.empty()) {
    for (uint64_t s : cfg.seeds) {
      const auto path = checkpoint_path(a.checkpoints, s);
      auto c = training::load_checkpoint(path);
      if (c.meta.value("config", nlohmann::json()) != cfg.phase2_for(s).to_json()) {
        throw ConfigError(path.string() + " was trained with a different config; pass the same training flags");
      }
      out.push_back({s, std::move(c)});
    }
    return out;
  }
  const fs::path dir = fs::path(a.out_dir) / "checkpoints";
  fs::create_directories(dir);
  for (uint64_t s : cfg.seeds) {
    out.push_back({s, eval::train_afl(cfg, s, progress_printer(a.quiet))});
    training::save_checkpoint(out.back().ckpt, checkpoint_path(dir, s));
  }
  return out;
}

void finish(const eval::MetricReport& r, const RunArgs& a, const training::ExperimentConfig& cfg) {
  fs::create_directories(a.out_dir);
  eval::write_report(r, a.out_dir);
  eval::write_text(fs::path(a.out_dir) / "config.txt", cfg.to_text());
  std::cout << eval::to_summary(r);
}

std::vector<double> parse_grid(const std::string& text, std::vector<double> fallback) {
  if (text.empty()) return fallback;
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("grid entry '" + item + "' is not a number");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial feedback loop: training, evaluation and serving"};
  app.require_subcommand(1);

  RunArgs train_args, eval_args, sweep_args, ablate_args, sanity_args, switch_args;
  std::string sweep_grid, switch_grid;

  auto* train = app.add_subcommand("train", "train phase 1 and phase 2 for each seed");
  add_run_options(train, train_args);
  auto* evalc = app.add_subcommand("eval", "baseline vs feedback at matched and shifted input variance");
  add_run_options(evalc, eval_args);
  evalc->add_option("--checkpoints", eval_args.checkpoints, "directory with seed<N>.afl files");
  auto* sweep = app.add_subcommand("sweep", "metrics over a grid of feedback gains");
  add_run_options(sweep, sweep_args);
  sweep->add_option("--checkpoints", sweep_args.checkpoints, "directory with seed<N>.afl files");
  sweep->add_option("--grid", sweep_grid, "comma separated gains");
  auto* ablate = app.add_subcommand("ablate", "one feedback module at a time");
  add_run_options(ablate, ablate_args);
  ablate->add_option("--checkpoints", ablate_args.checkpoints, "directory with seed<N>.afl files");
  auto* sanity = app.add_subcommand("sanity", "correct, shuffled and noise feedback");
  add_run_options(sanity, sanity_args);
  sanity->add_option("--checkpoints", sanity_args.checkpoints, "directory with seed<N>.afl files");
  auto* sw = app.add_subcommand("switch", "feedback switching toward references");
  add_run_options(sw, switch_args);
  sw->add_option("--checkpoints", switch_args.checkpoints, "directory with seed<N>.afl files");
  sw->add_option("--grid", switch_grid, "comma separated gains");

  std::string report_dir, report_name;
  auto* report = app.add_subcommand("report", "print the summary of a written report");
  report->add_option("--out-dir", report_dir, "directory the report was written to")->required();
  report->add_option("--experiment", report_name, "experiment name")->required();

  std::string gen_dir, gen_request, gen_id;
  uint64_t gen_seed = 0;
  int64_t gen_n = 16;
  double gen_alpha = feedback::kDefaultAlpha;
  int gen_iterations = 1;
  std::vector<std::string> gen_overrides;
  auto* gen = app.add_subcommand("generate", "run one generation request and print the response");
  gen->add_option("--checkpoint-dir", gen_dir, "checkpoint directory")->required();
  auto* req_opt = gen->add_option("--request", gen_request, "request JSON, or @file");
  gen->add_option("--checkpoint-id", gen_id, "checkpoint id")->excludes(req_opt);
  gen->add_option("--seed", gen_seed, "latent seed")->excludes(req_opt);
  gen->add_option("--n-samples", gen_n, "batch size")->excludes(req_opt);
  gen->add_option("--alpha", gen_alpha, "global feedback gain")->excludes(req_opt);
  gen->add_option("--iterations", gen_iterations, "feedback iterations")->excludes(req_opt);
  gen->add_option("--alpha-override", gen_overrides, "module=gain")->excludes(req_opt);

  std::string serve_dir, serve_listen;
  std::size_t serve_lru = 0;
  auto* serve = app.add_subcommand("serve", "HTTP service over a checkpoint directory");
  serve->add_option("--checkpoint-dir", serve_dir, "overrides AFL_CHECKPOINT_DIR");
  serve->add_option("--listen", serve_listen, "host:port, overrides AFL_LISTEN");
  serve->add_option("--lru-capacity", serve_lru, "overrides AFL_LRU_CAPACITY");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = build_config(train_args);
      const fs::path dir = fs::path(train_args.out_dir) / "checkpoints";
      fs::create_directories(dir);
      eval::write_text(fs::path(train_args.out_dir) / "config.txt", cfg.to_text());
      for (uint64_t s : cfg.seeds) {
        auto c = eval::train_afl(cfg, s, progress_printer(train_args.quiet));
        training::save_checkpoint(c, checkpoint_path(dir, s));
        std::cout << checkpoint_path(dir, s).string() << "\n";
      }
    } else if (*evalc) {
      const auto cfg = build_config(eval_args);
      const auto models = obtain_models(cfg, eval_args);
      finish(eval::run_toy_experiment(cfg, models), eval_args, cfg);
      if (cfg.arch == "toy") {
        for (const auto& m : models) {
          const auto stem = fs::path(eval_args.out_dir) / ("scatter_seed" + std::to_string(m.seed));
          eval::write_text(stem.string() + ".svg", eval::toy_scatter(cfg, m, 1.0));
          eval::write_text(stem.string() + "_shift.svg", eval::toy_scatter(cfg, m, cfg.variance_multiplier));
        }
      }
    } else if (*sweep) {
      const auto cfg = build_config(sweep_args);
      finish(eval::run_alpha_sweep(cfg, obtain_models(cfg, sweep_args), parse_grid(sweep_grid, eval::default_alpha_grid())),
             sweep_args, cfg);
    } else if (*ablate) {
      const auto cfg = build_config(ablate_args);
      finish(eval::run_ablation(cfg, obtain_models(cfg, ablate_args)), ablate_args, cfg);
    } else if (*sanity) {
      const auto cfg = build_config(sanity_args);
      finish(eval::run_sanity_checks(cfg, obtain_models(cfg, sanity_args)), sanity_args, cfg);
    } else if (*sw) {
      const auto cfg = build_config(switch_args);
      finish(eval::run_switching(cfg, obtain_models(cfg, switch_args), parse_grid(switch_grid, eval::default_switch_grid())),
             switch_args, cfg);
    } else if (*report) {
      std::cout << eval::to_summary(eval::load_report(report_dir, report_name));
    } else if (*gen) {
      std::string body;
      if (!gen_request.empty()) {
        body = gen_request[0] == '@' ? eval::read_text(gen_request.substr(1)) : gen_request;
      } else {
        nlohmann::json j = {{"checkpoint_id", gen_id}, {"seed", gen_seed}, {"n_samples", gen_n},
                            {"alpha_global", gen_alpha}, {"iterations", gen_iterations}};
        for (const auto& o : gen_overrides) {
          const auto eq = o.find('=');
          if (eq == std::string::npos) throw ConfigError("--alpha-override expects module=gain");
          j["alpha_overrides"][o.substr(0, eq)] = std::stod(o.substr(eq + 1));
        }
        body = j.dump();
      }
      service::Service s({.checkpoint_dir = gen_dir});
      const auto r = s.generate(body);
      std::cout << r.body;
      return r.status == 200 ? 0 : 2;
    } else if (*serve) {
      auto cfg = service::ServiceConfig::from_env();
      if (!serve_dir.empty()) cfg.checkpoint_dir = serve_dir;
      if (!serve_listen.empty()) {
        const auto colon = serve_listen.rfind(':');
        if (colon == std::string::npos) throw ConfigError("--listen expects host:port");
        cfg.host = serve_listen.substr(0, colon);
        cfg.port = std::stoi(serve_listen.substr(colon + 1));
      }
      if (serve_lru) cfg.lru_capacity = serve_lru;
      service::Service s(cfg);
      std::fprintf(stderr, "serving %zu checkpoints on %s:%d\n", s.snapshot()->checkpoints.size(), cfg.host.c_str(),
                   cfg.port);
      service::serve(s);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
