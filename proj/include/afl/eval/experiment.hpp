#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "afl/eval/metrics.hpp"
#include "afl/eval/report.hpp"
#include "afl/training/checkpoint.hpp"
#include "afl/training/config.hpp"

namespace afl::eval {

// Real-data sampler of the config's architecture (swiss roll or shapes).
training::Sampler data_sampler(const training::ExperimentConfig& cfg);

// Phase 1 then phase 2 for one seed; the phase-2 checkpoint keeps the phase-1
// metadata.
training::Checkpoint train_afl(const training::ExperimentConfig& cfg, uint64_t seed,
                               const training::Progress& progress = {});

// Trained checkpoint together with the seed its evaluation streams derive from.
struct SeedModel {
  uint64_t seed = 0;
  training::Checkpoint ckpt;
};

std::vector<SeedModel> train_seeds(const training::ExperimentConfig& cfg, const training::Progress& progress = {});

// Evaluation inputs of one seed: the real cloud and a latent batch scaled to
// `variance_multiplier` times the training variance.
Tensor eval_real(const training::ExperimentConfig& cfg, uint64_t seed, int64_t n);
Tensor eval_latent(const nets::Network& g, uint64_t seed, int64_t n, double variance_multiplier = 1.0);

// Corrections computed from unit-normal noise of each discriminator tap's
// shape instead of the discriminator's response.
feedback::Trace noise_feedback_generate(const feedback::AflModel& model, const Tensor& x,
                                        const feedback::LoopConfig& cfg, Rng& rng);

inline const std::vector<std::string> kAllMetrics = {"energy_distance", "mmd_rbf", "sliced_wasserstein"};

// Baseline vs feedback at matched input variance and at the config's
// variance multiplier. Configurations: baseline, afl, baseline_shift,
// afl_shift.
MetricReport run_toy_experiment(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models);

// Feedback from the correct taps, from taps of a wrong sample (the batch
// rolled by one) and from unit noise.
MetricReport run_sanity_checks(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models);

// One configuration per alpha ("alpha=0.1"), plus "baseline".
MetricReport run_alpha_sweep(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models,
                             const std::vector<double>& alphas);
std::vector<double> default_alpha_grid();

// "none" (every module off), one configuration per kept module, and "all".
MetricReport run_ablation(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models);

// Feedback switching toward per-sample references: real samples from a stream
// independent of the evaluation cloud. Metric: mean distance from each
// switched output to the nearest point of the reference cloud.
MetricReport run_switching(const training::ExperimentConfig& cfg, const std::vector<SeedModel>& models,
                           const std::vector<double>& alphas);
std::vector<double> default_switch_grid();

// SVG overlay of the real, baseline and feedback clouds of one model.
std::string toy_scatter(const training::ExperimentConfig& cfg, const SeedModel& model, double variance_multiplier,
                        int64_t n_points = 2000);

std::string alpha_label(double alpha);

}  // namespace afl::eval
