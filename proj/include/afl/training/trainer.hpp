#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "afl/feedback/feedback.hpp"
#include "afl/nets/architectures.hpp"
#include "afl/rng.hpp"
#include "afl/training/checkpoint.hpp"
#include "afl/training/losses.hpp"

namespace afl::training {

struct TrainConfig {
  int phase = 1;
  LossKind loss = LossKind::kWganGp;
  double gp_lambda = 10.0;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  int batch_size = 128;
  // generator (phase 1) or feedback (phase 2) updates
  int iterations = 8000;
  uint64_t seed = 0;
  int d_steps_per_g_step = 5;
  // phase 2 only: D also sees y_0 fakes (every other D step)
  bool d_sees_y0 = false;
  // loss curve sampling period, in generator/feedback updates
  int log_every = 100;

  // Adam and ratio defaults of the chosen loss.
  static TrainConfig defaults(LossKind loss);
  void validate() const;
  nlohmann::json to_json() const;
};

// Draws a batch of n real samples from the stream it is given.
using Sampler = std::function<Tensor(Rng& rng, int64_t n)>;

struct StepLog {
  int phase = 1;
  int step = 0;  // completed generator/feedback updates
  double d_loss = 0.0;
  double g_loss = 0.0;
};
using Progress = std::function<void(const StepLog&)>;

// Standard alternating GAN training from a fresh initialization derived from
// cfg.seed. Returns a phase-1 checkpoint (no feedback modules).
Checkpoint train_phase1(nets::GanPair pair, const Sampler& data, const TrainConfig& cfg,
                        const Progress& progress = {});

// One freshly initialized module per tap pair of the checkpoint.
std::vector<feedback::FeedbackModule> default_modules(const Checkpoint& phase1, feedback::Variant variant,
                                                      uint64_t seed);

// Trains the feedback modules with the generator frozen and the discriminator
// still updating. Fakes shown to D are y_1 = G(x, E(y_0)) with gain 1. Throws
// Error if any generator parameter changes.
Checkpoint train_phase2(const Checkpoint& phase1, std::vector<feedback::FeedbackModule> modules,
                        const Sampler& data, const TrainConfig& cfg, const Progress& progress = {});

// Standard normal latent batch for a generator.
Tensor sample_latent(const nets::Network& g, Rng& rng, int64_t n, double stddev = 1.0);

}  // namespace afl::training
