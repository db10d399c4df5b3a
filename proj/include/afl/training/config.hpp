#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "afl/feedback/feedback.hpp"
#include "afl/nets/architectures.hpp"
#include "afl/training/trainer.hpp"

namespace afl::training {

// Everything an experiment run needs. Text form is one `key = value` per
// line, `#` starts a comment; unknown or repeated keys are rejected.
//
//   arch = toy | dcgan          width, image_size, base_channels, n_taps,
//   variant = single | dual     spectral_norm
//   loss = wgan_gp | bce        (sets Adam/ratio defaults before other keys)
//   gp_lambda, lr, beta1, beta2, batch_size, d_steps_per_g_step
//   phase1_iterations, phase2_iterations, phase2_d_sees_y0
//   iterations, alpha, alpha.<module>
//   seeds = 0,1,2,3,4           eval_samples, variance_multiplier
struct ExperimentConfig {
  std::string arch = "toy";
  int64_t width = nets::kToyWidth;
  nets::DcganOptions dcgan;
  feedback::Variant variant = feedback::Variant::kSingle;
  TrainConfig phase1 = TrainConfig::defaults(LossKind::kWganGp);
  TrainConfig phase2 = phase2_of(phase1);
  feedback::LoopConfig loop;
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  int64_t eval_samples = 10000;
  double variance_multiplier = 5.0;

  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::string& path);
  // Applies one key; CLI flags go through here too.
  void set(const std::string& key, const std::string& value);
  // Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
  nlohmann::json to_json() const;
  void validate() const;

  nets::GanPair make_pair() const;
  // Phase configs carrying a specific seed.
  TrainConfig phase1_for(uint64_t seed) const;
  TrainConfig phase2_for(uint64_t seed) const;

  static TrainConfig phase2_of(const TrainConfig& p1);
};

}  // namespace afl::training
