#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "afl/nets/architectures.hpp"
#include "afl/training/checkpoint.hpp"

namespace afl::testing {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("afl_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Untrained phase-2 style checkpoint with randomly initialized weights.
inline training::Checkpoint random_checkpoint(nets::GanPair pair, uint64_t seed) {
  training::Checkpoint c;
  c.phase = 2;
  c.taps = pair.taps;
  c.model = feedback::make_model(std::move(pair), feedback::Variant::kSingle, seed);
  c.model.g.init(seed + 1);
  c.model.d.init(seed + 2);
  c.model.set_mode(nets::Mode::kEval);
  training::quantize(c.model);
  return c;
}

// toy.afl (one module) and img.afl (16x16, four modules).
inline void write_fixtures(const std::filesystem::path& dir) {
  training::save_checkpoint(random_checkpoint(nets::build_toy_pair(16), 3), dir / "toy.afl");
  training::save_checkpoint(
      random_checkpoint(nets::build_dcgan_pair({.image_size = 16, .base_channels = 2, .n_taps = 4}), 4),
      dir / "img.afl");
}

}  // namespace afl::testing
