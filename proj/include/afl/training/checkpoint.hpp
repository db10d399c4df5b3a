#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afl/feedback/feedback.hpp"
#include "json.hpp"

namespace afl::training {

inline constexpr int kFormatVersion = 1;

// Everything needed to rebuild and run a trained model. Parameter arrays are
// kept at 32-bit precision (see quantize) so that a saved and reloaded
// checkpoint computes exactly what the in-memory one does.
struct Checkpoint {
  int phase = 1;
  feedback::AflModel model;
  std::vector<nets::TapPair> taps;
  // Training metadata: config, update counts, loss curves, rng state.
  nlohmann::json meta = nlohmann::json::object();
};

// Rounds every stored array of the model to float32.
void quantize(feedback::AflModel& model);

// Layout: "AFL1", u64 metadata length, UTF-8 JSON metadata, little-endian
// float32 arrays, u64 FNV-1a checksum of all preceding bytes. The file is
// written to a temporary name and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::vector<uint8_t> serialize(const Checkpoint& ckpt);

// Validates the whole file before building anything; throws CheckpointError
// on bad magic, version, truncation or checksum.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint deserialize(const std::vector<uint8_t>& bytes);

uint64_t fnv1a64(const uint8_t* data, std::size_t n);

}  // namespace afl::training
