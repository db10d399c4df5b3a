#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afl/nets/network.hpp"

namespace afl::nets {

// A generator tap and the discriminator tap of the same shape that feeds it.
struct TapPair {
  std::string gen;
  std::string disc;
};

struct GanPair {
  Network g;
  Network d;
  std::vector<TapPair> taps;
};

inline constexpr int64_t kToyWidth = 64;
inline constexpr int64_t kLatentSize = 128;

// Four dense layers each for G: R^2 -> R^2 and D: R^2 -> R, relu between
// hidden layers, linear critic output. G is tapped at the input of its last
// layer, D at its first hidden activation.
GanPair build_toy_pair(int64_t width = kToyWidth);

struct DcganOptions {
  int64_t image_size = 32;
  int64_t base_channels = 8;
  int n_taps = 1;
  int64_t latent = kLatentSize;
  bool spectral_norm = false;
};

// Four-level conv pair with mirrored channel widths. G starts at image_size/8
// and doubles three times; D halves back down. With n_taps = 4 every level is
// a tap pair; with n_taps = 1 only the image_size/4 level is. Spectral norm
// replaces the discriminator's batch norms.
GanPair build_dcgan_pair(const DcganOptions& options);

// Throws ShapeError unless every pair has equal per-sample shapes.
void check_mirror(const GanPair& pair);

}  // namespace afl::nets
