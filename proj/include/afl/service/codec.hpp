#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "afl/tensor.hpp"

namespace afl::service {

std::string base64_encode(std::string_view bytes);
// Throws ValidationError (field "base64") on malformed input.
std::string base64_decode(std::string_view text);

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // row-major RGB
};

std::string encode_png(const RgbImage& image);
// Accepts 8-bit RGB, RGBA, grey and palette PNGs; throws ValidationError on
// anything else.
RgbImage decode_png(std::string_view bytes);

// [n, 3, s, s] in [-1, 1] -> row-major grid of ceil(sqrt(n)) columns.
RgbImage image_grid(const Tensor& images);
// One [1, 3, s, s] image in [-1, 1].
Tensor image_tensor(const RgbImage& image);
uint8_t to_byte(double v);

}  // namespace afl::service
