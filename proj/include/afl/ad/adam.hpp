#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "afl/tensor.hpp"

namespace afl::ad {

using ParamMap = std::map<std::string, Tensor>;

struct AdamState {
  uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

// One bias-corrected Adam update of every entry of `params`. Throws if a
// parameter has no gradient or a gradient has the wrong shape.
void adam_step(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state);

}  // namespace afl::ad
