#pragma once

#include <cstdint>
#include <string_view>

#include "afl/tensor.hpp"

namespace afl {

// Counter-based generator: the i-th draw of a stream is a pure function of
// (seed, stream, i). Independent consumers get independent streams, so adding
// a consumer never shifts the draws seen by another.
class Rng {
 public:
  Rng(uint64_t seed, uint64_t stream);
  Rng(uint64_t seed, std::string_view stream_name);

  uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; consumes two draws.
  double normal();
  uint64_t below(uint64_t n);

  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0);

  // Derive an independent child stream.
  Rng split(uint64_t sub_stream) const;
  Rng split(std::string_view name) const;

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t key_;
  uint64_t counter_ = 0;
};

uint64_t stream_id(std::string_view name);
uint64_t mix64(uint64_t x);

}  // namespace afl
