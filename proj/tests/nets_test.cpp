#include <algorithm>
#include <cmath>

#include "afl/error.hpp"
#include "afl/nets/architectures.hpp"
#include "afl/nets/network.hpp"
#include "afl/nets/spectral_norm.hpp"
#include "afl/rng.hpp"
#include "doctest.h"
#include "support/jacobi.hpp"

using namespace afl;
using namespace afl::nets;
using afl::testing::jacobi_top_singular_value;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double e : v) s += e * e;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("jacobi oracle on known matrices") {
  CHECK(jacobi_top_singular_value(Tensor::matrix(2, 2, {3, 0, 0, 1})) == doctest::Approx(3.0).epsilon(1e-12));
  // [[1, 1], [0, 1]] has top singular value golden ratio
  CHECK(jacobi_top_singular_value(Tensor::matrix(2, 2, {1, 1, 0, 1})) ==
        doctest::Approx((1 + std::sqrt(5.0)) / 2).epsilon(1e-12));
  CHECK(jacobi_top_singular_value(Tensor::matrix(1, 3, {2, 3, 6})) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("toy pair shapes and parameter count") {
  auto p = build_toy_pair(64);
  p.g.init(1);
  p.d.init(2);
  CHECK(p.g.param_count() == 2 * 64 + 64 + 64 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
  CHECK(p.g.param_count() == 8642);
  CHECK(p.g.tap_names() == std::vector<std::string>{"act3"});
  CHECK(p.g.layers().back().name == "fc4");
  CHECK(p.g.layer_shape(p.g.layers().size() - 2) == Shape{64});
  Rng rng(3, "x");
  Tensor x = rng.normal_tensor({128, 2});
  CHECK(run(p.d, x).output.shape() == Shape{128, 1});
  CHECK(tap(p.g, "act3", x).shape() == Shape{128, 64});
  CHECK_THROWS_AS(tap(p.g, "fc1", x), NotFoundError);
}

TEST_CASE("toy D has no batch norm") {
  auto p = build_toy_pair();
  for (const auto& l : p.d.layers()) CHECK(l.kind != LayerKind::kBatchNorm);
}

TEST_CASE("dcgan shapes") {
  for (int64_t size : {16, 32}) {
    for (int taps : {1, 4}) {
      auto p = build_dcgan_pair({.image_size = size, .base_channels = 4, .n_taps = taps});
      p.g.init(5);
      p.d.init(6);
      CHECK(p.g.output_shape() == Shape{3, size, size});
      CHECK(p.taps.size() == static_cast<std::size_t>(taps));
      Rng rng(7, "z");
      auto y = run(p.g, rng.normal_tensor({3, 128})).output;
      CHECK(y.shape() == Shape{3, 3, size, size});
      CHECK(run(p.d, y).output.shape() == Shape{3, 1});
    }
  }
}

TEST_CASE("dcgan tap resolutions") {
  auto four = build_dcgan_pair({.image_size = 32, .base_channels = 4, .n_taps = 4});
  std::vector<int64_t> sizes;
  for (const auto& t : four.taps) sizes.push_back(four.g.tap_shape(t.gen)[1]);
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int64_t>{4, 8, 16, 32});

  auto one = build_dcgan_pair({.image_size = 32, .base_channels = 4, .n_taps = 1});
  REQUIRE(one.taps.size() == 1);
  CHECK(one.g.tap_shape(one.taps[0].gen) == Shape{16, 8, 8});
}

TEST_CASE("mirror property holds for every pair") {
  std::vector<GanPair> pairs;
  pairs.push_back(build_toy_pair(16));
  for (int64_t size : {16, 32})
    for (int taps : {1, 4})
      for (bool sn : {false, true})
        pairs.push_back(build_dcgan_pair({.image_size = size, .base_channels = 2, .n_taps = taps, .spectral_norm = sn}));
  for (const auto& p : pairs) {
    for (const auto& t : p.taps) CHECK(p.g.tap_shape(t.gen) == p.d.tap_shape(t.disc));
  }
}

TEST_CASE("dcgan rejects bad options") {
  CHECK_THROWS_AS(build_dcgan_pair({.image_size = 24}), ConfigError);
  CHECK_THROWS_AS(build_dcgan_pair({.image_size = 32, .base_channels = 0}), ConfigError);
  CHECK_THROWS_AS(build_dcgan_pair({.image_size = 32, .base_channels = 4, .n_taps = 2}), ConfigError);
}

TEST_CASE("network construction validates layers") {
  CHECK_THROWS_AS(Network("n", {2}, {dense("a", 2, 3), dense("a", 3, 3)}), ConfigError);
  CHECK_THROWS_AS(Network("n", {2}, {dense("a", 2, 3), dense("b", 4, 3)}), ShapeError);
  CHECK_THROWS_AS(Network("n", {3, 5, 5}, {conv2d("c", 3, 4, 4, 2, 1)}), ShapeError);
  CHECK_THROWS_AS(Network("n", {3, 4, 4}, {conv2d("c", 3, 4, 5, 1, 2)}), ShapeError);
}

TEST_CASE("initialization is seed deterministic") {
  auto a = build_dcgan_pair({.image_size = 16, .base_channels = 2});
  auto b = build_dcgan_pair({.image_size = 16, .base_channels = 2});
  a.g.init(11);
  b.g.init(11);
  for (const auto& [k, t] : a.g.params()) CHECK(t.bit_equal(b.g.params().at(k)));
  b.g.init(12);
  CHECK_FALSE(a.g.params().at("G.proj.w").bit_equal(b.g.params().at("G.proj.w")));
  // weights ~ N(0, 0.02^2), biases zero
  const auto& w = a.g.params().at("G.proj.w");
  double s = 0, ss = 0;
  for (double e : w.values()) {
    s += e;
    ss += e * e;
  }
  const double n = static_cast<double>(w.size());
  CHECK(std::abs(s / n) < 0.002);
  CHECK(std::sqrt(ss / n) == doctest::Approx(0.02).epsilon(0.05));
  for (double e : a.g.params().at("G.to_rgb.b").values()) CHECK(e == 0.0);
}

TEST_CASE("tap is deterministic on identical inputs") {
  auto p = build_toy_pair();
  p.d.init(1);
  Rng rng(2, "y");
  Tensor y0 = rng.normal_tensor({64, 2});
  Tensor copy = y0;
  CHECK(tap(p.d, "act1", y0).bit_equal(tap(p.d, "act1", copy)));
}

TEST_CASE("eval-mode batch norm is independent of the batch") {
  auto p = build_dcgan_pair({.image_size = 16, .base_channels = 2, .n_taps = 4});
  p.g.init(3);
  Rng rng(4, "stats");
  for (auto& [_, s] : p.g.running_stats()) {
    for (double& e : s.mean.values()) e = 0.1 * rng.normal();
    for (double& e : s.var.values()) e = rng.uniform(0.5, 2.0);
  }
  p.g.set_mode(Mode::kEval);
  Tensor z = rng.normal_tensor({6, 128});
  auto full = run(p.g, z);
  for (int64_t i = 0; i < 6; ++i) {
    auto single = run(p.g, z.row(i));
    CHECK(max_abs_diff(single.output, full.output.row(i)) < 1e-12);
    for (const auto& [name, t] : single.taps) CHECK(max_abs_diff(t, full.taps.at(name).row(i)) < 1e-12);
  }
  // train mode mixes samples through batch statistics
  p.g.set_mode(Mode::kTrain);
  auto train = run(p.g, z);
  CHECK(max_abs_diff(run(p.g, z.rows(0, 3)).output, train.output.rows(0, 3)) > 1e-6);
}

TEST_CASE("running stats follow the momentum rule") {
  Network n("n", {3}, {batch_norm("bn", 3)});
  n.init(0);
  ad::Graph g;
  auto x = g.input("x");
  auto built = n.build(g, x);
  ad::Bindings b;
  n.bind(b);
  b["x"] = Tensor::matrix(2, 3, {1, 2, 3, 3, 6, 3});
  auto ev = ad::forward(g, b);
  n.update_running_stats(ev, built);
  const auto& s = n.running_stats().at("bn");
  // means 2, 4, 3; unbiased variances 2, 8, 0
  CHECK(s.mean[0] == doctest::Approx(0.2));
  CHECK(s.mean[1] == doctest::Approx(0.4));
  CHECK(s.var[0] == doctest::Approx(0.9 + 0.2));
  CHECK(s.var[1] == doctest::Approx(0.9 + 0.8));
  CHECK(s.var[2] == doctest::Approx(0.9));
}

TEST_CASE("injection adds to the tap before the next layer") {
  auto p = build_toy_pair(8);
  p.g.init(1);
  ad::Graph g;
  auto x = g.input("x");
  auto c = g.input("c");
  auto built = p.g.build(g, x, {.trainable = false, .inject = {{"act3", c}}});
  ad::Bindings b;
  p.g.bind(b);
  Rng rng(2, "x");
  b["x"] = rng.normal_tensor({5, 2});
  b["c"] = rng.normal_tensor({5, 8});
  auto ev = ad::forward(g, b);
  // recompute the last layer by hand from the tap
  const Tensor& phi = ev.value(built.taps.at("act3"));
  const Tensor& w = p.g.params().at("G.fc4.w");
  const Tensor& bias = p.g.params().at("G.fc4.b");
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t o = 0; o < 2; ++o) {
      double s = bias[o];
      for (int64_t k = 0; k < 8; ++k) s += (phi.at(i, k) + b["c"].at(i, k)) * w.at(k, o);
      CHECK(ev.value(built.output).at(i, o) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK_THROWS_AS(p.g.build(g, x, {.instance = "again", .inject = {{"fc1", c}}}), NotFoundError);
}

TEST_CASE("descriptor round trip rebuilds the same network") {
  auto p = build_dcgan_pair({.image_size = 16, .base_channels = 2, .n_taps = 4, .spectral_norm = true});
  auto d2 = Network::from_descriptor(p.d.descriptor());
  CHECK(d2.descriptor() == p.d.descriptor());
  CHECK(d2.spectral_norm());
  CHECK(d2.tap_names() == p.d.tap_names());
  CHECK_THROWS_AS(Network::from_descriptor(nlohmann::json{{"name", "x"}}), ConfigError);
}

TEST_CASE("spectral norm on identity and diagonal") {
  auto st = make_sn_state({2, 2}, 1, 1);
  auto id = spectral_normalize(Tensor::matrix(2, 2, {1, 0, 0, 1}), st);
  CHECK(id.sigma == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(max_abs_diff(id.weight, Tensor::matrix(2, 2, {1, 0, 0, 1})) < 1e-12);

  auto d = make_sn_state({2, 2}, 2, 50);
  auto diag = spectral_normalize(Tensor::matrix(2, 2, {3, 0, 0, 1}), d);
  CHECK(std::abs(diag.sigma - 3.0) / 3.0 < 0.01);
  CHECK(norm(d.u) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("spectral norm matches the jacobi oracle on random matrices") {
  Rng rng(8, "sn");
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t rows = 2 + static_cast<int64_t>(rng.below(15));
    const int64_t cols = 2 + static_cast<int64_t>(rng.below(15));
    Tensor w = rng.normal_tensor({rows, cols});
    const double oracle = jacobi_top_singular_value(w);
    auto st = make_sn_state(w.shape(), static_cast<uint64_t>(trial), 50);
    auto res = spectral_normalize(w, st);
    CHECK(std::abs(res.sigma - oracle) / oracle < 0.01);
    CHECK(norm(st.u) == doctest::Approx(1.0).epsilon(1e-6));
    auto again = make_sn_state(w.shape(), 99, 50);
    CHECK(power_iterate(res.weight, again) <= 1.0 + 1e-3);
  }
}

TEST_CASE("spectral norm rejects a zero weight") {
  auto st = make_sn_state({3, 3}, 1, 5);
  CHECK_THROWS_AS(spectral_normalize(Tensor({3, 3}), st), Error);
}

TEST_CASE("spectral-normalized layer divides by the masked sigma") {
  Network n("n", {3}, {dense("fc", 3, 2, false)});
  n.enable_spectral_norm(4, 50);
  n.init(5);
  const auto& w = n.params().at("n.fc.w");
  const double sigma = n.sn_states().at("n.fc.w").sigma;
  CHECK(std::abs(sigma - jacobi_top_singular_value(w)) / sigma < 1e-4);
  Tensor x = Tensor::matrix(1, 3, {1, -2, 0.5});
  Tensor y = run(n, x).output;
  for (int64_t o = 0; o < 2; ++o) {
    double s = 0;
    for (int64_t k = 0; k < 3; ++k) s += x[k] * w.at(k, o);
    CHECK(y[o] == doctest::Approx(s / sigma).epsilon(1e-10));
  }
}
