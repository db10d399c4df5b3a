#include <cmath>
#include <functional>

#include "afl/ad/adam.hpp"
#include "afl/ad/gradcheck.hpp"
#include "afl/ad/graph.hpp"
#include "afl/error.hpp"
#include "afl/rng.hpp"
#include "doctest.h"
#include "support/op_registry.hpp"

using namespace afl;
using namespace afl::ad;

using namespace afl::testing;

TEST_CASE("forward examples") {
  Graph g;
  auto a = g.input("a");
  auto b = g.input("b");
  auto s = g.add(a, b);
  auto ev = forward(g, {{"a", Tensor::vector({1, 2})}, {"b", Tensor::vector({3, 4})}});
  CHECK(ev.value(s)[0] == 4.0);
  CHECK(ev.value(s)[1] == 6.0);

  Graph g2;
  auto eye = g2.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto v = g2.input("v");
  auto prod = g2.matmul(eye, v);
  auto ev2 = forward(g2, {{"v", Tensor::matrix(2, 1, {5, 7})}});
  CHECK(ev2.value(prod)[0] == 5.0);
  CHECK(ev2.value(prod)[1] == 7.0);

  Graph g3;
  auto t = g3.tanh(g3.input("x"));
  CHECK(forward(g3, {{"x", Tensor::scalar(0.0)}}).value(t).item() == 0.0);
}

TEST_CASE("forward errors name the node or input") {
  Graph g;
  auto a = g.input("a");
  auto b = g.input("b");
  auto m = g.matmul(a, b);
  g.set_name(m, "the_product");
  CHECK_THROWS_AS(forward(g, {{"a", Tensor({2, 3})}}), UnboundInputError);
  try {
    forward(g, {{"a", Tensor({2, 3})}});
  } catch (const UnboundInputError& e) {
    CHECK(e.input() == "b");
  }
  try {
    forward(g, {{"a", Tensor({2, 3})}, {"b", Tensor({2, 3})}});
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("the_product") != std::string::npos);
  }
}

TEST_CASE("forward is deterministic") {
  Rng rng(7, "det");
  Graph g;
  auto x = g.input("x");
  auto w = g.param("w");
  auto y = g.tanh(g.matmul(x, w));
  Bindings bind{{"x", rng.normal_tensor({16, 8})}, {"w", rng.normal_tensor({8, 8})}};
  auto e1 = forward(g, bind);
  auto e2 = forward(g, bind);
  CHECK(e1.value(y).bit_equal(e2.value(y)));
}

TEST_CASE("backward examples") {
  SUBCASE("tanh derivative against finite differences") {
    Graph g;
    auto x = g.input("x", true);
    auto y = g.tanh(x);
    Bindings p{{"x", Tensor::scalar(0.5)}};
    auto grads = backward(forward(g, p), y);
    const double analytic = grads.get("x").item();
    const double h = 1e-6;
    const double fd = (std::tanh(0.5 + h) - std::tanh(0.5 - h)) / (2 * h);
    CHECK(analytic == doctest::Approx(fd).epsilon(0).scale(0).epsilon(1e-9));
    CHECK(std::abs(analytic - 0.786448) < 5e-7);
  }
  SUBCASE("mean of a constant has zero gradient") {
    Graph g;
    auto x = g.input("x", true);
    auto zero = g.scale(x, 0.0);
    auto loss = g.mean(g.add(zero, g.constant(Tensor({3}, 2.0))));
    auto grads = backward(forward(g, {{"x", Tensor::vector({1, 2, 3})}}), loss);
    for (double v : grads.get("x").values()) CHECK(v == 0.0);
  }
  SUBCASE("bilinear form") {
    Graph g;
    auto x = g.input("x");
    auto w = g.param("w");
    auto loss = g.sum(g.mul(x, w));
    auto grads = backward(forward(g, {{"x", Tensor::vector({1, 2})}, {"w", Tensor::vector({3, 4})}}), loss);
    CHECK(grads.get("w")[0] == 1.0);
    CHECK(grads.get("w")[1] == 2.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Graph g;
    auto x = g.input("x", true);
    auto y = g.tanh(x);
    CHECK_THROWS_AS(backward(forward(g, {{"x", Tensor::vector({1, 2})}}), y), ShapeError);
  }
  SUBCASE("non-finite gradient reports the node") {
    Graph g;
    auto x = g.input("x", true);
    auto inv = g.inv_or_zero(x);
    g.set_name(inv, "reciprocal");
    auto loss = g.sum(inv);
    try {
      backward(forward(g, {{"x", Tensor::scalar(1e-200)}}), loss);
      FAIL("expected numeric error");
    } catch (const NumericError& e) {
      CHECK(e.node() == "x");
    }
  }
  SUBCASE("non-finite forward value reports the node") {
    Graph g;
    auto q = g.div(g.input("a"), g.input("b"));
    g.set_name(q, "quotient");
    try {
      forward(g, {{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(0.0)}});
      FAIL("expected numeric error");
    } catch (const NumericError& e) {
      CHECK(e.node() == "quotient");
    }
  }
}

TEST_CASE("every registered op matches central differences at 10 seeded points") {
  for (const auto& c : op_registry()) {
    for (int point_index = 0; point_index < 10; ++point_index) {
      CAPTURE(c.name);
      CAPTURE(point_index);
      Rng rng(1000 + point_index, c.name);
      Bindings point;
      auto b = build_case(c, rng, point);
      auto report = finite_diff_check(b.graph, b.loss, point, 1e-4);
      CHECK(report.passed);
      CHECK(report.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("symbolic gradients agree with backward for the dense subset") {
  for (const auto& c : op_registry()) {
    CAPTURE(c.name);
    Rng rng(77, c.name);
    Bindings point;
    auto b = build_case(c, rng, point);
    const bool dense = is_double_differentiable(b.graph.node(b.output).op);
    for (std::size_t i = 0; i < b.inputs.size(); ++i) {
      if (!dense) {
        CHECK_THROWS_AS(gradient_graph(b.graph, b.loss, b.inputs[i]), UnsupportedError);
        continue;
      }
      auto gx = gradient_graph(b.graph, b.loss, b.inputs[i]);
      auto ev = forward(b.graph, point);
      auto grads = backward(ev, b.loss);
      const Tensor& symbolic = ev.value(gx);
      const Tensor& numeric = grads.get("in" + std::to_string(i));
      REQUIRE(symbolic.same_shape(numeric));
      CHECK(max_abs_diff(symbolic, numeric) < 1e-12);
    }
  }
}

TEST_CASE("relu gradient is exact away from the kink") {
  Graph g;
  auto x = g.input("x", true);
  auto loss = g.sum(g.relu(x));
  Rng rng(3, "relu");
  Bindings p{{"x", rng.uniform_tensor({4, 4}, 0.1, 2.0)}};
  auto grads = backward(forward(g, p), loss);
  for (double v : grads.get("x").values()) CHECK(v == 1.0);
  CHECK(finite_diff_check(g, loss, p, 1e-4).passed);
}

TEST_CASE("corrupted gradient fails the check") {
  Graph g;
  auto x = g.input("x", true);
  auto loss = g.sum(g.square(x));
  Bindings p{{"x", Tensor::vector({0.3, -0.7})}};
  auto analytic = backward(forward(g, p), loss).by_name();
  analytic["x"][1] += 0.01;
  auto report = compare_gradients(analytic, numeric_gradients(g, loss, p), 1e-4);
  CHECK_FALSE(report.passed);
  CHECK(report.worst_leaf == "x");
  CHECK(report.worst_index == 1);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(11, "linear");
  Graph g;
  auto x = g.input("x");
  auto w = g.param("w");
  auto h = g.tanh(g.matmul(x, w));
  auto l1 = g.mean(g.square(h));
  auto l2 = g.sum(g.softplus(h));
  auto both = g.add(l1, l2);
  Bindings p{{"x", rng.normal_tensor({8, 5})}, {"w", rng.normal_tensor({5, 3})}};
  auto ev = forward(g, p);
  const Tensor gb = backward(ev, both).get("w");
  const Tensor g1 = backward(ev, l1).get("w");
  const Tensor g2 = backward(ev, l2).get("w");
  for (std::size_t i = 0; i < gb.size(); ++i) CHECK(std::abs(gb[i] - (g1[i] + g2[i])) < 1e-12);
}

TEST_CASE("input gradient as a graph") {
  SUBCASE("linear critic") {
    Graph g;
    auto x = g.input("x");
    auto w = g.param("w");
    auto d = g.matmul(x, w);
    auto gx = gradient_graph(g, d, x);
    Rng rng(5, "lin");
    auto ev = forward(g, {{"x", rng.normal_tensor({4, 2})}, {"w", Tensor::matrix(2, 1, {2, -1})}});
    const Tensor& v = ev.value(gx);
    for (int r = 0; r < 4; ++r) {
      CHECK(v.at(r, 0) == 2.0);
      CHECK(v.at(r, 1) == -1.0);
    }
  }
  SUBCASE("tanh critic at the origin") {
    Graph g;
    auto x = g.input("x");
    auto w = g.param("w");
    auto d = g.tanh(g.matmul(x, w));
    auto gx = gradient_graph(g, d, x);
    auto ev = forward(g, {{"x", Tensor::matrix(1, 2, {0, 0})}, {"w", Tensor::matrix(2, 1, {1, 0})}});
    CHECK(ev.value(gx)[0] == doctest::Approx(1.0));
    CHECK(ev.value(gx)[1] == doctest::Approx(0.0));
  }
  SUBCASE("gradient of the gradient norm w.r.t. weights") {
    Graph g;
    auto x = g.input("x");
    auto w = g.param("w");
    auto d = g.matmul(x, w);
    auto gx = gradient_graph(g, d, x);
    auto loss = g.mean(g.row_norm(gx));
    Bindings p{{"x", Tensor::matrix(3, 2, {1, 2, -1, 0.5, 0.3, 0.2})}, {"w", Tensor::matrix(2, 1, {0.6, -1.3})}};
    auto report = finite_diff_check(g, loss, p, 1e-3);
    CHECK(report.passed);
  }
  SUBCASE("convolutions are rejected for double backprop") {
    Graph g;
    auto x = g.input("x");
    auto w = g.param("w");
    auto y = g.sum(g.conv2d(x, w, 1, 1));
    CHECK_THROWS_AS(gradient_graph(g, y, x), UnsupportedError);
  }
}

TEST_CASE("double backprop matches a finite-difference Hessian-vector product") {
  for (int width : {4, 9, 16}) {
    CAPTURE(width);
    Rng rng(width, "hvp");
    Graph g;
    auto x = g.input("x", true);
    auto w1 = g.param("w1");
    auto b1 = g.param("b1");
    auto w2 = g.param("w2");
    auto w3 = g.param("w3");
    auto h1 = g.tanh(g.add_row(g.matmul(x, w1), b1));
    auto h2 = g.leaky_relu(g.matmul(h1, w2), 0.2);
    auto d = g.matmul(h2, w3);
    auto gx = gradient_graph(g, d, x);
    auto dir = g.input("v");
    auto directional = g.sum(g.mul(gx, dir));
    Bindings p{{"x", rng.normal_tensor({3, 2})},
               {"w1", rng.normal_tensor({2, width}, 0.7)},
               {"b1", rng.normal_tensor({width}, 0.1)},
               {"w2", rng.normal_tensor({width, width}, 0.4)},
               {"w3", rng.normal_tensor({width, 1}, 0.4)},
               {"v", rng.normal_tensor({3, 2})}};
    // analytic H v via backward through the gradient graph
    const Tensor hv = backward(forward(g, p), directional).get("x");
    // oracle: central differences of the (first-order) input gradient along v
    const double eps = 1e-5;
    Bindings up = p, down = p;
    for (std::size_t i = 0; i < p.at("x").size(); ++i) {
      up["x"][i] += eps * p.at("v")[i];
      down["x"][i] -= eps * p.at("v")[i];
    }
    const Tensor gu = forward(g, up).value(gx);
    const Tensor gd = forward(g, down).value(gx);
    // H is block diagonal over samples, so row i of (gu - gd) pairs with row i of v.
    for (std::size_t i = 0; i < hv.size(); ++i) {
      const double fd = (gu[i] - gd[i]) / (2 * eps);
      CHECK(std::abs(hv[i] - fd) / std::max({std::abs(fd), std::abs(hv[i]), 1e-5}) < 1e-3);
    }
    // and the parameter-side second-order terms
    auto report = finite_diff_check(g, directional, p, 1e-3);
    CHECK(report.passed);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters and moments alone") {
    ParamMap params{{"w", Tensor::vector({1.0, -2.0})}};
    AdamState st;
    adam_step(params, {{"w", Tensor({2})}}, st);
    CHECK(st.step == 1);
    CHECK(params["w"][0] == 1.0);
    CHECK(params["w"][1] == -2.0);
    CHECK(st.m["w"][0] == 0.0);
    CHECK(st.v["w"][1] == 0.0);
  }
  SUBCASE("first step moves by lr in the sign of the gradient") {
    ParamMap params{{"w", Tensor::vector({1.0, 1.0, 1.0})}};
    AdamState st;
    st.lr = 0.01;
    st.beta1 = 0.9;
    st.beta2 = 0.999;
    adam_step(params, {{"w", Tensor::vector({0.5, -3.0, 1e-3})}}, st);
    // m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
    CHECK(params["w"][0] == doctest::Approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)));
    CHECK(params["w"][1] == doctest::Approx(1.0 + 0.01 * 3.0 / (3.0 + 1e-8)));
    CHECK(params["w"][2] == doctest::Approx(1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8)));
  }
  SUBCASE("two steps reduce x^2 from x = 1") {
    ParamMap params{{"x", Tensor::scalar(1.0)}};
    AdamState st;
    st.lr = 0.1;
    double prev = 1.0;
    for (int i = 0; i < 2; ++i) {
      const double x = params["x"].item();
      adam_step(params, {{"x", Tensor::scalar(2 * x)}}, st);
      const double next = params["x"].item();
      CHECK(next * next < prev * prev);
      prev = next;
    }
    // scripted trace with beta1 = 0.5, beta2 = 0.9, lr = 0.1
    CHECK(params["x"].item() == doctest::Approx(0.80161804).epsilon(1e-7));
  }
  SUBCASE("missing gradient is an error") {
    ParamMap params{{"w", Tensor::vector({1.0})}};
    AdamState st;
    CHECK_THROWS(adam_step(params, {}, st));
  }
}
