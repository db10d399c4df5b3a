#include "afl/training/trainer.hpp"

#include <cmath>

#include "afl/ad/adam.hpp"
#include "afl/error.hpp"

namespace afl::training {

namespace {

nets::BuildOptions frozen(const std::string& instance, std::optional<nets::Mode> mode = std::nullopt) {
  nets::BuildOptions o;
  o.instance = instance;
  o.trainable = false;
  o.mode = mode;
  return o;
}

nets::BuildOptions trainable(const std::string& instance) {
  nets::BuildOptions o;
  o.instance = instance;
  return o;
}

ad::AdamState make_adam(const TrainConfig& cfg) {
  ad::AdamState s;
  s.lr = cfg.lr;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  return s;
}

// Discriminator update graph shared by both phases: real and fake batches are
// plain inputs, D's parameters are the trainable leaves.
struct DiscriminatorStep {
  ad::Graph graph;
  nets::Built real, fake;
  ad::NodeId loss;
  bool penalty = false;

  DiscriminatorStep(const nets::Network& d, const TrainConfig& cfg) {
    auto r = graph.input("real");
    auto f = graph.input("fake");
    real = d.build(graph, r, trainable(d.name() + "@real"));
    fake = d.build(graph, f, trainable(d.name() + "@fake"));
    loss = adversarial_losses(graph, cfg.loss, real.output, fake.output).d_loss;
    if (cfg.loss == LossKind::kWganGp && cfg.gp_lambda > 0.0) {
      penalty = true;
      auto eps = graph.input("eps");
      loss = graph.add(loss, gradient_penalty(graph, d, r, f, eps, cfg.gp_lambda));
    }
  }

  double run(nets::Network& d, const Tensor& real_batch, const Tensor& fake_batch, Rng& gp_rng,
             ad::AdamState& opt) {
    if (d.spectral_norm()) d.sn_update();
    ad::Bindings b;
    d.bind(b);
    b["real"] = real_batch;
    b["fake"] = fake_batch;
    if (penalty) b["eps"] = gp_rng.uniform_tensor({real_batch.dim(0)});
    auto ev = ad::forward(graph, b, {loss});
    const double value = ev.value(loss).item();
    auto grads = ad::backward(ev, loss);
    d.update_running_stats(ev, real);
    d.update_running_stats(ev, fake);
    ad::adam_step(d.params(), grads.by_name(), opt);
    return value;
  }
};

void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v)) {
    throw NumericError(what, "training diverged at update " + std::to_string(step));
  }
}

nlohmann::json curve_entry(int step, double d, double g) { return {{"step", step}, {"d_loss", d}, {"g_loss", g}}; }

}  // namespace

TrainConfig TrainConfig::defaults(LossKind loss) {
  TrainConfig c;
  c.loss = loss;
  if (loss == LossKind::kBce) {
    c.gp_lambda = 0.0;
    c.lr = 2e-4;
    c.beta1 = 0.5;
    c.beta2 = 0.999;
    c.d_steps_per_g_step = 1;
  }
  return c;
}

void TrainConfig::validate() const {
  if (phase != 1 && phase != 2) throw ConfigError("phase must be 1 or 2");
  if (!(gp_lambda >= 0.0)) throw ConfigError("gp_lambda must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in (0, 1)");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (iterations < 1) throw ConfigError("iterations must be positive");
  if (d_steps_per_g_step < 1) throw ConfigError("d_steps_per_g_step must be positive");
  if (log_every < 1) throw ConfigError("log_every must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"phase", phase},
          {"loss", loss_name(loss)},
          {"gp_lambda", gp_lambda},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"seed", seed},
          {"d_steps_per_g_step", d_steps_per_g_step},
          {"d_sees_y0", d_sees_y0}};
}

Tensor sample_latent(const nets::Network& g, Rng& rng, int64_t n, double stddev) {
  Shape s{n};
  s.insert(s.end(), g.sample_shape().begin(), g.sample_shape().end());
  return rng.normal_tensor(s, stddev);
}

Checkpoint train_phase1(nets::GanPair pair, const Sampler& data, const TrainConfig& cfg, const Progress& progress) {
  cfg.validate();
  if (cfg.phase != 1) throw ConfigError("train_phase1 needs phase 1");
  if (cfg.loss == LossKind::kWganGp && !double_differentiable(pair.d)) {
    throw UnsupportedError("wgan_gp needs a dense-only discriminator");
  }
  nets::Network& G = pair.g;
  nets::Network& D = pair.d;
  G.init(cfg.seed);
  D.init(cfg.seed);
  G.set_mode(nets::Mode::kTrain);
  D.set_mode(nets::Mode::kTrain);

  Rng data_rng(cfg.seed, "phase1:data"), z_rng(cfg.seed, "phase1:latent"), gp_rng(cfg.seed, "phase1:gp");
  const int64_t n = cfg.batch_size;

  ad::Graph gen;
  auto gz = gen.input("z");
  auto gen_built = G.build(gen, gz, frozen("G@sample"));

  DiscriminatorStep dstep(D, cfg);

  ad::Graph gstep;
  auto sz = gstep.input("z");
  auto g_built = G.build(gstep, sz, trainable("G"));
  auto d_on_fake = D.build(gstep, g_built.output, frozen("D@fake"));
  auto g_loss = adversarial_losses(gstep, cfg.loss, d_on_fake.output, d_on_fake.output).g_loss;

  ad::AdamState d_opt = make_adam(cfg), g_opt = make_adam(cfg);
  nlohmann::json curve = nlohmann::json::array();
  int64_t d_updates = 0, g_updates = 0;
  double last_d = 0.0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (int k = 0; k < cfg.d_steps_per_g_step; ++k) {
      ad::Bindings gb;
      G.bind(gb);
      gb["z"] = sample_latent(G, z_rng, n);
      auto gev = ad::forward(gen, gb, {gen_built.output});
      G.update_running_stats(gev, gen_built);
      last_d = dstep.run(D, data(data_rng, n), gev.value(gen_built.output), gp_rng, d_opt);
      check_finite(last_d, "d_loss", it);
      ++d_updates;
    }
    ad::Bindings b;
    G.bind(b);
    D.bind(b);
    b["z"] = sample_latent(G, z_rng, n);
    auto ev = ad::forward(gstep, b, {g_loss});
    const double gl = ev.value(g_loss).item();
    check_finite(gl, "g_loss", it);
    auto grads = ad::backward(ev, g_loss);
    G.update_running_stats(ev, g_built);
    ad::adam_step(G.params(), grads.by_name(), g_opt);
    ++g_updates;
    if (it % cfg.log_every == 0 || it == cfg.iterations) {
      curve.push_back(curve_entry(it, last_d, gl));
      if (progress) progress({1, it, last_d, gl});
    }
  }
  if (d_updates != static_cast<int64_t>(cfg.d_steps_per_g_step) * g_updates) {
    throw Error("alternation bookkeeping broken");
  }

  Checkpoint c;
  c.phase = 1;
  c.model.g = std::move(G);
  c.model.d = std::move(D);
  c.taps = pair.taps;
  quantize(c.model);
  c.model.set_mode(nets::Mode::kEval);
  c.meta = {{"config", cfg.to_json()},
            {"d_updates", d_updates},
            {"g_updates", g_updates},
            {"loss_curve", curve},
            {"rng", {{"seed", cfg.seed},
                     {"data", data_rng.counter()},
                     {"latent", z_rng.counter()},
                     {"gp", gp_rng.counter()}}}};
  return c;
}

std::vector<feedback::FeedbackModule> default_modules(const Checkpoint& phase1, feedback::Variant variant,
                                                      uint64_t seed) {
  std::vector<feedback::FeedbackModule> out;
  for (const auto& t : phase1.taps) {
    feedback::FeedbackModule f(variant, t, phase1.model.g.tap_shape(t.gen));
    f.init(mix64(seed ^ stream_id(f.name())));
    out.push_back(std::move(f));
  }
  return out;
}

Checkpoint train_phase2(const Checkpoint& phase1, std::vector<feedback::FeedbackModule> modules, const Sampler& data,
                        const TrainConfig& cfg, const Progress& progress) {
  cfg.validate();
  if (cfg.phase != 2) throw ConfigError("train_phase2 needs phase 2");
  if (phase1.phase != 1) throw ConfigError("phase 2 starts from a phase-1 checkpoint");
  if (modules.empty()) throw ConfigError("phase 2 needs at least one feedback module");
  feedback::AflModel m{phase1.model.g, phase1.model.d, std::move(modules)};
  for (const auto& f : m.modules) {
    bool known = false;
    for (const auto& t : phase1.taps) known = known || (t.gen == f.binding().gen && t.disc == f.binding().disc);
    if (!known) throw ConfigError("feedback module '" + f.name() + "' is bound to taps the checkpoint does not pair");
  }
  m.check_bindings();
  if (cfg.loss == LossKind::kWganGp && !double_differentiable(m.d)) {
    throw UnsupportedError("wgan_gp needs a dense-only discriminator");
  }
  nets::Network& G = m.g;
  nets::Network& D = m.d;
  G.set_mode(nets::Mode::kEval);
  D.set_mode(nets::Mode::kTrain);
  for (auto& f : m.modules) f.network().set_mode(nets::Mode::kTrain);
  const ad::ParamMap frozen_g = G.params();

  Rng data_rng(cfg.seed, "phase2:data"), z_rng(cfg.seed, "phase2:latent"), gp_rng(cfg.seed, "phase2:gp");
  const int64_t n = cfg.batch_size;

  // z -> y_0 -> D taps -> corrections -> y_1 -> D score
  ad::Graph fg;
  auto z = fg.input("z");
  auto base = G.build(fg, z, frozen("G@y0"));
  std::string deepest;
  for (const auto& l : D.layers())
    if (l.tap) deepest = l.name;
  auto d0_opt = frozen("D@y0");
  d0_opt.stop_after = deepest;
  auto d0 = D.build(fg, base.output, d0_opt);
  nets::BuildOptions inject = frozen("G@y1");
  std::vector<nets::Built> module_built;
  for (const auto& f : m.modules) {
    std::optional<ad::NodeId> phi;
    if (f.variant() == feedback::Variant::kDual) phi = base.taps.at(f.binding().gen);
    module_built.push_back(f.build_full(fg, d0.taps.at(f.binding().disc), phi, trainable(f.name())));
    inject.inject[f.binding().gen] = module_built.back().output;
  }
  auto corrected = G.build(fg, z, inject);
  auto d1 = D.build(fg, corrected.output, frozen("D@y1"));
  auto f_loss = adversarial_losses(fg, cfg.loss, d1.output, d1.output).g_loss;

  DiscriminatorStep dstep(D, cfg);

  ad::AdamState d_opt = make_adam(cfg);
  std::vector<ad::AdamState> f_opt(m.modules.size(), make_adam(cfg));
  nlohmann::json curve = nlohmann::json::array();
  int64_t d_updates = 0, f_updates = 0;
  double last_d = 0.0;
  auto bind_all = [&](ad::Bindings& b) {
    G.bind(b);
    D.bind(b);
    for (const auto& f : m.modules) f.network().bind(b);
  };
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (int k = 0; k < cfg.d_steps_per_g_step; ++k) {
      ad::Bindings b;
      bind_all(b);
      b["z"] = sample_latent(G, z_rng, n);
      const bool use_y0 = cfg.d_sees_y0 && (d_updates % 2 == 1);
      const ad::NodeId target = use_y0 ? base.output : corrected.output;
      auto ev = ad::forward(fg, b, {target});
      last_d = dstep.run(D, data(data_rng, n), ev.value(target), gp_rng, d_opt);
      check_finite(last_d, "d_loss", it);
      ++d_updates;
    }
    ad::Bindings b;
    bind_all(b);
    b["z"] = sample_latent(G, z_rng, n);
    auto ev = ad::forward(fg, b, {f_loss});
    const double fl = ev.value(f_loss).item();
    check_finite(fl, "feedback_loss", it);
    auto grads = ad::backward(ev, f_loss);
    for (std::size_t i = 0; i < m.modules.size(); ++i) {
      auto& net = m.modules[i].network();
      std::map<std::string, Tensor> mine;
      for (const auto& [k, _] : net.params()) mine.emplace(k, grads.get(k));
      ad::adam_step(net.params(), mine, f_opt[i]);
      net.update_running_stats(ev, module_built[i]);
    }
    ++f_updates;
    for (const auto& [k, t] : G.params()) {
      if (!t.bit_equal(frozen_g.at(k))) throw Error("generator parameter '" + k + "' changed during phase 2");
    }
    if (it % cfg.log_every == 0 || it == cfg.iterations) {
      curve.push_back(curve_entry(it, last_d, fl));
      if (progress) progress({2, it, last_d, fl});
    }
  }
  if (d_updates != static_cast<int64_t>(cfg.d_steps_per_g_step) * f_updates) {
    throw Error("alternation bookkeeping broken");
  }

  Checkpoint c;
  c.phase = 2;
  c.model = std::move(m);
  c.taps = phase1.taps;
  quantize(c.model);
  c.model.set_mode(nets::Mode::kEval);
  c.meta = {{"config", cfg.to_json()},
            {"d_updates", d_updates},
            {"f_updates", f_updates},
            {"loss_curve", curve},
            {"phase1", phase1.meta},
            {"rng", {{"seed", cfg.seed},
                     {"data", data_rng.counter()},
                     {"latent", z_rng.counter()},
                     {"gp", gp_rng.counter()}}}};
  return c;
}

}  // namespace afl::training
