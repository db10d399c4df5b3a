#include "afl/feedback/feedback.hpp"

#include <algorithm>
#include <utility>

#include "afl/error.hpp"
#include "afl/rng.hpp"

namespace afl::feedback {

namespace {

Shape batched(int64_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

void expect_sample_shape(const Tensor& t, const Shape& sample, const std::string& what) {
  if (t.rank() < 1 || Shape(t.shape().begin() + 1, t.shape().end()) != sample) {
    throw ShapeError(what + " has shape " + shape_str(t.shape()) + ", expected [n]" + shape_str(sample));
  }
}

// Repeats a single row n times.
Tensor tile_rows(const Tensor& row, int64_t n) {
  Tensor out(batched(n, Shape(row.shape().begin() + 1, row.shape().end())));
  const auto len = static_cast<std::size_t>(row.size());
  for (int64_t i = 0; i < n; ++i) std::copy(row.ptr(), row.ptr() + len, out.ptr() + i * len);
  return out;
}

nets::BuildOptions eval_frozen() {
  nets::BuildOptions o;
  o.trainable = false;
  o.mode = nets::Mode::kEval;
  return o;
}

GeneratorPass generator_pass(const AflModel& model, const Tensor& x, const CorrectionSet& scaled) {
  ad::Graph g;
  ad::Bindings b;
  auto opt = eval_frozen();
  ad::NodeId xn = g.input("x");
  b["x"] = x;
  for (const auto& [name, c] : scaled) {
    const auto& f = model.module(name);
    opt.inject[f.binding().gen] = g.input("c:" + name);
    b["c:" + name] = c;
  }
  auto built = model.g.build(g, xn, opt);
  model.g.bind(b);
  std::vector<ad::NodeId> targets{built.output};
  for (const auto& [_, id] : built.taps) targets.push_back(id);
  auto ev = ad::forward(g, b, targets);
  GeneratorPass p;
  p.y = ev.value(built.output);
  for (const auto& [tap, id] : built.taps) p.gen_taps[tap] = ev.value(id);
  return p;
}

bool any_active(const AflModel& model, const LoopConfig& cfg) {
  return std::any_of(model.modules.begin(), model.modules.end(),
                     [&](const FeedbackModule& f) { return cfg.alpha(f.name()) > 0.0; });
}

}  // namespace

std::string_view variant_name(Variant v) { return v == Variant::kSingle ? "single" : "dual"; }

Variant parse_variant(std::string_view name) {
  if (name == "single") return Variant::kSingle;
  if (name == "dual") return Variant::kDual;
  throw ConfigError("unknown feedback variant '" + std::string(name) + "'");
}

FeedbackModule::FeedbackModule(Variant variant, nets::TapPair binding, Shape tap_shape)
    : variant_(variant), binding_(std::move(binding)), tap_shape_(std::move(tap_shape)) {
  if (tap_shape_.size() != 1 && tap_shape_.size() != 3) {
    throw ShapeError("feedback taps must be vectors or [c, h, w] maps, got " + shape_str(tap_shape_));
  }
  const int64_t c = tap_shape_[0];
  const int64_t in = variant_ == Variant::kDual ? 2 * c : c;
  std::vector<nets::LayerSpec> layers;
  if (variant_ == Variant::kDual) layers.push_back(nets::concat_channels("cat", c));
  if (tap_shape_.size() == 1) {
    layers.push_back(nets::dense("l1", in, c, false));
    layers.push_back(nets::batch_norm("bn1", c));
    layers.push_back(nets::relu("act1"));
    layers.push_back(nets::dense("l2", c, c, false));
    layers.push_back(nets::batch_norm("bn2", c));
  } else {
    layers.push_back(nets::conv2d("l1", in, c, 3, 1, 1, false));
    layers.push_back(nets::batch_norm("bn1", c));
    layers.push_back(nets::relu("act1"));
    layers.push_back(nets::conv2d("l2", c, c, 3, 1, 1, false));
    layers.push_back(nets::batch_norm("bn2", c));
  }
  net_ = nets::Network("f_" + binding_.gen, tap_shape_, std::move(layers));
  if (net_.output_shape() != tap_shape_) throw ShapeError("feedback output does not match its tap");
}

ad::NodeId FeedbackModule::build(ad::Graph& graph, ad::NodeId theta, std::optional<ad::NodeId> phi,
                                 const nets::BuildOptions& options) const {
  return build_full(graph, theta, phi, options).output;
}

nets::Built FeedbackModule::build_full(ad::Graph& graph, ad::NodeId theta, std::optional<ad::NodeId> phi,
                                       const nets::BuildOptions& options) const {
  nets::BuildOptions o = options;
  if (variant_ == Variant::kDual) {
    if (!phi) throw Error("dual feedback module '" + name() + "' needs the generator tap");
    o.extra["cat"] = *phi;
  }
  return net_.build(graph, theta, o);
}

nlohmann::json FeedbackModule::descriptor() const {
  return {{"variant", variant_name(variant_)},
          {"gen_tap", binding_.gen},
          {"disc_tap", binding_.disc},
          {"tap_shape", tap_shape_},
          {"network", net_.descriptor()}};
}

FeedbackModule FeedbackModule::from_descriptor(const nlohmann::json& j) {
  try {
    FeedbackModule f(parse_variant(j.at("variant").get<std::string>()),
                     {j.at("gen_tap").get<std::string>(), j.at("disc_tap").get<std::string>()},
                     j.at("tap_shape").get<Shape>());
    if (f.net_.descriptor() != j.at("network")) throw ConfigError("feedback module descriptor is inconsistent");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed feedback descriptor: ") + e.what());
  }
}

Tensor feedback_forward(const FeedbackModule& f, const Tensor& theta, const std::optional<Tensor>& phi) {
  expect_sample_shape(theta, f.tap_shape(), "discriminator tap for '" + f.name() + "'");
  if (f.variant() == Variant::kDual) {
    if (!phi) throw Error("dual feedback module '" + f.name() + "' needs the generator tap");
    expect_sample_shape(*phi, f.tap_shape(), "generator tap for '" + f.name() + "'");
    if (phi->dim(0) != theta.dim(0)) throw ShapeError("tap batch sizes differ for '" + f.name() + "'");
  }
  ad::Graph g;
  ad::Bindings b;
  auto th = g.input("theta");
  b["theta"] = theta;
  std::optional<ad::NodeId> ph;
  if (f.variant() == Variant::kDual) {
    ph = g.input("phi");
    b["phi"] = *phi;
  }
  nets::BuildOptions o;
  o.trainable = false;
  auto out = f.build(g, th, ph, o);
  f.network().bind(b);
  return ad::forward(g, b, {out}).value(out);
}

double LoopConfig::alpha(const std::string& module) const {
  auto it = alpha_overrides.find(module);
  const double a = it != alpha_overrides.end() ? it->second : alpha_global;
  if (!(a == a)) throw ConfigError("alpha for '" + module + "' is NaN");
  return std::clamp(a, 0.0, 1.0);
}

const FeedbackModule& AflModel::module(const std::string& name) const {
  for (const auto& f : modules)
    if (f.name() == name) return f;
  throw NotFoundError("no feedback module '" + name + "'");
}

FeedbackModule& AflModel::module(const std::string& name) {
  return const_cast<FeedbackModule&>(std::as_const(*this).module(name));
}

std::vector<std::string> AflModel::module_names() const {
  std::vector<std::string> out;
  for (const auto& f : modules) out.push_back(f.name());
  return out;
}

void AflModel::check_bindings() const {
  for (const auto& f : modules) {
    if (g.tap_shape(f.binding().gen) != f.tap_shape() || d.tap_shape(f.binding().disc) != f.tap_shape()) {
      throw ShapeError("feedback module '" + f.name() + "' does not match the taps it is bound to");
    }
  }
}

void AflModel::set_mode(nets::Mode mode) {
  g.set_mode(mode);
  d.set_mode(mode);
  for (auto& f : modules) f.network().set_mode(mode);
}

AflModel make_model(nets::GanPair pair, Variant variant, uint64_t seed) {
  AflModel m{std::move(pair.g), std::move(pair.d), {}};
  for (const auto& t : pair.taps) {
    FeedbackModule f(variant, t, m.g.tap_shape(t.gen));
    f.init(mix64(seed ^ stream_id(f.name())));
    m.modules.push_back(std::move(f));
  }
  m.check_bindings();
  return m;
}

GeneratorPass inject(const AflModel& model, const CorrectionSet& corr, const LoopConfig& cfg, const Tensor& x) {
  CorrectionSet scaled;
  for (const auto& f : model.modules) {
    const double a = cfg.alpha(f.name());
    if (a == 0.0) continue;
    auto it = corr.find(f.name());
    if (it == corr.end()) throw Error("no correction for active feedback module '" + f.name() + "'");
    expect_sample_shape(it->second, f.tap_shape(), "correction for '" + f.name() + "'");
    if (it->second.dim(0) != x.dim(0)) throw ShapeError("correction batch differs from input batch");
    Tensor c = it->second;
    for (double& e : c.values()) e *= a;
    scaled.emplace(f.name(), std::move(c));
  }
  return generator_pass(model, x, scaled);
}

TapValues disc_taps(const AflModel& model, const Tensor& y) {
  expect_sample_shape(y, model.d.sample_shape(), "discriminator input");
  ad::Graph g;
  ad::Bindings b;
  auto yn = g.input("y");
  b["y"] = y;
  auto opt = eval_frozen();
  // nothing past the deepest tap is needed
  std::string last;
  for (const auto& l : model.d.layers())
    if (l.tap) last = l.name;
  opt.stop_after = last;
  auto built = model.d.build(g, yn, opt);
  model.d.bind(b);
  std::vector<ad::NodeId> targets;
  for (const auto& [_, id] : built.taps) targets.push_back(id);
  auto ev = ad::forward(g, b, targets);
  TapValues out;
  for (const auto& [tap, id] : built.taps) out[tap] = ev.value(id);
  return out;
}

CorrectionSet corrections(const AflModel& model, const TapValues& disc, const TapValues& gen, const LoopConfig& cfg) {
  ad::Graph g;
  ad::Bindings b;
  std::vector<std::pair<std::string, ad::NodeId>> outs;
  for (const auto& f : model.modules) {
    if (cfg.alpha(f.name()) == 0.0) continue;
    auto th = disc.find(f.binding().disc);
    if (th == disc.end()) throw Error("missing discriminator tap '" + f.binding().disc + "'");
    expect_sample_shape(th->second, f.tap_shape(), "discriminator tap '" + f.binding().disc + "'");
    const std::string tn = "theta:" + f.name();
    auto theta = g.input(tn);
    b[tn] = th->second;
    std::optional<ad::NodeId> phi;
    if (f.variant() == Variant::kDual) {
      auto ph = gen.find(f.binding().gen);
      if (ph == gen.end()) throw Error("missing generator tap '" + f.binding().gen + "'");
      expect_sample_shape(ph->second, f.tap_shape(), "generator tap '" + f.binding().gen + "'");
      if (ph->second.dim(0) != th->second.dim(0)) throw ShapeError("tap batch sizes differ for '" + f.name() + "'");
      const std::string pn = "phi:" + f.name();
      phi = g.input(pn);
      b[pn] = ph->second;
    }
    outs.emplace_back(f.name(), f.build(g, theta, phi, eval_frozen()));
    f.network().bind(b);
  }
  CorrectionSet out;
  if (outs.empty()) return out;
  std::vector<ad::NodeId> targets;
  for (const auto& [_, id] : outs) targets.push_back(id);
  auto ev = ad::forward(g, b, targets);
  for (const auto& [name, id] : outs) {
    const Tensor& c = ev.value(id);
    expect_sample_shape(c, model.module(name).tap_shape(), "correction of '" + name + "'");
    out[name] = c;
  }
  return out;
}

Trace afl_generate(const AflModel& model, const Tensor& x, const LoopConfig& cfg) {
  if (cfg.iterations < 0) throw ConfigError("iterations must be non-negative");
  expect_sample_shape(x, model.g.sample_shape(), "generator input");
  Trace tr;
  GeneratorPass pass = generator_pass(model, x, {});
  tr.outputs.push_back(pass.y);
  const bool active = any_active(model, cfg);
  for (int t = 0; t < cfg.iterations; ++t) {
    CorrectionSet c;
    if (active) c = corrections(model, disc_taps(model, pass.y), pass.gen_taps, cfg);
    pass = inject(model, c, cfg, x);
    tr.outputs.push_back(pass.y);
    tr.corrections.push_back(std::move(c));
  }
  return tr;
}

Trace feedback_switch_generate(const AflModel& model, const Tensor& x, const Tensor& reference,
                               const LoopConfig& cfg) {
  if (cfg.iterations < 0) throw ConfigError("iterations must be non-negative");
  expect_sample_shape(x, model.g.sample_shape(), "generator input");
  expect_sample_shape(reference, model.d.sample_shape(), "reference");
  const int64_t n = x.dim(0);
  if (reference.dim(0) != n && reference.dim(0) != 1) {
    throw ShapeError("reference needs one row or one row per sample, got " + std::to_string(reference.dim(0)));
  }
  Trace tr;
  GeneratorPass pass = generator_pass(model, x, {});
  tr.outputs.push_back(pass.y);
  if (cfg.iterations == 0) return tr;
  const bool active = any_active(model, cfg);
  TapValues theta;
  if (active) theta = disc_taps(model, reference.dim(0) == n ? reference : tile_rows(reference, n));
  for (int t = 0; t < cfg.iterations; ++t) {
    CorrectionSet c;
    if (active) c = corrections(model, theta, pass.gen_taps, cfg);
    pass = inject(model, c, cfg, x);
    tr.outputs.push_back(pass.y);
    tr.corrections.push_back(std::move(c));
  }
  return tr;
}

LoopConfig ablate(const AflModel& model, const std::optional<std::string>& keep, const LoopConfig& base) {
  if (keep) model.module(*keep);
  LoopConfig cfg = base;
  cfg.alpha_overrides.clear();
  for (const auto& f : model.modules) {
    cfg.alpha_overrides[f.name()] = keep && *keep == f.name() ? base.alpha_global : 0.0;
  }
  return cfg;
}

}  // namespace afl::feedback
