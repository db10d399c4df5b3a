#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "afl/nets/architectures.hpp"
#include "afl/nets/network.hpp"
#include "afl/tensor.hpp"

namespace afl::feedback {

enum class Variant { kSingle, kDual };
std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

inline constexpr double kDefaultAlpha = 0.2;

// Learned corrector reading a discriminator tap (and, for the dual variant,
// the matching generator tap) and producing an additive correction for the
// generator tap. Inner blocks are dense-BN-relu-dense-BN on vector taps and
// conv3x3-BN-relu-conv3x3-BN on image taps, as wide as the tap.
class FeedbackModule {
 public:
  FeedbackModule() = default;
  FeedbackModule(Variant variant, nets::TapPair binding, Shape tap_shape);

  // "f_<generator tap>"
  const std::string& name() const { return net_.name(); }
  Variant variant() const { return variant_; }
  const nets::TapPair& binding() const { return binding_; }
  const Shape& tap_shape() const { return tap_shape_; }

  nets::Network& network() { return net_; }
  const nets::Network& network() const { return net_; }
  void init(uint64_t seed) { net_.init(seed); }

  // Appends the module to a graph. `phi` is required for the dual variant.
  ad::NodeId build(ad::Graph& graph, ad::NodeId theta, std::optional<ad::NodeId> phi,
                   const nets::BuildOptions& options = {}) const;
  // Same, keeping the batch-norm nodes for running-stat updates.
  nets::Built build_full(ad::Graph& graph, ad::NodeId theta, std::optional<ad::NodeId> phi,
                         const nets::BuildOptions& options = {}) const;

  nlohmann::json descriptor() const;
  static FeedbackModule from_descriptor(const nlohmann::json& j);

 private:
  Variant variant_ = Variant::kSingle;
  nets::TapPair binding_;
  Shape tap_shape_;
  nets::Network net_;
};

// Runs one module on explicit taps (in the module's current mode).
Tensor feedback_forward(const FeedbackModule& f, const Tensor& theta, const std::optional<Tensor>& phi = std::nullopt);

// Test-time contract: iteration count, global gain and per-module overrides.
struct LoopConfig {
  int iterations = 1;
  double alpha_global = kDefaultAlpha;
  std::map<std::string, double> alpha_overrides;

  // Override if present, else the global gain, clamped to [0, 1].
  double alpha(const std::string& module) const;
};

// Correction tensors keyed by module name.
using CorrectionSet = std::map<std::string, Tensor>;
using TapValues = std::map<std::string, Tensor>;

// Generator, discriminator and the feedback modules bound to their taps.
struct AflModel {
  nets::Network g;
  nets::Network d;
  std::vector<FeedbackModule> modules;

  const FeedbackModule& module(const std::string& name) const;
  FeedbackModule& module(const std::string& name);
  std::vector<std::string> module_names() const;
  // Throws ShapeError if a module's binding does not match G/D tap shapes.
  void check_bindings() const;
  void set_mode(nets::Mode mode);
};

// One module per tap pair of `pair`, initialized from `seed`.
AflModel make_model(nets::GanPair pair, Variant variant, uint64_t seed);

struct GeneratorPass {
  Tensor y;
  TapValues gen_taps;  // pre-injection activations
};

// G(x) with alpha-scaled corrections added at the bound generator taps.
// Modules with alpha 0 are skipped; every other module must have a
// correction of the tap's shape. All networks run in eval mode.
GeneratorPass inject(const AflModel& model, const CorrectionSet& corrections, const LoopConfig& cfg,
                     const Tensor& x);

// Discriminator taps of a batch (eval mode).
TapValues disc_taps(const AflModel& model, const Tensor& y);

// Corrections of all modules with nonzero alpha, from explicit taps.
CorrectionSet corrections(const AflModel& model, const TapValues& disc, const TapValues& gen, const LoopConfig& cfg);

struct Trace {
  std::vector<Tensor> outputs;  // y_0 .. y_T
  std::vector<CorrectionSet> corrections;  // applied to produce y_1 .. y_T
  const Tensor& final() const { return outputs.back(); }
};

// y_0 = G(x); y_{t+1} = G(x, alpha * E(y_t)) for t < T. The dual variant
// pairs D's taps on y_t with G's taps from the pass that produced y_t.
Trace afl_generate(const AflModel& model, const Tensor& x, const LoopConfig& cfg);

// Corrections come from D's response to `reference` (one row, or one row per
// sample of x) instead of to the generator's own output.
Trace feedback_switch_generate(const AflModel& model, const Tensor& x, const Tensor& reference,
                               const LoopConfig& cfg);

// Overrides disabling every module except `keep` (all of them when empty).
LoopConfig ablate(const AflModel& model, const std::optional<std::string>& keep, const LoopConfig& base = {});

}  // namespace afl::feedback
