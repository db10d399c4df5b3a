#include "afl/training/losses.hpp"

#include "afl/error.hpp"

namespace afl::training {

std::string_view loss_name(LossKind k) { return k == LossKind::kBce ? "bce" : "wgan_gp"; }

LossKind parse_loss(std::string_view name) {
  if (name == "bce") return LossKind::kBce;
  if (name == "wgan_gp" || name == "wgan") return LossKind::kWganGp;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

LossNodes adversarial_losses(ad::Graph& g, LossKind kind, ad::NodeId real, ad::NodeId fake) {
  switch (kind) {
    case LossKind::kBce: {
      auto d = g.add(g.mean(g.softplus(g.scale(real, -1.0))), g.mean(g.softplus(fake)));
      auto gl = g.mean(g.softplus(g.scale(fake, -1.0)));
      return {d, gl};
    }
    case LossKind::kWganGp:
      return {g.sub(g.mean(fake), g.mean(real)), g.scale(g.mean(fake), -1.0)};
  }
  throw ConfigError("unknown loss kind");
}

LossValues adversarial_loss_values(LossKind kind, const Tensor& real, const Tensor& fake) {
  if (real.dim(0) != fake.dim(0)) throw ShapeError("score batches differ");
  ad::Graph g;
  auto r = g.input("real");
  auto f = g.input("fake");
  auto l = adversarial_losses(g, kind, r, f);
  auto ev = ad::forward(g, {{"real", real}, {"fake", fake}}, {l.d_loss, l.g_loss});
  return {ev.value(l.d_loss).item(), ev.value(l.g_loss).item()};
}

bool double_differentiable(const nets::Network& net) {
  for (const auto& l : net.layers()) {
    switch (l.kind) {
      case nets::LayerKind::kConv2d:
      case nets::LayerKind::kConv2dTranspose:
      case nets::LayerKind::kBatchNorm:
      case nets::LayerKind::kUpsampleNearest:
        return false;
      default:
        break;
    }
  }
  return true;
}

ad::NodeId gradient_penalty(ad::Graph& g, const nets::Network& d, ad::NodeId real, ad::NodeId fake, ad::NodeId eps,
                            double lambda, nets::BuildOptions options) {
  if (!double_differentiable(d)) {
    throw UnsupportedError("gradient penalty needs a dense-only critic; '" + d.name() +
                           "' has layers not supported for double backprop");
  }
  auto x_hat = g.add(fake, g.mul(g.expand_rows(eps, real), g.sub(real, fake)));
  options.instance = d.name() + "@interp";
  options.inject.clear();
  auto score = d.build(g, x_hat, options).output;
  auto grad = gradient_graph(g, score, x_hat);
  auto dev = g.affine(g.row_norm(grad), 1.0, -1.0);
  return g.scale(g.mean(g.square(dev)), lambda);
}

}  // namespace afl::training
