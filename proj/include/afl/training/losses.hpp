#pragma once

#include <string_view>

#include "afl/ad/graph.hpp"
#include "afl/nets/network.hpp"

namespace afl::training {

enum class LossKind { kBce, kWganGp };
std::string_view loss_name(LossKind k);
LossKind parse_loss(std::string_view name);

struct LossNodes {
  ad::NodeId d_loss;
  ad::NodeId g_loss;
};

// bce:  d = mean(softplus(-real)) + mean(softplus(fake)), g = mean(softplus(-fake))
// wgan: d = mean(fake) - mean(real), g = -mean(fake); the penalty is separate.
LossNodes adversarial_losses(ad::Graph& graph, LossKind kind, ad::NodeId real_scores, ad::NodeId fake_scores);

struct LossValues {
  double d_loss = 0.0;
  double g_loss = 0.0;
};
LossValues adversarial_loss_values(LossKind kind, const Tensor& real_scores, const Tensor& fake_scores);

// lambda * mean((|grad_x D(x_hat)| - 1)^2) at x_hat = fake + eps * (real - fake),
// with one interpolation weight per sample in `eps` ([n]). D is built into the
// graph once more (instance "<D>@interp") with `options`. Throws
// UnsupportedError unless D is made of dense layers and activations only.
ad::NodeId gradient_penalty(ad::Graph& graph, const nets::Network& d, ad::NodeId real, ad::NodeId fake,
                            ad::NodeId eps, double lambda, nets::BuildOptions options = {});

// True when every layer of `net` supports double backprop.
bool double_differentiable(const nets::Network& net);

}  // namespace afl::training
