#include "afl/nets/architectures.hpp"

#include "afl/error.hpp"

namespace afl::nets {

GanPair build_toy_pair(int64_t width) {
  if (width < 1) throw ConfigError("toy width must be positive");
  std::vector<LayerSpec> g{
      dense("fc1", 2, width), relu("act1"),
      dense("fc2", width, width), relu("act2"),
      dense("fc3", width, width), relu("act3", true),
      dense("fc4", width, 2),
  };
  std::vector<LayerSpec> d{
      dense("fc1", 2, width), relu("act1", true),
      dense("fc2", width, width), relu("act2"),
      dense("fc3", width, width), relu("act3"),
      dense("fc4", width, 1),
  };
  GanPair p{Network("G", {2}, std::move(g)), Network("D", {2}, std::move(d)), {{"act3", "act1"}}};
  check_mirror(p);
  return p;
}

GanPair build_dcgan_pair(const DcganOptions& o) {
  if (o.image_size != 16 && o.image_size != 32) throw ConfigError("image_size must be 16 or 32");
  if (o.n_taps != 1 && o.n_taps != 4) throw ConfigError("n_taps must be 1 or 4");
  if (o.base_channels < 1 || o.base_channels > 256) throw ConfigError("base_channels must be in [1, 256]");
  if (o.latent < 1) throw ConfigError("latent size must be positive");
  const int64_t b = o.base_channels;
  const int64_t r0 = o.image_size / 8;
  const bool all = o.n_taps == 4;

  // G level i (0..3) has resolution r0 * 2^i and 8b / 2^i channels.
  std::vector<LayerSpec> g{
      dense("proj", o.latent, 8 * b * r0 * r0, false),
      reshape("grid", {8 * b, r0, r0}),
      batch_norm("bn0", 8 * b),
      relu("act0", all),
  };
  for (int i = 1; i <= 3; ++i) {
    const int64_t cin = 8 * b >> (i - 1), cout = 8 * b >> i;
    const auto s = std::to_string(i);
    g.push_back(conv2d_transpose("up" + s, cin, cout, 4, 2, 1, false));
    g.push_back(batch_norm("bn" + s, cout));
    g.push_back(relu("act" + s, all || i == 1));
  }
  g.push_back(conv2d("to_rgb", b, 3, 3, 1, 1));
  g.push_back(tanh_layer("out"));

  // D level i (0..3) has resolution image_size / 2^i and b * 2^i channels.
  std::vector<LayerSpec> d{
      conv2d("from_rgb", 3, b, 3, 1, 1),
      leaky_relu("act0", 0.2, all),
  };
  for (int i = 1; i <= 3; ++i) {
    const int64_t cin = b << (i - 1), cout = b << i;
    const auto s = std::to_string(i);
    d.push_back(conv2d("down" + s, cin, cout, 4, 2, 1, o.spectral_norm));
    if (!o.spectral_norm) d.push_back(batch_norm("bn" + s, cout));
    d.push_back(leaky_relu("act" + s, 0.2, all || i == 2));
  }
  d.push_back(reshape("flat", {8 * b * r0 * r0}));
  d.push_back(dense("score", 8 * b * r0 * r0, 1));

  GanPair p{Network("G", {o.latent}, std::move(g)), Network("D", {3, o.image_size, o.image_size}, std::move(d)), {}};
  if (all) {
    for (int i = 0; i <= 3; ++i) p.taps.push_back({"act" + std::to_string(i), "act" + std::to_string(3 - i)});
  } else {
    p.taps.push_back({"act1", "act2"});
  }
  if (o.spectral_norm) p.d.enable_spectral_norm(0);
  check_mirror(p);
  return p;
}

void check_mirror(const GanPair& p) {
  for (const auto& t : p.taps) {
    const auto& gs = p.g.tap_shape(t.gen);
    const auto& ds = p.d.tap_shape(t.disc);
    if (gs != ds) {
      throw ShapeError("tap pair " + t.gen + "/" + t.disc + " has mismatched shapes " + shape_str(gs) + " and " +
                       shape_str(ds));
    }
  }
}

}  // namespace afl::nets
