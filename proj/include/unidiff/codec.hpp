#pragma once

#include <algorithm>
#include <string>

#include "unidiff/losses.hpp"
#include "unidiff/optim.hpp"

namespace unidiff {

enum class CodecMode { identity, learned };

/// Image <-> latent mapping. Learned mode halves the spatial size.
template <class T>
struct Codec {
  CodecMode mode = CodecMode::identity;
  int image_channels = 3;
  int latent_channels = 3;
  int hidden = 16;
  ParamSet<T> params;

  static Codec identity(int channels = 3) { return {CodecMode::identity, channels, channels, 0, {}}; }

  static Codec learned(std::uint64_t seed, int image_channels = 3, int latent_channels = 4, int hidden = 16) {
    Codec c{CodecMode::learned, image_channels, latent_channels, hidden, {}};
    Rng rng = make_rng(seed, 0xc0dec);
    auto conv = [&](const std::string& n, int co, int ci) {
      Tensor<T> w = randn<T>(rng, {co, ci, 3, 3});
      const T s = static_cast<T>(1.0 / std::sqrt(9.0 * ci));
      for (auto& v : w.vec()) v *= s;
      c.params.add(n + ".w", std::move(w));
      c.params.add(n + ".b", Tensor<T>({co}));
    };
    conv("codec.enc.conv1", hidden, image_channels);
    conv("codec.enc.conv2", latent_channels, hidden);
    conv("codec.dec.conv1", hidden, latent_channels);
    conv("codec.dec.conv2", image_channels, hidden);
    return c;
  }
};

namespace graph {

template <class T>
Var<T> codec_encode(ParamBinder<T>& p, Var<T> x01) {
  Var<T> x = ops::add(ops::scale(x01, T(2)), p.tape().constant(Tensor<T>(x01.shape(), T(-1))));
  Var<T> h = ops::silu(conv(p, "codec.enc.conv1", x, 2));
  return conv(p, "codec.enc.conv2", h);
}

/// Decoder output before the final affine map and clamp (in [-1, 1] units).
template <class T>
Var<T> codec_decode_raw(ParamBinder<T>& p, Var<T> z) {
  Var<T> h = ops::silu(conv(p, "codec.dec.conv1", ops::upsample2(z)));
  return conv(p, "codec.dec.conv2", h);
}

}  // namespace graph

template <class T>
void check_image(const Tensor<T>& x, int channels) {
  if (x.rank() != 4 || x.dim(1) != channels)
    throw ShapeError("expected image batch (n, " + std::to_string(channels) + ", h, w), got " + shape_str(x.shape()));
}

/// Image batch (n, c, h, w) in [0, 1] -> latent batch.
template <class T>
Tensor<T> encode(const Codec<T>& codec, const Tensor<T>& x) {
  check_image(x, codec.image_channels);
  if (codec.mode == CodecMode::identity) {
    Tensor<T> z(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = 2 * x[i] - 1;
    return z;
  }
  Tape<T> tape(false);
  ParamBinder<T> p(codec.params, tape, false);
  return graph::codec_encode(p, tape.constant(x)).value();
}

/// Latent batch -> image batch clamped to [0, 1].
template <class T>
Tensor<T> decode(const Codec<T>& codec, const Tensor<T>& z) {
  if (z.rank() != 4 || z.dim(1) != codec.latent_channels)
    throw ShapeError("latent batch has shape " + shape_str(z.shape()));
  Tensor<T> y;
  if (codec.mode == CodecMode::identity) {
    y = z;
  } else {
    Tape<T> tape(false);
    ParamBinder<T> p(codec.params, tape, false);
    y = graph::codec_decode_raw(p, tape.constant(z)).value();
  }
  for (auto& v : y.vec()) v = std::clamp<T>((v + 1) / 2, T(0), T(1));
  return y;
}

template <class T>
LatentState<T> encode(const Codec<T>& codec, const Tensor<T>& x, int t) {
  return {encode(codec, x), t};
}

template <class T>
double reconstruction_mse(const Codec<T>& codec, const Tensor<T>& x) {
  Tensor<T> r = decode(codec, encode(codec, x));
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (static_cast<double>(r[i]) - x[i]) * (r[i] - x[i]);
  return s / static_cast<double>(x.size());
}

/// Fits a learned codec to images by mini-batch Adam on reconstruction MSE.
/// Returns the final training-batch loss.
template <class T>
double train_codec(Codec<T>& codec, const Tensor<T>& images, int steps, int batch, double lr, std::uint64_t seed) {
  if (codec.mode != CodecMode::learned) throw ConfigError("only a learned codec can be trained");
  check_image(images, codec.image_channels);
  Rng rng = make_rng(seed, 0xc0dec + 1);
  OptimState<T> st = OptimState<T>::for_params(codec.params);
  OptimConfig oc;
  oc.lr = lr;
  const int count = images.dim(0);
  std::vector<int> order(static_cast<std::size_t>(count));
  double last = 0;
  for (int step = 0; step < steps; ++step) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor<T>> items;
    for (int i = 0; i < std::min(batch, count); ++i) items.push_back(images.slice(order[i], order[i] + 1).reshaped(
        {images.dim(1), images.dim(2), images.dim(3)}));
    Tensor<T> xb = stack(std::span<const Tensor<T>>(items));
    Tensor<T> target(xb.shape());
    for (std::size_t i = 0; i < xb.size(); ++i) target[i] = 2 * xb[i] - 1;
    Tape<T> tape(true);
    ParamBinder<T> p(codec.params, tape, true);
    Var<T> loss = ops::mse_loss(graph::codec_decode_raw(p, graph::codec_encode(p, tape.constant(xb))), target);
    last = loss.value()[0] / xb.dim(0) / 4.0;  // in [0, 1] image units
    if (!std::isfinite(last)) throw DivergenceError("codec loss is not finite", step);
    tape.backward(loss);
    optimize_step(codec.params, p.gradients(), st, oc);
  }
  return last;
}

}  // namespace unidiff
