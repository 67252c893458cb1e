#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/autodiff.hpp"
#include "umc/nn.hpp"
#include "umc/rng.hpp"
#include "umc/tensor.hpp"

namespace umc {

struct GeneratorConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 64;   // desk configs use 16
  std::size_t n_downsamples = 2;
  std::size_t n_resblocks = 6;      // desk configs use 3
  // norm: instance normalization; padding: reflection (fixed)
  bool decoder_norm = false;        // norms in the upsampling path cancel the
                                    // FiLM-conditioned channel shifts
  bool global_skip = false;         // learn output as input + residual
  bool coord_feature = true;        // frequency-coordinate plane at the bottleneck
  double input_mean = -8.0;         // log-mel standardization before the network
  double input_std = 2.5;

  std::size_t bottleneck_channels() const { return base_channels << n_downsamples; }
  std::size_t spatial_divisor() const { return std::size_t{1} << n_downsamples; }

  void validate() const {
    if (n_resblocks < 1) throw std::invalid_argument("generator: n_resblocks must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("generator: base_channels must be >= 1");
  }
};

struct FiLMEncoderConfig {
  std::size_t input_bands = 128;
  std::vector<std::size_t> conv_channels = {32, 64, 64};  // three blocks
  std::size_t kernel = 5;
  std::size_t stride = 2;
  std::size_t mlp_hidden = 256;
  std::size_t out_channels = 0;  // set to the first residual block's width

  void validate() const {
    if (conv_channels.size() != 3) throw std::invalid_argument("film encoder: three conv blocks expected");
    if (out_channels == 0) throw std::invalid_argument("film encoder: out_channels unset");
  }
};

struct DiscriminatorConfig {
  std::size_t n_layers = 4;         // PatchGAN-style receptive field
  std::size_t base_channels = 64;   // desk configs use 32
  bool coord_feature = true;
  double input_mean = -8.0;
  double input_std = 2.5;
};

template <typename T>
struct FiLMParams {
  ad::Var<T> gamma;  // (B, C)
  ad::Var<T> beta;   // (B, C)
};

namespace detail {

// Fixed frequency-coordinate plane: linear ramp over the H axis, constant in W.
template <typename T>
inline Tensor<T> coord_plane(std::size_t B, std::size_t H, std::size_t W) {
  Tensor<T> t({B, 1, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i) {
      const T v = H > 1 ? T(-1) + T(2) * static_cast<T>(i) / static_cast<T>(H - 1) : T(0);
      for (std::size_t j = 0; j < W; ++j) t(b, 0, i, j) = v;
    }
  return t;
}

}  // namespace detail

// FR-difference -> per-channel (gamma, beta), three conv blocks + MLP.
// The final layer is zero-initialized and gamma is parameterized as 1 + delta,
// so a fresh encoder modulates with exactly (1, 0) for any input.
template <typename T>
class FiLMEncoder {
 public:
  FiLMEncoder() = default;
  FiLMEncoder(nn::ParamStore<T>& ps, const std::string& prefix, const FiLMEncoderConfig& cfg,
              Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    std::size_t c = 1, len = cfg.input_bands;
    for (std::size_t i = 0; i < 3; ++i) {
      convs_[i] = nn::Conv1d<T>(ps, prefix + ".conv" + std::to_string(i), c, cfg.conv_channels[i],
                                cfg.kernel, cfg.stride, cfg.kernel / 2, rng);
      norms_[i] = nn::InstanceNorm<T>(ps, prefix + ".in" + std::to_string(i), cfg.conv_channels[i]);
      c = cfg.conv_channels[i];
      len = (len + 2 * (cfg.kernel / 2) - cfg.kernel) / cfg.stride + 1;
    }
    flat_len_ = c * len;
    fc1_ = nn::Linear<T>(ps, prefix + ".fc1", flat_len_, cfg.mlp_hidden, rng);
    fc2_ = nn::Linear<T>(ps, prefix + ".fc2", cfg.mlp_hidden, 2 * cfg.out_channels, rng,
                         /*zero_init=*/true);
  }

  FiLMParams<T> operator()(const ad::Var<T>& d) const {
    const auto& s = d->value.shape();
    if (s.size() != 2 || s[1] != cfg_.input_bands)
      throw std::invalid_argument("film_encode: expected (batch, " +
                                  std::to_string(cfg_.input_bands) + ") input, got " +
                                  d->value.shape_str());
    auto h = ad::reshape(d, {s[0], std::size_t{1}, s[1]});
    for (std::size_t i = 0; i < 3; ++i) h = ad::relu(norms_[i](convs_[i](h)));
    h = ad::reshape(h, {s[0], flat_len_});
    h = ad::relu(fc1_(h));
    auto gb = fc2_(h);
    auto [delta, beta] = ad::split_half(gb);
    return {ad::add_const(delta, T(1)), beta};
  }

  const FiLMEncoderConfig& config() const { return cfg_; }

 private:
  FiLMEncoderConfig cfg_;
  nn::Conv1d<T> convs_[3];
  nn::InstanceNorm<T> norms_[3];
  nn::Linear<T> fc1_, fc2_;
  std::size_t flat_len_ = 0;
};

// Channel-wise affine modulation; the spec's film_modulate.
template <typename T>
inline ad::Var<T> film_modulate(const ad::Var<T>& h, const FiLMParams<T>& p) {
  return ad::film(h, p.gamma, p.beta);
}

// Unified conversion generator: reflection-padded conv head, strided encoder,
// residual bottleneck with FiLM in the first block, transposed-conv decoder.
template <typename T>
class Generator {
 public:
  using TapMap = std::map<std::string, Tensor<T>>;

  Generator() = default;
  Generator(const GeneratorConfig& cfg, const FiLMEncoderConfig& film_cfg, std::uint64_t seed)
      : cfg_(cfg), film_cfg_(film_cfg) {
    cfg_.validate();
    film_cfg_.out_channels = cfg_.bottleneck_channels();
    Rng rng(Rng::splitmix64(seed ^ 0x47454eULL));

    const std::size_t base = cfg_.base_channels;
    head_ = nn::Conv2d<T>(params, "head", cfg_.in_channels, base, 7, 1, 0, rng);
    head_norm_ = nn::InstanceNorm<T>(params, "head_in", base);

    std::size_t c = base;
    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) {
      down_.emplace_back(params, "down" + std::to_string(i), c, c * 2, 3, 2, 1, rng);
      down_norm_.emplace_back(params, "down" + std::to_string(i) + "_in", c * 2);
      c *= 2;
    }

    for (std::size_t i = 0; i < cfg_.n_resblocks; ++i) {
      const std::string p = "res" + std::to_string(i);
      const std::size_t extra = (i == 0 && cfg_.coord_feature) ? 1 : 0;
      res_conv1_.emplace_back(params, p + ".c1", c + extra, c, 3, 1, 0, rng);
      res_norm1_.emplace_back(params, p + ".in1", c);
      res_conv2_.emplace_back(params, p + ".c2", c, c, 3, 1, 0, rng);
      res_norm2_.emplace_back(params, p + ".in2", c);
    }

    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) {
      up_.emplace_back(params, "up" + std::to_string(i), c, c / 2, 3, 2, 1, 1, rng);
      if (cfg_.decoder_norm) up_norm_.emplace_back(params, "up" + std::to_string(i) + "_in", c / 2);
      c /= 2;
    }

    tail_ = nn::Conv2d<T>(params, "tail", base, cfg_.in_channels, 7, 1, 0, rng, /*init_std=*/0.02);
    film_ = FiLMEncoder<T>(params, "film", film_cfg_, rng);
  }

  FiLMParams<T> film_encode(const ad::Var<T>& d) const { return film_(d); }

  // x: (B, 1, F, Tm) log-mel batch; d: (B, input_bands) FR differences.
  ad::Var<T> forward(const ad::Var<T>& x, const ad::Var<T>& d, TapMap* taps = nullptr) const {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels)
      throw std::invalid_argument("generator: expected (B, " + std::to_string(cfg_.in_channels) +
                                  ", F, T) input, got " + x->value.shape_str());
    if (d->value.dim(0) != s[0])
      throw std::invalid_argument("generator: batch mismatch between x and d");

    const std::size_t F0 = s[2], T0 = s[3], div = cfg_.spatial_divisor();
    const std::size_t Fp = (F0 + div - 1) / div * div, Tp = (T0 + div - 1) / div * div;

    auto record = [&](const char* tag, const ad::Var<T>& v) {
      if (taps) (*taps)[tag] = v->value;
    };

    FiLMParams<T> fp = film_(d);

    const T mu = static_cast<T>(cfg_.input_mean), sd = static_cast<T>(cfg_.input_std);
    auto h = ad::scale(ad::add_const(x, -mu), T(1) / sd);
    auto xn = h;
    if (Fp != F0 || Tp != T0) h = ad::reflect_pad_to(h, Fp, Tp);
    auto padded_input = h;

    h = ad::relu(head_norm_(head_(ad::reflect_pad2d(h, 3))));
    record("enc.head", h);
    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) {
      h = ad::relu(down_norm_[i](down_[i](h)));
      record(("enc.down" + std::to_string(i + 1)).c_str(), h);
    }

    for (std::size_t i = 0; i < cfg_.n_resblocks; ++i) {
      auto inp = h;
      auto r = h;
      if (i == 0 && cfg_.coord_feature) {
        const auto& hs = r->value.shape();
        r = ad::concat_channels(r, ad::constant(detail::coord_plane<T>(hs[0], hs[2], hs[3])));
      }
      r = res_norm1_[i](res_conv1_[i](ad::reflect_pad2d(r, 1)));
      if (i == 0) {
        record("res1.pre_film", r);
        r = film_modulate(r, fp);
        record("res1.post_film", r);
      }
      r = ad::relu(r);
      r = res_norm2_[i](res_conv2_[i](ad::reflect_pad2d(r, 1)));
      h = ad::add(inp, r);
      record(("res" + std::to_string(i + 1) + ".out").c_str(), h);
    }

    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) {
      h = up_[i](h);
      if (cfg_.decoder_norm) h = up_norm_[i](h);
      h = ad::relu(h);
      record(("dec.up" + std::to_string(i + 1)).c_str(), h);
    }

    h = tail_(ad::reflect_pad2d(h, 3));
    if (cfg_.global_skip) h = ad::add(h, padded_input);
    if (Fp != F0 || Tp != T0) h = ad::crop2d(h, F0, T0);
    auto out = ad::add_const(ad::scale(h, sd), mu);
    record("out", out);
    return out;
  }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> v{"enc.head"};
    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) v.push_back("enc.down" + std::to_string(i + 1));
    v.push_back("res1.pre_film");
    v.push_back("res1.post_film");
    for (std::size_t i = 0; i < cfg_.n_resblocks; ++i) v.push_back("res" + std::to_string(i + 1) + ".out");
    for (std::size_t i = 0; i < cfg_.n_downsamples; ++i) v.push_back("dec.up" + std::to_string(i + 1));
    v.push_back("out");
    return v;
  }

  const GeneratorConfig& config() const { return cfg_; }
  const FiLMEncoderConfig& film_config() const { return film_cfg_; }

  nn::ParamStore<T> params;

 private:
  GeneratorConfig cfg_;
  FiLMEncoderConfig film_cfg_;
  nn::Conv2d<T> head_, tail_;
  nn::InstanceNorm<T> head_norm_;
  std::vector<nn::Conv2d<T>> down_;
  std::vector<nn::InstanceNorm<T>> down_norm_;
  std::vector<nn::Conv2d<T>> res_conv1_, res_conv2_;
  std::vector<nn::InstanceNorm<T>> res_norm1_, res_norm2_;
  std::vector<nn::ConvTranspose2d<T>> up_;
  std::vector<nn::InstanceNorm<T>> up_norm_;
  FiLMEncoder<T> film_;
};

// PatchGAN discriminator; one instance per device, raw scores (LSGAN).
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(Rng::splitmix64(seed ^ 0x44495343ULL));
    std::size_t cin = 1 + (cfg.coord_feature ? 1 : 0);
    std::size_t c = cfg.base_channels;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const std::size_t stride = i + 1 < cfg.n_layers ? 2 : 1;
      convs_.emplace_back(params, "c" + std::to_string(i), cin, c, 4, stride, 1, rng);
      if (i > 0) norms_.emplace_back(params, "in" + std::to_string(i), c);
      cin = c;
      if (i + 2 < cfg.n_layers) c *= 2;
    }
    out_ = nn::Conv2d<T>(params, "out", cin, 1, 4, 1, 1, rng);
  }

  // x: (B, 1, F, Tm) -> patch score map
  ad::Var<T> forward(const ad::Var<T>& x) const {
    auto h = ad::scale(ad::add_const(x, static_cast<T>(-cfg_.input_mean)),
                       T(1) / static_cast<T>(cfg_.input_std));
    if (cfg_.coord_feature) {
      const auto& s = h->value.shape();
      h = ad::concat_channels(h, ad::constant(detail::coord_plane<T>(s[0], s[2], s[3])));
    }
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i](h);
      if (i > 0) h = norms_[i - 1](h);
      h = ad::leaky_relu(h, T(0.2));
    }
    return out_(h);
  }

  const DiscriminatorConfig& config() const { return cfg_; }

  nn::ParamStore<T> params;

 private:
  DiscriminatorConfig cfg_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::InstanceNorm<T>> norms_;
  nn::Conv2d<T> out_;
};

// Spec-level wrappers ------------------------------------------------------

// generator_forward on plain tensors (values only).
template <typename T>
inline Tensor<T> generator_forward(const Generator<T>& g, const Tensor<T>& x, const Tensor<T>& d) {
  auto out = g.forward(ad::constant(x), ad::constant(d));
  return out->value;
}

template <typename T>
inline Tensor<T> discriminator_forward(const std::vector<std::shared_ptr<Discriminator<T>>>& ds,
                                       std::size_t device_index, const Tensor<T>& x) {
  if (device_index >= ds.size())
    throw std::invalid_argument("discriminator_forward: device index " +
                                std::to_string(device_index) + " out of range (" +
                                std::to_string(ds.size()) + " devices)");
  return ds[device_index]->forward(ad::constant(x))->value;
}

}  // namespace umc
