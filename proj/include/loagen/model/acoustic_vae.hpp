#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "loagen/audio/mel.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"

namespace loagen::model {

using ag::Var;

struct AcousticLatent {
  Tensor mean;          // (C_z, T_z, F_z)
  Tensor log_variance;  // same shape, clamped to [logvar_min, logvar_max]
  Tensor sample;        // mean + exp(0.5 * log_variance) * eps

  std::size_t channels() const { return mean.dim(0); }
  std::size_t t_frames() const { return mean.dim(1); }
  std::size_t f_bins() const { return mean.dim(2); }
};

struct VaeConfig {
  std::size_t depth = 3;  // number of 2x downsampling stages
  std::size_t base_channels = 16;
  std::size_t latent_channels = 8;
  double beta_kl = 1e-2;
  std::size_t kl_warmup_steps = 200;
  double logvar_min = -30.0;
  double logvar_max = 20.0;
};

struct VaeLoss {
  Var total;
  Var recon;
  Var kl;
};

// Convolutional VAE over the mel spectrogram, treated as a 1-channel image
// (time = height, mel bin = width). Spatial downsampling factor 2^depth.
class AcousticVae {
public:
  AcousticVae(nn::ParamStore& ps, const VaeConfig& cfg, Rng& rng) : cfg_(cfg) {
    const double spatial = std::pow(4.0, static_cast<double>(cfg.depth));
    if (spatial / static_cast<double>(cfg.latent_channels) < 4.0)
      throw ConfigError("acoustic_vae: compression ratio below 4x (depth " +
                        std::to_string(cfg.depth) + ", latent channels " +
                        std::to_string(cfg.latent_channels) + ")");
    const std::size_t C = cfg.base_channels;
    enc_in_ = nn::Conv2d(ps, "vae.enc_in", 1, C, 3, 1, 1, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      enc_down_.emplace_back(ps, "vae.enc" + std::to_string(i), C, C, 3, 2, 1,
                             rng);
    enc_out_ = nn::Conv2d(ps, "vae.enc_out", C, 2 * cfg.latent_channels, 3, 1,
                          1, rng);
    dec_in_ = nn::Conv2d(ps, "vae.dec_in", cfg.latent_channels, C, 3, 1, 1, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      dec_up_.emplace_back(ps, "vae.dec" + std::to_string(i), C, C, 3, 1, 1,
                           rng);
    dec_out_ = nn::Conv2d(ps, "vae.dec_out", C, 1, 3, 1, 1, rng);
  }

  const VaeConfig& config() const { return cfg_; }

  std::size_t downsample_factor() const { return std::size_t{1} << cfg_.depth; }

  // element-count compression mel -> latent
  double compression_ratio() const {
    return std::pow(4.0, static_cast<double>(cfg_.depth)) /
           static_cast<double>(cfg_.latent_channels);
  }

  // beta_kl with linear warmup
  double kl_weight(std::size_t step) const {
    if (cfg_.kl_warmup_steps == 0) return cfg_.beta_kl;
    double ramp = std::min(1.0, static_cast<double>(step) /
                                    static_cast<double>(cfg_.kl_warmup_steps));
    return cfg_.beta_kl * ramp;
  }

  // (mu, clamped log-variance) for a (1, T, F) input
  std::pair<Var, Var> encode_distribution(const Var& x) const {
    Var h = ag::silu(enc_in_(x));
    for (const auto& c : enc_down_) h = ag::silu(c(h));
    Var ml = enc_out_(h);  // (2*Cz, Tz, Fz)
    const std::size_t Cz = cfg_.latent_channels;
    const std::size_t Tz = ml.value().dim(1), Fz = ml.value().dim(2);
    Var flat = ag::reshape(ml, {2 * Cz, Tz * Fz});
    Var mu = ag::reshape(ag::slice_rows(flat, 0, Cz), {Cz, Tz, Fz});
    Var lv = ag::reshape(ag::slice_rows(flat, Cz, Cz), {Cz, Tz, Fz});
    return {mu, ag::clamp(lv, cfg_.logvar_min, cfg_.logvar_max)};
  }

  Var decode_sample(const Var& z) const {
    Var h = ag::silu(dec_in_(z));
    for (const auto& c : dec_up_) h = ag::silu(c(ag::upsample_nearest2(h)));
    return dec_out_(h);
  }

  AcousticLatent encode(const audio::MelSpectrogram& X, Rng& rng) const {
    Var x = as_image(X);
    auto [mu, lv] = encode_distribution(x);
    AcousticLatent out;
    out.mean = mu.value();
    out.log_variance = lv.value();
    out.sample = sample_from(out.mean, out.log_variance, rng);
    return out;
  }

  static Tensor sample_from(const Tensor& mu, const Tensor& lv, Rng& rng) {
    Tensor s = mu;
    for (std::size_t i = 0; i < s.numel(); ++i)
      s[i] += std::exp(0.5 * lv[i]) * rng.normal();
    return s;
  }

  audio::MelSpectrogram decode(const Tensor& z, std::size_t frame_hop = 160,
                               int sample_rate = 16000) const {
    if (!z.all_finite()) throw InputError("vae_decode: non-finite latent");
    Var out = decode_sample(Var::constant(z));
    audio::MelSpectrogram X;
    const std::size_t T = out.value().dim(1), F = out.value().dim(2);
    X.values = out.value().reshaped({T, F});
    X.frame_hop = frame_hop;
    X.sample_rate = sample_rate;
    return X;
  }

  // total = recon + beta * kl; kl is the closed-form Gaussian KL per latent
  // element so recon (a mean) and kl share a scale
  VaeLoss loss(const audio::MelSpectrogram& X, Rng& rng,
               double beta = -1.0) const {
    if (beta < 0.0) beta = cfg_.beta_kl;
    Var x = as_image(X);
    auto [mu, lv] = encode_distribution(x);
    Tensor eps = rng.randn(mu.value().shape());
    Var z = ag::add(mu, ag::mul(ag::exp_(ag::scale(lv, 0.5)),
                                Var::constant(eps)));
    Var recon = ag::mse(decode_sample(z), x);
    // 0.5 * mean(mu^2 + exp(lv) - 1 - lv)
    Var kl = ag::scale(
        ag::mean(ag::sub(ag::add_scalar(ag::add(ag::mul(mu, mu), ag::exp_(lv)),
                                        -1.0),
                         lv)),
        0.5);
    return {ag::add(recon, ag::scale(kl, beta)), recon, kl};
  }

  static double closed_form_kl(const Tensor& mu, const Tensor& lv) {
    double acc = 0.0;
    for (std::size_t i = 0; i < mu.numel(); ++i)
      acc += 0.5 * (mu[i] * mu[i] + std::exp(lv[i]) - 1.0 - lv[i]);
    return acc / static_cast<double>(mu.numel());
  }

private:
  Var as_image(const audio::MelSpectrogram& X) const {
    const std::size_t f = downsample_factor();
    if (X.frames() % f != 0)
      throw ShapeError("vae_encode: time axis " + std::to_string(X.frames()) +
                       " not divisible by " + std::to_string(f));
    if (X.bins() % f != 0)
      throw ShapeError("vae_encode: frequency axis " + std::to_string(X.bins()) +
                       " not divisible by " + std::to_string(f));
    return Var::constant(X.values.reshaped({1, X.frames(), X.bins()}));
  }

  VaeConfig cfg_;
  nn::Conv2d enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<nn::Conv2d> enc_down_, dec_up_;
};

}  // namespace loagen::model
