#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"
#include "loagen/model/semantic_encoder.hpp"

namespace loagen::model {

using ag::Var;

// ---------------------------------------------------------------------------
// noise schedule: beta_1..beta_T with cumulative alpha_t = prod(1 - beta_s)

struct NoiseSchedule {
  std::vector<double> betas;       // betas[t-1] = beta_t
  std::vector<double> alphas_cum;  // alphas_cum[t-1] = alpha_t
  std::size_t T = 0;

  double beta(std::size_t t) const {
    check_t(t);
    return betas[t - 1];
  }
  double alpha(std::size_t t) const {
    check_t(t);
    return alphas_cum[t - 1];
  }
  // alpha_0 = 1 by convention
  double alpha_or_one(std::size_t t) const { return t == 0 ? 1.0 : alpha(t); }

  void check_t(std::size_t t) const {
    if (t < 1 || t > T)
      throw IndexError("noise schedule: step " + std::to_string(t) +
                       " outside [1," + std::to_string(T) + "]");
  }
};

inline NoiseSchedule make_schedule(std::size_t T, const std::string& kind,
                                   double beta_start = 1e-4,
                                   double beta_end = 2e-2) {
  if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
  if (kind != "linear")
    throw ConfigError("make_schedule: unknown schedule kind '" + kind + "'");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas_cum.resize(T);
  double prod = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    double b = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) *
                                         static_cast<double>(t) /
                                         static_cast<double>(T - 1);
    if (b <= 0.0 || b >= 1.0)
      throw ConfigError("make_schedule: beta outside (0,1)");
    s.betas[t] = b;
    prod *= 1.0 - b;
    s.alphas_cum[t] = prod;
  }
  return s;
}

// z_t = sqrt(alpha_t) z0 + sqrt(1 - alpha_t) eps
inline Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& sched) {
  if (!z0.same_shape(eps)) throw ShapeError("q_sample: z0/eps shape mismatch");
  const double a = sched.alpha(t);
  Tensor out = z0;
  const double sa = std::sqrt(a), sb = std::sqrt(1.0 - a);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = sa * z0[i] + sb * eps[i];
  return out;
}

// ---------------------------------------------------------------------------
// conditioning carried into the denoiser

struct DenoiserConditioning {
  LoaSequence loa;             // key/value for the final-block cross-attention
  Tensor text_seq;             // optional (L, text_dim); empty = absent
  bool drop_loa = false;
  bool drop_text = false;

  bool has_text() const { return text_seq.numel() > 0; }
};

struct DenoiserConfig {
  std::size_t latent_channels = 8;   // C_z
  std::size_t base_channels = 16;
  std::size_t depth = 1;             // downsampling levels inside the UNet
  std::size_t n_trans = 2;           // bottleneck has n_trans + 1 blocks
  std::size_t heads = 4;
  std::size_t loa_dim = 192;
  std::size_t text_dim = 0;          // 0 disables the text cross-attention
  std::size_t time_dim = 32;
};

// UNet over the VAE latent with a transformer stack at the bottleneck; the
// final block swaps self-attention for cross-attention over the LOA sequence
// (plus an optional second cross-attention over sequential text features).
class Denoiser {
public:
  Denoiser(nn::ParamStore& ps, const DenoiserConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    const std::size_t C = cfg.base_channels;
    conv_in_ = nn::Conv2d(ps, "unet.in", cfg.latent_channels, C, 3, 1, 1, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      down_.emplace_back(ps, "unet.down" + std::to_string(i), C, C, 3, 2, 1,
                         rng);
      up_.emplace_back(ps, "unet.up" + std::to_string(i), 2 * C, C, 3, 1, 1,
                       rng);
      time_down_.emplace_back(ps, "unet.tdown" + std::to_string(i),
                              cfg.time_dim, C, rng);
    }
    for (std::size_t i = 0; i + 1 < cfg.n_trans + 1; ++i)
      blocks_.emplace_back(ps, "unet.b" + std::to_string(i),
                           nn::TransformerBlock::Options{.dim = C,
                                                         .heads = cfg.heads},
                           rng);
    blocks_.emplace_back(
        ps, "unet.b" + std::to_string(cfg.n_trans),
        nn::TransformerBlock::Options{.dim = C,
                                      .heads = cfg.heads,
                                      .self_attention = false,
                                      .cross_dims = cfg.loa_dim,
                                      .cross2_dims = cfg.text_dim},
        rng);
    time_mid_ = nn::Linear(ps, "unet.tmid", cfg.time_dim, C, rng);
    conv_out_ = nn::Conv2d(ps, "unet.out", C, cfg.latent_channels, 3, 1, 1,
                           rng);
    null_loa_ = ps.add("unet.null_loa", rng.randn({1, cfg.loa_dim}, 0.02));
    if (cfg.text_dim > 0)
      null_text_ = ps.add("unet.null_text", rng.randn({1, cfg.text_dim}, 0.02));
  }

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t n_blocks() const { return blocks_.size(); }

  // epsilon-prediction, same shape as z_t; accepts LOA of any length.
  // `live_loa`, when set and not dropped, replaces cond.loa as the
  // cross-attention kv while keeping its autograd graph connected.
  Var forward(const Var& z_t, std::size_t t, const DenoiserConditioning& cond,
              const Var* live_loa = nullptr) const {
    const auto& Z = z_t.value();
    if (Z.ndim() != 3 || Z.dim(0) != cfg_.latent_channels)
      throw ShapeError("denoiser_forward: expected (" +
                       std::to_string(cfg_.latent_channels) +
                       ",H,W) latent, got " + Tensor::shape_str(Z.shape()));
    const std::size_t f = std::size_t{1} << cfg_.depth;
    if (Z.dim(1) % f != 0 || Z.dim(2) % f != 0)
      throw ShapeError("denoiser_forward: latent spatial dims must divide " +
                       std::to_string(f));
    Var temb = Var::constant(nn::timestep_embedding(t, cfg_.time_dim));

    Var h = ag::silu(conv_in_(z_t));
    std::vector<Var> skips;
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      skips.push_back(h);
      h = ag::silu(ag::add(down_[i](h),
                           channel_bias(time_down_[i](temb), down_shape(h))));
    }

    // bottleneck transformer over flattened spatial positions
    const std::size_t C = cfg_.base_channels;
    const std::size_t Hb = h.value().dim(1), Wb = h.value().dim(2);
    Var seq = ag::transpose2d(ag::reshape(h, {C, Hb * Wb}));  // (HW, C)
    seq = ag::add(seq, ag::add_row_bias(ag::scale(seq, 0.0),
                                        ag::reshape(time_mid_(temb), {C})));
    Var loa_kv = cond.drop_loa
                     ? null_loa_
                     : (live_loa ? *live_loa : Var::constant(cond.loa.vectors));
    const Var* text_kv = nullptr;
    Var text_store;
    if (cfg_.text_dim > 0) {
      text_store = (cond.drop_text || !cond.has_text())
                       ? null_text_
                       : Var::constant(cond.text_seq);
      text_kv = &text_store;
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      bool last = i + 1 == blocks_.size();
      seq = blocks_[i](seq, nullptr, last ? &loa_kv : nullptr,
                       last ? text_kv : nullptr);
    }
    h = ag::reshape(ag::transpose2d(seq), {C, Hb, Wb});

    for (std::size_t i = cfg_.depth; i-- > 0;) {
      Var u = ag::upsample_nearest2(h);
      u = concat_channels(u, skips[i]);
      h = ag::silu(up_[i](u));
    }
    return conv_out_(h);
  }

  Tensor predict(const Tensor& z_t, std::size_t t,
                 const DenoiserConditioning& cond) const {
    return forward(Var::constant(z_t), t, cond).value();
  }

  // loss for a specific (z_t, t, eps) triple: mean ||G(z_t,t,cond) - eps||^2
  Var loss_given(const Tensor& z_t, std::size_t t, const Tensor& eps,
                 const DenoiserConditioning& cond,
                 const Var* live_loa = nullptr) const {
    return ag::mse(forward(Var::constant(z_t), t, cond, live_loa),
                   Var::constant(eps));
  }

  struct LossProbe {
    std::size_t t = 0;
    Tensor eps;
    Tensor z_t;
    bool dropped_loa = false;
    bool dropped_text = false;
  };

  // Eq.-7-style loss: t uniform in {1..T}, eps ~ N(0,I), per-slot dropout
  Var ldm_loss(const Tensor& z0, const DenoiserConditioning& cond,
               const NoiseSchedule& sched, Rng& rng, double p_drop = 0.1,
               LossProbe* probe = nullptr,
               const Var* live_loa = nullptr) const {
    std::size_t t = static_cast<std::size_t>(
        rng.randint(1, static_cast<std::int64_t>(sched.T)));
    Tensor eps = rng.randn(z0.shape());
    Tensor z_t = q_sample(z0, t, eps, sched);
    DenoiserConditioning c = cond;
    c.drop_loa = cond.drop_loa || rng.bernoulli(p_drop);
    c.drop_text = cond.drop_text || rng.bernoulli(p_drop);
    if (probe) *probe = {t, eps, z_t, c.drop_loa, c.drop_text};
    return loss_given(z_t, t, eps, c, live_loa);
  }

  // classifier-free guidance: eps_u + s * (eps_c - eps_u)
  Tensor cfg_estimate(const Tensor& z_t, std::size_t t,
                      const DenoiserConditioning& cond, double s) const {
    DenoiserConditioning uncond = cond;
    uncond.drop_loa = true;
    uncond.drop_text = true;
    if (s == 1.0) return predict(z_t, t, cond);
    if (s == 0.0) return predict(z_t, t, uncond);
    Tensor e_c = predict(z_t, t, cond);
    Tensor e_u = predict(z_t, t, uncond);
    Tensor out = e_u;
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = e_u[i] + s * (e_c[i] - e_u[i]);
    return out;
  }

private:
  static std::vector<std::size_t> down_shape(const Var& h) {
    const auto& s = h.value();
    return {s.dim(0), (s.dim(1) + 1) / 2, (s.dim(2) + 1) / 2};
  }

  // broadcast a (1,C) row to a (C,H,W) channel bias
  static Var channel_bias(const Var& row, const std::vector<std::size_t>& shp) {
    return ag::reshape(
        ag::transpose2d(ag::add_row_bias(
            ag::scale(Var::constant(Tensor({shp[1] * shp[2], shp[0]}, 0.0)),
                      0.0),
            ag::reshape(row, {shp[0]}))),
        shp);
  }

  static Var concat_channels(const Var& a, const Var& b) {
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.dim(1) != B.dim(1) || A.dim(2) != B.dim(2))
      throw ShapeError("denoiser: skip connection shape mismatch");
    Var a2 = ag::reshape(a, {A.dim(0), A.dim(1) * A.dim(2)});
    Var b2 = ag::reshape(b, {B.dim(0), B.dim(1) * B.dim(2)});
    return ag::reshape(ag::concat_rows({a2, b2}),
                       {A.dim(0) + B.dim(0), A.dim(1), A.dim(2)});
  }

  DenoiserConfig cfg_;
  nn::Conv2d conv_in_, conv_out_;
  std::vector<nn::Conv2d> down_, up_;
  std::vector<nn::Linear> time_down_;
  nn::Linear time_mid_;
  std::vector<nn::TransformerBlock> blocks_;
  Var null_loa_, null_text_;
};

}  // namespace loagen::model
