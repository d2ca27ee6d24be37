#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "loagen/audio/mel.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"

namespace loagen::model {

using ag::Var;

// Patch-embedded mel grid: (T'*F', D) rows in time-major order.
struct PatchGrid {
  Tensor embeddings;  // (t_patches*f_patches, D)
  std::size_t t_patches = 0;
  std::size_t f_patches = 0;
  std::size_t patch_size = 0;

  std::size_t length() const { return t_patches * f_patches; }
  std::size_t dim() const { return embeddings.cols(); }
};

struct LoaSequence {
  Tensor vectors;  // (L_lambda, D)
  std::size_t lambda = 1;

  std::size_t length() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

struct MaskSpec {
  std::vector<std::size_t> masked_indices;  // sorted, unique
  double ratio = 0.0;

  static MaskSpec random(std::size_t n_patches, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0)
      throw ConfigError("mask ratio must be in (0,1)");
    std::vector<std::size_t> idx(n_patches);
    for (std::size_t i = 0; i < n_patches; ++i) idx[i] = i;
    for (std::size_t i = n_patches; i > 1; --i) {
      auto j = static_cast<std::size_t>(rng.randint(0, static_cast<long>(i) - 1));
      std::swap(idx[i - 1], idx[j]);
    }
    auto n_masked = static_cast<std::size_t>(
        std::llround(ratio * static_cast<double>(n_patches)));
    MaskSpec m;
    m.ratio = ratio;
    m.masked_indices.assign(idx.begin(), idx.begin() + n_masked);
    std::sort(m.masked_indices.begin(), m.masked_indices.end());
    return m;
  }
};

enum class PoolMode { kAvgMaxBlend, kAvgOfMax };

// (avg + max)/2 per window by default; kAvgOfMax averages per-row maxima.
inline LoaSequence pool_loa(const PatchGrid& grid, std::size_t lambda,
                            PoolMode mode = PoolMode::kAvgMaxBlend) {
  if (lambda == 0) throw ConfigError("pool_loa: lambda must be positive");
  if (grid.t_patches % lambda != 0)
    throw ShapeError("pool_loa: time axis " + std::to_string(grid.t_patches) +
                     " not divisible by lambda " + std::to_string(lambda));
  if (grid.f_patches % lambda != 0)
    throw ShapeError("pool_loa: frequency axis " +
                     std::to_string(grid.f_patches) + " not divisible by lambda " +
                     std::to_string(lambda));
  const std::size_t Tb = grid.t_patches / lambda;
  const std::size_t Fb = grid.f_patches / lambda;
  const std::size_t D = grid.dim();
  LoaSequence out;
  out.lambda = lambda;
  out.vectors = Tensor({Tb * Fb, D});
  for (std::size_t bt = 0; bt < Tb; ++bt)
    for (std::size_t bf = 0; bf < Fb; ++bf) {
      const std::size_t row = bt * Fb + bf;  // time-major
      for (std::size_t d = 0; d < D; ++d) {
        double combined = 0.0;
        if (mode == PoolMode::kAvgMaxBlend) {
          double avg = 0.0, mx = -std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < lambda; ++i)
            for (std::size_t j = 0; j < lambda; ++j) {
              double v = grid.embeddings.at(
                  (bt * lambda + i) * grid.f_patches + bf * lambda + j, d);
              avg += v;
              mx = std::max(mx, v);
            }
          avg /= static_cast<double>(lambda * lambda);
          combined = 0.5 * (avg + mx);
        } else {
          double acc = 0.0;
          for (std::size_t i = 0; i < lambda; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < lambda; ++j)
              mx = std::max(mx, grid.embeddings.at(
                                    (bt * lambda + i) * grid.f_patches +
                                        bf * lambda + j,
                                    d));
            acc += mx;
          }
          combined = acc / static_cast<double>(lambda);
        }
        out.vectors.at(row, d) = combined;
      }
    }
  return out;
}

struct MaeConfig {
  std::size_t patch_size = 16;
  std::size_t embed_dim = 192;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t decoder_dim = 96;
  std::size_t decoder_depth = 2;
  std::size_t decoder_heads = 4;
  std::size_t avg_layers = 4;  // trailing encoder layers averaged at encode
  double mask_ratio = 0.75;
};

// Masked-autoencoder semantic encoder over mel patches.
class SemanticEncoder {
public:
  SemanticEncoder(nn::ParamStore& ps, const MaeConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    if (cfg.avg_layers == 0 || cfg.avg_layers > cfg.depth)
      throw ConfigError("mae: avg_layers must be in [1, depth]");
    const std::size_t pp = cfg.patch_size * cfg.patch_size;
    patch_embed_ = nn::Linear(ps, "mae.patch", pp, cfg.embed_dim, rng);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      nn::TransformerBlock::Options o;
      o.dim = cfg.embed_dim;
      o.heads = cfg.heads;
      blocks_.emplace_back(ps, "mae.enc" + std::to_string(l), o, rng);
    }
    dec_in_ = nn::Linear(ps, "mae.dec_in", cfg.embed_dim, cfg.decoder_dim, rng);
    mask_token_ = ps.add("mae.mask_token", rng.randn({1, cfg.decoder_dim}, 0.02));
    for (std::size_t l = 0; l < cfg.decoder_depth; ++l) {
      nn::TransformerBlock::Options o;
      o.dim = cfg.decoder_dim;
      o.heads = cfg.decoder_heads;
      dec_blocks_.emplace_back(ps, "mae.dec" + std::to_string(l), o, rng);
    }
    dec_out_ = nn::Linear(ps, "mae.dec_out", cfg.decoder_dim, pp, rng);
  }

  const MaeConfig& config() const { return cfg_; }
  void set_trained(bool t) { trained_ = t; }
  bool trained() const { return trained_; }

  // Flatten mel into per-patch pixel rows, time-major.
  Tensor extract_patches(const audio::MelSpectrogram& X) const {
    const std::size_t P = cfg_.patch_size;
    const std::size_t T = X.frames(), F = X.bins();
    if (T % P != 0)
      throw ShapeError("patchify: time axis " + std::to_string(T) +
                       " not divisible by patch size " + std::to_string(P));
    if (F % P != 0)
      throw ShapeError("patchify: frequency axis " + std::to_string(F) +
                       " not divisible by patch size " + std::to_string(P));
    const std::size_t Tp = T / P, Fp = F / P;
    Tensor rows({Tp * Fp, P * P});
    for (std::size_t ti = 0; ti < Tp; ++ti)
      for (std::size_t fi = 0; fi < Fp; ++fi)
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t j = 0; j < P; ++j)
            rows.at(ti * Fp + fi, i * P + j) = X.values.at(ti * P + i, fi * P + j);
    return rows;
  }

  // Learned patch embedding (equivalent to a conv with kernel P, stride P).
  PatchGrid patchify(const audio::MelSpectrogram& X) const {
    Tensor rows = extract_patches(X);
    Var e = patch_embed_(Var::constant(rows));
    PatchGrid g;
    g.embeddings = e.value();
    g.patch_size = cfg_.patch_size;
    g.t_patches = X.frames() / cfg_.patch_size;
    g.f_patches = X.bins() / cfg_.patch_size;
    return g;
  }

  // MSE over masked patches only; differentiable w.r.t. all MAE parameters.
  // `target_rows` overrides the reconstruction target (defaults to the input
  // patches; the loss never reads unmasked target rows).
  Var pretrain_loss(const audio::MelSpectrogram& X, const MaskSpec& mask,
                    const Tensor* target_rows = nullptr) const {
    Tensor rows = extract_patches(X);
    const std::size_t N = rows.rows();
    if (mask.masked_indices.empty())
      throw ConfigError("mae_pretrain_step: empty mask");
    for (auto m : mask.masked_indices)
      if (m >= N) throw ConfigError("mae_pretrain_step: mask index out of range");

    std::vector<bool> is_masked(N, false);
    for (auto m : mask.masked_indices) is_masked[m] = true;
    std::vector<std::size_t> visible;
    for (std::size_t i = 0; i < N; ++i)
      if (!is_masked[i]) visible.push_back(i);
    if (visible.empty()) throw ConfigError("mae_pretrain_step: all patches masked");

    Tensor pos = nn::sinusoid_positions(N, cfg_.embed_dim);
    Var emb = patch_embed_(Var::constant(rows));
    emb = ag::add(emb, Var::constant(pos));
    Var enc = ag::select_rows(emb, visible);
    for (const auto& b : blocks_) enc = b(enc);

    // decoder sequence: projected visible tokens and mask tokens, original order
    Tensor dpos = nn::sinusoid_positions(N, cfg_.decoder_dim);
    Var dec_vis = dec_in_(enc);
    std::vector<std::size_t> scatter(N);
    for (std::size_t i = 0; i < visible.size(); ++i) scatter[visible[i]] = i;
    std::vector<Var> parts;
    parts.reserve(N);
    for (std::size_t i = 0; i < N; ++i) {
      if (is_masked[i])
        parts.push_back(mask_token_);
      else
        parts.push_back(ag::slice_rows(dec_vis, scatter[i], 1));
    }
    Var dec = ag::add(ag::concat_rows(parts), Var::constant(dpos));
    for (const auto& b : dec_blocks_) dec = b(dec);
    Var pred = dec_out_(dec);

    Var pred_masked = ag::select_rows(pred, mask.masked_indices);
    Var target = Var::constant(target_rows ? *target_rows : rows);
    Var target_masked = ag::select_rows(target, mask.masked_indices);
    return ag::mse(pred_masked, target_masked);
  }

  // Decoder patch predictions for the whole grid (diagnostics / tests).
  Tensor reconstruct(const audio::MelSpectrogram& X, const MaskSpec& mask) const {
    Tensor rows = extract_patches(X);
    const std::size_t N = rows.rows();
    std::vector<bool> is_masked(N, false);
    for (auto m : mask.masked_indices) is_masked[m] = true;
    std::vector<std::size_t> visible;
    for (std::size_t i = 0; i < N; ++i)
      if (!is_masked[i]) visible.push_back(i);
    Tensor pos = nn::sinusoid_positions(N, cfg_.embed_dim);
    Var emb = ag::add(patch_embed_(Var::constant(rows)), Var::constant(pos));
    Var enc = ag::select_rows(emb, visible);
    for (const auto& b : blocks_) enc = b(enc);
    Tensor dpos = nn::sinusoid_positions(N, cfg_.decoder_dim);
    Var dec_vis = dec_in_(enc);
    std::vector<std::size_t> scatter(N);
    for (std::size_t i = 0; i < visible.size(); ++i) scatter[visible[i]] = i;
    std::vector<Var> parts;
    for (std::size_t i = 0; i < N; ++i)
      parts.push_back(is_masked[i] ? mask_token_
                                   : ag::slice_rows(dec_vis, scatter[i], 1));
    Var dec = ag::add(ag::concat_rows(parts), Var::constant(dpos));
    for (const auto& b : dec_blocks_) dec = b(dec);
    return dec_out_(dec).value();
  }

  // Full-visibility encode; element-wise mean of the trailing avg_layers
  // raw layer outputs.
  PatchGrid encode(const audio::MelSpectrogram& X,
                   bool allow_untrained = false) const {
    return encode_layers(X, cfg_.avg_layers, allow_untrained);
  }

  PatchGrid encode_layers(const audio::MelSpectrogram& X, std::size_t avg_layers,
                          bool allow_untrained = false) const {
    if (!trained_ && !allow_untrained)
      throw StateError("semantic encoder not trained; pass the diagnostics flag "
                       "to encode anyway");
    if (avg_layers == 0 || avg_layers > blocks_.size())
      throw ConfigError("encode: averaging window " + std::to_string(avg_layers) +
                        " exceeds encoder depth " + std::to_string(blocks_.size()));
    Tensor rows = extract_patches(X);
    const std::size_t N = rows.rows();
    Tensor pos = nn::sinusoid_positions(N, cfg_.embed_dim);
    Var h = ag::add(patch_embed_(Var::constant(rows)), Var::constant(pos));
    std::vector<Tensor> layer_out;
    for (const auto& b : blocks_) {
      h = b(h);
      layer_out.push_back(h.value());
    }
    Tensor avg({N, cfg_.embed_dim});
    for (std::size_t l = blocks_.size() - avg_layers; l < blocks_.size(); ++l)
      for (std::size_t i = 0; i < avg.numel(); ++i) avg[i] += layer_out[l][i];
    for (std::size_t i = 0; i < avg.numel(); ++i)
      avg[i] /= static_cast<double>(avg_layers);
    PatchGrid g;
    g.embeddings = std::move(avg);
    g.patch_size = cfg_.patch_size;
    g.t_patches = X.frames() / cfg_.patch_size;
    g.f_patches = X.bins() / cfg_.patch_size;
    return g;
  }

private:
  MaeConfig cfg_;
  bool trained_ = false;
  nn::Linear patch_embed_, dec_in_, dec_out_;
  Var mask_token_;
  std::vector<nn::TransformerBlock> blocks_;
  std::vector<nn::TransformerBlock> dec_blocks_;
};

}  // namespace loagen::model
