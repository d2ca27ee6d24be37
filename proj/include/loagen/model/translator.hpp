#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"
#include "loagen/model/condition.hpp"
#include "loagen/model/semantic_encoder.hpp"

namespace loagen::model {

// per-dimension corpus statistics used to standardize LOA targets
struct TargetStats {
  Tensor mean;  // (1, D)
  Tensor std;   // (1, D), floored away from zero

  static TargetStats compute(const std::vector<LoaSequence>& corpus,
                             double std_floor = 1e-6) {
    if (corpus.empty() || corpus[0].vectors.numel() == 0)
      throw InputError("target stats: empty corpus");
    const std::size_t D = corpus[0].vectors.cols();
    TargetStats s;
    s.mean = Tensor({1, D}, 0.0);
    s.std = Tensor({1, D}, 0.0);
    std::size_t n = 0;
    for (const auto& y : corpus) {
      for (std::size_t r = 0; r < y.vectors.rows(); ++r)
        for (std::size_t d = 0; d < D; ++d)
          s.mean.at(0, d) += y.vectors.at(r, d);
      n += y.vectors.rows();
    }
    for (std::size_t d = 0; d < D; ++d) s.mean.at(0, d) /= static_cast<double>(n);
    for (const auto& y : corpus)
      for (std::size_t r = 0; r < y.vectors.rows(); ++r)
        for (std::size_t d = 0; d < D; ++d) {
          double v = y.vectors.at(r, d) - s.mean.at(0, d);
          s.std.at(0, d) += v * v;
        }
    for (std::size_t d = 0; d < D; ++d)
      s.std.at(0, d) =
          std::max(std::sqrt(s.std.at(0, d) / static_cast<double>(n)), std_floor);
    return s;
  }

  static TargetStats identity(std::size_t D) {
    TargetStats s;
    s.mean = Tensor({1, D}, 0.0);
    s.std = Tensor({1, D}, 1.0);
    return s;
  }

  Tensor apply(const Tensor& y) const {
    Tensor out = y;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t d = 0; d < out.cols(); ++d)
        out.at(r, d) = (out.at(r, d) - mean.at(0, d)) / std.at(0, d);
    return out;
  }

  Tensor invert(const Tensor& y) const {
    Tensor out = y;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t d = 0; d < out.cols(); ++d)
        out.at(r, d) = out.at(r, d) * std.at(0, d) + mean.at(0, d);
    return out;
  }
};

struct TranslatorConfig {
  std::size_t width = 192;   // model width; condition bundles must match
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t loa_dim = 192;       // dimension of the LOA vectors
  std::size_t lambda = 8;          // pooling level of the target sequence
  std::size_t target_length = 8;   // L_lambda, fixed rollout length
  std::size_t max_condition_length = 64;
};

// decoder-only autoregressive regressor over continuous LOA vectors;
// sequence layout: [condition rows; sep; bol; y_1 .. y_{L-1}]
class LoaTranslator {
public:
  LoaTranslator(nn::ParamStore& ps, const TranslatorConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    in_ = nn::Linear(ps, "tr.in", cfg.loa_dim, cfg.width, rng);
    out_ = nn::Linear(ps, "tr.out", cfg.width, cfg.loa_dim, rng);
    sep_ = ps.add("tr.sep", rng.randn({1, cfg.width}, 0.02));
    bol_ = ps.add("tr.bol", rng.randn({1, cfg.width}, 0.02));
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(ps, "tr.b" + std::to_string(i),
                           nn::TransformerBlock::Options{.dim = cfg.width,
                                                         .heads = cfg.heads},
                           rng);
    ln_ = nn::LayerNorm(ps, "tr.ln", cfg.width);
    stats_ = TargetStats::identity(cfg.loa_dim);
    // standardization statistics ride along in the checkpoint blob; they are
    // never touched by the optimizer (no gradients reach them)
    stat_mean_ = ps.add("tr.stat_mean", stats_.mean);
    stat_std_ = ps.add("tr.stat_std", stats_.std);
  }

  const TranslatorConfig& config() const { return cfg_; }
  const TargetStats& stats() const { return stats_; }
  void set_stats(TargetStats s) {
    stats_ = std::move(s);
    stat_mean_.value_mut() = stats_.mean;
    stat_std_.value_mut() = stats_.std;
  }
  // adopt statistics restored from a checkpoint blob
  void refresh_stats() {
    stats_.mean = stat_mean_.value();
    stats_.std = stat_std_.value();
  }
  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  // teacher-forced loss over standardized targets
  Var loss(const Var& condition, const LoaSequence& target) const {
    if (target.vectors.numel() == 0)
      throw StateError("translator_loss: missing targets");
    check_condition(condition.value());
    if (target.lambda != cfg_.lambda)
      throw ConfigError("translator_loss: target lambda " +
                        std::to_string(target.lambda) + " != configured " +
                        std::to_string(cfg_.lambda));
    if (target.length() != cfg_.target_length)
      throw ConfigError("translator_loss: target length " +
                        std::to_string(target.length()) + " != L_lambda " +
                        std::to_string(cfg_.target_length));
    const std::size_t L = target.length();
    Tensor y = stats_.apply(target.vectors);  // (L, loa_dim)

    // teacher-forcing inputs are y_1..y_{L-1}
    std::vector<Var> rows;
    if (L > 1) {
      Tensor yin({L - 1, cfg_.loa_dim});
      for (std::size_t r = 0; r + 1 < L; ++r)
        for (std::size_t d = 0; d < cfg_.loa_dim; ++d)
          yin.at(r, d) = y.at(r, d);
      rows.push_back(in_(Var::constant(yin)));
    }
    Var pred = forward(condition, rows);  // (L, loa_dim)
    return ag::mse(pred, Var::constant(y));
  }

  Var loss(const ConditionBundle& condition, const LoaSequence& target) const {
    return loss(Var::constant(condition.features), target);
  }

  // teacher-forced one-step predictions for the whole sequence, destandardized;
  // keeps the autograd graph alive (used by full-backprop joint finetuning)
  Var predict_teacher_var(const Var& condition,
                          const LoaSequence& target) const {
    if (target.vectors.numel() == 0)
      throw StateError("translator: missing targets");
    check_condition(condition.value());
    const std::size_t L = target.length();
    Tensor y = stats_.apply(target.vectors);
    std::vector<Var> rows;
    if (L > 1) {
      Tensor yin({L - 1, cfg_.loa_dim});
      for (std::size_t r = 0; r + 1 < L; ++r)
        for (std::size_t d = 0; d < cfg_.loa_dim; ++d)
          yin.at(r, d) = y.at(r, d);
      rows.push_back(in_(Var::constant(yin)));
    }
    Var pred = forward(condition, rows);
    Tensor std_rep({L, cfg_.loa_dim}), mean_rep({L, cfg_.loa_dim});
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t d = 0; d < cfg_.loa_dim; ++d) {
        std_rep.at(r, d) = stats_.std.at(0, d);
        mean_rep.at(r, d) = stats_.mean.at(0, d);
      }
    return ag::add(ag::mul(pred, Var::constant(std_rep)),
                   Var::constant(mean_rep));
  }

  Tensor predict_teacher(const Var& condition, const LoaSequence& target) const {
    return predict_teacher_var(condition, target).value();
  }

  // deterministic autoregressive rollout, destandardized
  LoaSequence generate(const Var& condition, std::size_t length,
                       bool allow_untrained = false) const {
    if (!trained_ && !allow_untrained)
      throw StateError("generate_loa: translator has not been trained");
    check_condition(condition.value());
    if (length != cfg_.target_length)
      throw ConfigError("generate_loa: length " + std::to_string(length) +
                        " != trained L_lambda " +
                        std::to_string(cfg_.target_length));
    Tensor gen({0, cfg_.loa_dim});
    for (std::size_t l = 0; l < length; ++l) {
      std::vector<Var> rows;
      if (l > 0) rows.push_back(in_(Var::constant(gen)));
      Var pred = forward(condition, rows);  // (l+1, loa_dim)
      Tensor next({l + 1, cfg_.loa_dim});
      for (std::size_t r = 0; r < l; ++r)
        for (std::size_t d = 0; d < cfg_.loa_dim; ++d)
          next.at(r, d) = gen.at(r, d);
      for (std::size_t d = 0; d < cfg_.loa_dim; ++d)
        next.at(l, d) = pred.value().at(l, d);
      gen = std::move(next);
    }
    LoaSequence out;
    out.vectors = stats_.invert(gen);
    out.lambda = cfg_.lambda;
    return out;
  }

  LoaSequence generate(const ConditionBundle& condition, std::size_t length,
                       bool allow_untrained = false) const {
    return generate(Var::constant(condition.features), length, allow_untrained);
  }

private:
  void check_condition(const Tensor& C) const {
    if (C.rows() == 0) throw InputError("translator: empty condition");
    if (C.cols() != cfg_.width)
      throw ShapeError("translator: condition width " +
                       std::to_string(C.cols()) + " != model width " +
                       std::to_string(cfg_.width));
    if (C.rows() > cfg_.max_condition_length)
      throw LengthError("translator: condition length " +
                        std::to_string(C.rows()) + " exceeds cap " +
                        std::to_string(cfg_.max_condition_length));
  }

  // predictions for positions 1..(1+rows) read from [C; sep; bol; rows...]
  Var forward(const Var& condition, const std::vector<Var>& target_rows) const {
    const std::size_t Lc = condition.value().rows();
    std::vector<Var> seq = {condition, sep_, bol_};
    for (const auto& r : target_rows) seq.push_back(r);
    Var x = ag::concat_rows(seq);
    const std::size_t total = x.value().rows();
    x = ag::add(x, Var::constant(nn::sinusoid_positions(total, cfg_.width)));
    Tensor mask = nn::causal_prefix_mask(total, Lc + 1);  // cond + sep visible
    for (const auto& b : blocks_) x = b(x, &mask);
    x = ln_(x);
    Var h = ag::slice_rows(x, Lc + 1, total - Lc - 1);  // bol + teacher rows
    return out_(h);
  }

  TranslatorConfig cfg_;
  nn::Linear in_, out_;
  Var sep_, bol_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_;
  TargetStats stats_;
  Var stat_mean_, stat_std_;
  bool trained_ = false;
};

}  // namespace loagen::model
