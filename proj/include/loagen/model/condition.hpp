#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "loagen/audio/mel.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/rng.hpp"

namespace loagen::model {

using ag::Var;

enum class Modality { kGlobalText, kGlobalAudio, kTextSequence, kPhoneme };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kGlobalText: return "global_text";
    case Modality::kGlobalAudio: return "global_audio";
    case Modality::kTextSequence: return "text_sequence";
    case Modality::kPhoneme: return "phoneme";
  }
  return "?";
}

struct ConditionSegment {
  Tensor features;  // (L_k, D_k)
  Modality modality = Modality::kGlobalText;
  std::string source_id;

  std::size_t length() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

struct SegmentBoundary {
  Modality modality;
  std::size_t offset;
  std::size_t length;
};

struct ConditionBundle {
  Tensor features;  // (L, D0)
  std::vector<SegmentBoundary> boundaries;

  std::size_t length() const { return features.rows(); }
};

// ---------------------------------------------------------------------------
// whitespace + lowercase tokenizer with a closed vocabulary; id 0 = <unk>

struct TextVocab {
  std::vector<std::string> words{"<unk>"};
  std::unordered_map<std::string, std::size_t> index;

  static std::vector<std::string> tokenize(const std::string& caption) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : caption) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      } else {
        cur.push_back(static_cast<char>(
            std::tolower(static_cast<unsigned char>(ch))));
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  static TextVocab build(const std::vector<std::string>& captions) {
    TextVocab v;
    v.index["<unk>"] = 0;
    for (const auto& c : captions)
      for (const auto& w : tokenize(c))
        if (!v.index.count(w)) {
          v.index[w] = v.words.size();
          v.words.push_back(w);
        }
    return v;
  }

  std::size_t size() const { return words.size(); }

  std::vector<std::size_t> encode(const std::string& caption) const {
    std::vector<std::size_t> ids;
    for (const auto& w : tokenize(caption)) {
      auto it = index.find(w);
      ids.push_back(it == index.end() ? 0 : it->second);
    }
    return ids;
  }
};

// ---------------------------------------------------------------------------
// contrastive text/audio embedder (joint unit-sphere embedding space)

struct EmbedderConfig {
  std::size_t dim = 64;          // D_c
  std::size_t hidden = 128;
  std::size_t text_emb_dim = 32;
  std::size_t time_chunks = 4;   // coarse temporal pooling of the mel
  std::size_t n_mels = 128;
};

class ContrastiveEmbedder {
public:
  ContrastiveEmbedder(nn::ParamStore& ps, const EmbedderConfig& cfg,
                      TextVocab vocab, Rng& rng)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    audio1_ = nn::Linear(ps, "clap.audio1", cfg.time_chunks * cfg.n_mels,
                         cfg.hidden, rng);
    audio2_ = nn::Linear(ps, "clap.audio2", cfg.hidden, cfg.dim, rng);
    tok_ = nn::Embedding(ps, "clap.text", vocab_.size(), cfg.text_emb_dim, rng);
    text1_ = nn::Linear(ps, "clap.text1", cfg.text_emb_dim, cfg.hidden, rng);
    text2_ = nn::Linear(ps, "clap.text2", cfg.hidden, cfg.dim, rng);
    logit_scale_ = ps.add("clap.logit_scale", Tensor({1}, 1.0));
  }

  const EmbedderConfig& config() const { return cfg_; }
  const TextVocab& vocab() const { return vocab_; }
  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  // (1, dim), unit norm
  Var embed_audio_var(const audio::MelSpectrogram& X) const {
    if (X.values.numel() == 0)
      throw InputError("embed_global: empty spectrogram");
    if (X.bins() != cfg_.n_mels)
      throw ShapeError("embed_global: expected " + std::to_string(cfg_.n_mels) +
                       " mel bins, got " + std::to_string(X.bins()));
    const std::size_t T = X.frames(), K = cfg_.time_chunks;
    Tensor feat({1, K * cfg_.n_mels}, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t lo = k * T / K, hi = std::max(lo + 1, (k + 1) * T / K);
      hi = std::min(hi, T);
      for (std::size_t t = lo; t < hi; ++t)
        for (std::size_t f = 0; f < cfg_.n_mels; ++f)
          feat.at(0, k * cfg_.n_mels + f) += X.values.at(t, f);
      for (std::size_t f = 0; f < cfg_.n_mels; ++f)
        feat.at(0, k * cfg_.n_mels + f) /= static_cast<double>(hi - lo);
    }
    Var h = ag::gelu(audio1_(Var::constant(feat)));
    return ag::l2_normalize_rows(audio2_(h));
  }

  // bag-of-words tower, (1, dim), unit norm
  Var embed_text_var(const std::string& caption) const {
    auto ids = vocab_.encode(caption);
    if (ids.empty()) throw InputError("embed_global: empty caption");
    Var emb = tok_(ids);                       // (L, text_emb_dim)
    Var pooled = ag::mean_rows(emb);           // (1, text_emb_dim)
    Var h = ag::gelu(text1_(pooled));
    return ag::l2_normalize_rows(text2_(h));
  }

  ConditionSegment embed_audio(const audio::MelSpectrogram& X,
                               bool allow_untrained = false) const {
    require_trained(allow_untrained);
    return {embed_audio_var(X).value(), Modality::kGlobalAudio, ""};
  }

  ConditionSegment embed_text(const std::string& caption,
                              bool allow_untrained = false) const {
    require_trained(allow_untrained);
    return {embed_text_var(caption).value(), Modality::kGlobalText, caption};
  }

  // symmetric in-batch InfoNCE over paired rows
  Var contrastive_loss(const std::vector<audio::MelSpectrogram>& mels,
                       const std::vector<std::string>& captions) const {
    if (mels.size() != captions.size() || mels.size() < 2)
      throw InputError("contrastive_loss: need >= 2 paired items");
    bool distinct = false;
    for (std::size_t i = 1; i < captions.size(); ++i)
      if (captions[i] != captions[0]) distinct = true;
    if (!distinct)
      throw DegenerateCorpusError(
          "contrastive_loss: all captions identical, need >= 2 classes");
    std::vector<Var> arows, trows;
    for (std::size_t i = 0; i < mels.size(); ++i) {
      arows.push_back(embed_audio_var(mels[i]));
      trows.push_back(embed_text_var(captions[i]));
    }
    Var A = ag::concat_rows(arows), T = ag::concat_rows(trows);
    Var logits = ag::scale_by(ag::matmul(A, ag::transpose2d(T)), logit_scale_);
    std::vector<std::size_t> labels(mels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i;
    Var l_a = ag::cross_entropy_rows(logits, labels);
    Var l_t = ag::cross_entropy_rows(ag::transpose2d(logits), labels);
    return ag::scale(ag::add(l_a, l_t), 0.5);
  }

private:
  void require_trained(bool allow) const {
    if (!trained_ && !allow)
      throw StateError("embed_global: embedder has not been trained");
  }

  EmbedderConfig cfg_;
  TextVocab vocab_;
  nn::Linear audio1_, audio2_, text1_, text2_;
  nn::Embedding tok_;
  Var logit_scale_;
  bool trained_ = false;
};

// ---------------------------------------------------------------------------
// order-sensitive caption encoder

struct TextEncoderConfig {
  std::size_t dim = 128;  // D_t
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t max_len = 32;
};

class TextSequenceEncoder {
public:
  TextSequenceEncoder(nn::ParamStore& ps, const TextEncoderConfig& cfg,
                      TextVocab vocab, Rng& rng)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    tok_ = nn::Embedding(ps, "textenc", vocab_.size(), cfg.dim, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(ps, "textenc.b" + std::to_string(i),
                           nn::TransformerBlock::Options{.dim = cfg.dim,
                                                         .heads = cfg.heads},
                           rng);
    ln_ = nn::LayerNorm(ps, "textenc.ln", cfg.dim);
  }

  const TextEncoderConfig& config() const { return cfg_; }
  const TextVocab& vocab() const { return vocab_; }

  Var encode_var(const std::string& caption) const {
    auto ids = vocab_.encode(caption);
    if (ids.empty())
      throw InputError("encode_text_sequence: empty caption after tokenization");
    if (ids.size() > cfg_.max_len) {
      std::cerr << "warning: caption truncated to " << cfg_.max_len
                << " tokens\n";
      ids.resize(cfg_.max_len);
    }
    Var x = ag::add(tok_(ids), Var::constant(nn::sinusoid_positions(
                                   ids.size(), cfg_.dim)));
    for (const auto& b : blocks_) x = b(x);
    return ln_(x);
  }

  ConditionSegment encode(const std::string& caption) const {
    return {encode_var(caption).value(), Modality::kTextSequence, caption};
  }

private:
  TextEncoderConfig cfg_;
  TextVocab vocab_;
  nn::Embedding tok_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_;
};

// ---------------------------------------------------------------------------
// phoneme encoder; appends a stop token to every sequence

struct PhonemeEncoderConfig {
  std::size_t dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
};

class PhonemeEncoder {
public:
  PhonemeEncoder(nn::ParamStore& ps, const PhonemeEncoderConfig& cfg,
                 std::vector<std::string> symbols, Rng& rng)
      : cfg_(cfg), symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) index_[symbols_[i]] = i;
    // +1 for the stop token at id = |vocab|
    tok_ = nn::Embedding(ps, "phoneme", symbols_.size() + 1, cfg.dim, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(ps, "phoneme.b" + std::to_string(i),
                           nn::TransformerBlock::Options{.dim = cfg.dim,
                                                         .heads = cfg.heads},
                           rng);
    ln_ = nn::LayerNorm(ps, "phoneme.ln", cfg.dim);
  }

  const PhonemeEncoderConfig& config() const { return cfg_; }
  std::size_t stop_id() const { return symbols_.size(); }

  Var encode_var(const std::vector<std::string>& phonemes) const {
    std::vector<std::size_t> ids;
    for (const auto& p : phonemes) {
      auto it = index_.find(p);
      if (it == index_.end())
        throw VocabularyError("encode_phonemes: unknown symbol '" + p + "'");
      ids.push_back(it->second);
    }
    ids.push_back(stop_id());
    Var x = ag::add(tok_(ids), Var::constant(nn::sinusoid_positions(
                                   ids.size(), cfg_.dim)));
    for (const auto& b : blocks_) x = b(x);
    return ln_(x);
  }

  ConditionSegment encode(const std::vector<std::string>& phonemes) const {
    std::string src;
    for (const auto& p : phonemes) src += (src.empty() ? "" : " ") + p;
    return {encode_var(phonemes).value(), Modality::kPhoneme, src};
  }

private:
  PhonemeEncoderConfig cfg_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::size_t> index_;
  nn::Embedding tok_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_;
};

// ---------------------------------------------------------------------------
// per-modality projection to the shared width D0, then concatenation

class ConditionAssembler {
public:
  ConditionAssembler(nn::ParamStore& ps, std::size_t d0,
                     const std::map<Modality, std::size_t>& input_dims,
                     Rng& rng)
      : d0_(d0) {
    for (auto [m, d] : input_dims)
      proj_.emplace(m, nn::Linear(ps, std::string("cond.proj.") +
                                          modality_name(m),
                                  d, d0, rng));
  }

  std::size_t d0() const { return d0_; }

  Var assemble_var(const std::vector<ConditionSegment>& segments) const {
    if (segments.empty())
      throw InputError("assemble_condition: empty segment list");
    std::vector<Var> parts;
    for (const auto& s : segments) {
      auto it = proj_.find(s.modality);
      if (it == proj_.end())
        throw ConfigError(std::string("assemble_condition: no projection for ") +
                          modality_name(s.modality));
      if (!s.features.all_finite())
        throw InputError("assemble_condition: non-finite segment features");
      parts.push_back(it->second(Var::constant(s.features)));
    }
    return ag::concat_rows(parts);
  }

  ConditionBundle assemble(const std::vector<ConditionSegment>& segments) const {
    ConditionBundle out;
    out.features = assemble_var(segments).value();
    std::size_t off = 0;
    for (const auto& s : segments) {
      out.boundaries.push_back({s.modality, off, s.length()});
      off += s.length();
    }
    return out;
  }

private:
  std::size_t d0_;
  std::map<Modality, nn::Linear> proj_;
};

}  // namespace loagen::model
