#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "loagen/core/autograd.hpp"
#include "loagen/core/rng.hpp"
#include "loagen/core/tensor.hpp"

namespace loagen::nn {

using ag::Var;

// Ordered, named collection of trainable tensors. Modules register their
// parameters here; the optimizer and checkpoint code iterate it.
class ParamStore {
public:
  Var add(const std::string& name, Tensor init) {
    if (by_name_.count(name))
      throw std::invalid_argument("duplicate parameter: " + name);
    Var v = Var::param(std::move(init));
    by_name_[name] = params_.size();
    params_.push_back({name, v});
    return v;
  }

  struct Entry {
    std::string name;
    Var var;
  };

  std::vector<Entry>& entries() { return params_; }
  const std::vector<Entry>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Var get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw std::out_of_range("no such parameter: " + name);
    return params_[it->second].var;
  }
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  void zero_grad() {
    for (auto& e : params_) e.var.zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& e : params_) n += e.var.value().numel();
    return n;
  }

  // FNV-1a digest of all parameter values, used for frozen-weights assertions.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& e : params_) {
      mix(e.name.data(), e.name.size());
      mix(e.var.value().data(), e.var.value().numel() * sizeof(double));
    }
    return h;
  }

private:
  std::vector<Entry> params_;
  std::map<std::string, std::size_t> by_name_;
};

inline Tensor xavier_init(std::vector<std::size_t> shape, std::size_t fan_in,
                          std::size_t fan_out, Rng& rng) {
  double s = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return rng.randn(std::move(shape), s);
}

class Linear {
public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, std::size_t in,
         std::size_t out, Rng& rng)
      : w_(ps.add(prefix + ".w", xavier_init({in, out}, in, out, rng))),
        b_(ps.add(prefix + ".b", Tensor({out}))) {}

  // x: (L,in) -> (L,out)
  Var operator()(const Var& x) const {
    return ag::add_row_bias(ag::matmul(x, w_), b_);
  }

  Var weight() const { return w_; }
  Var bias() const { return b_; }

private:
  Var w_, b_;
};

class LayerNorm {
public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, std::size_t dim)
      : gamma_(ps.add(prefix + ".g", Tensor({dim}, 1.0))),
        beta_(ps.add(prefix + ".b", Tensor({dim}))) {}

  Var operator()(const Var& x) const {
    return ag::layer_norm_rows(x, gamma_, beta_);
  }

private:
  Var gamma_, beta_;
};

class Embedding {
public:
  Embedding() = default;
  Embedding(ParamStore& ps, const std::string& prefix, std::size_t vocab,
            std::size_t dim, Rng& rng)
      : table_(ps.add(prefix + ".emb", rng.randn({vocab, dim}, 0.02))) {}

  Var operator()(const std::vector<std::size_t>& idx) const {
    return ag::select_rows(table_, idx);
  }
  std::size_t vocab() const { return table_.value().rows(); }

private:
  Var table_;
};

// Attention mask as additive score bias. The first `prefix_len` key columns
// are visible to every query; past the prefix, position i sees keys j <= i.
inline Tensor causal_prefix_mask(std::size_t L, std::size_t prefix_len) {
  Tensor m({L, L});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      bool ok = j < prefix_len || j <= i;
      m.at(i, j) = ok ? 0.0 : -1e30;
    }
  return m;
}

class MultiHeadAttention {
public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& prefix, std::size_t dim,
                     std::size_t kv_dim, std::size_t heads, Rng& rng)
      : heads_(heads),
        dim_(dim),
        wq_(ps, prefix + ".q", dim, dim, rng),
        wk_(ps, prefix + ".k", kv_dim, dim, rng),
        wv_(ps, prefix + ".v", kv_dim, dim, rng),
        wo_(ps, prefix + ".o", dim, dim, rng) {
    if (dim % heads != 0)
      throw std::invalid_argument("attention: dim not divisible by heads");
  }

  // x: (Lq,dim), kv: (Lk,kv_dim); mask optional additive (Lq,Lk)
  Var operator()(const Var& x, const Var& kv,
                 const Tensor* mask = nullptr) const {
    Var q = wq_(x), k = wk_(kv), v = wv_(kv);
    const std::size_t dh = dim_ / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> head_out;
    head_out.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      Var qh = ag::slice_cols(q, h * dh, dh);
      Var kh = ag::slice_cols(k, h * dh, dh);
      Var vh = ag::slice_cols(v, h * dh, dh);
      Var scores = ag::scale(ag::matmul(qh, ag::transpose2d(kh)), inv);
      if (mask) scores = ag::add(scores, Var::constant(*mask));
      head_out.push_back(ag::matmul(ag::softmax_rows(scores), vh));
    }
    return wo_(ag::concat_cols(head_out));
  }

private:
  std::size_t heads_ = 0, dim_ = 0;
  Linear wq_, wk_, wv_, wo_;
};

// Pre-LN transformer block: self-attention (optional mask), optional
// cross-attention sub-layers, then a GELU MLP.
class TransformerBlock {
public:
  struct Options {
    std::size_t dim = 0;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 0;  // 0 -> 4*dim
    bool self_attention = true;
    std::size_t cross_dims = 0;   // kv width of first cross-attn (0 = none)
    std::size_t cross2_dims = 0;  // kv width of second cross-attn (0 = none)
  };

  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& prefix, Options opt,
                   Rng& rng)
      : opt_(opt) {
    std::size_t hid = opt.mlp_hidden ? opt.mlp_hidden : 4 * opt.dim;
    if (opt.self_attention) {
      ln1_ = LayerNorm(ps, prefix + ".ln1", opt.dim);
      self_ = MultiHeadAttention(ps, prefix + ".self", opt.dim, opt.dim,
                                 opt.heads, rng);
    }
    if (opt.cross_dims) {
      lnc_ = LayerNorm(ps, prefix + ".lnc", opt.dim);
      cross_ = MultiHeadAttention(ps, prefix + ".cross", opt.dim,
                                  opt.cross_dims, opt.heads, rng);
    }
    if (opt.cross2_dims) {
      lnc2_ = LayerNorm(ps, prefix + ".lnc2", opt.dim);
      cross2_ = MultiHeadAttention(ps, prefix + ".cross2", opt.dim,
                                   opt.cross2_dims, opt.heads, rng);
    }
    ln2_ = LayerNorm(ps, prefix + ".ln2", opt.dim);
    fc1_ = Linear(ps, prefix + ".fc1", opt.dim, hid, rng);
    fc2_ = Linear(ps, prefix + ".fc2", hid, opt.dim, rng);
  }

  Var operator()(const Var& x, const Tensor* self_mask = nullptr,
                 const Var* cross_kv = nullptr,
                 const Var* cross2_kv = nullptr) const {
    Var h = x;
    if (opt_.self_attention)
      h = ag::add(h, self_(ln1_(h), ln1_(h), self_mask));
    if (opt_.cross_dims) {
      if (!cross_kv) throw std::invalid_argument("transformer: cross kv missing");
      h = ag::add(h, cross_(lnc_(h), *cross_kv));
    }
    if (opt_.cross2_dims) {
      if (!cross2_kv)
        throw std::invalid_argument("transformer: second cross kv missing");
      h = ag::add(h, cross2_(lnc2_(h), *cross2_kv));
    }
    return ag::add(h, fc2_(ag::gelu(fc1_(ln2_(h)))));
  }

private:
  Options opt_;
  LayerNorm ln1_, lnc_, lnc2_, ln2_;
  MultiHeadAttention self_, cross_, cross2_;
  Linear fc1_, fc2_;
};

class Conv2d {
public:
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& prefix, std::size_t in,
         std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad, Rng& rng)
      : stride_(stride), pad_(pad) {
    std::size_t fan_in = in * kernel * kernel;
    w_ = ps.add(prefix + ".w",
                rng.randn({out, in, kernel, kernel},
                          std::sqrt(2.0 / static_cast<double>(fan_in))));
    b_ = ps.add(prefix + ".b", Tensor({out}));
  }

  Var operator()(const Var& x) const { return ag::conv2d(x, w_, b_, stride_, pad_); }

  Var weight() const { return w_; }

private:
  std::size_t stride_ = 1, pad_ = 0;
  Var w_, b_;
};

// Fixed sinusoidal position table (L, dim).
inline Tensor sinusoid_positions(std::size_t length, std::size_t dim) {
  Tensor t({length, dim});
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                          static_cast<double>(dim));
      t.at(p, 2 * i) = std::sin(p * freq);
      t.at(p, 2 * i + 1) = std::cos(p * freq);
    }
  return t;
}

// Sinusoidal embedding of a diffusion step index, shape (1, dim).
inline Tensor timestep_embedding(std::size_t t, std::size_t dim) {
  Tensor e({1, dim});
  for (std::size_t i = 0; i < dim / 2; ++i) {
    double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                        static_cast<double>(dim));
    e[2 * i] = std::sin(t * freq);
    e[2 * i + 1] = std::cos(t * freq);
  }
  return e;
}

}  // namespace loagen::nn
