#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "loagen/audio/mel.hpp"
#include "loagen/audio/wav.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/optim.hpp"
#include "loagen/model/condition.hpp"

namespace loagen::eval {

using ag::Var;

// cosine of two embeddings with a zero-division floor
inline double clap_score(const Tensor& e_x, const Tensor& e_r,
                         double eps = 1e-8) {
  if (!e_x.same_shape(e_r)) throw ShapeError("clap_score: shape mismatch");
  double dot = 0.0, nx = 0.0, nr = 0.0;
  for (std::size_t i = 0; i < e_x.numel(); ++i) {
    dot += e_x[i] * e_r[i];
    nx += e_x[i] * e_x[i];
    nr += e_r[i] * e_r[i];
  }
  return dot / std::max(std::sqrt(nx) * std::sqrt(nr), eps);
}

inline double clap_score(const audio::Waveform& w, const std::string& caption,
                         const model::ContrastiveEmbedder& embedder,
                         const audio::MelAnalyzer& mel) {
  auto X = mel.analyze(w.samples, w.sample_rate);
  auto a = embedder.embed_audio(X);
  auto t = embedder.embed_text(caption);
  return clap_score(a.features, t.features);
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians fitted to embedding sets (rows = items)

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          t.at(r, c);
  return m;
}

// PSD square root with negative-eigenvalue clamp
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (s + s.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

inline double frechet_distance(const Tensor& set_a, const Tensor& set_b,
                               double reg = 1e-6) {
  if (set_a.rows() == 0 || set_b.rows() == 0)
    throw InputError("frechet_distance: empty embedding set");
  if (set_a.cols() != set_b.cols())
    throw ShapeError("frechet_distance: dimension mismatch");
  const Eigen::Index D = static_cast<Eigen::Index>(set_a.cols());
  auto moments = [&](const Tensor& t) {
    Eigen::MatrixXd X = detail::to_eigen(t);
    Eigen::VectorXd mu = X.colwise().mean();
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(D, D);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      Eigen::VectorXd d = X.row(r).transpose() - mu;
      C += d * d.transpose();
    }
    C /= static_cast<double>(std::max<Eigen::Index>(X.rows() - 1, 1));
    C += reg * Eigen::MatrixXd::Identity(D, D);
    return std::make_pair(mu, C);
  };
  auto [mu_a, ca] = moments(set_a);
  auto [mu_b, cb] = moments(set_b);
  Eigen::MatrixXd ra = detail::psd_sqrt(ca);
  Eigen::MatrixXd inner = detail::psd_sqrt(ra * cb * ra);
  double d2 = (mu_a - mu_b).squaredNorm() +
              (ca + cb).trace() - 2.0 * inner.trace();
  return std::max(d2, 0.0);
}

// ---------------------------------------------------------------------------
// KL between tag distributions, paired by id

inline double kl_softmax(const Tensor& ref_logits, const Tensor& gen_logits) {
  if (!ref_logits.same_shape(gen_logits))
    throw ShapeError("tag_kl: logit shape mismatch");
  auto softmax = [](const Tensor& l) {
    std::vector<double> p(l.numel());
    double mx = l[0];
    for (std::size_t i = 0; i < l.numel(); ++i) mx = std::max(mx, l[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < l.numel(); ++i) z += (p[i] = std::exp(l[i] - mx));
    for (auto& v : p) v /= z;
    return p;
  };
  auto pr = softmax(ref_logits), pg = softmax(gen_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i)
    if (pr[i] > 0.0) kl += pr[i] * std::log(pr[i] / std::max(pg[i], 1e-300));
  return std::max(kl, 0.0);
}

inline double tag_kl(const std::map<std::string, Tensor>& ref_logits,
                     const std::map<std::string, Tensor>& gen_logits) {
  if (ref_logits.empty()) throw InputError("tag_kl: empty reference set");
  if (ref_logits.size() != gen_logits.size())
    throw PairingError("tag_kl: set sizes differ");
  double acc = 0.0;
  for (const auto& [id, ref] : ref_logits) {
    auto it = gen_logits.find(id);
    if (it == gen_logits.end())
      throw PairingError("tag_kl: id '" + id + "' missing from generated set");
    acc += kl_softmax(ref, it->second);
  }
  return acc / static_cast<double>(ref_logits.size());
}

// ---------------------------------------------------------------------------
// multinomial logistic regression (shared by the toy classifier and probes)

inline nn::Linear train_logistic(nn::ParamStore& ps, const std::string& prefix,
                                 const Tensor& features,
                                 const std::vector<std::size_t>& labels,
                                 std::size_t n_classes, Rng& rng,
                                 std::size_t steps = 300, double lr = 0.05) {
  nn::Linear lin(ps, prefix, features.cols(), n_classes, rng);
  optim::AdamW opt(ps, {.lr = lr});
  for (std::size_t i = 0; i < steps; ++i) {
    ps.zero_grad();
    Var loss = ag::cross_entropy_rows(lin(Var::constant(features)), labels);
    ag::backward(loss);
    opt.step();
  }
  return lin;
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.cols(); ++c)
    if (logits.at(row, c) > logits.at(row, best)) best = c;
  return best;
}

// mel -> pooled feature row shared with the contrastive audio tower
inline Tensor mel_features(const audio::MelSpectrogram& X,
                           std::size_t time_chunks = 4) {
  const std::size_t T = X.frames(), F = X.bins(), K = time_chunks;
  Tensor feat({1, K * F}, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t lo = k * T / K, hi = std::max(lo + 1, (k + 1) * T / K);
    hi = std::min(hi, T);
    for (std::size_t t = lo; t < hi; ++t)
      for (std::size_t f = 0; f < F; ++f)
        feat.at(0, k * F + f) += X.values.at(t, f);
    for (std::size_t f = 0; f < F; ++f)
      feat.at(0, k * F + f) /= static_cast<double>(hi - lo);
  }
  return feat;
}

// small closed-set audio tagger over pooled mel features
class ToyClassifier {
public:
  ToyClassifier() = default;

  void train(const std::vector<audio::MelSpectrogram>& mels,
             const std::vector<std::size_t>& labels, std::size_t n_classes,
             Rng& rng, std::size_t steps = 400) {
    if (mels.empty() || mels.size() != labels.size())
      throw InputError("toy classifier: bad training set");
    std::set<std::size_t> distinct(labels.begin(), labels.end());
    if (distinct.size() < 2)
      throw DegenerateCorpusError("toy classifier: need >= 2 classes");
    n_classes_ = n_classes;
    Tensor X({mels.size(), mel_features(mels[0]).cols()});
    for (std::size_t i = 0; i < mels.size(); ++i) {
      Tensor row = mel_features(mels[i]);
      for (std::size_t c = 0; c < row.cols(); ++c) X.at(i, c) = row[c];
    }
    ps_ = nn::ParamStore();
    lin_ = train_logistic(ps_, "cls", X, labels, n_classes, rng, steps);
    trained_ = true;
  }

  bool trained() const { return trained_; }
  std::size_t n_classes() const { return n_classes_; }

  Tensor logits(const audio::MelSpectrogram& X) const {
    if (!trained_) throw StateError("toy classifier: not trained");
    return lin_(Var::constant(mel_features(X))).value();
  }

  std::size_t predict(const audio::MelSpectrogram& X) const {
    return argmax_row(logits(X), 0);
  }

  nn::ParamStore& params() { return ps_; }

private:
  nn::ParamStore ps_;
  nn::Linear lin_;
  std::size_t n_classes_ = 0;
  bool trained_ = false;
};

// ---------------------------------------------------------------------------
// linear probe accuracy with a fixed seeded split

inline double latent_probe(const Tensor& features,
                           const std::vector<std::size_t>& labels,
                           std::uint64_t seed = 13,
                           std::size_t steps = 300) {
  if (features.rows() != labels.size() || features.rows() < 4)
    throw InputError("latent_probe: bad feature set");
  std::set<std::size_t> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2)
    throw DegenerateCorpusError("latent_probe: single class");
  const std::size_t n_classes = *distinct.rbegin() + 1;
  const std::size_t N = features.rows(), D = features.cols();

  Rng rng(seed);
  std::vector<std::size_t> order(N);
  for (std::size_t i = 0; i < N; ++i) order[i] = i;
  for (std::size_t i = N; i > 1; --i)
    std::swap(order[i - 1],
              order[static_cast<std::size_t>(rng.randint(0, i - 1))]);

  const std::size_t n_train = N / 2;
  Tensor Xtr({n_train, D}), Xte({N - n_train, D});
  std::vector<std::size_t> ytr, yte;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t src = order[i];
    if (i < n_train) {
      for (std::size_t d = 0; d < D; ++d) Xtr.at(i, d) = features.at(src, d);
      ytr.push_back(labels[src]);
    } else {
      for (std::size_t d = 0; d < D; ++d)
        Xte.at(i - n_train, d) = features.at(src, d);
      yte.push_back(labels[src]);
    }
  }
  if (std::set<std::size_t>(ytr.begin(), ytr.end()).size() < 2)
    throw DegenerateCorpusError("latent_probe: degenerate train split");

  nn::ParamStore ps;
  Rng init(seed + 1);
  nn::Linear lin = train_logistic(ps, "probe", Xtr, ytr, n_classes, init, steps);
  Tensor logit = lin(Var::constant(Xte)).value();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < yte.size(); ++r)
    if (argmax_row(logit, r) == yte[r]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(yte.size());
}

}  // namespace loagen::eval
