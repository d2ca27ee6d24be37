#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "loagen/audio/frontend.hpp"
#include "loagen/core/checkpoint.hpp"
#include "loagen/core/config.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/optim.hpp"
#include "loagen/data/toy_corpus.hpp"
#include "loagen/eval/metrics.hpp"
#include "loagen/model/acoustic_vae.hpp"
#include "loagen/model/condition.hpp"
#include "loagen/model/diffusion.hpp"
#include "loagen/model/samplers.hpp"
#include "loagen/model/semantic_encoder.hpp"
#include "loagen/model/translator.hpp"

namespace loagen::pipeline {

using ag::Var;

struct SwitcherConfig {
  double p_gt = 0.25;
  double p_pred = 0.75;

  void validate() const {
    if (p_gt < 0.0 || p_gt > 1.0 || p_pred < 0.0 || p_pred > 1.0 ||
        std::abs(p_gt + p_pred - 1.0) > 1e-9)
      throw ConfigError("switcher: p_gt/p_pred must be probabilities summing "
                        "to 1");
  }
};

struct TrainConfig {
  double lr = 1e-4;
  double vae_lr = 1e-3;
  double ldm_lr = 3e-4;
  std::size_t warmup = 500;  // toy analog of the 10000-step warmup; capped
                             // at steps/5 so short runs still leave warmup
  std::size_t mae_steps = 400;
  std::size_t vae_steps = 600;
  std::size_t embedder_steps = 250;
  std::size_t ldm_steps = 900;
  std::size_t translator_steps = 700;
  std::size_t joint_steps = 300;
  std::size_t embedder_batch = 8;
};

// the toy-profile stack configuration; all widths are consistent by default
struct StackConfig {
  audio::MelConfig mel;        // 16 kHz, hop 160, 128 mels
  double clip_seconds = 2.56;  // -> 256 mel frames
  model::MaeConfig mae;        // D=192, depth 4, P=16
  model::VaeConfig vae;        // d=3, C_z=8
  model::EmbedderConfig emb;   // D_c=64
  model::TextEncoderConfig text;    // D_t=128
  model::PhonemeEncoderConfig phon;
  model::TranslatorConfig tr;  // width 192 = D0
  model::DenoiserConfig ldm;
  std::size_t ldm_T = 1000;
  double p_drop = 0.1;
  double guidance = 3.5;
  std::size_t ddim_steps = 25;
  double eta = 0.0;
  std::size_t griffin_lim_iters = 32;
  TrainConfig train;
  SwitcherConfig switcher;
  bool use_text_cross_attention = true;   // ablation switch
  bool use_global_embedder = true;        // ablation switch
  bool use_text_sequence = true;          // ablation switch
  bool tts_mode = false;  // condition = [global, phonemes], no text x-attn

  std::size_t mel_frames() const {
    return static_cast<std::size_t>(
        std::llround(clip_seconds * mel.sample_rate)) / mel.hop;
  }
  std::size_t grid_t() const { return mel_frames() / mae.patch_size; }
  std::size_t grid_f() const { return mel.n_mels / mae.patch_size; }
  std::size_t loa_length(std::size_t lambda) const {
    return grid_t() * grid_f() / (lambda * lambda);
  }
};

// toy defaults sized so every stage runs on a desk machine
inline StackConfig toy_config() {
  StackConfig c;
  c.mae.embed_dim = 192;
  c.mae.depth = 4;
  c.mae.heads = 4;
  c.mae.avg_layers = 4;
  c.tr.width = 192;
  c.tr.depth = 4;
  c.tr.heads = 4;
  c.tr.loa_dim = 192;
  c.tr.lambda = 4;
  c.tr.target_length = c.loa_length(4);  // 8 on the 16x8 toy grid
  c.ldm.latent_channels = c.vae.latent_channels;
  c.ldm.base_channels = 32;
  c.ldm.loa_dim = 192;
  c.ldm.text_dim = c.text.dim;
  return c;
}

// a reduced profile for quick smoke runs and tests
inline StackConfig mini_config() {
  StackConfig c = toy_config();
  c.clip_seconds = 1.28;  // 128 mel frames -> 8x8 patch grid
  c.mae.embed_dim = 64;
  c.mae.depth = 2;
  c.mae.decoder_dim = 48;
  c.mae.decoder_depth = 1;
  c.mae.avg_layers = 2;
  c.vae.base_channels = 8;
  c.emb.hidden = 64;
  c.text.dim = 48;
  c.text.depth = 1;
  c.phon.dim = 32;
  c.phon.depth = 1;
  c.tr.width = 64;
  c.tr.depth = 2;
  c.tr.loa_dim = 64;
  c.tr.lambda = 2;
  c.tr.target_length = c.loa_length(2);  // 16 on the 8x8 grid
  c.ldm.base_channels = 12;
  c.ldm.n_trans = 1;
  c.ldm.loa_dim = 64;
  c.ldm.text_dim = c.text.dim;
  c.ldm_T = 400;
  c.ddim_steps = 20;
  return c;
}

// ---------------------------------------------------------------------------
// the full model stack with one parameter store per checkpointable component

class Stack {
public:
  Stack(StackConfig cfg, model::TextVocab vocab,
        std::vector<std::string> phoneme_symbols, std::uint64_t seed)
      : cfg_(std::move(cfg)), mel_(cfg_.mel) {
    if (!cfg_.use_text_cross_attention || cfg_.tts_mode) cfg_.ldm.text_dim = 0;
    Rng rng(seed);
    mae = std::make_unique<model::SemanticEncoder>(mae_ps, cfg_.mae, rng);
    vae = std::make_unique<model::AcousticVae>(vae_ps, cfg_.vae, rng);
    // the VAE trains on standardized log-mels and diffusion on standardized
    // latents; both sets of moments ride along in the VAE checkpoint
    x_mean_ = vae_ps.add("vae.x_mean", Tensor({1}, 0.0));
    x_std_ = vae_ps.add("vae.x_std", Tensor({1}, 1.0));
    z_mean_ = vae_ps.add("vae.z_mean", Tensor({1}, 0.0));
    z_std_ = vae_ps.add("vae.z_std", Tensor({1}, 1.0));
    clap = std::make_unique<model::ContrastiveEmbedder>(clap_ps, cfg_.emb,
                                                        vocab, rng);
    textenc = std::make_unique<model::TextSequenceEncoder>(cond_ps, cfg_.text,
                                                           vocab, rng);
    phon = std::make_unique<model::PhonemeEncoder>(
        cond_ps, cfg_.phon, std::move(phoneme_symbols), rng);
    assembler = std::make_unique<model::ConditionAssembler>(
        cond_ps, cfg_.tr.width,
        std::map<model::Modality, std::size_t>{
            {model::Modality::kGlobalText, cfg_.emb.dim},
            {model::Modality::kGlobalAudio, cfg_.emb.dim},
            {model::Modality::kTextSequence, cfg_.text.dim},
            {model::Modality::kPhoneme, cfg_.phon.dim}},
        rng);
    tr = std::make_unique<model::LoaTranslator>(tr_ps, cfg_.tr, rng);
    unet = std::make_unique<model::Denoiser>(ldm_ps, cfg_.ldm, rng);
    sched = model::make_schedule(cfg_.ldm_T, "linear");
  }

  const StackConfig& config() const { return cfg_; }
  const audio::MelAnalyzer& mel_analyzer() const { return mel_; }

  audio::MelSpectrogram mel_of_wav(const std::filesystem::path& path) {
    auto it = mel_cache_.find(path.string());
    if (it != mel_cache_.end()) return it->second;
    auto w = audio::load_and_resample(path.string(), cfg_.mel.sample_rate);
    w = audio::pad_to_duration(w, cfg_.clip_seconds);
    auto X = mel_.analyze(w.samples, w.sample_rate);
    // frame count is ceil(N/hop); trim to the configured grid
    if (X.values.rows() > mel_frames()) {
      Tensor trimmed({mel_frames(), X.values.cols()});
      for (std::size_t t = 0; t < mel_frames(); ++t)
        for (std::size_t f = 0; f < X.values.cols(); ++f)
          trimmed.at(t, f) = X.values.at(t, f);
      X.values = std::move(trimmed);
    }
    mel_cache_[path.string()] = X;
    return X;
  }

  std::size_t mel_frames() const { return cfg_.mel_frames(); }

  double mel_mean() const { return x_mean_.value()[0]; }
  double mel_std() const { return x_std_.value()[0]; }
  void set_mel_moments(double mean, double std) {
    if (!(std > 0.0)) throw ConfigError("mel moments: std must be > 0");
    x_mean_.value_mut()[0] = mean;
    x_std_.value_mut()[0] = std;
  }
  double latent_mean() const { return z_mean_.value()[0]; }
  double latent_std() const { return z_std_.value()[0]; }
  void set_latent_moments(double mean, double std) {
    if (!(std > 0.0)) throw ConfigError("latent moments: std must be > 0");
    z_mean_.value_mut()[0] = mean;
    z_std_.value_mut()[0] = std;
  }

  audio::MelSpectrogram standardize_mel(const audio::MelSpectrogram& X) const {
    audio::MelSpectrogram out = X;
    const double m = mel_mean(), s = mel_std();
    for (std::size_t i = 0; i < out.values.numel(); ++i)
      out.values[i] = (out.values[i] - m) / s;
    return out;
  }

  // VAE posterior over the standardized mel
  model::AcousticLatent encode_acoustic(const audio::MelSpectrogram& X,
                                        Rng& rng) const {
    return vae->encode(standardize_mel(X), rng);
  }

  // standardized latent sample for diffusion training
  Tensor encode_latent(const audio::MelSpectrogram& X, Rng& rng) const {
    Tensor z = encode_acoustic(X, rng).sample;
    const double m = latent_mean(), s = latent_std();
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = (z[i] - m) / s;
    return z;
  }

  audio::MelSpectrogram decode_latent(const Tensor& z_std_space) const {
    Tensor z = z_std_space;
    const double zm = latent_mean(), zs = latent_std();
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = z[i] * zs + zm;
    auto X = vae->decode(z, cfg_.mel.hop, cfg_.mel.sample_rate);
    const double m = mel_mean(), s = mel_std();
    for (std::size_t i = 0; i < X.values.numel(); ++i)
      X.values[i] = X.values[i] * s + m;
    return X;
  }

  std::vector<std::size_t> latent_shape() const {
    const std::size_t f = std::size_t{1} << cfg_.vae.depth;
    return {cfg_.vae.latent_channels, mel_frames() / f, cfg_.mel.n_mels / f};
  }

  model::LoaSequence loa_of(const audio::MelSpectrogram& X,
                            std::size_t lambda) const {
    auto grid = mae->encode(X);
    return model::pool_loa(grid, lambda);
  }

  // condition segments per the modality configuration (TTA vs TTS)
  std::vector<model::ConditionSegment> condition_segments(
      const data::ManifestRecord& rec) const {
    std::vector<model::ConditionSegment> segs;
    if (cfg_.tts_mode) {
      if (cfg_.use_global_embedder && rec.caption)
        segs.push_back(clap->embed_text(*rec.caption));
      if (!rec.phonemes)
        throw InputError("generate: TTS mode needs a phoneme sequence");
      std::vector<std::string> syms;
      std::istringstream ss(*rec.phonemes);
      std::string s;
      while (ss >> s) syms.push_back(s);
      segs.push_back(phon->encode(syms));
    } else {
      if (!rec.caption) throw InputError("condition: record lacks a caption");
      if (cfg_.use_global_embedder)
        segs.push_back(clap->embed_text(*rec.caption));
      if (cfg_.use_text_sequence) segs.push_back(textenc->encode(*rec.caption));
    }
    if (segs.empty())
      throw ConfigError("condition: all encoders disabled by ablation flags");
    return segs;
  }

  StackConfig cfg_;
  audio::MelAnalyzer mel_;
  nn::ParamStore mae_ps, vae_ps, clap_ps, cond_ps, tr_ps, ldm_ps;
  std::unique_ptr<model::SemanticEncoder> mae;
  std::unique_ptr<model::AcousticVae> vae;
  std::unique_ptr<model::ContrastiveEmbedder> clap;
  std::unique_ptr<model::TextSequenceEncoder> textenc;
  std::unique_ptr<model::PhonemeEncoder> phon;
  std::unique_ptr<model::ConditionAssembler> assembler;
  std::unique_ptr<model::LoaTranslator> tr;
  std::unique_ptr<model::Denoiser> unet;
  model::NoiseSchedule sched;

private:
  Var x_mean_, x_std_, z_mean_, z_std_;
  std::unordered_map<std::string, audio::MelSpectrogram> mel_cache_;
};

struct StageResult {
  std::vector<double> losses;
  std::map<std::string, double> metrics;

  double first_loss() const { return losses.empty() ? 0.0 : losses.front(); }
  double last_loss() const { return losses.empty() ? 0.0 : losses.back(); }
};

// ---------------------------------------------------------------------------
// stage 0a: masked-autoencoder pretraining (audio only)

inline StageResult train_mae(Stack& st, const data::Dataset& ds,
                             const std::vector<data::AudioOnlyRecord>& recs,
                             Rng& rng, std::size_t steps = 0) {
  if (recs.empty()) throw DependencyError("train-mae: empty corpus");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.mae_steps;
  optim::AdamW opt(st.mae_ps, {.lr = tc.lr,
                               .warmup_steps = std::min(tc.warmup, steps / 5)});
  StageResult out;
  const std::size_t n_patches = st.config().grid_t() * st.config().grid_f();
  for (std::size_t i = 0; i < steps; ++i) {
    const auto& r = recs[static_cast<std::size_t>(
        rng.randint(0, static_cast<std::int64_t>(recs.size()) - 1))];
    auto X = st.mel_of_wav(ds.root / r.wav_path);
    auto mask =
        model::MaskSpec::random(n_patches, st.config().mae.mask_ratio, rng);
    st.mae_ps.zero_grad();
    Var loss = st.mae->pretrain_loss(X, mask);
    out.losses.push_back(loss.scalar());
    ag::backward(loss);
    opt.step();
  }
  st.mae->set_trained(true);
  return out;
}

// stage 0b: VAE training (audio only)

inline StageResult train_vae(Stack& st, const data::Dataset& ds,
                             const std::vector<data::AudioOnlyRecord>& recs,
                             Rng& rng, std::size_t steps = 0) {
  if (recs.empty()) throw DependencyError("train-vae: empty corpus");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.vae_steps;

  // corpus log-mel moments: the VAE sees standardized inputs
  {
    double acc = 0.0, acc2 = 0.0;
    std::size_t n = 0;
    for (const auto& r : recs) {
      auto X = st.mel_of_wav(ds.root / r.wav_path);
      for (std::size_t i = 0; i < X.values.numel(); ++i) {
        acc += X.values[i];
        acc2 += X.values[i] * X.values[i];
        ++n;
      }
    }
    double mean = acc / static_cast<double>(n);
    double var = std::max(acc2 / static_cast<double>(n) - mean * mean, 1e-12);
    st.set_mel_moments(mean, std::sqrt(var));
  }

  optim::AdamW opt(st.vae_ps, {.lr = tc.vae_lr,
                               .warmup_steps = std::min(tc.warmup, steps / 5)});
  StageResult out;
  for (std::size_t i = 0; i < steps; ++i) {
    const auto& r = recs[static_cast<std::size_t>(
        rng.randint(0, static_cast<std::int64_t>(recs.size()) - 1))];
    auto X = st.standardize_mel(st.mel_of_wav(ds.root / r.wav_path));
    st.vae_ps.zero_grad();
    auto L = st.vae->loss(X, rng, st.vae->kl_weight(i));
    out.losses.push_back(L.total.scalar());
    out.metrics["recon"] = L.recon.scalar();
    ag::backward(L.total);
    opt.step();
  }

  // estimate the global latent moments used to standardize diffusion inputs
  double acc = 0.0, acc2 = 0.0;
  std::size_t n = 0;
  for (const auto& r : recs) {
    auto lat = st.encode_acoustic(st.mel_of_wav(ds.root / r.wav_path), rng);
    for (std::size_t i = 0; i < lat.mean.numel(); ++i) {
      // second moment of mu + exp(lv/2) eps without sampling noise
      acc += lat.mean[i];
      acc2 += lat.mean[i] * lat.mean[i] + std::exp(lat.log_variance[i]);
      ++n;
    }
  }
  double mean = acc / static_cast<double>(n);
  double var = std::max(acc2 / static_cast<double>(n) - mean * mean, 1e-12);
  st.set_latent_moments(mean, std::sqrt(var));
  out.metrics["latent_mean"] = mean;
  out.metrics["latent_std"] = std::sqrt(var);
  return out;
}

// stage 0c: contrastive embedder training (paired data)

inline StageResult train_embedder(Stack& st, const data::Dataset& ds,
                                  Rng& rng, std::size_t steps = 0) {
  auto paired = ds.paired();
  if (paired.size() < 2)
    throw DependencyError("train-embedder: need a paired corpus");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.embedder_steps;
  optim::AdamW opt(st.clap_ps, {.lr = 10.0 * tc.lr, .warmup_steps = 0});
  StageResult out;
  for (std::size_t i = 0; i < steps; ++i) {
    std::vector<audio::MelSpectrogram> mels;
    std::vector<std::string> caps;
    for (std::size_t b = 0; b < tc.embedder_batch; ++b) {
      const auto& r = paired[static_cast<std::size_t>(
          rng.randint(0, static_cast<std::int64_t>(paired.size()) - 1))];
      mels.push_back(st.mel_of_wav(ds.root / r.wav_path));
      caps.push_back(*r.caption);
    }
    bool distinct = false;
    for (const auto& c : caps)
      if (c != caps[0]) distinct = true;
    if (!distinct) continue;  // resample degenerate batches
    st.clap_ps.zero_grad();
    Var loss = st.clap->contrastive_loss(mels, caps);
    out.losses.push_back(loss.scalar());
    ag::backward(loss);
    opt.step();
  }
  st.clap->set_trained(true);
  return out;
}

// ---------------------------------------------------------------------------
// stage 1: self-supervised LDM pretraining; conditions on ground-truth LOA
// with lambda drawn uniformly from {1,2,4,8}; consumes NO captions (the
// record type has none)

inline StageResult pretrain_ldm_ssl(Stack& st, const data::Dataset& ds,
                                    const std::vector<data::AudioOnlyRecord>& recs,
                                    Rng& rng, std::size_t steps = 0,
                                    std::map<std::size_t, std::size_t>*
                                        lambda_histogram = nullptr) {
  if (recs.empty()) throw DependencyError("pretrain-ldm: empty corpus");
  if (!st.mae->trained())
    throw DependencyError("pretrain-ldm: semantic encoder checkpoint missing");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.ldm_steps;
  static const std::size_t kLambdas[4] = {1, 2, 4, 8};
  optim::AdamW opt(st.ldm_ps, {.lr = tc.ldm_lr,
                               .warmup_steps = std::min(tc.warmup, steps / 5)});
  StageResult out;
  for (std::size_t i = 0; i < steps; ++i) {
    const auto& r = recs[static_cast<std::size_t>(
        rng.randint(0, static_cast<std::int64_t>(recs.size()) - 1))];
    auto X = st.mel_of_wav(ds.root / r.wav_path);
    std::size_t lambda = kLambdas[rng.randint(0, 3)];
    if (lambda_histogram) ++(*lambda_histogram)[lambda];
    model::DenoiserConditioning cond;
    cond.loa = st.loa_of(X, lambda);
    Tensor z0 = st.encode_latent(X, rng);
    st.ldm_ps.zero_grad();
    Var loss = st.unet->ldm_loss(z0, cond, st.sched, rng, st.config().p_drop);
    out.losses.push_back(loss.scalar());
    ag::backward(loss);
    opt.step();
  }
  return out;
}

// ---------------------------------------------------------------------------
// stage 2: translator training on paired data (semantic encoder frozen)

inline StageResult train_translator(Stack& st, const data::Dataset& ds,
                                    Rng& rng, std::size_t steps = 0) {
  auto paired = ds.paired();
  if (paired.empty())
    throw DependencyError("train-translator: corpus lacks captions");
  if (!st.mae->trained())
    throw DependencyError("train-translator: semantic encoder missing");
  if (!st.clap->trained())
    throw DependencyError("train-translator: contrastive embedder missing");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.translator_steps;
  const std::size_t lambda = st.config().tr.lambda;

  // corpus statistics for target standardization
  std::vector<model::LoaSequence> targets;
  for (const auto& r : paired)
    targets.push_back(st.loa_of(st.mel_of_wav(ds.root / r.wav_path), lambda));
  st.tr->set_stats(model::TargetStats::compute(targets));

  optim::AdamW opt_tr(st.tr_ps, {.lr = tc.lr,
                                 .warmup_steps = std::min(tc.warmup, steps / 5)});
  optim::AdamW opt_cond(
      st.cond_ps, {.lr = tc.lr, .warmup_steps = std::min(tc.warmup, steps / 5)});
  StageResult out;
  for (std::size_t i = 0; i < steps; ++i) {
    std::size_t k = static_cast<std::size_t>(
        rng.randint(0, static_cast<std::int64_t>(paired.size()) - 1));
    Var cond = st.assembler->assemble_var(st.condition_segments(paired[k]));
    st.tr_ps.zero_grad();
    st.cond_ps.zero_grad();
    Var loss = st.tr->loss(cond, targets[k]);
    out.losses.push_back(loss.scalar());
    ag::backward(loss);
    opt_tr.step();
    opt_cond.step();
  }
  st.tr->set_trained(true);
  return out;
}

// ---------------------------------------------------------------------------
// stage 3: joint finetuning with the probabilistic switcher

struct SwitcherCounts {
  std::size_t gt = 0;
  std::size_t pred = 0;
};

inline StageResult joint_finetune(Stack& st, const data::Dataset& ds,
                                  const SwitcherConfig& sw, Rng& rng,
                                  std::size_t steps = 0,
                                  SwitcherCounts* counts = nullptr,
                                  bool full_backprop = false) {
  sw.validate();
  auto paired = ds.paired();
  if (paired.empty()) throw DependencyError("finetune-joint: corpus lacks captions");
  if (!st.mae->trained() || !st.clap->trained() || !st.tr->trained())
    throw DependencyError("finetune-joint: stage checkpoints missing");
  const auto& tc = st.config().train;
  if (steps == 0) steps = tc.joint_steps;
  const std::size_t lambda = st.config().tr.lambda;

  optim::AdamW opt_tr(st.tr_ps, {.lr = tc.lr, .warmup_steps = 0});
  optim::AdamW opt_cond(st.cond_ps, {.lr = tc.lr, .warmup_steps = 0});
  optim::AdamW opt_ldm(st.ldm_ps, {.lr = tc.ldm_lr, .warmup_steps = 0});
  StageResult out;
  for (std::size_t i = 0; i < steps; ++i) {
    const auto& r = paired[static_cast<std::size_t>(
        rng.randint(0, static_cast<std::int64_t>(paired.size()) - 1))];
    auto X = st.mel_of_wav(ds.root / r.wav_path);
    auto gt_loa = st.loa_of(X, lambda);
    Var cond = st.assembler->assemble_var(st.condition_segments(r));

    st.tr_ps.zero_grad();
    st.cond_ps.zero_grad();
    st.ldm_ps.zero_grad();

    Var tr_loss = st.tr->loss(cond, gt_loa);

    model::DenoiserConditioning dcond;
    if (st.config().ldm.text_dim > 0 && r.caption)
      dcond.text_seq = st.textenc->encode(*r.caption).features;
    bool use_gt = rng.bernoulli(sw.p_gt);
    if (counts) (use_gt ? counts->gt : counts->pred) += 1;
    Var ldm_loss;
    Tensor z0 = st.encode_latent(X, rng);
    if (use_gt) {
      dcond.loa = gt_loa;
      ldm_loss = st.unet->ldm_loss(z0, dcond, st.sched, rng,
                                   st.config().p_drop);
    } else if (full_backprop) {
      // teacher-forced predicted sequence with the graph kept alive, so LDM
      // gradients reach the translator (ablation path)
      Var pred = st.tr->predict_teacher_var(cond, gt_loa);
      dcond.loa.lambda = lambda;
      dcond.loa.vectors = pred.value();
      ldm_loss = st.unet->ldm_loss(z0, dcond, st.sched, rng,
                                   st.config().p_drop, nullptr, &pred);
    } else {
      // default: translator rollout, detached from the translator's graph
      dcond.loa = st.tr->generate(cond, st.config().tr.target_length);
      ldm_loss = st.unet->ldm_loss(z0, dcond, st.sched, rng,
                                   st.config().p_drop);
    }

    Var total = ag::add(tr_loss, ldm_loss);
    out.losses.push_back(total.scalar());
    ag::backward(total);
    opt_tr.step();
    opt_cond.step();
    opt_ldm.step();
  }
  return out;
}

// ---------------------------------------------------------------------------
// inference: caption (or phonemes) -> waveform

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::size_t steps = 0;       // 0 -> config default
  double eta = -1.0;           // <0 -> config default
  double guidance = -1.0;      // <0 -> config default
};

struct GenerateOutput {
  audio::Waveform waveform;
  audio::MelSpectrogram mel;
  model::LoaSequence loa;
};

inline GenerateOutput generate(Stack& st, const data::ManifestRecord& request,
                               const GenerateOptions& opt = {}) {
  if (!st.mae->trained() || !st.clap->trained() || !st.tr->trained())
    throw DependencyError("generate: missing checkpoints");
  const auto& cfg = st.config();
  std::size_t steps = opt.steps ? opt.steps : cfg.ddim_steps;
  double eta = opt.eta >= 0.0 ? opt.eta : cfg.eta;
  double guidance = opt.guidance >= 0.0 ? opt.guidance : cfg.guidance;

  Rng rng(opt.seed);
  auto cond_bundle = st.assembler->assemble(st.condition_segments(request));
  GenerateOutput out;
  out.loa = st.tr->generate(cond_bundle, cfg.tr.target_length);

  model::DenoiserConditioning dcond;
  dcond.loa = out.loa;
  if (cfg.ldm.text_dim > 0 && request.caption)
    dcond.text_seq = st.textenc->encode(*request.caption).features;
  auto eps_fn = model::guided_eps(*st.unet, dcond, guidance);
  Tensor z = model::ddim_sample(eps_fn, st.sched, steps, eta,
                                st.latent_shape(), rng);
  out.mel = st.decode_latent(z);
  out.waveform.sample_rate = cfg.mel.sample_rate;
  out.waveform.samples =
      st.mel_analyzer().invert(out.mel, cfg.griffin_lim_iters);
  out.waveform = audio::peak_normalize(out.waveform);
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint plumbing for the whole stack

inline std::string stack_config_hash(const StackConfig& cfg) {
  // stable digest over the knobs that shape parameter layouts
  nlohmann::json j = {
      {"mae", {cfg.mae.patch_size, cfg.mae.embed_dim, cfg.mae.depth}},
      {"vae", {cfg.vae.depth, cfg.vae.base_channels, cfg.vae.latent_channels}},
      {"emb", {cfg.emb.dim, cfg.emb.hidden}},
      {"text", {cfg.text.dim, cfg.text.depth}},
      {"tr", {cfg.tr.width, cfg.tr.depth, cfg.tr.lambda, cfg.tr.target_length}},
      {"ldm", {cfg.ldm.base_channels, cfg.ldm.n_trans, cfg.ldm.text_dim}},
      {"T", cfg.ldm_T},
      {"clip", cfg.clip_seconds}};
  Config c(j);
  return c.hash();
}

inline void save_stack(const Stack& st, const std::string& dir,
                       std::uint64_t step = 0) {
  const std::string h = stack_config_hash(st.config());
  auto put = [&](const nn::ParamStore& ps, const std::string& stem,
                 double trained) {
    ckpt::Manifest m;
    m.stage = stem;
    m.config_hash = h;
    m.step = step;
    m.metrics["trained"] = trained;
    ckpt::save(ps, m, dir, stem);
  };
  put(st.mae_ps, "mae", st.mae->trained() ? 1.0 : 0.0);
  put(st.vae_ps, "vae", 1.0);
  put(st.clap_ps, "clap", st.clap->trained() ? 1.0 : 0.0);
  put(st.cond_ps, "cond", 1.0);
  put(st.tr_ps, "translator", st.tr->trained() ? 1.0 : 0.0);
  put(st.ldm_ps, "ldm", 1.0);
}

inline void load_stack(Stack& st, const std::string& dir) {
  const std::string h = stack_config_hash(st.config());
  auto pull = [&](nn::ParamStore& ps, const std::string& stem) {
    ckpt::Manifest m = ckpt::load(ps, dir, stem);
    if (m.config_hash != h)
      throw ConfigError("load_stack: checkpoint '" + stem +
                        "' was produced by a different configuration");
    return m;
  };
  st.mae->set_trained(pull(st.mae_ps, "mae").metrics.at("trained") > 0.5);
  pull(st.vae_ps, "vae");
  st.clap->set_trained(pull(st.clap_ps, "clap").metrics.at("trained") > 0.5);
  pull(st.cond_ps, "cond");
  st.tr->set_trained(pull(st.tr_ps, "translator").metrics.at("trained") > 0.5);
  st.tr->refresh_stats();
  pull(st.ldm_ps, "ldm");
}

}  // namespace loagen::pipeline
