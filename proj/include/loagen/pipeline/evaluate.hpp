#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "loagen/eval/metrics.hpp"
#include "loagen/eval/plots.hpp"
#include "loagen/pipeline/stages.hpp"

namespace loagen::pipeline {

struct EvalConfig {
  std::size_t n_generations = 50;
  std::uint64_t seed = 1000;
  double guidance = -1.0;          // <0 -> stack default
  std::string plot_dir;            // empty = no plots
  bool with_unconditional = true;  // also score conditioning-dropped samples
};

struct EvalReport {
  std::map<std::string, double> metrics;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [k, v] : metrics) j[k] = v;
    return j;
  }
};

// generation with the denoiser conditioning dropped (translator output and
// text stream replaced by the learned null embeddings)
inline GenerateOutput generate_unconditional(Stack& st,
                                             const data::ManifestRecord& req,
                                             const GenerateOptions& opt) {
  if (!st.mae->trained() || !st.clap->trained() || !st.tr->trained())
    throw DependencyError("generate: missing checkpoints");
  const auto& cfg = st.config();
  Rng rng(opt.seed);
  auto cond = st.assembler->assemble(st.condition_segments(req));
  GenerateOutput out;
  out.loa = st.tr->generate(cond, cfg.tr.target_length);
  model::DenoiserConditioning dcond;
  dcond.loa = out.loa;
  dcond.drop_loa = true;
  dcond.drop_text = true;
  auto eps_fn = model::guided_eps(*st.unet, dcond, 1.0);
  std::size_t steps = opt.steps ? opt.steps : cfg.ddim_steps;
  Tensor z = model::ddim_sample(eps_fn, st.sched, steps,
                                opt.eta >= 0.0 ? opt.eta : cfg.eta,
                                st.latent_shape(), rng);
  out.mel = st.decode_latent(z);
  out.waveform.sample_rate = cfg.mel.sample_rate;
  out.waveform.samples =
      st.mel_analyzer().invert(out.mel, cfg.griffin_lim_iters);
  out.waveform = audio::peak_normalize(out.waveform);
  return out;
}

// corpus-level evaluation: Frechet distance and mean cosine in the
// contrastive embedding space, paired tag KL through a closed-set tagger
// trained on the reference clips, and linear probes on both latent spaces
inline EvalReport evaluate(Stack& st, const data::Dataset& ds,
                           const EvalConfig& ec = {}) {
  auto paired = ds.paired();
  if (paired.empty()) throw DependencyError("evaluate: corpus lacks captions");
  if (!st.clap->trained())
    throw DependencyError("evaluate: contrastive embedder missing");

  // reference embeddings + tagger training set (single-event clips only)
  std::vector<audio::MelSpectrogram> cls_mels;
  std::vector<std::size_t> cls_labels;
  std::vector<Tensor> ref_rows;
  std::map<int, data::ManifestRecord> exemplar;
  for (const auto& r : paired) {
    auto X = st.mel_of_wav(ds.root / r.wav_path);
    ref_rows.push_back(st.clap->embed_audio(X).features);
    int c = data::caption_class(*r.caption);
    if (c >= 0) {
      cls_mels.push_back(X);
      cls_labels.push_back(static_cast<std::size_t>(c));
      exemplar.emplace(c, r);
    }
  }
  eval::ToyClassifier tagger;
  Rng tag_rng(ec.seed);
  tagger.train(cls_mels, cls_labels, data::n_toy_classes(), tag_rng);

  const std::size_t K = data::n_toy_classes();
  std::vector<Tensor> gen_rows;
  std::map<std::string, Tensor> ref_logits, gen_logits, gen_logits_uncond;
  double clap_acc = 0.0;
  std::size_t tag_hits = 0;
  std::vector<Tensor> sample_panels;
  for (std::size_t i = 0; i < ec.n_generations; ++i) {
    const int c = static_cast<int>(i % K);
    const auto& req = exemplar.at(c);
    GenerateOptions opt;
    opt.seed = ec.seed + i;
    opt.guidance = ec.guidance;
    auto g = generate(st, req, opt);
    gen_rows.push_back(st.clap->embed_audio(g.mel).features);
    clap_acc += eval::clap_score(gen_rows.back(),
                                 st.clap->embed_text(*req.caption).features);
    if (tagger.predict(g.mel) == static_cast<std::size_t>(c)) ++tag_hits;

    const std::string id = "gen_" + std::to_string(i);
    ref_logits[id] =
        tagger.logits(st.mel_of_wav(ds.root / req.wav_path));
    gen_logits[id] = tagger.logits(g.mel);
    if (ec.with_unconditional) {
      auto u = generate_unconditional(st, req, opt);
      gen_logits_uncond[id] = tagger.logits(u.mel);
    }
    if (sample_panels.size() < K) sample_panels.push_back(g.mel.values);
  }

  // latent probes: semantic (pooled LOA mean) vs acoustic (VAE mean, pooled)
  Tensor sem_feats({cls_mels.size(), st.config().mae.embed_dim});
  auto lat_shape = st.latent_shape();
  Tensor vae_feats({cls_mels.size(), lat_shape[0]});
  Rng probe_rng(ec.seed + 7);
  for (std::size_t i = 0; i < cls_mels.size(); ++i) {
    auto loa = st.loa_of(cls_mels[i], 8);
    for (std::size_t d = 0; d < sem_feats.cols(); ++d) {
      double acc = 0.0;
      for (std::size_t r = 0; r < loa.length(); ++r)
        acc += loa.vectors.at(r, d);
      sem_feats.at(i, d) = acc / static_cast<double>(loa.length());
    }
    auto lat = st.encode_acoustic(cls_mels[i], probe_rng);
    const std::size_t spatial = lat_shape[1] * lat_shape[2];
    for (std::size_t ch = 0; ch < lat_shape[0]; ++ch) {
      double acc = 0.0;
      for (std::size_t s = 0; s < spatial; ++s)
        acc += lat.mean[ch * spatial + s];
      vae_feats.at(i, ch) = acc / static_cast<double>(spatial);
    }
  }

  Tensor ref_set({ref_rows.size(), ref_rows[0].cols()});
  for (std::size_t i = 0; i < ref_rows.size(); ++i)
    for (std::size_t d = 0; d < ref_set.cols(); ++d)
      ref_set.at(i, d) = ref_rows[i][d];
  Tensor gen_set({gen_rows.size(), gen_rows[0].cols()});
  for (std::size_t i = 0; i < gen_rows.size(); ++i)
    for (std::size_t d = 0; d < gen_set.cols(); ++d)
      gen_set.at(i, d) = gen_rows[i][d];

  EvalReport rep;
  rep.metrics["n_generations"] = static_cast<double>(ec.n_generations);
  rep.metrics["frechet"] = eval::frechet_distance(ref_set, gen_set);
  rep.metrics["clap_mean"] =
      clap_acc / static_cast<double>(ec.n_generations);
  rep.metrics["tag_kl"] = eval::tag_kl(ref_logits, gen_logits);
  if (ec.with_unconditional)
    rep.metrics["tag_kl_uncond"] =
        eval::tag_kl(ref_logits, gen_logits_uncond);
  rep.metrics["tag_accuracy"] =
      static_cast<double>(tag_hits) / static_cast<double>(ec.n_generations);
  rep.metrics["probe_semantic"] = eval::latent_probe(sem_feats, cls_labels);
  rep.metrics["probe_acoustic"] = eval::latent_probe(vae_feats, cls_labels);

  if (!ec.plot_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(ec.plot_dir);
    if (!sample_panels.empty())
      eval::write_mel_grid(fs::path(ec.plot_dir) / "generated_mels.ppm",
                           sample_panels);
    Tensor all({ref_set.rows() + gen_set.rows(), ref_set.cols()});
    std::vector<std::size_t> lbl;
    for (std::size_t i = 0; i < ref_set.rows(); ++i) {
      for (std::size_t d = 0; d < all.cols(); ++d)
        all.at(i, d) = ref_set.at(i, d);
      lbl.push_back(0);
    }
    for (std::size_t i = 0; i < gen_set.rows(); ++i) {
      for (std::size_t d = 0; d < all.cols(); ++d)
        all.at(ref_set.rows() + i, d) = gen_set.at(i, d);
      lbl.push_back(1);
    }
    eval::write_scatter(fs::path(ec.plot_dir) / "embedding_space.ppm",
                        eval::project_2d(all), lbl);
  }
  return rep;
}

}  // namespace loagen::pipeline
