#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "loagen/pipeline/evaluate.hpp"
#include "loagen/pipeline/stages.hpp"

namespace fs = std::filesystem;
using namespace loagen;
using namespace loagen::pipeline;

namespace {

struct CommonOpts {
  std::string data;
  std::string ckpt = "checkpoints";
  std::string profile = "toy";
  std::string config_file;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_data = true) {
  auto* d = cmd->add_option("--data", o.data, "corpus root (wavs/ + manifest.json)");
  if (needs_data) d->required();
  cmd->add_option("--ckpt", o.ckpt, "checkpoint directory");
  cmd->add_option("--profile", o.profile, "model profile: toy or mini")
      ->check(CLI::IsMember({"toy", "mini"}));
  cmd->add_option("--config", o.config_file, "JSON config with overrides");
  cmd->add_option("--seed", o.seed, "rng seed");
  cmd->add_option("--steps", o.steps, "training steps (0 = profile default)");
}

StackConfig make_config(const CommonOpts& o) {
  StackConfig c = o.profile == "mini" ? mini_config() : toy_config();
  if (!o.config_file.empty()) {
    Config cfg = Config::from_file(o.config_file);
    c.ldm_T = cfg.get("ldm.T", c.ldm_T);
    c.p_drop = cfg.get("ldm.p_drop", c.p_drop);
    c.guidance = cfg.get("sampler.guidance", c.guidance);
    c.ddim_steps = cfg.get("sampler.ddim_steps", c.ddim_steps);
    c.eta = cfg.get("sampler.eta", c.eta);
    c.griffin_lim_iters = cfg.get("vocoder.iters", c.griffin_lim_iters);
    c.train.lr = cfg.get("train.lr", c.train.lr);
    c.train.warmup = cfg.get("train.warmup", c.train.warmup);
    c.switcher.p_gt = cfg.get("switcher.p_gt", c.switcher.p_gt);
    c.switcher.p_pred = cfg.get("switcher.p_pred", c.switcher.p_pred);
    c.use_text_cross_attention =
        cfg.get("ablation.text_cross_attention", c.use_text_cross_attention);
    c.use_global_embedder =
        cfg.get("ablation.global_embedder", c.use_global_embedder);
    c.use_text_sequence =
        cfg.get("ablation.text_sequence", c.use_text_sequence);
    c.tts_mode = cfg.get("tts", c.tts_mode);
  }
  return c;
}

// the text vocabulary is rebuilt from the corpus manifest, so every command
// must see the same --data the checkpoints were trained on
std::unique_ptr<Stack> make_stack(const CommonOpts& o, const data::Dataset& ds,
                                  bool load = false) {
  std::vector<std::string> caps;
  for (const auto& r : ds.records)
    if (r.caption) caps.push_back(*r.caption);
  auto st = std::make_unique<Stack>(make_config(o),
                                    model::TextVocab::build(caps),
                                    data::phoneme_symbols(), o.seed);
  if (load) load_stack(*st, o.ckpt);
  return st;
}

void report(const std::string& stage, const StageResult& r) {
  std::cout << stage << ": " << r.losses.size() << " steps, loss "
            << r.first_loss() << " -> " << r.last_loss() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage language-of-audio generation"};
  app.require_subcommand(1);

  CommonOpts o;

  // corpus synthesis
  auto* synth = app.add_subcommand("synth-corpus", "write the toy corpus");
  std::string synth_out = "corpus";
  std::size_t per_class = 8;
  double duration = 2.56;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--per-class", per_class, "clips per event class");
  synth->add_option("--duration", duration, "clip length in seconds");
  synth->add_option("--seed", o.seed, "rng seed");

  auto* tmae = app.add_subcommand("train-mae", "masked-autoencoder pretraining");
  add_common(tmae, o);
  auto* tvae = app.add_subcommand("train-vae", "acoustic VAE training");
  add_common(tvae, o);
  auto* temb = app.add_subcommand("train-embedder", "contrastive embedder");
  add_common(temb, o);
  auto* tldm = app.add_subcommand("pretrain-ldm",
                                  "self-supervised diffusion pretraining");
  add_common(tldm, o);
  auto* ttr = app.add_subcommand("train-translator", "condition-to-LOA model");
  add_common(ttr, o);

  auto* tjoint = app.add_subcommand("finetune-joint",
                                    "joint finetuning with the gt/pred switcher");
  add_common(tjoint, o);
  bool full_backprop = false;
  tjoint->add_flag("--full-backprop", full_backprop,
                   "propagate diffusion gradients into the translator");

  auto* gen = app.add_subcommand("generate", "caption to waveform");
  add_common(gen, o);
  std::string caption, phonemes, out_wav = "out.wav";
  double guidance = -1.0, eta = -1.0;
  std::size_t ddim = 0;
  gen->add_option("--caption", caption, "text prompt");
  gen->add_option("--phonemes", phonemes, "space-separated phoneme symbols");
  gen->add_option("--out", out_wav, "output wav path");
  gen->add_option("--guidance-scale", guidance, "classifier-free guidance scale");
  gen->add_option("--eta", eta, "DDIM eta (0 = deterministic)");
  gen->add_option("--ddim-steps", ddim, "sampling steps");

  auto* ev = app.add_subcommand("evaluate", "corpus-level generation metrics");
  add_common(ev, o);
  std::size_t n_gen = 50;
  std::string report_path = "eval_report.json", plot_dir;
  ev->add_option("--n", n_gen, "number of generations");
  ev->add_option("--report", report_path, "metrics JSON output");
  ev->add_option("--plots", plot_dir, "directory for PPM plots");
  ev->add_option("--guidance-scale", guidance, "classifier-free guidance scale");

  auto* ins = app.add_subcommand("inspect", "print checkpoint manifests");
  ins->add_option("--ckpt", o.ckpt, "checkpoint directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      data::CorpusConfig cc;
      cc.per_class = per_class;
      cc.duration = duration;
      auto ds = data::synthesize_corpus(synth_out, cc, o.seed);
      std::cout << "wrote " << ds.records.size() << " clips to " << synth_out
                << "\n";
      return 0;
    }
    if (*ins) {
      for (const char* stem :
           {"mae", "vae", "clap", "cond", "translator", "ldm"}) {
        fs::path p = fs::path(o.ckpt) / (std::string(stem) + ".json");
        if (!fs::exists(p)) {
          std::cout << stem << ": (absent)\n";
          continue;
        }
        auto m = ckpt::load_manifest(p.string());
        std::cout << stem << ": step " << m.step << ", config "
                  << m.config_hash;
        for (const auto& [k, v] : m.metrics) std::cout << ", " << k << "=" << v;
        std::cout << "\n";
      }
      return 0;
    }

    auto ds = data::load_dataset(o.data);
    Rng rng(o.seed + 1);

    if (*tmae) {
      auto st = make_stack(o, ds);
      if (fs::exists(fs::path(o.ckpt) / "mae.json")) load_stack(*st, o.ckpt);
      report("train-mae", train_mae(*st, ds, ds.audio_only(), rng, o.steps));
      save_stack(*st, o.ckpt);
    } else if (*tvae) {
      auto st = make_stack(o, ds, fs::exists(fs::path(o.ckpt) / "vae.json"));
      report("train-vae", train_vae(*st, ds, ds.audio_only(), rng, o.steps));
      save_stack(*st, o.ckpt);
    } else if (*temb) {
      auto st = make_stack(o, ds, fs::exists(fs::path(o.ckpt) / "clap.json"));
      report("train-embedder", train_embedder(*st, ds, rng, o.steps));
      save_stack(*st, o.ckpt);
    } else if (*tldm) {
      auto st = make_stack(o, ds, true);
      report("pretrain-ldm",
             pretrain_ldm_ssl(*st, ds, ds.audio_only(), rng, o.steps));
      save_stack(*st, o.ckpt);
    } else if (*ttr) {
      auto st = make_stack(o, ds, true);
      report("train-translator", train_translator(*st, ds, rng, o.steps));
      save_stack(*st, o.ckpt);
    } else if (*tjoint) {
      auto st = make_stack(o, ds, true);
      SwitcherCounts counts;
      report("finetune-joint",
             joint_finetune(*st, ds, st->config().switcher, rng, o.steps,
                            &counts, full_backprop));
      std::cout << "switcher: gt " << counts.gt << ", pred " << counts.pred
                << "\n";
      save_stack(*st, o.ckpt);
    } else if (*gen) {
      auto st = make_stack(o, ds, true);
      data::ManifestRecord req;
      if (!caption.empty()) req.caption = caption;
      if (!phonemes.empty()) req.phonemes = phonemes;
      if (!req.caption && !req.phonemes)
        throw InputError("generate: give --caption and/or --phonemes");
      GenerateOptions opt;
      opt.seed = o.seed;
      opt.steps = ddim;
      opt.eta = eta;
      opt.guidance = guidance;
      auto out = generate(*st, req, opt);
      audio::write_wav(out_wav, out.waveform);
      std::cout << "wrote " << out_wav << " (" << out.waveform.samples.size()
                << " samples)\n";
    } else if (*ev) {
      auto st = make_stack(o, ds, true);
      EvalConfig ec;
      ec.n_generations = n_gen;
      ec.seed = o.seed + 1000;
      ec.guidance = guidance;
      ec.plot_dir = plot_dir;
      auto rep = evaluate(*st, ds, ec);
      std::ofstream f(report_path);
      f << rep.to_json().dump(2) << "\n";
      for (const auto& [k, v] : rep.metrics)
        std::cout << k << ": " << v << "\n";
      std::cout << "report written to " << report_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
