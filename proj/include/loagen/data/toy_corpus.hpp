#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "loagen/audio/wav.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/rng.hpp"

namespace loagen::data {

// ---------------------------------------------------------------------------
// dataset layout: <root>/wavs/*.wav + <root>/manifest.json

struct ManifestRecord {
  std::string id;
  std::string wav_path;  // relative to the dataset root
  std::optional<std::string> caption;
  std::optional<std::string> phonemes;  // space-separated symbols
};

// caption-free view; the SSL pretraining stage consumes only this type,
// so captions are unreachable there by construction
struct AudioOnlyRecord {
  std::string id;
  std::string wav_path;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::filesystem::path wav_file(const ManifestRecord& r) const {
    return root / r.wav_path;
  }

  std::vector<AudioOnlyRecord> audio_only() const {
    std::vector<AudioOnlyRecord> out;
    for (const auto& r : records) out.push_back({r.id, r.wav_path});
    return out;
  }

  std::vector<ManifestRecord> paired() const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.caption && !r.caption->empty()) out.push_back(r);
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IngestionError("load_dataset: cannot open " +
                                (root / "manifest.json").string());
  nlohmann::json j;
  in >> j;
  Dataset ds;
  ds.root = root;
  for (const auto& e : j) {
    ManifestRecord r;
    r.id = e.at("id").get<std::string>();
    r.wav_path = e.at("wav_path").get<std::string>();
    if (e.contains("caption")) r.caption = e["caption"].get<std::string>();
    if (e.contains("phonemes")) r.phonemes = e["phonemes"].get<std::string>();
    ds.records.push_back(std::move(r));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic corpus: tones / noise / chirp, plus "X then Y" compositions

struct CorpusConfig {
  int sample_rate = 16000;
  double duration = 2.56;   // seconds per clip
  std::size_t per_class = 8;
  std::size_t per_composition = 1;  // clips per ordered class pair
  bool compositions = true;
  double amplitude = 0.5;
};

namespace detail {

struct ToyClass {
  std::string slug;
  std::string caption;
};

inline const std::vector<ToyClass>& toy_classes() {
  static const std::vector<ToyClass> k = {
      {"low_tone", "a low tone"},
      {"high_tone", "a high tone"},
      {"noise_burst", "a noise burst"},
      {"rising_chirp", "a rising chirp"},
  };
  return k;
}

inline void render_event(std::vector<double>& buf, std::size_t lo,
                         std::size_t hi, std::size_t cls, int rate, double amp,
                         Rng& rng) {
  const double jitter = 1.0 + rng.uniform(-0.02, 0.02);
  const double a = amp * (1.0 + rng.uniform(-0.1, 0.1));
  const double n = static_cast<double>(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) {
    double tt = static_cast<double>(i - lo) / rate;
    double frac = static_cast<double>(i - lo) / n;
    // short fade at both ends to avoid clicks
    double env = std::min(1.0, std::min(frac, 1.0 - frac) * 20.0);
    double v = 0.0;
    switch (cls) {
      case 0: v = std::sin(2.0 * M_PI * 220.0 * jitter * tt); break;
      case 1: v = std::sin(2.0 * M_PI * 1760.0 * jitter * tt); break;
      case 2: v = rng.uniform(-1.0, 1.0); break;
      case 3: {
        double f0 = 200.0 * jitter, f1 = 2000.0 * jitter;
        double phase = 2.0 * M_PI * (f0 * tt + 0.5 * (f1 - f0) / (n / rate) *
                                                    tt * tt);
        v = std::sin(phase);
        break;
      }
      default: break;
    }
    buf[i] += a * env * v;
  }
}

// character-level pseudo-phonemes of the caption; space becomes "_"
inline std::string caption_phonemes(const std::string& caption) {
  std::string out;
  for (char c : caption) {
    if (!out.empty()) out += ' ';
    out += (c == ' ') ? '_' : c;
  }
  return out;
}

}  // namespace detail

inline std::string phoneme_symbol_set() {
  return "a b c d e f g h i j k l m n o p q r s t u v w x y z _";
}

inline std::vector<std::string> phoneme_symbols() {
  std::istringstream ss(phoneme_symbol_set());
  std::vector<std::string> out;
  std::string s;
  while (ss >> s) out.push_back(s);
  return out;
}

// deterministic given (cfg, seed); returns the dataset it wrote
inline Dataset synthesize_corpus(const std::filesystem::path& root,
                                 const CorpusConfig& cfg, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const auto& classes = detail::toy_classes();
  fs::create_directories(root / "wavs");
  const std::size_t n = static_cast<std::size_t>(
      std::llround(cfg.duration * cfg.sample_rate));
  Dataset ds;
  ds.root = root;
  Rng master(seed);

  auto emit = [&](const std::string& id, const std::vector<double>& samples,
                  const std::string& caption) {
    audio::Waveform w;
    w.samples = samples;
    w.sample_rate = cfg.sample_rate;
    std::string rel = "wavs/" + id + ".wav";
    audio::write_wav((root / rel).string(), w);
    ManifestRecord r;
    r.id = id;
    r.wav_path = rel;
    r.caption = caption;
    r.phonemes = detail::caption_phonemes(caption);
    ds.records.push_back(std::move(r));
  };

  for (std::size_t c = 0; c < classes.size(); ++c)
    for (std::size_t k = 0; k < cfg.per_class; ++k) {
      Rng rng = master.fork();
      std::vector<double> buf(n, 0.0);
      detail::render_event(buf, 0, n, c, cfg.sample_rate, cfg.amplitude, rng);
      emit(classes[c].slug + "_" + std::to_string(k), buf, classes[c].caption);
    }

  if (cfg.compositions) {
    for (std::size_t a = 0; a < classes.size(); ++a)
      for (std::size_t b = 0; b < classes.size(); ++b) {
        if (a == b) continue;
        for (std::size_t k = 0; k < cfg.per_composition; ++k) {
          Rng rng = master.fork();
          std::vector<double> buf(n, 0.0);
          std::size_t half = n / 2;
          detail::render_event(buf, 0, half, a, cfg.sample_rate, cfg.amplitude,
                               rng);
          detail::render_event(buf, half, n, b, cfg.sample_rate, cfg.amplitude,
                               rng);
          std::string cap = classes[a].caption + " then " + classes[b].caption;
          emit(classes[a].slug + "_then_" + classes[b].slug + "_" +
                   std::to_string(k),
               buf, cap);
        }
      }
  }

  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : ds.records)
    j.push_back({{"id", r.id},
                 {"wav_path", r.wav_path},
                 {"caption", *r.caption},
                 {"phonemes", *r.phonemes}});
  std::ofstream out(root / "manifest.json");
  out << j.dump(2) << "\n";
  return ds;
}

// class index of a single-event caption, -1 for compositions/unknown
inline int caption_class(const std::string& caption) {
  const auto& classes = detail::toy_classes();
  for (std::size_t c = 0; c < classes.size(); ++c)
    if (caption == classes[c].caption) return static_cast<int>(c);
  return -1;
}

inline std::size_t n_toy_classes() { return detail::toy_classes().size(); }

inline std::string class_caption(std::size_t c) {
  return detail::toy_classes().at(c).caption;
}

}  // namespace loagen::data
