#pragma once

#include <cmath>
#include <string>

#include "loagen/audio/mel.hpp"
#include "loagen/audio/wav.hpp"
#include "loagen/core/errors.hpp"

namespace loagen::audio {

// Linear-interpolation resampler; output length scales by target/source rate.
inline Waveform resample(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw ConfigError("resample: target rate must be > 0");
  if (w.sample_rate == target_rate) return w;
  const double ratio = static_cast<double>(target_rate) / w.sample_rate;
  const std::size_t out_len = static_cast<std::size_t>(
      std::llround(static_cast<double>(w.samples.size()) * ratio));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    double src = static_cast<double>(i) / ratio;
    std::size_t i0 = static_cast<std::size_t>(src);
    double frac = src - static_cast<double>(i0);
    std::size_t i1 = std::min(i0 + 1, w.samples.size() - 1);
    i0 = std::min(i0, w.samples.size() - 1);
    out.samples[i] = (1.0 - frac) * w.samples[i0] + frac * w.samples[i1];
  }
  return out;
}

inline Waveform peak_normalize(Waveform w, double peak = 0.95) {
  double m = 0.0;
  for (double s : w.samples) m = std::max(m, std::abs(s));
  if (m > 1e-12) {
    double g = peak / m;
    for (double& s : w.samples) s *= g;
  }
  return w;
}

inline Waveform load_and_resample(const std::string& path, int target_rate) {
  Waveform w = read_wav(path);
  if (w.samples.empty()) throw EmptyInputError("zero-length audio: " + path);
  return peak_normalize(resample(w, target_rate));
}

inline Waveform pad_to_duration(const Waveform& w, double seconds) {
  const std::size_t target = static_cast<std::size_t>(
      std::llround(seconds * w.sample_rate));
  if (w.samples.size() > target)
    throw LengthError("pad_to_duration: input of " +
                      std::to_string(w.samples.size()) +
                      " samples exceeds target of " + std::to_string(target));
  Waveform out = w;
  out.samples.resize(target, 0.0);
  return out;
}

inline MelSpectrogram wav_to_mel(const Waveform& w, const MelAnalyzer& mel) {
  if (w.samples.empty()) throw EmptyInputError("wav_to_mel: empty waveform");
  return mel.analyze(w.samples, w.sample_rate);
}

inline Waveform mel_to_wav(const MelSpectrogram& X, const MelAnalyzer& mel,
                           std::size_t iterations,
                           std::vector<double>* error_trace = nullptr) {
  Waveform out;
  out.sample_rate = X.sample_rate;
  out.samples = mel.invert(X, iterations, error_trace);
  return out;
}

}  // namespace loagen::audio
