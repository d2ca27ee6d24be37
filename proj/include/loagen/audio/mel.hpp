#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <vector>

#include "loagen/audio/fft.hpp"
#include "loagen/core/errors.hpp"
#include "loagen/core/rng.hpp"
#include "loagen/core/tensor.hpp"

namespace loagen::audio {

struct MelConfig {
  int sample_rate = 16000;
  std::size_t n_fft = 1024;
  std::size_t win_length = 1024;
  std::size_t hop = 160;
  std::size_t n_mels = 128;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;
};

struct MelSpectrogram {
  Tensor values;  // (T, F) log-mel magnitude
  std::size_t frame_hop = 0;
  int sample_rate = 0;

  std::size_t frames() const { return values.rows(); }
  std::size_t bins() const { return values.cols(); }
};

namespace detail {

inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / static_cast<double>(n));
  return w;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace detail

// Triangular mel filterbank, (n_mels x n_bins).
inline Eigen::MatrixXd mel_filterbank(const MelConfig& cfg) {
  const std::size_t n_bins = cfg.n_fft / 2 + 1;
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(cfg.n_mels), static_cast<Eigen::Index>(n_bins));
  const double mel_lo = detail::hz_to_mel(cfg.fmin);
  const double mel_hi = detail::hz_to_mel(cfg.fmax);
  std::vector<double> centers(cfg.n_mels + 2);
  for (std::size_t i = 0; i < centers.size(); ++i)
    centers[i] = detail::mel_to_hz(
        mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                     static_cast<double>(cfg.n_mels + 1));
  const double bin_hz = static_cast<double>(cfg.sample_rate) /
                        static_cast<double>(cfg.n_fft);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
    for (std::size_t b = 0; b < n_bins; ++b) {
      double f = b * bin_hz;
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        v = (hi - f) / (hi - mid);
      fb(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(b)) = v;
    }
  }
  return fb;
}

// STFT magnitude, (T x n_bins), reflect-padded so T = ceil(N / hop).
inline std::vector<std::vector<std::complex<double>>> stft(
    const std::vector<double>& x, const MelConfig& cfg) {
  const std::size_t N = x.size();
  const std::size_t T = (N + cfg.hop - 1) / cfg.hop;
  const std::size_t half = cfg.n_fft / 2;
  auto win = detail::hann(cfg.win_length);
  auto sample = [&x, N](std::ptrdiff_t i) {
    // reflect at the edges
    if (i < 0) i = -i;
    if (i >= static_cast<std::ptrdiff_t>(N))
      i = 2 * static_cast<std::ptrdiff_t>(N) - 2 - i;
    if (i < 0 || i >= static_cast<std::ptrdiff_t>(N)) return 0.0;
    return x[static_cast<std::size_t>(i)];
  };
  std::vector<std::vector<std::complex<double>>> frames(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::complex<double>> buf(cfg.n_fft, 0.0);
    const std::ptrdiff_t start =
        static_cast<std::ptrdiff_t>(t * cfg.hop) - static_cast<std::ptrdiff_t>(half);
    for (std::size_t i = 0; i < cfg.win_length; ++i)
      buf[i] = sample(start + static_cast<std::ptrdiff_t>(i)) * win[i];
    fft(buf);
    buf.resize(cfg.n_fft / 2 + 1);
    frames[t] = std::move(buf);
  }
  return frames;
}

// Overlap-add inverse with squared-window normalization; returns T*hop samples.
inline std::vector<double> istft(
    const std::vector<std::vector<std::complex<double>>>& frames,
    const MelConfig& cfg) {
  const std::size_t T = frames.size();
  const std::size_t N = T * cfg.hop;
  const std::size_t half = cfg.n_fft / 2;
  auto win = detail::hann(cfg.win_length);
  std::vector<double> out(N, 0.0), norm(N, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::complex<double>> buf(cfg.n_fft);
    for (std::size_t b = 0; b <= cfg.n_fft / 2; ++b) {
      buf[b] = frames[t][b];
      if (b > 0 && b < cfg.n_fft / 2) buf[cfg.n_fft - b] = std::conj(frames[t][b]);
    }
    fft(buf, /*inverse=*/true);
    const std::ptrdiff_t start =
        static_cast<std::ptrdiff_t>(t * cfg.hop) - static_cast<std::ptrdiff_t>(half);
    for (std::size_t i = 0; i < cfg.win_length; ++i) {
      std::ptrdiff_t idx = start + static_cast<std::ptrdiff_t>(i);
      if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(N)) continue;
      out[static_cast<std::size_t>(idx)] += buf[i].real() * win[i];
      norm[static_cast<std::size_t>(idx)] += win[i] * win[i];
    }
  }
  for (std::size_t i = 0; i < N; ++i)
    if (norm[i] > 1e-10) out[i] /= norm[i];
  return out;
}

// Caches the filterbank and its pseudo-inverse per config.
class MelAnalyzer {
public:
  explicit MelAnalyzer(MelConfig cfg) : cfg_(cfg), fb_(mel_filterbank(cfg)) {
    pinv_ = fb_.completeOrthogonalDecomposition().pseudoInverse();
  }

  const MelConfig& config() const { return cfg_; }

  MelSpectrogram analyze(const std::vector<double>& samples, int rate) const {
    if (samples.empty()) throw EmptyInputError("wav_to_mel: empty waveform");
    auto frames = stft(samples, cfg_);
    const std::size_t T = frames.size();
    Tensor vals({T, cfg_.n_mels});
    Eigen::VectorXd mag(static_cast<Eigen::Index>(cfg_.n_fft / 2 + 1));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t b = 0; b <= cfg_.n_fft / 2; ++b)
        mag(static_cast<Eigen::Index>(b)) = std::abs(frames[t][b]);
      Eigen::VectorXd mel = fb_ * mag;
      for (std::size_t m = 0; m < cfg_.n_mels; ++m)
        vals.at(t, m) = std::log(
            std::max(mel(static_cast<Eigen::Index>(m)), cfg_.log_floor));
    }
    MelSpectrogram out;
    out.values = std::move(vals);
    out.frame_hop = cfg_.hop;
    out.sample_rate = rate;
    return out;
  }

  // Griffin-Lim inversion. Fills `mel_error_trace` (if given) with the mel-
  // domain MSE of the running estimate after each iteration.
  std::vector<double> invert(const MelSpectrogram& X, std::size_t iterations,
                             std::vector<double>* mel_error_trace = nullptr) const {
    if (iterations == 0)
      throw ConfigError("mel_to_wav: iterations must be positive");
    if (!X.values.all_finite())
      throw InputError("mel_to_wav: non-finite mel input");
    const std::size_t T = X.frames();
    const std::size_t n_bins = cfg_.n_fft / 2 + 1;

    // target linear magnitude from the mel pseudo-inverse
    std::vector<std::vector<double>> mag(T, std::vector<double>(n_bins, 0.0));
    Eigen::VectorXd mel(static_cast<Eigen::Index>(cfg_.n_mels));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t m = 0; m < cfg_.n_mels; ++m)
        mel(static_cast<Eigen::Index>(m)) = std::exp(X.values.at(t, m));
      Eigen::VectorXd lin = pinv_ * mel;
      for (std::size_t b = 0; b < n_bins; ++b)
        mag[t][b] = std::clamp(lin(static_cast<Eigen::Index>(b)), 0.0, 1e12);
    }

    Rng rng(1234);  // fixed internal seed: inversion is deterministic
    std::vector<std::vector<std::complex<double>>> spec(
        T, std::vector<std::complex<double>>(n_bins));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t b = 0; b < n_bins; ++b) {
        double ang = rng.uniform(0.0, 2.0 * M_PI);
        spec[t][b] = std::polar(mag[t][b], ang);
      }

    // Alternate between time and frequency domain projections, keeping the
    // best iterate by mel-domain error (the raw iteration is only monotone in
    // linear magnitude distance).
    auto mel_error = [this, &X](const std::vector<double>& probe) {
      MelSpectrogram re_mel = analyze(probe, X.sample_rate);
      double err = 0.0;
      const std::size_t n = std::min(re_mel.values.numel(), X.values.numel());
      for (std::size_t i = 0; i < n; ++i) {
        double d = re_mel.values[i] - X.values[i];
        err += d * d;
      }
      return err / static_cast<double>(n);
    };

    std::vector<double> best_wav;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < iterations; ++it) {
      std::vector<double> wav = istft(spec, cfg_);
      double err = mel_error(wav);
      if (best_wav.empty() || err < best_err) {
        best_err = err;
        best_wav = wav;
      }
      if (mel_error_trace) mel_error_trace->push_back(best_err);
      auto re = stft(wav, cfg_);
      for (std::size_t t = 0; t < T && t < re.size(); ++t)
        for (std::size_t b = 0; b < n_bins; ++b) {
          double a = std::abs(re[t][b]);
          spec[t][b] = a > 1e-12 ? re[t][b] / a * mag[t][b]
                                 : std::complex<double>(mag[t][b], 0.0);
        }
    }
    return best_wav;
  }

private:
  MelConfig cfg_;
  Eigen::MatrixXd fb_;
  Eigen::MatrixXd pinv_;
};

}  // namespace loagen::audio
