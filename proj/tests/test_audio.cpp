#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "loagen/audio/frontend.hpp"

using namespace loagen;
using namespace loagen::audio;

namespace {

Waveform sine(double freq, double seconds, int rate, double amp = 0.5) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = amp * std::sin(2.0 * M_PI * freq * i / rate);
  return w;
}

MelConfig toy_cfg() {
  MelConfig cfg;
  cfg.n_mels = 64;
  return cfg;
}

}  // namespace

TEST_CASE("wav round-trip through file") {
  auto dir = std::filesystem::temp_directory_path() / "loagen_audio_test";
  std::filesystem::create_directories(dir);
  auto w = sine(440.0, 0.25, 16000);
  write_wav((dir / "t.wav").string(), w);
  auto r = read_wav((dir / "t.wav").string());
  CHECK(r.sample_rate == 16000);
  CHECK(r.samples.size() == w.samples.size());
  double err = 0.0;
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    err = std::max(err, std::abs(r.samples[i] - w.samples[i]));
  CHECK(err < 1e-3);  // 16-bit quantization
  std::filesystem::remove_all(dir);
}

TEST_CASE("unreadable file raises ingestion error") {
  CHECK_THROWS_AS(read_wav("/nonexistent/file.wav"), IngestionError);
}

TEST_CASE("resample length ratio: 10 s at 48 kHz to 16 kHz") {
  auto w = sine(440.0, 10.0, 48000);
  auto r = resample(w, 16000);
  CHECK(r.samples.size() == 160000);
  CHECK(r.sample_rate == 16000);
}

TEST_CASE("identity resample is bit-identical; zero input stays zero") {
  auto w = sine(440.0, 0.5, 16000);
  auto r = resample(w, 16000);
  CHECK(r.samples == w.samples);

  Waveform z;
  z.sample_rate = 16000;
  z.samples.assign(8000, 0.0);
  auto rz = peak_normalize(resample(z, 16000));
  for (double s : rz.samples) CHECK(s == 0.0);
}

TEST_CASE("double resample preserves duration within one sample") {
  auto w = sine(330.0, 1.0, 16000);
  auto back = resample(resample(w, 22050), 16000);
  CHECK(std::llabs(static_cast<long long>(back.samples.size()) -
                   static_cast<long long>(w.samples.size())) <= 1);
}

TEST_CASE("pad_to_duration: 10 s to 10.24 s, identity, and length error") {
  auto w = sine(220.0, 10.0, 16000);
  auto p = pad_to_duration(w, 10.24);
  CHECK(p.samples.size() == 163840);
  for (std::size_t i = 160000; i < 163840; ++i) CHECK(p.samples[i] == 0.0);

  auto p2 = pad_to_duration(p, 10.24);  // idempotent at target
  CHECK(p2.samples == p.samples);

  auto wl = sine(220.0, 11.0, 16000);
  CHECK_THROWS_AS(pad_to_duration(wl, 10.24), LengthError);
}

TEST_CASE("wav_to_mel default shape: 10.24 s -> T=1024, F=128") {
  MelConfig cfg;  // defaults: hop 160, F=128
  MelAnalyzer mel(cfg);
  auto w = pad_to_duration(sine(440.0, 10.0, 16000), 10.24);
  auto X = wav_to_mel(w, mel);
  CHECK(X.frames() == 1024);
  CHECK(X.bins() == 128);
  CHECK(X.values.all_finite());
}

TEST_CASE("silence maps to the log floor") {
  MelAnalyzer mel(toy_cfg());
  Waveform z;
  z.sample_rate = 16000;
  z.samples.assign(16000, 0.0);
  auto X = wav_to_mel(z, mel);
  for (std::size_t i = 0; i < X.values.numel(); ++i)
    CHECK(X.values[i] == doctest::Approx(std::log(1e-5)));
}

TEST_CASE("louder sinusoid has strictly larger max mel value") {
  MelAnalyzer mel(toy_cfg());
  auto loud = wav_to_mel(sine(440.0, 1.0, 16000, 0.8), mel);
  auto quiet = wav_to_mel(sine(440.0, 1.0, 16000, 0.1), mel);
  double ml = -1e300, mq = -1e300;
  for (std::size_t i = 0; i < loud.values.numel(); ++i)
    ml = std::max(ml, loud.values[i]);
  for (std::size_t i = 0; i < quiet.values.numel(); ++i)
    mq = std::max(mq, quiet.values[i]);
  CHECK(ml > mq);
}

TEST_CASE("mel output is finite for random waveforms (property)") {
  MelAnalyzer mel(toy_cfg());
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Waveform w;
    w.sample_rate = 16000;
    std::size_t n = static_cast<std::size_t>(rng.randint(400, 8000));
    w.samples.resize(n);
    for (auto& s : w.samples) s = rng.uniform(-1.0, 1.0);
    auto X = wav_to_mel(w, mel);
    CHECK(X.values.all_finite());
  }
}

TEST_CASE("griffin-lim: zero iterations rejected") {
  MelAnalyzer mel(toy_cfg());
  auto X = wav_to_mel(sine(440.0, 0.5, 16000), mel);
  CHECK_THROWS_AS(mel_to_wav(X, mel, 0), ConfigError);
}

TEST_CASE("griffin-lim: silence mel inverts to near-zero waveform") {
  MelAnalyzer mel(toy_cfg());
  Waveform z;
  z.sample_rate = 16000;
  z.samples.assign(16000, 0.0);
  auto X = wav_to_mel(z, mel);
  auto w = mel_to_wav(X, mel, 4);
  double m = 0.0;
  for (double s : w.samples) m = std::max(m, std::abs(s));
  CHECK(m < 1e-3);
}

TEST_CASE("griffin-lim: 440 Hz tone reconstructs with correct dominant frequency") {
  MelConfig cfg = toy_cfg();
  MelAnalyzer mel(cfg);
  auto src = sine(440.0, 1.0, 16000);
  auto X = wav_to_mel(src, mel);
  auto w = mel_to_wav(X, mel, 32);

  // FFT-peak oracle on the reconstruction
  std::size_t n = 16384;
  std::vector<std::complex<double>> buf(n, 0.0);
  for (std::size_t i = 0; i < std::min(n, w.samples.size()); ++i)
    buf[i] = w.samples[i];
  fft(buf);
  std::size_t peak = 1;
  for (std::size_t i = 1; i < n / 2; ++i)
    if (std::abs(buf[i]) > std::abs(buf[peak])) peak = i;
  double freq = static_cast<double>(peak) * 16000.0 / static_cast<double>(n);

  // one mel bin of slack around 440 Hz
  double mel440 = 2595.0 * std::log10(1.0 + 440.0 / 700.0);
  double mel_step =
      2595.0 * std::log10(1.0 + 8000.0 / 700.0) / (cfg.n_mels + 1.0);
  double lo = 700.0 * (std::pow(10.0, (mel440 - mel_step) / 2595.0) - 1.0);
  double hi = 700.0 * (std::pow(10.0, (mel440 + mel_step) / 2595.0) - 1.0);
  CHECK(freq >= lo);
  CHECK(freq <= hi);
}

TEST_CASE("griffin-lim error trace: non-increasing and 64 iters beats 8") {
  MelAnalyzer mel(toy_cfg());
  auto src = sine(523.25, 0.5, 16000);
  auto X = wav_to_mel(src, mel);

  std::vector<double> trace;
  mel_to_wav(X, mel, 64, &trace);
  REQUIRE(trace.size() == 64);
  for (std::size_t i = 1; i < trace.size(); ++i)
    CHECK(trace[i] <= trace[i - 1] + 1e-6);
  CHECK(trace[63] <= trace[7] + 1e-6);
}
