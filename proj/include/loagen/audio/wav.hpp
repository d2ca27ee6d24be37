#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "loagen/core/errors.hpp"

namespace loagen::audio {

struct Waveform {
  std::vector<double> samples;  // in [-1,1]
  int sample_rate = 0;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

namespace detail {

inline std::uint32_t rd32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t rd16(const unsigned char* p) {
  return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}

}  // namespace detail

// Minimal RIFF/WAVE reader: PCM16 and float32, any channel count (downmixed).
inline Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot open wav file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IngestionError("not a RIFF/WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    std::uint32_t chunk_len = detail::rd32(buf.data() + pos + 4);
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 8 + chunk_len > buf.size())
      chunk_len = static_cast<std::uint32_t>(buf.size() - pos - 8);
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0 && chunk_len >= 16) {
      format = detail::rd16(body);
      channels = detail::rd16(body + 2);
      rate = detail::rd32(body + 4);
      bits = detail::rd16(body + 14);
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (!data || !rate || !channels)
    throw IngestionError("malformed wav file: " + path);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    std::size_t frames = data_len / (2 * channels);
    w.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::uint16_t c = 0; c < channels; ++c) {
        std::int16_t s = static_cast<std::int16_t>(
            detail::rd16(data + (i * channels + c) * 2));
        acc += s / 32768.0;
      }
      w.samples[i] = acc / channels;
    }
  } else if (format == 3 && bits == 32) {
    std::size_t frames = data_len / (4 * channels);
    w.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::uint16_t c = 0; c < channels; ++c) {
        std::uint32_t u = detail::rd32(data + (i * channels + c) * 4);
        float fv;
        std::memcpy(&fv, &u, 4);
        acc += fv;
      }
      w.samples[i] = acc / channels;
    }
  } else {
    throw IngestionError("unsupported wav encoding in " + path);
  }
  if (w.samples.empty()) throw EmptyInputError("zero-length audio: " + path);
  return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot write wav file: " + path);
  auto p16 = [&f](std::uint16_t v) { f.put(char(v & 0xff)).put(char(v >> 8)); };
  auto p32 = [&f](std::uint32_t v) {
    f.put(char(v & 0xff)).put(char((v >> 8) & 0xff));
    f.put(char((v >> 16) & 0xff)).put(char((v >> 24) & 0xff));
  };
  std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  f.write("RIFF", 4);
  p32(36 + data_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  p32(16);
  p16(1);  // PCM
  p16(1);  // mono
  p32(static_cast<std::uint32_t>(w.sample_rate));
  p32(static_cast<std::uint32_t>(w.sample_rate * 2));
  p16(2);
  p16(16);
  f.write("data", 4);
  p32(data_len);
  for (double s : w.samples) {
    double c = std::max(-1.0, std::min(1.0, s));
    p16(static_cast<std::uint16_t>(static_cast<std::int16_t>(
        std::lround(c * 32767.0))));
  }
}

}  // namespace loagen::audio
