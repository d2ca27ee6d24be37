#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "loagen/core/nn.hpp"

namespace loagen::ckpt {

// Checkpoint = binary parameter blob + JSON manifest next to it.
// Blob layout: magic, count, then per tensor: name, ndim, dims, doubles.

inline constexpr std::uint32_t kMagic = 0x4C4F4142;  // "LOAB"

struct Manifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t step = 0;
  std::map<std::string, double> metrics;
  std::string blob_path;
};

inline void save_blob(const nn::ParamStore& ps, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint blob: " + path);
  auto put = [&f](const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  };
  std::uint32_t magic = kMagic;
  std::uint64_t count = ps.size();
  put(&magic, 4);
  put(&count, 8);
  for (const auto& e : ps.entries()) {
    std::uint32_t nl = static_cast<std::uint32_t>(e.name.size());
    put(&nl, 4);
    put(e.name.data(), nl);
    const auto& t = e.var.value();
    std::uint32_t nd = static_cast<std::uint32_t>(t.ndim());
    put(&nd, 4);
    for (std::size_t d = 0; d < t.ndim(); ++d) {
      std::uint64_t dim = t.dim(d);
      put(&dim, 8);
    }
    put(t.data(), t.numel() * sizeof(double));
  }
}

inline void load_blob(nn::ParamStore& ps, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint blob: " + path);
  auto get = [&f, &path](void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw std::runtime_error("truncated checkpoint blob: " + path);
  };
  std::uint32_t magic = 0;
  std::uint64_t count = 0;
  get(&magic, 4);
  if (magic != kMagic) throw std::runtime_error("bad checkpoint magic: " + path);
  get(&count, 8);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t nl = 0;
    get(&nl, 4);
    std::string name(nl, '\0');
    get(name.data(), nl);
    std::uint32_t nd = 0;
    get(&nd, 4);
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) {
      std::uint64_t dim = 0;
      get(&dim, 8);
      d = static_cast<std::size_t>(dim);
    }
    Tensor t(shape);
    get(t.data(), t.numel() * sizeof(double));
    if (!ps.has(name))
      throw std::runtime_error("checkpoint parameter not in model: " + name);
    auto var = ps.get(name);
    if (var.value().shape() != shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    var.value_mut() = std::move(t);
  }
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["config_hash"] = m.config_hash;
  j["step"] = m.step;
  j["metrics"] = m.metrics;
  j["blob_path"] = m.blob_path;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write manifest: " + path);
  f << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read manifest: " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.step = j.at("step").get<std::uint64_t>();
  m.metrics = j.at("metrics").get<std::map<std::string, double>>();
  m.blob_path = j.at("blob_path").get<std::string>();
  return m;
}

inline void save(const nn::ParamStore& ps, Manifest m, const std::string& dir,
                 const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::string blob = dir + "/" + stem + ".bin";
  save_blob(ps, blob);
  m.blob_path = stem + ".bin";
  save_manifest(m, dir + "/" + stem + ".json");
}

inline Manifest load(nn::ParamStore& ps, const std::string& dir,
                     const std::string& stem) {
  Manifest m = load_manifest(dir + "/" + stem + ".json");
  load_blob(ps, dir + "/" + m.blob_path);
  return m;
}

}  // namespace loagen::ckpt
