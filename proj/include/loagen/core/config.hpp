#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace loagen {

// Run configuration: a JSON document addressed with dotted keys
// ("mel.hop", "ldm.steps"). Unknown keys fall back to the supplied default,
// so configs only need to spell out what they override.
class Config {
public:
  Config() : j_(nlohmann::json::object()) {}
  explicit Config(nlohmann::json j) : j_(std::move(j)) {}

  static Config from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config: " + path);
    return Config(nlohmann::json::parse(f));
  }

  template <typename T>
  T get(const std::string& dotted, T fallback) const {
    const nlohmann::json* cur = &j_;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!cur->is_object() || !cur->contains(part)) return fallback;
      cur = &(*cur)[part];
    }
    return cur->get<T>();
  }

  template <typename T>
  void set(const std::string& dotted, T value) {
    nlohmann::json* cur = &j_;
    std::stringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i)
      cur = &(*cur)[parts[i]];
    (*cur)[parts.back()] = value;
  }

  const nlohmann::json& json() const { return j_; }

  // FNV-1a of the canonical dump; stored in checkpoint manifests.
  std::string hash() const {
    std::string s = j_.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  }

private:
  nlohmann::json j_;
};

}  // namespace loagen
