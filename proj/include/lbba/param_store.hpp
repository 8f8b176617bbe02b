#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/rng.hpp"
#include "lbba/tensor.hpp"

#include <json.hpp>

namespace lbba {

// Named parameter arrays plus the seed they were initialized from.
// Serialization order follows registration order, pinned in the manifest.
template <typename S>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  // He-style uniform init scaled by fan-in; the init RNG is derived from
  // (store seed, name) so parameter layout changes don't reshuffle
  // everything else.
  Tensor<S>& add(const std::string& name, std::vector<int> shape, int fan_in) {
    if (params_.count(name)) throw ConfigError("ParamStore: duplicate " + name);
    Tensor<S> t(std::move(shape));
    auto rng = make_rng(seed_, hash_name(name));
    const double bound = std::sqrt(3.0 / std::max(1, fan_in));
    for (auto& v : t.data) v = static_cast<S>(uniform(rng, -bound, bound));
    order_.push_back(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor<S>& add_zeros(const std::string& name, std::vector<int> shape) {
    if (params_.count(name)) throw ConfigError("ParamStore: duplicate " + name);
    order_.push_back(name);
    return params_.emplace(name, Tensor<S>(std::move(shape))).first->second;
  }

  Tensor<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("ParamStore: missing " + name);
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("ParamStore: missing " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }
  std::uint64_t seed() const { return seed_; }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name).size();
    return n;
  }

  // Checkpoint layout: manifest.json + params.bin (little-endian float32,
  // concatenated in manifest order).
  void save(const std::filesystem::path& dir, const std::string& stage_tag,
            const std::string& config_hash = "") const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["dtype"] = "float32";
    manifest["seed"] = seed_;
    manifest["stage"] = stage_tag;
    if (!config_hash.empty()) manifest["config_hash"] = config_hash;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& name : order_) {
      const Tensor<S>& t = params_.at(name);
      entries.push_back({{"name", name}, {"shape", t.shape}});
    }
    manifest["params"] = entries;
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("ParamStore: cannot write " + (dir / "manifest.json").string());

    std::ofstream bf(dir / "params.bin", std::ios::binary);
    for (const auto& name : order_) {
      const Tensor<S>& t = params_.at(name);
      for (const S& v : t.data) {
        const float f = static_cast<float>(v);
        bf.write(reinterpret_cast<const char*>(&f), sizeof(float));
      }
    }
    if (!bf) throw IoError("ParamStore: cannot write " + (dir / "params.bin").string());
  }

  static ParamStore<S> load(const std::filesystem::path& dir,
                            std::string* stage_tag = nullptr,
                            std::string* config_hash = nullptr) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("ParamStore: missing " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) {
      throw IoError("ParamStore: corrupt manifest " + (dir / "manifest.json").string());
    }
    ParamStore<S> store(manifest.value("seed", std::uint64_t(0)));
    if (stage_tag) *stage_tag = manifest.value("stage", "");
    if (config_hash) *config_hash = manifest.value("config_hash", "");
    std::ifstream bf(dir / "params.bin", std::ios::binary);
    if (!bf) throw IoError("ParamStore: missing " + (dir / "params.bin").string());
    for (const auto& entry : manifest.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
      Tensor<S> t(shape);
      for (auto& v : t.data) {
        float f = 0.f;
        bf.read(reinterpret_cast<char*>(&f), sizeof(float));
        v = static_cast<S>(f);
      }
      if (!bf) throw IoError("ParamStore: truncated " + (dir / "params.bin").string());
      store.order_.push_back(name);
      store.params_.emplace(name, std::move(t));
    }
    return store;
  }

 private:
  static std::uint64_t hash_name(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
    return h;
  }

  std::uint64_t seed_;
  std::vector<std::string> order_;
  std::map<std::string, Tensor<S>> params_;
};

}  // namespace lbba
