#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/error.hpp"
#include "hybridlm/training.hpp"

namespace hybridlm {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

inline constexpr const char* kCheckpointFormat = "hybridlm-checkpoint-1";

namespace detail {

struct BlobEntry {
  std::string name;
  std::uint64_t offset = 0;
  std::vector<std::size_t> shape;
};

inline std::vector<std::pair<std::string, const Tensor<float>*>> checkpoint_tensors(const TrainState& s) {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  std::vector<std::string> names;
  s.params.for_each([&](const std::string& n, const Tensor<float>& t) {
    names.push_back(n);
    out.emplace_back("params/" + n, &t);
  });
  if (s.optimizer.m.size() != names.size() || s.optimizer.v.size() != names.size()) {
    throw InputError("optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back("lamb_m/" + names[i], &s.optimizer.m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back("lamb_v/" + names[i], &s.optimizer.v[i]);
  return out;
}

}  // namespace detail

// Writes <dir>/manifest.json and <dir>/tensors.bin. The directory is built
// under a temporary name and renamed into place.
inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  const auto tensors = detail::checkpoint_tensors(state);
  nlohmann::json index = nlohmann::json::array();
  std::string blob;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"offset", blob.size()}, {"shape", t->shape}, {"dtype", "f32"}});
    const auto* bytes = reinterpret_cast<const char*>(t->data.data());
    blob.append(bytes, t->data.size() * sizeof(float));
  }
  nlohmann::json manifest = {
      {"format", kCheckpointFormat},
      {"config", cfg},
      {"step", state.step},
      {"rng", state.rng.serialize()},
      {"sampler", {{"seq_len", state.sampler.seq_len}, {"epoch", state.sampler.epoch}, {"cursor", state.sampler.cursor}}},
      {"optimizer_step", state.optimizer.step},
      {"loss_stats",
       {{"causal_sum", state.stats.causal_sum},
        {"causal_steps", state.stats.causal_steps},
        {"masked_sum", state.stats.masked_sum},
        {"masked_steps", state.stats.masked_steps}}},
      {"blob", "tensors.bin"},
      {"blob_bytes", blob.size()},
      {"tensors", index}};

  fs::path tmp = dir;
  tmp += ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp);
  {
    std::ofstream f(tmp / "tensors.bin", std::ios::binary | std::ios::trunc);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("failed writing " + (tmp / "tensors.bin").string());
  }
  {
    std::ofstream f(tmp / "manifest.json", std::ios::binary | std::ios::trunc);
    f << manifest.dump(2) << '\n';
    if (!f) throw IoError("failed writing " + (tmp / "manifest.json").string());
  }
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw IoError("cannot open checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }

  Checkpoint ck;
  try {
    if (manifest.at("format") != kCheckpointFormat) throw FormatError("unknown checkpoint format");
    ck.config = manifest.at("config").get<TrainConfig>();
    ck.config.validate();
    ck.state.step = manifest.at("step").get<std::int64_t>();
    ck.state.rng = Rng::deserialize(manifest.at("rng").get<std::string>());
    const auto& sm = manifest.at("sampler");
    ck.state.sampler = {sm.at("seq_len").get<std::int64_t>(), sm.at("epoch").get<std::int64_t>(),
                        sm.at("cursor").get<std::int64_t>()};
    const auto& ls = manifest.at("loss_stats");
    ck.state.stats = {ls.at("causal_sum").get<double>(), ls.at("causal_steps").get<std::int64_t>(),
                      ls.at("masked_sum").get<double>(), ls.at("masked_steps").get<std::int64_t>()};
    ck.state.params = ModelParameters<float>::zeros(ck.config.model);
    ck.state.optimizer = LambState<float>::zeros_like(ck.state.params);
    ck.state.optimizer.step = manifest.at("optimizer_step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }

  const fs::path blob_path = dir / manifest.value("blob", std::string("tensors.bin"));
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw IoError("cannot open checkpoint blob " + blob_path.string());
  const std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (manifest.contains("blob_bytes") && manifest["blob_bytes"].get<std::uint64_t>() != blob.size()) {
    throw FormatError("checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest expects " +
                      std::to_string(manifest["blob_bytes"].get<std::uint64_t>()));
  }

  std::map<std::string, detail::BlobEntry> entries;
  try {
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype") != "f32") throw FormatError("unsupported dtype in checkpoint");
      detail::BlobEntry be{e.at("name").get<std::string>(), e.at("offset").get<std::uint64_t>(),
                           e.at("shape").get<std::vector<std::size_t>>()};
      if (!entries.emplace(be.name, be).second) throw FormatError("duplicate tensor " + be.name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint tensor index: " + std::string(e.what()));
  }

  // Targets in the same order as saving; shapes come from the config.
  std::vector<std::pair<std::string, Tensor<float>*>> targets;
  std::vector<std::string> names;
  ck.state.params.for_each([&](const std::string& n, Tensor<float>& t) {
    names.push_back(n);
    targets.emplace_back("params/" + n, &t);
  });
  for (std::size_t i = 0; i < names.size(); ++i) targets.emplace_back("lamb_m/" + names[i], &ck.state.optimizer.m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) targets.emplace_back("lamb_v/" + names[i], &ck.state.optimizer.v[i]);
  if (entries.size() != targets.size()) throw FormatError("checkpoint tensor count does not match config");

  for (auto& [name, t] : targets) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second.shape != t->shape) throw FormatError("shape of " + name + " does not match config");
    const std::uint64_t bytes = t->data.size() * sizeof(float);
    if (it->second.offset > blob.size() || bytes > blob.size() - it->second.offset) {
      throw FormatError("tensor " + name + " lies outside the blob");
    }
    std::memcpy(t->data.data(), blob.data() + it->second.offset, bytes);
  }
  return ck;
}

}  // namespace hybridlm
