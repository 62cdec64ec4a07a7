#pragma once

// Checkpoint archive. Little-endian binary layout:
//
//   magic      8 bytes  "RASACKPT"
//   version    u32      = 1
//   config     u64 length + UTF-8 bytes   (run configuration, verbatim)
//   metadata   u64 length + UTF-8 JSON    (model config, step, rng state, ...)
//   count      u64      number of arrays
//   per array: u32 name length, name bytes, u32 rows, u32 cols,
//              rows*cols f64 values, row-major
//
// Array names: online parameters as visited by Network::visit, momentum
// parameters prefixed "momentum.", AdamW moments "adamw.m." / "adamw.v.",
// a frozen generator snapshot "frozen.".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rasa/error.hpp"
#include "rasa/network.hpp"

namespace rasa::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[8] = {'R', 'A', 'S', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Archive {
  std::string config_echo;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> arrays;

  [[nodiscard]] const Matrix& array(const std::string& name) const {
    for (const auto& [n, m] : arrays) {
      if (n == name) return m;
    }
    throw DataError("checkpoint has no array '" + name + "'");
  }
  [[nodiscard]] bool has(const std::string& name) const {
    for (const auto& [n, m] : arrays) {
      if (n == name) return true;
    }
    return false;
  }
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

inline std::string get_string(std::istream& is, std::uint64_t n) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void write(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint64_t>(os, archive.config_echo.size());
  os.write(archive.config_echo.data(), static_cast<std::streamsize>(archive.config_echo.size()));
  const std::string meta = archive.metadata.dump();
  detail::put<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put<std::uint64_t>(os, archive.arrays.size());
  for (const auto& [name, m] : archive.arrays) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

[[nodiscard]] inline Archive read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("checkpoint: bad magic in " + path.string());
  if (detail::get<std::uint32_t>(is) != kVersion) throw DataError("checkpoint: unsupported version");
  Archive a;
  a.config_echo = detail::get_string(is, detail::get<std::uint64_t>(is));
  try {
    a.metadata = nlohmann::json::parse(detail::get_string(is, detail::get<std::uint64_t>(is)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto count = detail::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::get_string(is, detail::get<std::uint32_t>(is));
    const auto rows = detail::get<std::uint32_t>(is);
    const auto cols = detail::get<std::uint32_t>(is);
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated array " + name);
    a.arrays.emplace_back(std::move(name), std::move(m));
  }
  return a;
}

inline nlohmann::json to_json(const model::ModelConfig& c) {
  return {{"image_layers", c.image_layers}, {"text_layers", c.text_layers}, {"cross_layers", c.cross_layers},
          {"hidden_dim", c.hidden_dim},     {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
          {"image_side", c.image_side},     {"patch_side", c.patch_side},   {"proj_dim", c.proj_dim},
          {"vocab_size", c.vocab_size},     {"max_len", c.max_len}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  try {
    c.image_layers = j.at("image_layers");
    c.text_layers = j.at("text_layers");
    c.cross_layers = j.at("cross_layers");
    c.hidden_dim = j.at("hidden_dim");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.image_side = j.at("image_side");
    c.patch_side = j.at("patch_side");
    c.proj_dim = j.at("proj_dim");
    c.vocab_size = j.at("vocab_size");
    c.max_len = j.at("max_len");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad model config: ") + e.what());
  }
  return c;
}

/// Appends every parameter of `net` under `prefix`.
inline void add_network(Archive& a, const model::Network& net, const std::string& prefix = "") {
  net.visit([&](const std::string& name, const Var& v) { a.arrays.emplace_back(prefix + name, v.value()); });
}

/// Builds a network shaped by `config` and fills it from arrays under `prefix`.
[[nodiscard]] inline model::Network load_network(const Archive& a, const model::ModelConfig& config, bool trainable,
                                                 const std::string& prefix = "") {
  Rng rng(0);
  model::Network net = model::initialize(config, rng);
  net.visit([&](const std::string& name, Var& v, model::ParamGroup, bool) {
    const Matrix& m = a.array(prefix + name);
    if (m.rows() != v.rows() || m.cols() != v.cols()) throw DataError("checkpoint: shape mismatch for " + prefix + name);
    v = Var(m, trainable);
  });
  return net;
}

}  // namespace rasa::checkpoint
