#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmlab/error.hpp"
#include "lmlab/model.hpp"
#include "lmlab/tensor.hpp"

// Checkpoint format: <dir>/manifest.json describes the config and the
// name/shape/offset of every tensor; <dir>/tensors.bin concatenates the
// payloads. Each payload is a little-endian header (u32 rank, u32 extents)
// followed by little-endian raw values, so a checkpoint round-trips
// bit-exactly on any host.

namespace lmlab {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_model", c.d_model},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
}

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32_le(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IngestionError("truncated tensor payload");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i)
    v = (v << 8) | static_cast<unsigned char>(in[pos + i]);
  pos += 4;
  return v;
}

template <typename S>
struct ScalarTag;
template <>
struct ScalarTag<float> {
  static constexpr const char* name = "f32";
  using Bits = std::uint32_t;
};
template <>
struct ScalarTag<double> {
  static constexpr const char* name = "f64";
  using Bits = std::uint64_t;
};

}  // namespace detail

// Serializes one tensor: u32 rank, u32 extents[rank], then values.
template <typename S>
std::string serialize_tensor(const Tensor<S>& t) {
  std::string out;
  out.reserve(4 + 4 * t.rank() + sizeof(S) * t.numel());
  detail::put_u32_le(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape())
    detail::put_u32_le(out, static_cast<std::uint32_t>(e));
  using Bits = typename detail::ScalarTag<S>::Bits;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    Bits b = std::bit_cast<Bits>(t.data()[i]);
    for (std::size_t k = 0; k < sizeof(Bits); ++k)
      out.push_back(static_cast<char>((b >> (8 * k)) & 0xFF));
  }
  return out;
}

template <typename S>
Tensor<S> deserialize_tensor(const std::string& buf, std::size_t& pos) {
  const std::uint32_t rank = detail::get_u32_le(buf, pos);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    shape[i] = detail::get_u32_le(buf, pos);
  Tensor<S> t(shape);
  using Bits = typename detail::ScalarTag<S>::Bits;
  if (pos + sizeof(S) * t.numel() > buf.size())
    throw IngestionError("truncated tensor payload");
  for (std::size_t i = 0; i < t.numel(); ++i) {
    Bits b = 0;
    for (std::size_t k = sizeof(Bits); k-- > 0;)
      b = (b << 8) | static_cast<unsigned char>(buf[pos + k]);
    pos += sizeof(Bits);
    t.data()[i] = std::bit_cast<S>(b);
  }
  return t;
}

template <typename S>
void save_checkpoint(const LanguageModel<S>& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : model.parameters()) {
    nlohmann::json entry{{"name", name},
                         {"shape", t.shape()},
                         {"offset", payload.size()}};
    tensors.push_back(std::move(entry));
    payload += serialize_tensor(t);
  }
  nlohmann::json manifest{{"format", "lmlab-checkpoint-v1"},
                          {"scalar", detail::ScalarTag<S>::name},
                          {"config", model.config()},
                          {"tensors", std::move(tensors)}};

  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IngestionError("cannot write checkpoint manifest in " + dir);
  mf << manifest.dump(2) << '\n';
  std::ofstream pf(fs::path(dir) / "tensors.bin", std::ios::binary);
  if (!pf) throw IngestionError("cannot write checkpoint payload in " + dir);
  pf.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

template <typename S>
LanguageModel<S> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  if (!fs::exists(mpath))
    throw MissingArtifactError("checkpoint manifest not found: " +
                               mpath.string());
  std::ifstream mf(mpath, std::ios::binary);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("scalar", "") != detail::ScalarTag<S>::name)
    throw IngestionError("checkpoint scalar type mismatch");
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();

  std::ifstream pf(fs::path(dir) / "tensors.bin", std::ios::binary);
  if (!pf)
    throw MissingArtifactError("checkpoint payload not found in " + dir);
  std::string payload((std::istreambuf_iterator<char>(pf)),
                      std::istreambuf_iterator<char>());

  LanguageModel<S> model = LanguageModel<S>::init(cfg, 0);
  auto params = model.parameters();
  std::size_t loaded = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    std::size_t pos = entry.at("offset").get<std::size_t>();
    Tensor<S> t = deserialize_tensor<S>(payload, pos);
    bool found = false;
    for (auto& [pname, p] : params) {
      if (pname != name) continue;
      if (p.shape() != t.shape())
        throw IngestionError("checkpoint tensor '" + name +
                             "' has shape " + shape_str(t.shape()) +
                             ", model expects " + shape_str(p.shape()));
      p.values() = t.values();
      found = true;
      ++loaded;
      break;
    }
    if (!found)
      throw IngestionError("checkpoint tensor '" + name +
                           "' is not a model parameter");
  }
  if (loaded != params.size())
    throw IngestionError("checkpoint is missing model parameters");
  return model;
}

}  // namespace lmlab
