// SPDX-License-Identifier: Apache-2.0
//
// Architecture constants, checkpoint container and parameter accounting for
// small Qwen2.5-style decoder-only transformers.
//
// Tensor layout (all row-major, f32):
//   embed_tokens                    [v, h]
//   layers.{i}.input_layernorm      [h]
//   layers.{i}.q_proj.weight        [n_a*d_h, h]   q_proj.bias [n_a*d_h]
//   layers.{i}.k_proj.weight        [n_kv*d_h, h]  k_proj.bias [n_kv*d_h]
//   layers.{i}.v_proj.weight        [n_kv*d_h, h]  v_proj.bias [n_kv*d_h]
//   layers.{i}.o_proj.weight        [h, n_a*d_h]
//   layers.{i}.post_attention_layernorm [h]
//   layers.{i}.gate_proj.weight     [d_i, h]
//   layers.{i}.up_proj.weight       [d_i, h]
//   layers.{i}.down_proj.weight     [h, d_i]
//   norm                            [h]
//   lm_head                         [v, h]   (only when the head is untied)

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tinyxfer/common.hpp"

namespace tinyxfer {

struct ModelArch {
  std::size_t layers = 0;      // l
  std::size_t hidden = 0;      // h
  std::size_t heads = 0;       // n_a
  std::size_t kv_heads = 0;    // n_kv
  std::size_t head_dim = 0;    // d_h
  std::size_t ffn_inter = 0;   // d_i
  std::size_t vocab = 0;       // v
  bool tied_head = true;
  double rope_base = 10000.0;
  double rms_eps = 1e-6;

  std::size_t q_dim() const { return heads * head_dim; }
  std::size_t kv_dim() const { return kv_heads * head_dim; }

  bool operator==(const ModelArch&) const = default;
};

// Throws a config error naming the first violated constraint. An empty layer
// stack is allowed; every other dimension must be positive.
inline void validate(const ModelArch& a) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw config_error(std::string("invalid architecture: ") + what);
  };
  need(a.hidden >= 1, "hidden must be >= 1");
  need(a.heads >= 1, "heads must be >= 1");
  need(a.kv_heads >= 1, "kv_heads must be >= 1");
  need(a.head_dim >= 1, "head_dim must be >= 1");
  need(a.ffn_inter >= 1, "ffn_inter must be >= 1");
  need(a.vocab >= 1, "vocab must be >= 1");
  need(a.heads % a.kv_heads == 0, "heads must be a multiple of kv_heads");
  need(a.head_dim % 2 == 0, "head_dim must be even for rotary embedding");
}

inline json to_json(const ModelArch& a) {
  return json{{"layers", a.layers},     {"hidden", a.hidden},     {"heads", a.heads},
              {"kv_heads", a.kv_heads}, {"head_dim", a.head_dim}, {"ffn_inter", a.ffn_inter},
              {"vocab", a.vocab},       {"tied_head", a.tied_head}, {"rope_base", a.rope_base},
              {"rms_eps", a.rms_eps}};
}

inline ModelArch arch_from_json(const json& j) {
  try {
    ModelArch a;
    a.layers = j.at("layers").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::size_t>();
    a.heads = j.at("heads").get<std::size_t>();
    a.kv_heads = j.at("kv_heads").get<std::size_t>();
    a.head_dim = j.at("head_dim").get<std::size_t>();
    a.ffn_inter = j.at("ffn_inter").get<std::size_t>();
    a.vocab = j.at("vocab").get<std::size_t>();
    a.tied_head = j.value("tied_head", true);
    a.rope_base = j.value("rope_base", 10000.0);
    a.rms_eps = j.value("rms_eps", 1e-6);
    validate(a);
    return a;
  } catch (const json::exception& e) {
    throw input_error(std::string("malformed architecture: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamCount {
  std::uint64_t non_embedding = 0;
  std::uint64_t embedding = 0;
  std::uint64_t total = 0;
};

// Embedding = v*h. Non-embedding covers attention (q/k/v with biases, o
// without), SwiGLU FFN, both per-layer norms, the final norm and an untied
// head. A tied head shares the embedding and is counted once.
inline ParamCount count_params(const ModelArch& a) {
  const std::uint64_t h = a.hidden, q = a.q_dim(), kv = a.kv_dim();
  const std::uint64_t attn = (h * q + q) + 2 * (h * kv + kv) + q * h;
  const std::uint64_t ffn = 3 * h * a.ffn_inter;
  const std::uint64_t per_layer = attn + ffn + 2 * h;
  ParamCount c;
  c.embedding = static_cast<std::uint64_t>(a.vocab) * h;
  c.non_embedding = a.layers * per_layer + h + (a.tied_head ? 0 : c.embedding);
  c.total = c.non_embedding + c.embedding;
  return c;
}

// ---------------------------------------------------------------------------
// Tensors and checkpoints

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, float fill = 0.0f)
      : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(std::vector<std::size_t> s, std::vector<float> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) throw input_error("tensor data does not match its shape");
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() < 2 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  float* row(std::size_t r) { return data.data() + r * cols(); }
  const float* row(std::size_t r) const { return data.data() + r * cols(); }

  bool operator==(const Tensor&) const = default;
};

inline std::string layer_tensor(std::size_t layer, std::string_view suffix) {
  return "layers." + std::to_string(layer) + "." + std::string(suffix);
}

inline constexpr std::string_view kLinearSuffixes[] = {
    "q_proj.weight", "k_proj.weight", "v_proj.weight",   "o_proj.weight",
    "gate_proj.weight", "up_proj.weight", "down_proj.weight"};

// Every tensor name the architecture implies, with its exact shape.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(
    const ModelArch& a) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  const std::size_t h = a.hidden, q = a.q_dim(), kv = a.kv_dim(), di = a.ffn_inter;
  out.push_back({"embed_tokens", {a.vocab, h}});
  for (std::size_t i = 0; i < a.layers; ++i) {
    out.push_back({layer_tensor(i, "input_layernorm"), {h}});
    out.push_back({layer_tensor(i, "q_proj.weight"), {q, h}});
    out.push_back({layer_tensor(i, "q_proj.bias"), {q}});
    out.push_back({layer_tensor(i, "k_proj.weight"), {kv, h}});
    out.push_back({layer_tensor(i, "k_proj.bias"), {kv}});
    out.push_back({layer_tensor(i, "v_proj.weight"), {kv, h}});
    out.push_back({layer_tensor(i, "v_proj.bias"), {kv}});
    out.push_back({layer_tensor(i, "o_proj.weight"), {h, q}});
    out.push_back({layer_tensor(i, "post_attention_layernorm"), {h}});
    out.push_back({layer_tensor(i, "gate_proj.weight"), {di, h}});
    out.push_back({layer_tensor(i, "up_proj.weight"), {di, h}});
    out.push_back({layer_tensor(i, "down_proj.weight"), {h, di}});
  }
  out.push_back({"norm", {h}});
  if (!a.tied_head) out.push_back({"lm_head", {a.vocab, h}});
  return out;
}

struct Checkpoint {
  ModelArch arch;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw input_error("missing tensor '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw input_error("missing tensor '" + name + "'");
    return it->second;
  }
  const Tensor& layer(std::size_t i, std::string_view suffix) const {
    return at(layer_tensor(i, suffix));
  }
  Tensor& layer(std::size_t i, std::string_view suffix) { return at(layer_tensor(i, suffix)); }
  const Tensor& head() const { return arch.tied_head ? at("embed_tokens") : at("lm_head"); }
};

inline void validate(const Checkpoint& ck) {
  validate(ck.arch);
  auto expected = expected_tensors(ck.arch);
  for (const auto& [name, shape] : expected) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw input_error("missing tensor '" + name + "'");
    if (it->second.shape != shape)
      throw input_error("tensor '" + name + "' has shape " + json(it->second.shape).dump() +
                        ", expected " + json(shape).dump());
    if (it->second.data.size() != Tensor::numel(shape))
      throw input_error("tensor '" + name + "' payload does not match its shape");
  }
  if (ck.tensors.size() != expected.size()) {
    for (const auto& [name, _] : ck.tensors) {
      bool known = std::any_of(expected.begin(), expected.end(),
                               [&](const auto& e) { return e.first == name; });
      if (!known) throw input_error("unexpected tensor '" + name + "'");
    }
  }
}

// All-zero checkpoint with norms set to one.
inline Checkpoint make_zero_checkpoint(const ModelArch& arch) {
  validate(arch);
  Checkpoint ck;
  ck.arch = arch;
  for (auto& [name, shape] : expected_tensors(arch)) {
    const bool is_norm = name.ends_with("layernorm") || name == "norm";
    ck.tensors.emplace(name, Tensor(shape, is_norm ? 1.0f : 0.0f));
  }
  return ck;
}

// Gaussian init, std = scale / sqrt(fan_in) for matrices, norms at one.
inline Checkpoint make_random_checkpoint(const ModelArch& arch, std::uint64_t seed,
                                         double scale = 1.0) {
  Checkpoint ck = make_zero_checkpoint(arch);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : ck.tensors) {
    if (name.ends_with("layernorm") || name == "norm") continue;
    const double fan_in = t.shape.size() == 2 ? static_cast<double>(t.shape[1]) : 1.0;
    const double sd = name == "embed_tokens" ? scale : scale / std::sqrt(fan_in);
    std::normal_distribution<double> dist(0.0, name.ends_with(".bias") ? 0.1 * scale : sd);
    for (auto& x : t.data) x = static_cast<float>(dist(rng));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Binary container
//
//   magic "TXCKPT01" (8 bytes)
//   u32   container version (1)
//   u64   header length in bytes
//   header: UTF-8 JSON {arch, conventions, tensors:[{name,dtype,shape,offset,nbytes}], ...}
//   blob: tensor payloads, little-endian, row-major, at the recorded offsets
//
// The float checkpoint uses dtype "f32" only; the quantized container reuses
// the same layout with extra dtypes (see quant.hpp).

inline constexpr std::string_view kCheckpointMagic = "TXCKPT01";
inline constexpr std::uint32_t kContainerVersion = 1;

struct RawTensor {
  std::string name;
  std::string dtype;  // "f32", "int8", "int4", "f8e4m3"
  std::vector<std::size_t> shape;
  std::string bytes;
};

struct Container {
  json header;  // arch plus any extra top-level fields; "tensors" is filled on write
  std::vector<RawTensor> tensors;
};

inline std::size_t dtype_bytes(const std::string& dtype, std::size_t count) {
  if (dtype == "f32") return 4 * count;
  if (dtype == "int8" || dtype == "f8e4m3") return count;
  if (dtype == "int4") return (count + 1) / 2;
  throw input_error("unknown dtype '" + dtype + "'");
}

inline std::string encode_container(const Container& c) {
  json header = c.header;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", t.dtype},
                                 {"shape", t.shape},
                                 {"offset", offset},
                                 {"nbytes", t.bytes.size()}});
    offset += t.bytes.size();
  }
  const std::string text = canonical_dump(header);
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text);
  for (const auto& t : c.tensors) w.put_bytes(t.bytes);
  return w.take();
}

inline Container decode_container(std::string_view bytes, const std::string& origin) {
  ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() ||
      r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic)
    throw input_error(origin + ": malformed header (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion)
    throw input_error(origin + ": malformed header (unsupported version " +
                      std::to_string(version) + ")");
  const auto hlen = r.get<std::uint64_t>("header length");
  if (hlen > r.remaining()) throw input_error(origin + ": malformed header (length)");
  Container c;
  c.header = parse_json(r.take(hlen, "header"), origin + ": malformed header");
  const std::size_t blob_start = r.position();
  const std::size_t blob_size = r.remaining();
  try {
    for (const auto& entry : c.header.at("tensors")) {
      RawTensor t;
      t.name = entry.at("name").get<std::string>();
      t.dtype = entry.at("dtype").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto off = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != dtype_bytes(t.dtype, Tensor::numel(t.shape)) || off > blob_size ||
          nbytes > blob_size - off)
        throw input_error(origin + ": shape/payload mismatch for tensor '" + t.name + "'");
      t.bytes.assign(bytes.substr(blob_start + off, nbytes));
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw input_error(origin + ": malformed header (" + e.what() + ")");
  }
  c.header.erase("tensors");
  return c;
}

inline json conventions_json() {
  return json{{"qkv_bias", true}, {"o_bias", false}, {"norm", "rmsnorm"},
              {"activation", "swiglu"}, {"rope", "half-rotation"}};
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  validate(ck);
  Container c;
  c.header = {{"arch", to_json(ck.arch)}, {"conventions", conventions_json()}};
  for (const auto& [name, shape] : expected_tensors(ck.arch)) {
    const auto& t = ck.at(name);
    RawTensor raw{name, "f32", t.shape, {}};
    raw.bytes.assign(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 4);
    c.tensors.push_back(std::move(raw));
  }
  return encode_container(c);
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  Container c = decode_container(bytes, origin);
  if (!c.header.contains("arch")) throw input_error(origin + ": malformed header (no arch)");
  Checkpoint ck;
  ck.arch = arch_from_json(c.header.at("arch"));
  for (auto& raw : c.tensors) {
    if (raw.dtype != "f32")
      throw input_error(origin + ": tensor '" + raw.name + "' has dtype " + raw.dtype +
                        " (float checkpoint expected; use load_quantized)");
    Tensor t;
    t.shape = raw.shape;
    t.data.resize(Tensor::numel(raw.shape));
    std::memcpy(t.data.data(), raw.bytes.data(), raw.bytes.size());
    ck.tensors.emplace(raw.name, std::move(t));
  }
  validate(ck);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

}  // namespace tinyxfer
