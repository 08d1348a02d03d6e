// SPDX-License-Identifier: Apache-2.0
//
// Runnable stages shared by the command-line tool and the pipeline runner.
// Each stage has a typed key schema (unknown keys rejected, every default
// materialized), reads its inputs, writes named artifacts into one output
// directory and leaves a manifest.json next to them.

#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "tinyxfer/distill.hpp"
#include "tinyxfer/fixtures.hpp"
#include "tinyxfer/flops.hpp"
#include "tinyxfer/prune.hpp"
#include "tinyxfer/quant.hpp"
#include "tinyxfer/retrieval.hpp"
#include "tinyxfer/rewards.hpp"
#include "tinyxfer/transfer.hpp"

namespace tinyxfer {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { Error, Warn, Info, Debug };

inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::Info;
  return level;
}

// When set, wins over every stage's log_level (pipeline-run --log-level).
inline std::optional<LogLevel>& log_override() {
  static std::optional<LogLevel> level;
  return level;
}

inline LogLevel log_level_from_string(const std::string& s) {
  if (s == "error") return LogLevel::Error;
  if (s == "warn") return LogLevel::Warn;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  throw config_error("unknown log_level '" + s + "' (error, warn, info, debug)");
}

inline void log(LogLevel level, const std::string& msg) {
  if (level > log_threshold()) return;
  static const char* tags[] = {"error", "warn", "info", "debug"};
  std::cerr << "[" << tags[static_cast<int>(level)] << "] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Key schema and config merging

enum class KeyType { Path, String, Int, Double, Bool, List };

struct KeySpec {
  std::string name;
  KeyType type = KeyType::String;
  json def = nullptr;  // null: no default
  bool required = false;
  bool input = false;  // a file or directory the stage reads
  std::string help;
};

using StageRunFn = std::function<json(const json& cfg, const std::filesystem::path& base,
                                      const std::filesystem::path& out)>;

struct StageDef {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
  std::vector<std::string> outputs;  // artifact file names inside the output directory
  bool needs_out = true;
  StageRunFn run;

  const KeySpec* key(std::string_view k) const {
    for (const auto& s : keys)
      if (s.name == k) return &s;
    return nullptr;
  }
};

inline std::string env_name(const std::string& key) {
  std::string out = "TINYXFER_";
  for (char c : key) out.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

namespace detail {

inline json coerce_string(const KeySpec& spec, const std::string& raw, const std::string& origin) {
  auto bad = [&](const char* what) {
    return config_error(origin + ": key '" + spec.name + "' expects " + what + ", got '" + raw + "'");
  };
  switch (spec.type) {
    case KeyType::Path:
    case KeyType::String: return raw;
    case KeyType::Int: {
      std::size_t pos = 0;
      long long v = 0;
      try {
        v = std::stoll(raw, &pos);
      } catch (...) {
        throw bad("an integer");
      }
      if (pos != raw.size()) throw bad("an integer");
      return v;
    }
    case KeyType::Double: {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(raw, &pos);
      } catch (...) {
        throw bad("a number");
      }
      if (pos != raw.size()) throw bad("a number");
      return v;
    }
    case KeyType::Bool:
      if (raw == "true" || raw == "1" || raw == "yes") return true;
      if (raw == "false" || raw == "0" || raw == "no") return false;
      throw bad("true or false");
    case KeyType::List: {
      json arr = json::array();
      std::stringstream ss(raw);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) arr.push_back(item);
      return arr;
    }
  }
  return raw;
}

inline json coerce_json(const KeySpec& spec, const json& v, const std::string& origin) {
  auto bad = [&](const char* what) {
    return config_error(origin + ": key '" + spec.name + "' expects " + what + ", got " + v.dump());
  };
  if (v.is_null()) return v;
  switch (spec.type) {
    case KeyType::Path:
    case KeyType::String:
      if (!v.is_string()) throw bad("a string");
      return v;
    case KeyType::Int:
      if (!v.is_number_integer()) throw bad("an integer");
      return v;
    case KeyType::Double:
      if (!v.is_number()) throw bad("a number");
      return v.get<double>();
    case KeyType::Bool:
      if (!v.is_boolean()) throw bad("true or false");
      return v;
    case KeyType::List:
      if (v.is_string()) return coerce_string(spec, v.get<std::string>(), origin);
      if (!v.is_array()) throw bad("a list");
      return v;
  }
  return v;
}

}  // namespace detail

struct ConfigLayers {
  json file = json::object();                       // from --config
  std::string file_origin = "config file";
  std::function<std::optional<std::string>(const std::string&)> env;  // variable lookup
  std::map<std::string, std::string> flags;         // explicit command-line values
};

inline std::optional<std::string> process_env(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (!v) return std::nullopt;
  return std::string(v);
}

// Precedence: defaults < file < environment < flags.
inline json resolve_config(const StageDef& def, const ConfigLayers& layers) {
  json cfg = json::object();
  for (const auto& k : def.keys) cfg[k.name] = k.def;
  if (!layers.file.is_object()) throw config_error(layers.file_origin + " must be a JSON object");
  for (const auto& [k, v] : layers.file.items()) {
    if (k == "version") {
      if (v != 1) throw config_error(layers.file_origin + ": unsupported config version " + v.dump());
      continue;
    }
    const KeySpec* spec = def.key(k);
    if (!spec) throw config_error(layers.file_origin + ": unknown key '" + k + "' for " + def.name);
    cfg[k] = detail::coerce_json(*spec, v, layers.file_origin);
  }
  if (layers.env)
    for (const auto& spec : def.keys)
      if (auto v = layers.env(env_name(spec.name)))
        cfg[spec.name] = detail::coerce_string(spec, *v, "environment " + env_name(spec.name));
  for (const auto& [k, v] : layers.flags) {
    const KeySpec* spec = def.key(k);
    if (!spec) throw config_error("unknown option --" + k + " for " + def.name);
    cfg[k] = detail::coerce_string(*spec, v, "--" + k);
  }
  for (const auto& spec : def.keys)
    if (spec.required && cfg[spec.name].is_null())
      throw config_error(def.name + ": missing required key '" + spec.name + "' (flag --" + spec.name + ", env " +
                         env_name(spec.name) + ", or config file)");
  if (cfg.contains("threads") && cfg["threads"].get<long long>() < 1) throw config_error("threads must be >= 1");
  if (cfg.contains("log_level")) log_level_from_string(cfg["log_level"].get<std::string>());
  return cfg;
}

// ---------------------------------------------------------------------------
// Stage helpers

namespace detail {

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path q(p);
  return q.is_absolute() ? q : (base / q).lexically_normal();
}

struct Cfg {
  const json& j;
  const std::filesystem::path& base;

  bool has(const char* k) const { return j.contains(k) && !j[k].is_null(); }
  std::filesystem::path path(const char* k) const { return resolve_path(base, j[k].get<std::string>()); }
  std::optional<std::filesystem::path> opt_path(const char* k) const {
    if (!has(k) || j[k].get<std::string>().empty()) return std::nullopt;
    return path(k);
  }
  std::string str(const char* k) const { return j[k].get<std::string>(); }
  long long integer(const char* k) const { return j[k].get<long long>(); }
  std::size_t size(const char* k) const {
    const auto v = integer(k);
    if (v < 0) throw config_error(std::string("key '") + k + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }
  double num(const char* k) const { return j[k].get<double>(); }
  bool flag(const char* k) const { return j[k].get<bool>(); }
  std::size_t threads() const { return size("threads"); }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }
};

inline void write_json(const std::filesystem::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

inline void save_corpus_jsonl(const std::filesystem::path& p, const std::vector<TokenSeq>& corpus) {
  std::vector<json> rows;
  for (const auto& s : corpus) rows.push_back(json{{"tokens", s}});
  write_jsonl(p, rows);
}

inline std::vector<TokenSeq> load_corpus_chunked(const Cfg& c, const char* key) {
  auto corpus = chunk_corpus(load_corpus(c.path(key)), c.has("chunk") ? c.size("chunk") : 0);
  if (corpus.empty()) throw input_error(c.path(key).string() + ": corpus is empty");
  return corpus;
}

inline std::size_t scored_tokens(const std::vector<TokenSeq>& corpus) {
  std::size_t n = 0;
  for (const auto& s : corpus) n += s.size() >= 2 ? s.size() - 1 : 0;
  return n;
}

}  // namespace detail

// Any model file the tool can score: a float checkpoint, a quantized
// checkpoint, or a linear student (JSON).
using AnyModel = std::variant<Checkpoint, QuantizedModel, LinearStudent>;

inline AnyModel load_any_model(const std::filesystem::path& p) {
  if (p.extension() == ".json") return LinearStudent::from_json(read_json_file(p));
  if (is_quantized_file(p)) return load_quantized(p);
  return load_checkpoint(p);
}

inline std::string model_kind(const AnyModel& m) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Checkpoint>) return "checkpoint";
        else if constexpr (std::is_same_v<T, QuantizedModel>) return "quantized";
        else return "linear_student";
      },
      m);
}

namespace detail {

inline std::vector<KeySpec> judge_keys() {
  return {
      {"judge", KeyType::String, "reference", false, false, "reference | remote"},
      {"judge_url", KeyType::String, "", false, false, "remote judge endpoint (http://host:port/path)"},
      {"time_normalization", KeyType::Bool, true, false, false, "treat equivalent clock times as equal"},
      {"timeout_ms", KeyType::Int, 30000, false, false, "remote judge timeout per attempt"},
      {"retries", KeyType::Int, 4, false, false, "remote judge attempts"},
      {"backoff_ms", KeyType::Int, 200, false, false, "initial retry delay, doubled per attempt"},
      {"verdict_store", KeyType::Path, "", false, false, "verdict cache JSONL (default: <out>/verdicts.jsonl)"},
  };
}

inline std::unique_ptr<Judge> make_backend_judge(const Cfg& c) {
  const std::string kind = c.str("judge");
  if (kind == "reference") return std::make_unique<ReferenceJudge>(ReferenceJudgeOptions{c.flag("time_normalization"), {}});
  if (kind == "remote") {
    if (c.str("judge_url").empty()) throw config_error("judge=remote needs judge_url");
    return std::make_unique<RemoteJudge>(
        c.str("judge_url"), RetryPolicy{static_cast<int>(c.integer("timeout_ms")), static_cast<int>(c.integer("retries")),
                                        static_cast<int>(c.integer("backoff_ms"))});
  }
  throw config_error("unknown judge '" + kind + "' (reference, remote)");
}

inline std::unique_ptr<Embedder> make_embedder(const Cfg& c) {
  const std::string kind = c.str("embedder");
  if (kind == "hash") return std::make_unique<HashEmbedder>(c.size("embed_dim"), c.seed());
  if (kind == "remote") {
    if (c.str("embed_url").empty()) throw config_error("embedder=remote needs embed_url");
    return std::make_unique<RemoteEmbedder>(c.str("embed_url"));
  }
  throw config_error("unknown embedder '" + kind + "' (hash, remote)");
}

inline std::vector<KeySpec> embedder_keys() {
  return {
      {"embedder", KeyType::String, "hash", false, false, "hash | remote"},
      {"embed_dim", KeyType::Int, 256, false, false, "hash embedder dimension"},
      {"embed_url", KeyType::String, "", false, false, "remote embedder endpoint"},
  };
}

template <typename... V>
std::vector<KeySpec> concat(std::vector<KeySpec> a, const V&... rest) {
  (a.insert(a.end(), rest.begin(), rest.end()), ...);
  return a;
}

inline std::vector<KeySpec> global_keys(bool out_required) {
  return {
      {"out", KeyType::Path, nullptr, out_required, false, "output directory"},
      {"seed", KeyType::Int, 42, false, false, "random seed"},
      {"threads", KeyType::Int, 1, false, false, "worker thread bound"},
      {"log_level", KeyType::String, "info", false, false, "error | warn | info | debug"},
  };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage definitions

inline const std::vector<StageDef>& stage_registry() {
  using detail::Cfg;
  using detail::write_json;
  namespace fs = std::filesystem;
  static const std::vector<StageDef> defs = [] {
    std::vector<StageDef> d;

    d.push_back({"prune-depth",
                 "remove the round(ratio*l) layers with the lowest layer importance",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"checkpoint", KeyType::Path, nullptr, true, true, "input checkpoint"},
                                    {"calib", KeyType::Path, nullptr, true, true, "calibration corpus"},
                                    {"chunk", KeyType::Int, 0, false, false, "split calibration sequences"},
                                    {"ratio", KeyType::Double, 0.2, false, false, "fraction of layers removed"},
                                }),
                 {"pruned.ckpt", "layer_importance.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto ck = load_checkpoint(c.path("checkpoint"));
                   const auto calib = detail::load_corpus_chunked(c, "calib");
                   const auto rep = layer_importance(ck, calib, c.threads());
                   const auto removed = layers_to_remove(rep, c.num("ratio"));
                   const auto pruned = remove_layers(ck, removed);
                   save_checkpoint(pruned, out / "pruned.ckpt");
                   write_json(out / "layer_importance.json", to_json(rep, removed));
                   return json{{"layers_before", ck.arch.layers}, {"layers_after", pruned.arch.layers}, {"removed", removed}};
                 }});

    d.push_back({"prune-width",
                 "keep the highest-importance embedding and intermediate channels",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"checkpoint", KeyType::Path, nullptr, true, true, "input checkpoint"},
                                    {"calib", KeyType::Path, nullptr, true, true, "calibration corpus"},
                                    {"chunk", KeyType::Int, 0, false, false, "split calibration sequences"},
                                    {"hidden", KeyType::Int, nullptr, true, false, "kept hidden size h'"},
                                    {"inter", KeyType::Int, nullptr, true, false, "kept intermediate size d_i'"},
                                    {"inter_mode", KeyType::String, "gate_up_energy", false, false,
                                     "gate_up_energy | swiglu_product"},
                                }),
                 {"pruned.ckpt", "channel_importance.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto ck = load_checkpoint(c.path("checkpoint"));
                   const auto calib = detail::load_corpus_chunked(c, "calib");
                   const std::string m = c.str("inter_mode");
                   if (m != "gate_up_energy" && m != "swiglu_product")
                     throw config_error("unknown inter_mode '" + m + "' (gate_up_energy, swiglu_product)");
                   const auto mode = m == "gate_up_energy" ? InterImportance::GateUpEnergy : InterImportance::SwigluProduct;
                   const auto rep = channel_importance(ck, calib, mode, c.threads());
                   ModelArch a = ck.arch;
                   a.hidden = c.size("hidden");
                   a.ffn_inter = c.size("inter");
                   const WidthConfig wc{a.hidden, a.ffn_inter, count_params(a), std::nullopt};
                   const auto pruned = width_prune(ck, wc, rep);
                   save_checkpoint(pruned, out / "pruned.ckpt");
                   write_json(out / "channel_importance.json", to_json(rep, &wc));
                   return json{{"config", to_json(wc)}};
                 }});

    d.push_back({"arch-search",
                 "rank width configurations near a parameter-reduction target by calibration perplexity",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"checkpoint", KeyType::Path, nullptr, true, true, "input checkpoint"},
                                    {"calib", KeyType::Path, nullptr, true, true, "calibration corpus"},
                                    {"chunk", KeyType::Int, 0, false, false, "split calibration sequences"},
                                    {"ratio", KeyType::Double, 0.2, false, false, "target parameter reduction"},
                                    {"hidden_granularity", KeyType::Int, 0, false, false, "h' grid step (0: 64, or h/16 for h < 1024)"},
                                    {"inter_granularity", KeyType::Int, 0, false, false,
                                     "d_i' grid step (0: 256, or d_i/8 for d_i < 4096)"},
                                    {"tolerance", KeyType::Double, 0.03, false, false, "relative band around target"},
                                }),
                 {"candidates.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto ck = load_checkpoint(c.path("checkpoint"));
                   const auto calib = detail::load_corpus_chunked(c, "calib");
                   std::size_t hg = c.size("hidden_granularity"), ig = c.size("inter_granularity");
                   if (hg == 0) hg = ck.arch.hidden >= 1024 ? 64 : std::max<std::size_t>(1, ck.arch.hidden / 16);
                   if (ig == 0) ig = ck.arch.ffn_inter >= 4096 ? 256 : std::max<std::size_t>(1, ck.arch.ffn_inter / 8);
                   const WidthSearchSpace space{hg, ig, c.num("tolerance")};
                   const auto ranked = arch_search(ck, c.num("ratio"), calib, space, c.threads());
                   json arr = json::array();
                   for (const auto& w : ranked) arr.push_back(to_json(w));
                   const json doc{{"ratio", c.num("ratio")}, {"baseline_params", count_params(ck.arch).total}, {"candidates", arr}};
                   write_json(out / "candidates.json", doc);
                   std::cout << doc.dump(2) << "\n";
                   return json{{"candidates", ranked.size()}, {"best", arr.front()}};
                 }});

    d.push_back({"quantize",
                 "post-training weight quantization (w8a16, w4a16, w8a8-fp8)",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"checkpoint", KeyType::Path, nullptr, true, true, "input checkpoint"},
                                    {"calib", KeyType::Path, "", false, true, "calibration corpus (needed for GPTQ)"},
                                    {"chunk", KeyType::Int, 0, false, false, "split calibration sequences"},
                                    {"scheme", KeyType::String, "w8a16", false, false, "w8a16 | w4a16 | w8a8-fp8"},
                                    {"method", KeyType::String, "auto", false, false, "auto | rtn | gptq"},
                                    {"group_size", KeyType::Int, 128, false, false, "columns per scale group"},
                                    {"calib_samples", KeyType::Int, 512, false, false, "calibration sequences used"},
                                    {"damping", KeyType::Double, 0.01, false, false, "GPTQ Hessian damping"},
                                    {"fp8_per_row", KeyType::Bool, false, false, false, "FP8 scales per output row"},
                                }),
                 {"quantized.ckpt"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto ck = load_checkpoint(c.path("checkpoint"));
                   QuantScheme s;
                   s.kind = quant_kind_from_string(c.str("scheme"));
                   const std::string m = c.str("method");
                   if (m == "auto") s.method = WeightMethod::Auto;
                   else if (m == "rtn") s.method = WeightMethod::Rtn;
                   else if (m == "gptq") s.method = WeightMethod::Gptq;
                   else throw config_error("unknown method '" + m + "' (auto, rtn, gptq)");
                   s.group_size = c.size("group_size");
                   s.calib_samples = c.size("calib_samples");
                   s.damping = c.num("damping");
                   s.fp8_per_row = c.flag("fp8_per_row");
                   std::vector<TokenSeq> calib;
                   if (c.opt_path("calib")) calib = detail::load_corpus_chunked(c, "calib");
                   const auto qm = quantize_model(ck, s, calib, c.threads());
                   save_quantized(qm, out / "quantized.ckpt");
                   return json{{"scheme", to_json(s)}, {"quantized_tensors", qm.int_weights.size() + qm.fp8_weights.size()}};
                 }});

    d.push_back({"distill-cache",
                 "store the teacher's top-k logits for every corpus position",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"teacher", KeyType::Path, nullptr, true, true, "teacher model"},
                                    {"corpus", KeyType::Path, nullptr, true, true, "training corpus"},
                                    {"chunk", KeyType::Int, 0, false, false, "split sequences (use the same value in distill-train)"},
                                    {"top_k", KeyType::Int, 100, false, false, "logits kept per position"},
                                }),
                 {"cache.bin"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto teacher = load_any_model(c.path("teacher"));
                   const auto corpus = detail::load_corpus_chunked(c, "corpus");
                   const auto cache = std::visit(
                       [&](const auto& m) { return build_cache(m, corpus, c.size("top_k"), c.threads()); }, teacher);
                   save_cache(cache, out / "cache.bin");
                   return json{{"records", cache.size()}, {"top_k", c.size("top_k")}, {"teacher_kind", model_kind(teacher)}};
                 }});

    d.push_back({"distill-train",
                 "train a linear student on a logits cache (fkl, rkl, akl)",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"cache", KeyType::Path, nullptr, true, true, "logits cache"},
                                    {"corpus", KeyType::Path, nullptr, true, true, "corpus the cache was built from"},
                                    {"chunk", KeyType::Int, 0, false, false, "must match distill-cache"},
                                    {"loss", KeyType::String, "akl", false, false, "fkl | rkl | akl"},
                                    {"mu", KeyType::Double, 0.9, false, false, "head-mass threshold"},
                                    {"alpha_head", KeyType::Double, nullptr, false, false, "fixed head weight (unset: adaptive)"},
                                    {"ce_mix", KeyType::Double, 0.0, false, false, "cross-entropy mixing weight"},
                                    {"steps", KeyType::Int, 300, false, false, "gradient steps"},
                                    {"lr", KeyType::Double, 1.0, false, false, "learning rate"},
                                    {"dim", KeyType::Int, 16, false, false, "student feature dimension"},
                                    {"window", KeyType::Int, 3, false, false, "student context window"},
                                    {"vocab", KeyType::Int, 0, false, false, "student vocab (0: infer from data)"},
                                }),
                 {"student.json", "train_log.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto cache = load_cache(c.path("cache"));
                   const auto corpus = detail::load_corpus_chunked(c, "corpus");
                   DistillConfig dc;
                   dc.kind = loss_kind_from_string(c.str("loss"));
                   dc.mu = c.num("mu");
                   if (c.has("alpha_head")) dc.alpha_head = c.num("alpha_head");
                   dc.ce_mix = c.num("ce_mix");
                   std::size_t vocab = c.size("vocab");
                   if (vocab == 0) {
                     for (const auto& s : corpus)
                       for (auto t : s) vocab = std::max<std::size_t>(vocab, static_cast<std::size_t>(t) + 1);
                     for (const auto& r : cache)
                       for (auto id : r.ids) vocab = std::max<std::size_t>(vocab, static_cast<std::size_t>(id) + 1);
                   }
                   auto student = LinearStudent::make(vocab, c.size("dim"), c.size("window"), c.seed());
                   const auto res = train_student(student, cache, corpus, dc, c.size("steps"), c.num("lr"));
                   write_json(out / "student.json", res.student.to_json());
                   write_json(out / "train_log.json", json{{"loss_curve", res.loss_curve}});
                   return json{{"initial_loss", res.loss_curve.front()}, {"final_loss", res.loss_curve.back()}};
                 }});

    d.push_back({"rft-filter",
                 "keep the samples a judge accepts",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{{"dataset", KeyType::Path, nullptr, true, true, "sample JSONL"}},
                                detail::judge_keys()),
                 {"filtered.jsonl", "filter_report.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto data = load_dataset(c.path("dataset"));
                   auto backend = detail::make_backend_judge(c);
                   MemoJudge memo(*backend, c.opt_path("verdict_store").value_or(out / "verdicts.jsonl"));
                   const auto r = rft_filter(data, memo, c.threads());
                   save_dataset(out / "filtered.jsonl", r.kept);
                   write_json(out / "filter_report.json", to_json(r.report));
                   return json{{"total", r.report.total}, {"kept", r.report.kept}, {"dropped", r.report.dropped},
                               {"judge_calls", memo.backend_calls()}};
                 }});

    d.push_back({"eval-ar",
                 "achievable rate of a dataset under a judge",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{{"dataset", KeyType::Path, nullptr, true, true, "sample JSONL"}},
                                detail::judge_keys()),
                 {"ar.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto data = load_dataset(c.path("dataset"));
                   auto backend = detail::make_backend_judge(c);
                   MemoJudge memo(*backend, c.opt_path("verdict_store").value_or(out / "verdicts.jsonl"));
                   const auto r = achievable_rate(data, memo, c.threads());
                   write_json(out / "ar.json", to_json(r));
                   std::cout << "achievable rate " << r.passed << "/" << r.total << " = " << r.rate << "\n";
                   return json{{"rate", r.rate}, {"passed", r.passed}, {"total", r.total}};
                 }});

    d.push_back({"eval-ppl",
                 "perplexity of a model on a corpus",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"model", KeyType::Path, nullptr, true, true, "checkpoint, quantized checkpoint or student JSON"},
                                    {"corpus", KeyType::Path, nullptr, true, true, "evaluation corpus"},
                                    {"chunk", KeyType::Int, 0, false, false, "split sequences"},
                                }),
                 {"ppl.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto model = load_any_model(c.path("model"));
                   const auto corpus = detail::load_corpus_chunked(c, "corpus");
                   const double ppl =
                       std::visit([&](const auto& m) { return corpus_perplexity(m, corpus, c.threads()); }, model);
                   const json r{{"perplexity", ppl}, {"tokens", detail::scored_tokens(corpus)}, {"model_kind", model_kind(model)}};
                   write_json(out / "ppl.json", r);
                   std::cout << "perplexity " << ppl << "\n";
                   return r;
                 }});

    d.push_back({"reward-eval",
                 "score model outputs with the tiered or public reward",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"records", KeyType::Path, nullptr, true, true, "reward records JSONL"},
                                    {"mode", KeyType::String, "", false, false, "tiered | public (default: per record)"},
                                }),
                 {"rewards.jsonl", "summary.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   auto records = read_jsonl(c.path("records"));
                   if (!c.str("mode").empty())
                     for (auto& r : records)
                       if (r.is_object() && !r.contains("mode")) r["mode"] = c.str("mode");
                   const auto [scored, summary] = evaluate_reward_batch(records);
                   write_jsonl(out / "rewards.jsonl", scored);
                   const json s{{"count", summary.count}, {"mean_score", summary.mean_score}, {"histogram", summary.histogram}};
                   write_json(out / "summary.json", s);
                   return s;
                 }});

    d.push_back({"retrieve",
                 "top-k API retrieval and recall@n",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"pool", KeyType::Path, nullptr, true, true, "API pool JSON"},
                                    {"queries", KeyType::Path, nullptr, true, true, "JSONL of {query, gold?}"},
                                    {"k", KeyType::Int, 5, false, false, "candidates per query"},
                                    {"n_values", KeyType::List, json::array({"1", "3", "5", "10"}), false, false,
                                     "recall cut-offs"},
                                },
                                detail::embedder_keys()),
                 {"retrieval.jsonl", "recall.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto docs = docs_from_json(read_json_file(c.path("pool")));
                   auto emb = detail::make_embedder(c);
                   const auto ix = index_build(docs, *emb, c.threads());
                   const auto qs = read_jsonl(c.path("queries"));
                   std::vector<json> rows(qs.size());
                   std::vector<std::vector<std::string>> runs(qs.size());
                   std::vector<std::string> gold;
                   for (std::size_t i = 0; i < qs.size(); ++i) {
                     if (!qs[i].contains("query") || !qs[i]["query"].is_string())
                       throw input_error("queries line " + std::to_string(i + 1) + " needs a string \"query\"");
                     if (qs[i].contains("gold")) gold.push_back(qs[i]["gold"].get<std::string>());
                   }
                   parallel_for(qs.size(), c.threads(), [&](std::size_t i) {
                     const auto hits = retrieve(ix, *emb, qs[i]["query"].get<std::string>(), c.size("k"));
                     json h = json::array();
                     for (const auto& x : hits) {
                       h.push_back({{"id", x.id}, {"score", x.score}});
                       runs[i].push_back(x.id);
                     }
                     rows[i] = {{"query", qs[i]["query"]}, {"hits", h}};
                   });
                   write_jsonl(out / "retrieval.jsonl", rows);
                   json recall = nullptr;
                   if (!qs.empty() && gold.size() == qs.size()) {
                     std::vector<std::size_t> ns;
                     for (const auto& n : j["n_values"]) ns.push_back(n.is_string() ? std::stoul(n.get<std::string>()) : n.get<std::size_t>());
                     recall = to_json(recall_at_n(runs, gold, ns));
                   }
                   write_json(out / "recall.json", json{{"queries", qs.size()}, {"recall", recall}});
                   return json{{"queries", qs.size()}, {"recall", recall}};
                 }});

    d.push_back({"validate-data",
                 "schema-check a sample dataset, or replay the description-validation gates",
                 detail::concat(detail::global_keys(true),
                                std::vector<KeySpec>{
                                    {"dataset", KeyType::Path, "", false, true, "sample JSONL to check"},
                                    {"pool", KeyType::Path, "", false, true, "API pool JSON (description mode)"},
                                    {"descriptions", KeyType::Path, "", false, true,
                                     "JSONL of generated descriptions with selections and execution results"},
                                    {"top_gate", KeyType::Int, 5, false, false, "accepted rank bound"},
                                    {"candidates", KeyType::Int, 10, false, false, "APIs retrieved per description"},
                                },
                                detail::embedder_keys()),
                 {"validation_report.json", "validated.jsonl", "audit.jsonl"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   json summary = json::object();
                   if (auto p = c.opt_path("dataset")) {
                     std::ifstream in(*p);
                     if (!in) throw input_error("cannot open dataset '" + p->string() + "'");
                     json errors = json::array();
                     std::size_t total = 0, lineno = 0;
                     std::string line;
                     while (std::getline(in, line)) {
                       ++lineno;
                       if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                       ++total;
                       try {
                         const auto s = sample_from_json(parse_json(line, "line"), "line " + std::to_string(lineno));
                         if (s.gold)
                           if (auto e = validate_call(*s.gold, s.x.pool); !e.empty())
                             throw input_error("line " + std::to_string(lineno) + ": gold call invalid: " + e);
                       } catch (const Error& e) {
                         errors.push_back({{"line", lineno}, {"error", e.what()}});
                       }
                     }
                     const json rep{{"total", total}, {"valid", total - errors.size()}, {"errors", errors}};
                     write_json(out / "validation_report.json", rep);
                     summary["dataset"] = json{{"total", total}, {"invalid", errors.size()}};
                     if (!errors.empty())
                       throw input_error(std::to_string(errors.size()) + " invalid sample(s); first: " +
                                         errors[0]["error"].get<std::string>());
                   }
                   if (auto p = c.opt_path("descriptions")) {
                     if (!c.opt_path("pool")) throw config_error("description mode needs pool");
                     const auto docs = docs_from_json(read_json_file(c.path("pool")));
                     auto emb = detail::make_embedder(c);
                     const auto ix = index_build(docs, *emb);
                     const auto rows = read_jsonl(*p);
                     std::vector<std::string> queries;
                     // Recorded descriptions per query, each with the selection, execution
                     // result and judge outcome captured when it was generated.
                     std::map<std::string, std::vector<json>> rec;
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       const auto& r = rows[i];
                       const std::string where = "descriptions line " + std::to_string(i + 1);
                       if (!r.contains("query") || !r["query"].is_string() || !r.contains("descriptions") ||
                           !r["descriptions"].is_array())
                         throw input_error(where + " needs a string \"query\" and a \"descriptions\" array");
                       const std::string q = r["query"].get<std::string>();
                       if (rec.count(q)) throw input_error(where + ": duplicate query '" + q + "'");
                       for (const auto& dd : r["descriptions"])
                         if (!dd.is_object() || !dd.contains("text") || !dd.contains("api"))
                           throw input_error(where + ": each description needs \"text\" and \"api\"");
                       queries.push_back(q);
                       rec[q] = r["descriptions"].get<std::vector<json>>();
                     }
                     // Replay runs serially and visits descriptions in order, so a
                     // cursor per query identifies the record behind each call.
                     std::map<std::string, std::size_t> cursor;
                     const json* current = nullptr;
                     ValidationComponents comp;
                     comp.generate = [&](const std::string& q, std::size_t) {
                       std::vector<std::string> texts;
                       for (const auto& dd : rec.at(q)) texts.push_back(dd["text"].get<std::string>());
                       return texts;
                     };
                     comp.retrieve = index_retriever(ix, *emb, c.size("candidates"));
                     comp.select = [&](const std::string& q, const std::string&, const std::vector<Hit>&) {
                       current = &rec.at(q).at(cursor[q]++);
                       return Selection{current->at("api").get<std::string>(), current->value("params", json::object())};
                     };
                     comp.execute = [&](const std::string&, const json&) { return current->value("result", json(nullptr)); };
                     comp.judge = [&](const std::string&, const json&) { return current->value("success", false); };
                     const auto res = validate_descriptions(queries, comp, {0, c.size("top_gate"), 1});
                     std::vector<json> recs;
                     for (const auto& r : res.records) recs.push_back(to_json(r));
                     write_jsonl(out / "validated.jsonl", recs);
                     write_jsonl(out / "audit.jsonl", res.audit);
                     summary["descriptions"] = json{{"queries", queries.size()}, {"accepted", recs.size()}};
                   }
                   if (summary.empty()) throw config_error("validate-data needs dataset or descriptions");
                   return summary;
                 }});

    d.push_back({"flops",
                 "analytic GEMM FLOPs per request for registered architectures",
                 detail::concat(detail::global_keys(false),
                                std::vector<KeySpec>{
                                    {"arch", KeyType::List, json::array({"qwen2.5-0.5b"}), false, false,
                                     "architecture names (comma-separated)"},
                                    {"prefill", KeyType::Int, 128, false, false, "uncached prompt tokens s_u"},
                                    {"context", KeyType::Int, 1792, false, false, "prompt length s_t"},
                                    {"decode", KeyType::Int, 9, false, false, "generated tokens"},
                                    {"batch", KeyType::Int, 1, false, false, "batch size b"},
                                    {"baseline", KeyType::String, "", false, false, "ratio baseline (default: first arch)"},
                                    {"registry", KeyType::Path, "", false, true, "extra registry JSON"},
                                    {"format", KeyType::String, "table", false, false, "table | csv | json"},
                                }),
                 {"flops.json"},
                 false,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   auto reg = builtin_registry();
                   if (auto p = c.opt_path("registry"))
                     for (auto& e : registry_from_json(read_json_file(*p))) reg.push_back(std::move(e));
                   std::vector<std::string> names = j["arch"].get<std::vector<std::string>>();
                   const WorkloadSpec w{c.size("batch"), c.size("context"), c.size("prefill"), c.size("decode")};
                   std::optional<std::string> baseline;
                   if (!c.str("baseline").empty()) baseline = c.str("baseline");
                   const auto rows = compare(reg, names, w, baseline);
                   json arr = json::array();
                   for (const auto& r : rows) {
                     json x = to_json(r.flops);
                     x["name"] = r.name;
                     x["ratio"] = r.ratio;
                     x["reported_gflops"] = r.reported_gflops ? json(*r.reported_gflops) : json(nullptr);
                     arr.push_back(x);
                   }
                   const json doc{{"workload", {{"batch", w.batch}, {"context", w.context}, {"prefill", w.uncached}, {"decode", w.decode}}},
                                  {"rows", arr}};
                   const std::string fmt = c.str("format");
                   if (fmt == "table") std::cout << format_table(rows);
                   else if (fmt == "csv") std::cout << format_csv(rows);
                   else if (fmt == "json") std::cout << doc.dump(2) << "\n";
                   else throw config_error("unknown format '" + fmt + "' (table, csv, json)");
                   if (!out.empty()) write_json(out / "flops.json", doc);
                   return json{{"rows", arr.size()}};
                 }});

    d.push_back({"make-fixtures",
                 "write the deterministic toy fixtures and a demo plan",
                 detail::global_keys(true),
                 {"toy.ckpt", "corpus.jsonl", "calib.jsonl", "heldout.jsonl", "pool.json", "dataset.jsonl",
                  "queries.jsonl", "rewards.jsonl", "cache.bin", "plan.json"},
                 true,
                 [](const json& j, const fs::path& base, const fs::path& out) {
                   Cfg c{j, base};
                   const auto seed = c.seed();
                   const auto ck = make_toy_checkpoint(seed);
                   save_checkpoint(ck, out / "toy.ckpt");
                   const auto corpus = sample_corpus(ck, 64, 32, seed + 1);
                   detail::save_corpus_jsonl(out / "corpus.jsonl", corpus);
                   detail::save_corpus_jsonl(out / "calib.jsonl", sample_corpus(ck, 32, 32, seed + 2));
                   detail::save_corpus_jsonl(out / "heldout.jsonl", sample_corpus(ck, 32, 32, seed + 3));
                   save_cache(build_cache(ck, corpus, 16, c.threads()), out / "cache.bin");

                   const json pool = make_api_pool(seed);
                   write_json(out / "pool.json", pool);
                   const auto data = make_judged_dataset(pool, 1000, seed + 4);
                   save_dataset(out / "dataset.jsonl", data);

                   std::vector<json> queries;
                   for (const auto& api : pool) {
                     const std::string name = api["name"].get<std::string>();
                     std::string words = name;
                     std::replace(words.begin(), words.end(), '_', ' ');
                     queries.push_back({{"query", "please " + words + " for me"}, {"gold", name}});
                   }
                   write_jsonl(out / "queries.jsonl", queries);

                   // Reward records: the dataset responses wrapped in the output
                   // template, alternating between the two reward modes.
                   std::vector<json> rewards;
                   for (std::size_t i = 0; i < 200 && i < data.size(); ++i) {
                     const auto& s = data[i];
                     const bool tiered = i % 2 == 0;
                     const json call = to_json(s.y.call);
                     const std::string answer = tiered ? call.dump() : json::array({call}).dump();
                     rewards.push_back({{"output_text", "<think>The request needs " + s.y.call.name + ".</think><answer>" +
                                                            answer + "</answer>"},
                                        {"gold", to_json(*s.gold)},
                                        {"tools", s.x.tools},
                                        {"mode", tiered ? "tiered" : "public"}});
                   }
                   write_jsonl(out / "rewards.jsonl", rewards);

                   const json plan{
                       {"version", 1},
                       {"workdir", "runs"},
                       {"globals", {{"seed", seed}, {"threads", c.integer("threads")}}},
                       {"externals", {{"rl_policy", "toy.ckpt"}, {"rl_data", "dataset.jsonl"}}},
                       {"stages",
                        json::array({
                            {{"name", "filter"}, {"kind", "rft-filter"}, {"config", {{"dataset", "@rl_data"}}}},
                            {{"name", "cache"},
                             {"kind", "distill-cache"},
                             {"config", {{"teacher", "@rl_policy"}, {"corpus", "corpus.jsonl"}, {"top_k", 16}}}},
                            {{"name", "student"},
                             {"kind", "distill-train"},
                             {"config", {{"cache", "@cache/cache.bin"}, {"corpus", "corpus.jsonl"}, {"steps", 100}}}},
                            {{"name", "prune"},
                             {"kind", "prune-depth"},
                             {"config", {{"checkpoint", "@rl_policy"}, {"calib", "calib.jsonl"}, {"ratio", 0.25}}}},
                            {{"name", "quant"},
                             {"kind", "quantize"},
                             {"config", {{"checkpoint", "@prune/pruned.ckpt"}, {"calib", "calib.jsonl"}, {"scheme", "w8a16"}}}},
                            {{"name", "ppl"},
                             {"kind", "eval-ppl"},
                             {"config", {{"model", "@quant/quantized.ckpt"}, {"corpus", "heldout.jsonl"}}}},
                        })}};
                   write_json(out / "plan.json", plan);
                   return json{{"seed", seed}, {"pool_functions", pool.size()}, {"samples", data.size()}};
                 }});

    return d;
  }();
  return defs;
}

inline const StageDef& find_stage(const std::string& name) {
  for (const auto& d : stage_registry())
    if (d.name == name) return d;
  std::string known;
  for (const auto& d : stage_registry()) known += (known.empty() ? "" : ", ") + d.name;
  throw config_error("unknown stage '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Execution with manifest

inline json artifact_hashes(const StageDef& def, const std::filesystem::path& out) {
  json h = json::object();
  for (const auto& name : def.outputs)
    if (std::filesystem::exists(out / name)) h[name] = file_sha256(out / name);
  return h;
}

inline json input_hashes(const StageDef& def, const json& cfg, const std::filesystem::path& base) {
  json h = json::object();
  for (const auto& k : def.keys) {
    if (!k.input || cfg[k.name].is_null() || cfg[k.name].get<std::string>().empty()) continue;
    const auto p = detail::resolve_path(base, cfg[k.name].get<std::string>());
    if (!std::filesystem::exists(p)) throw input_error(def.name + ": input '" + k.name + "' not found: " + p.string());
    h[k.name] = {{"path", cfg[k.name]}, {"sha256", path_sha256(p)}};
  }
  return h;
}

// Runs one stage; relative paths resolve against `base`. Writes
// <out>/manifest.json when the stage has an output directory.
inline json run_stage(const StageDef& def, const json& cfg, const std::filesystem::path& base) {
  namespace fs = std::filesystem;
  log_threshold() = log_override() ? *log_override() : log_level_from_string(cfg.value("log_level", "info"));
  fs::path out;
  if (cfg.contains("out") && cfg["out"].is_string()) out = detail::resolve_path(base, cfg["out"].get<std::string>());
  if (def.needs_out && out.empty()) throw config_error(def.name + " needs an output directory (--out)");
  const json inputs = input_hashes(def, cfg, base);
  if (!out.empty()) fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  log(LogLevel::Info, def.name + ": running");
  const json summary = def.run(cfg, base, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json manifest{{"command", def.name},
                {"tool_version", kToolVersion},
                {"config", cfg},
                {"config_hash", sha256_hex(canonical_dump(cfg))},
                {"inputs", inputs},
                {"outputs", out.empty() ? json::object() : artifact_hashes(def, out)},
                {"summary", summary},
                {"wall_time_s", secs}};
  if (!out.empty()) detail::write_json(out / "manifest.json", manifest);
  log(LogLevel::Info, def.name + ": done in " + std::to_string(secs) + " s");
  return manifest;
}

}  // namespace tinyxfer
