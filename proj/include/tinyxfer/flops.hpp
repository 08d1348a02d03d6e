// SPDX-License-Identifier: Apache-2.0
//
// GEMM-only FLOPs model for decoder inference with prefix caching.
//
// Per forward pass over s_u uncached tokens attending to s_t context tokens:
//   qkv       2 b s_u h d_h (n_a + 2 n_kv)
//   attention 2 b s_t s_u n_a d_h
//   o_proj    2 b s_u h n_a d_h
//   ffn       3 x 2 b s_u h d_i
//   lm_head   2 b h v
// The first four are per layer. A request is one prefill pass plus one pass
// per decoded token with s_u = 1 and a context that grows by one each step.
// All arithmetic is exact in 64-bit integers; overflow is an error.

#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyxfer/model.hpp"

namespace tinyxfer {

struct WorkloadSpec {
  std::uint64_t batch = 1;
  std::uint64_t context = 0;   // s_t
  std::uint64_t uncached = 0;  // s_u
  std::uint64_t decode = 0;

  void validate() const {
    if (uncached > context)
      throw config_error("uncached prefill tokens (" + std::to_string(uncached) + ") exceed context (" +
                         std::to_string(context) + ")");
  }
};

struct FlopsBreakdown {
  // Per-layer terms are already multiplied by the layer count.
  std::uint64_t qkv = 0, attention = 0, o_proj = 0, ffn = 0, lm_head = 0;
  std::uint64_t total = 0;

  std::uint64_t layer_terms() const { return total - lm_head; }
  bool operator==(const FlopsBreakdown&) const = default;
};

namespace detail {

inline std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw runtime_error("FLOPs count overflows 64 bits");
  return r;
}

template <typename... T>
std::uint64_t mul(std::uint64_t a, std::uint64_t b, T... rest) {
  return mul(mul(a, b), rest...);
}

inline std::uint64_t add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw runtime_error("FLOPs count overflows 64 bits");
  return r;
}

}  // namespace detail

inline FlopsBreakdown flops_forward(const ModelArch& a, std::uint64_t b, std::uint64_t s_u, std::uint64_t s_t) {
  using detail::add;
  using detail::mul;
  const std::uint64_t l = a.layers, h = a.hidden, na = a.heads, nkv = a.kv_heads, dh = a.head_dim,
                      di = a.ffn_inter, v = a.vocab;
  FlopsBreakdown f;
  f.qkv = mul(l, 2, b, s_u, h, dh, add(na, mul(2, nkv)));
  f.attention = mul(l, 2, b, s_t, s_u, na, dh);
  f.o_proj = mul(l, 2, b, s_u, h, na, dh);
  f.ffn = mul(l, 6, b, s_u, h, di);
  f.lm_head = mul(2, b, h, v);
  f.total = add(add(add(f.qkv, f.attention), add(f.o_proj, f.ffn)), f.lm_head);
  return f;
}

inline FlopsBreakdown operator+(const FlopsBreakdown& x, const FlopsBreakdown& y) {
  using detail::add;
  return {add(x.qkv, y.qkv),       add(x.attention, y.attention), add(x.o_proj, y.o_proj),
          add(x.ffn, y.ffn),       add(x.lm_head, y.lm_head),     add(x.total, y.total)};
}

inline FlopsBreakdown flops_request_breakdown(const ModelArch& a, const WorkloadSpec& w) {
  w.validate();
  FlopsBreakdown f = flops_forward(a, w.batch, w.uncached, w.context);
  for (std::uint64_t i = 1; i <= w.decode; ++i) f = f + flops_forward(a, w.batch, 1, w.context + i);
  return f;
}

inline std::uint64_t flops_request(const ModelArch& a, const WorkloadSpec& w) {
  return flops_request_breakdown(a, w).total;
}

// Prompts of 1792 tokens, 128 of them uncached after prefix caching, and 9
// generated tokens per request.
inline WorkloadSpec reference_workload() { return {1, 1792, 128, 9}; }

// ---------------------------------------------------------------------------
// Registry

struct RegistryEntry {
  std::string name;
  ModelArch arch;
  std::optional<double> reported_gflops;  // published per-request figure, metadata only
};

namespace detail {

inline ModelArch qwen_arch(std::size_t l, std::size_t h, std::size_t na, std::size_t nkv, std::size_t dh,
                           std::size_t di, std::size_t v, bool tied) {
  ModelArch a;
  a.layers = l;
  a.hidden = h;
  a.heads = na;
  a.kv_heads = nkv;
  a.head_dim = dh;
  a.ffn_inter = di;
  a.vocab = v;
  a.tied_head = tied;
  a.rope_base = 1000000.0;
  return a;
}

}  // namespace detail

inline std::vector<RegistryEntry> builtin_registry() {
  using detail::qwen_arch;
  return {
      {"qwen2.5-0.5b", qwen_arch(24, 896, 14, 2, 64, 4864, 151936, true), 43.31},
      {"qwen2.5-1.5b", qwen_arch(28, 1536, 12, 2, 128, 8960, 151936, true), 111.91},
      {"qwen2.5-3b", qwen_arch(36, 2048, 16, 2, 128, 11008, 151936, true), 218.94},
      {"qwen2.5-7b", qwen_arch(28, 3584, 28, 4, 128, 18944, 152064, false), 434.04},
      {"qwen2.5-72b", qwen_arch(80, 8192, 64, 8, 128, 29568, 152064, false), 4907.50},
      {"qwen2.5-0.4b-width", qwen_arch(24, 832, 14, 2, 64, 3840, 151936, true), 40.83},
      {"qwen2.5-0.4b-depth", qwen_arch(19, 896, 14, 2, 64, 4864, 151936, true), 33.10},
  };
}

inline json registry_to_json(const std::vector<RegistryEntry>& reg) {
  json models = json::array();
  for (const auto& e : reg) {
    json m{{"name", e.name}, {"arch", to_json(e.arch)}};
    m["reported_gflops"] = e.reported_gflops ? json(*e.reported_gflops) : json(nullptr);
    models.push_back(m);
  }
  return json{{"version", 1}, {"models", models}};
}

inline std::vector<RegistryEntry> registry_from_json(const json& j) {
  if (!j.is_object() || j.value("version", 0) != 1) throw input_error("registry: unsupported or missing version");
  std::vector<RegistryEntry> out;
  try {
    for (const auto& m : j.at("models")) {
      RegistryEntry e{m.at("name").get<std::string>(), arch_from_json(m.at("arch")), std::nullopt};
      if (m.contains("reported_gflops") && !m["reported_gflops"].is_null())
        e.reported_gflops = m["reported_gflops"].get<double>();
      for (const auto& prev : out)
        if (prev.name == e.name) throw input_error("registry: duplicate model '" + e.name + "'");
      out.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw input_error(std::string("registry: ") + e.what());
  }
  return out;
}

inline const RegistryEntry& find_model(const std::vector<RegistryEntry>& reg, const std::string& name) {
  for (const auto& e : reg)
    if (e.name == name) return e;
  std::string known;
  for (const auto& e : reg) known += (known.empty() ? "" : ", ") + e.name;
  throw config_error("unknown architecture '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Comparison report

struct CompareRow {
  std::string name;
  FlopsBreakdown flops;
  double ratio = 1.0;  // total / baseline total
  std::optional<double> reported_gflops;
};

// Rows sorted by total FLOPs (ascending); ratios against `baseline`
// (defaults to the first name).
inline std::vector<CompareRow> compare(const std::vector<RegistryEntry>& reg, const std::vector<std::string>& names,
                                       const WorkloadSpec& w, std::optional<std::string> baseline = std::nullopt) {
  if (names.empty()) throw config_error("compare needs at least one architecture");
  const std::string base = baseline.value_or(names.front());
  const double base_total = static_cast<double>(flops_request(find_model(reg, base).arch, w));
  std::vector<CompareRow> rows;
  for (const auto& n : names) {
    const auto& e = find_model(reg, n);
    const auto f = flops_request_breakdown(e.arch, w);
    rows.push_back({n, f, static_cast<double>(f.total) / base_total, e.reported_gflops});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CompareRow& x, const CompareRow& y) { return x.flops.total < y.flops.total; });
  return rows;
}

inline std::string format_table(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "model" << std::right << std::setw(18) << "qkv" << std::setw(18) << "attention"
     << std::setw(18) << "o_proj" << std::setw(18) << "ffn" << std::setw(16) << "lm_head" << std::setw(20) << "total"
     << std::setw(10) << "GFLOPs" << std::setw(8) << "ratio" << std::setw(10) << "reported" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(22) << r.name << std::right << std::setw(18) << r.flops.qkv << std::setw(18)
       << r.flops.attention << std::setw(18) << r.flops.o_proj << std::setw(18) << r.flops.ffn << std::setw(16)
       << r.flops.lm_head << std::setw(20) << r.flops.total << std::setw(10) << std::fixed << std::setprecision(2)
       << static_cast<double>(r.flops.total) / 1e9 << std::setw(8) << std::setprecision(3) << r.ratio
       << std::setw(10);
    if (r.reported_gflops) os << std::setprecision(2) << *r.reported_gflops;
    else os << "-";
    os << "\n";
  }
  return os.str();
}

inline std::string format_csv(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "model,qkv,attention,o_proj,ffn,lm_head,total,ratio,reported_gflops\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.flops.qkv << ',' << r.flops.attention << ',' << r.flops.o_proj << ',' << r.flops.ffn
       << ',' << r.flops.lm_head << ',' << r.flops.total << ',' << std::setprecision(6) << r.ratio << ',';
    if (r.reported_gflops) os << *r.reported_gflops;
    os << "\n";
  }
  return os.str();
}

inline json to_json(const FlopsBreakdown& f) {
  return json{{"qkv", f.qkv},         {"attention", f.attention}, {"o_proj", f.o_proj},
              {"ffn", f.ffn},         {"lm_head", f.lm_head},     {"total", f.total}};
}

}  // namespace tinyxfer
