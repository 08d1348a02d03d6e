// SPDX-License-Identifier: Apache-2.0
//
// Deterministic fixture generators shared by the tests and the CLI's
// `make-fixtures` subcommand.

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tinyxfer/distill.hpp"
#include "tinyxfer/toy_model.hpp"
#include "tinyxfer/transfer.hpp"

namespace tinyxfer {

// Linear-softmax teacher/student pair over a shared feature map, plus a
// random corpus and the teacher's top-k cache. The student starts at zero
// (uniform predictions), so zero loss is reachable.
struct DistillFixture {
  LinearStudent teacher;
  LinearStudent student;
  std::vector<TokenSeq> corpus;
  std::vector<LogitsCacheRecord> cache;
};

struct DistillFixtureOptions {
  std::size_t vocab = 64;
  std::size_t dim = 16;
  std::size_t window = 3;
  std::size_t sequences = 50;
  std::size_t length = 20;  // 50 x 20 = 1000 cached positions
  std::size_t top_k = 8;
  double teacher_scale = 4.0;
};

inline DistillFixture make_distill_fixture(std::uint64_t seed,
                                           const DistillFixtureOptions& o = {}) {
  DistillFixture f;
  f.teacher = LinearStudent::make(o.vocab, o.dim, o.window, seed);
  f.teacher.randomize_head(seed + 1, o.teacher_scale);
  f.student = LinearStudent::make(o.vocab, o.dim, o.window, seed);
  f.corpus = random_corpus(o.vocab, o.sequences, o.length, seed + 2);
  f.cache = build_cache(f.teacher, f.corpus, o.top_k);
  return f;
}

// ---------------------------------------------------------------------------
// Function pool and judged dataset

inline constexpr std::size_t kPoolFunctions = 74;
inline constexpr std::size_t kPoolArguments = 225;

namespace detail {

struct ParamKind {
  const char* name;
  const char* type;
  const char* description;
};

inline const std::vector<ParamKind>& param_kinds() {
  static const std::vector<ParamKind> kinds = {
      {"time", "str", "clock time, e.g. 07:30"},
      {"date", "str", "calendar date, YYYY-MM-DD"},
      {"name", "str", "display name"},
      {"count", "int", "number of items"},
      {"level", "int", "level from 0 to 100"},
      {"enabled", "bool", "turn on or off"},
      {"location", "str", "place or city"},
      {"label", "str", "short label"},
      {"duration_minutes", "int", "duration in minutes"},
      {"query", "str", "free-text search query"},
      {"contact", "str", "contact name"},
      {"repeat", "bool", "repeat daily"},
  };
  return kinds;
}

inline const std::vector<std::string>& fixture_words() {
  static const std::vector<std::string> w = {"Alice", "Bob",    "office", "Paris",  "morning", "gym",
                                             "Tokyo", "dinner", "Carol",  "garden", "music",   "school"};
  return w;
}

inline json random_param_value(const std::string& kind, std::mt19937_64& rng) {
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  if (kind == "time") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02d:%02d", uni(0, 23), uni(0, 11) * 5);
    return buf;
  }
  if (kind == "date") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "2024-%02d-%02d", uni(1, 12), uni(1, 28));
    return buf;
  }
  if (kind == "count" || kind == "duration_minutes") return uni(1, 90);
  if (kind == "level") return uni(0, 100);
  if (kind == "enabled" || kind == "repeat") return uni(0, 1) == 1;
  const auto& w = fixture_words();
  return w[static_cast<std::size_t>(uni(0, static_cast<int>(w.size()) - 1))];
}

inline std::string to_12h(const std::string& hhmm) {
  const int h = std::stoi(hhmm.substr(0, 2));
  const int m = std::stoi(hhmm.substr(3, 2));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%d:%02d %s", h % 12 == 0 ? 12 : h % 12, m, h < 12 ? "am" : "pm");
  return buf;
}

}  // namespace detail

// 74 tool specs with 225 arguments in total (71 x 3 + 3 x 4). The first two
// arguments of every tool are required.
inline json make_api_pool(std::uint64_t seed = 42) {
  static const char* verbs[] = {"set", "get", "cancel", "create", "update", "find", "open", "share", "play"};
  static const char* nouns[] = {"alarm",    "timer", "reminder", "weather", "contact", "message", "playlist",
                                "volume",   "brightness", "wifi", "bluetooth", "event",  "note",    "route",
                                "flight",   "hotel"};
  std::vector<std::string> names;
  for (const char* n : nouns)
    for (const char* v : verbs) names.push_back(std::string(v) + "_" + n);
  std::mt19937_64 rng(seed);
  std::shuffle(names.begin(), names.end(), rng);
  names.resize(kPoolFunctions);
  std::sort(names.begin(), names.end());

  const auto& kinds = detail::param_kinds();
  json pool = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::size_t arity = i < kPoolArguments - 3 * kPoolFunctions ? 4 : 3;
    std::vector<std::size_t> idx(kinds.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    std::shuffle(idx.begin(), idx.end(), rng);
    json params = json::object();
    for (std::size_t k = 0; k < arity; ++k) {
      const auto& pk = kinds[idx[k]];
      params[pk.name] = {{"type", std::string(pk.type) + (k < 2 ? "" : ", optional")},
                         {"description", pk.description}};
    }
    std::string verb = names[i].substr(0, names[i].find('_'));
    std::string noun = names[i].substr(names[i].find('_') + 1);
    pool.push_back({{"name", names[i]},
                    {"description", verb + " the " + noun + " on the device"},
                    {"parameters", params}});
  }
  return pool;
}

// Response variants of the judged dataset, with the verdict each one must
// receive from the reference judge.
enum class SampleVariant {
  Exact,
  TimeFormat,
  CaseSpacing,
  NumericForm,
  WrongFunction,
  MissingParam,
  WrongValue,
  UnknownFunction,
  ExtraParam
};

inline const char* to_string(SampleVariant v) {
  switch (v) {
    case SampleVariant::Exact: return "exact";
    case SampleVariant::TimeFormat: return "time_format";
    case SampleVariant::CaseSpacing: return "case_spacing";
    case SampleVariant::NumericForm: return "numeric_form";
    case SampleVariant::WrongFunction: return "wrong_function";
    case SampleVariant::MissingParam: return "missing_param";
    case SampleVariant::WrongValue: return "wrong_value";
    case SampleVariant::UnknownFunction: return "unknown_function";
    case SampleVariant::ExtraParam: return "extra_param";
  }
  return "?";
}

// `n` samples over `pool`, each with four candidate tools, a gold call, a
// response built from one variant, and meta {"variant", "label"} where label
// is the verdict the variant was constructed to earn.
inline std::vector<Sample> make_judged_dataset(const json& pool, std::size_t n = 1000, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto uni = [&](std::size_t hi) { return std::uniform_int_distribution<std::size_t>(0, hi - 1)(rng); };
  const std::size_t nvar = 9;
  std::vector<Sample> out;
  out.reserve(n);

  // Required arguments always, optional ones with probability 1/2.
  auto make_call = [&](const json& spec) {
    FunctionCall c{spec["name"].get<std::string>(), json::object()};
    for (const auto& [p, ps] : spec["parameters"].items()) {
      const bool required = ps["type"].get<std::string>().find("optional") == std::string::npos;
      if (required || uni(2) == 0) c.parameters[p] = detail::random_param_value(p, rng);
    }
    return c;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = uni(pool.size());
    std::vector<std::size_t> cand{g};
    while (cand.size() < 4) {
      const std::size_t c = uni(pool.size());
      if (std::find(cand.begin(), cand.end(), c) == cand.end()) cand.push_back(c);
    }
    std::shuffle(cand.begin(), cand.end(), rng);
    Sample s;
    s.id = "s" + std::to_string(i);
    for (auto c : cand) s.x.tools.push_back(pool[c]);
    s.x.pool = pool_from_json(s.x.tools);
    const json& gspec = pool[g];
    const std::string gname = gspec["name"].get<std::string>();
    s.x.query = "please " + std::string(gspec["description"].get<std::string>());
    FunctionCall gold = make_call(gspec);
    s.gold = gold;
    FunctionCall y = gold;

    auto v = static_cast<SampleVariant>(uni(nvar));
    // Fall back to an exact copy when the drawn variant does not apply.
    auto string_param = [&]() -> std::string {
      for (const auto& [k, val] : gold.parameters.items())
        if (val.is_string() && k != "time" && k != "date") return k;
      return "";
    };
    auto int_param = [&]() -> std::string {
      for (const auto& [k, val] : gold.parameters.items())
        if (val.is_number_integer()) return k;
      return "";
    };
    int label = 1;
    switch (v) {
      case SampleVariant::Exact: break;
      case SampleVariant::TimeFormat:
        if (gold.parameters.contains("time"))
          y.parameters["time"] = detail::to_12h(gold.parameters["time"].get<std::string>());
        else
          v = SampleVariant::Exact;
        break;
      case SampleVariant::CaseSpacing:
        if (auto k = string_param(); !k.empty()) {
          std::string t = gold.parameters[k].get<std::string>();
          for (auto& c : t) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
          y.parameters[k] = "  " + t + " ";
        } else {
          v = SampleVariant::Exact;
        }
        break;
      case SampleVariant::NumericForm:
        if (auto k = int_param(); !k.empty()) y.parameters[k] = gold.parameters[k].get<double>();
        else v = SampleVariant::Exact;
        break;
      case SampleVariant::WrongFunction: {
        const json& other = s.x.tools[cand[0] == g ? 1 : 0];
        y = make_call(other);
        label = 0;
        break;
      }
      case SampleVariant::MissingParam:
        y.parameters.erase(y.parameters.begin().key());
        label = 0;
        break;
      case SampleVariant::WrongValue: {
        const std::string k = y.parameters.begin().key();
        const json old = gold.parameters[k];
        json fresh = old;
        while (ReferenceJudge().equal(fresh, old)) fresh = detail::random_param_value(k, rng);
        y.parameters[k] = fresh;
        label = 0;
        break;
      }
      case SampleVariant::UnknownFunction:
        y.name = "launch_rocket";
        label = 0;
        break;
      case SampleVariant::ExtraParam:
        y.parameters["priority"] = "high";
        label = 0;
        break;
    }
    s.y.call = y;
    s.meta = {{"variant", to_string(v)}, {"label", label}};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tinyxfer
