// SPDX-License-Identifier: Apache-2.0
//
// Judge-driven data machinery: samples, judges, rejection-sampling filter and
// the Achievable Rate metric.

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "tinyxfer/common.hpp"
#include "tinyxfer/http.hpp"
#include "tinyxfer/rewards.hpp"

namespace tinyxfer {

// ---------------------------------------------------------------------------
// Samples

struct Prompt {
  std::string query;
  json context = json::array();  // earlier turns, passed through verbatim
  json tools = json::array();    // candidate schemas as given
  FunctionPool pool;             // parsed view of `tools`
};

struct Response {
  FunctionCall call;
  std::optional<std::string> think;
};

struct Sample {
  std::string id;
  Prompt x;
  Response y;
  std::optional<FunctionCall> gold;
  json meta = json::object();  // free-form, ignored by judges
};

inline json to_json(const Prompt& p) {
  return json{{"query", p.query}, {"context", p.context}, {"tools", p.tools}};
}

inline json to_json(const Response& r) {
  json j{{"call", to_json(r.call)}};
  if (r.think) j["think"] = *r.think;
  return j;
}

inline json to_json(const Sample& s) {
  json j{{"id", s.id}, {"x", to_json(s.x)}, {"y", to_json(s.y)}};
  if (s.gold) j["gold"] = to_json(*s.gold);
  if (!s.meta.empty()) j["meta"] = s.meta;
  return j;
}

inline Sample sample_from_json(const json& j, const std::string& where) {
  auto fail = [&](const std::string& m) { return input_error(where + ": " + m); };
  if (!j.is_object()) throw fail("sample must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "id" && k != "x" && k != "y" && k != "gold" && k != "meta") throw fail("unknown field '" + k + "'");
  Sample s;
  if (j.contains("id")) {
    if (!j["id"].is_string()) throw fail("\"id\" must be a string");
    s.id = j["id"].get<std::string>();
  }
  if (!j.contains("x") || !j["x"].is_object()) throw fail("missing object \"x\"");
  const json& x = j["x"];
  if (!x.contains("query") || !x["query"].is_string()) throw fail("x.query must be a string");
  s.x.query = x["query"].get<std::string>();
  if (x.contains("context")) {
    if (!x["context"].is_array()) throw fail("x.context must be an array");
    s.x.context = x["context"];
  }
  if (!x.contains("tools") || !x["tools"].is_array() || x["tools"].empty())
    throw fail("x.tools must be a non-empty array of function schemas");
  s.x.tools = x["tools"];
  try {
    s.x.pool = pool_from_json(s.x.tools);
  } catch (const Error& e) {
    throw fail(e.what());
  }
  if (!j.contains("y") || !j["y"].is_object()) throw fail("missing object \"y\"");
  const json& y = j["y"];
  if (!y.contains("call")) throw fail("y.call is required");
  s.y.call = call_from_json_or_throw(y["call"], where + ": y.call");
  if (y.contains("think") && !y["think"].is_null()) {
    if (!y["think"].is_string()) throw fail("y.think must be a string");
    s.y.think = y["think"].get<std::string>();
  }
  if (j.contains("gold") && !j["gold"].is_null()) s.gold = call_from_json_or_throw(j["gold"], where + ": gold");
  if (j.contains("meta")) s.meta = j["meta"];
  return s;
}

// Lines without an "id" get their 1-based line number.
inline std::vector<Sample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open dataset '" + path.string() + "'");
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    auto s = sample_from_json(parse_json(line, where), where);
    if (s.id.empty()) s.id = std::to_string(lineno);
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::vector<json> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(to_json(s));
  write_jsonl(path, rows);
}

// Identity of a judged pair: hash of the canonical (x, y) JSON. Ids, gold
// and meta do not participate.
inline std::string content_key(const Sample& s) {
  return sha256_hex(canonical_dump(json{{"x", to_json(s.x)}, {"y", to_json(s.y)}}));
}

// ---------------------------------------------------------------------------
// Judges

struct JudgeVerdict {
  int value = 0;
  std::string rationale;
};

inline json to_json(const JudgeVerdict& v) { return json{{"value", v.value}, {"rationale", v.rationale}}; }

class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgeVerdict judge(const Sample& s) = 0;
  virtual std::string name() const = 0;
};

inline int judge_data(const Sample& s, Judge& judge) {
  const auto v = judge.judge(s);
  if (v.value != 0 && v.value != 1)
    throw runtime_error("judge '" + judge.name() + "' returned non-binary verdict " + std::to_string(v.value));
  return v.value;
}

class ConstantJudge : public Judge {
 public:
  explicit ConstantJudge(int value) : value_(value) {}
  JudgeVerdict judge(const Sample&) override { return {value_, "constant"}; }
  std::string name() const override { return "constant-" + std::to_string(value_); }

 private:
  int value_;
};

class CallbackJudge : public Judge {
 public:
  using Fn = std::function<JudgeVerdict(const Sample&)>;
  explicit CallbackJudge(Fn fn, std::string name = "callback") : fn_(std::move(fn)), name_(std::move(name)) {}
  JudgeVerdict judge(const Sample& s) override { return fn_(s); }
  std::string name() const override { return name_; }

 private:
  Fn fn_;
  std::string name_;
};

// Maps a string to a canonical form, or nullopt when it does not apply.
using ValueNormalizer = std::function<std::optional<std::string>(std::string_view)>;

// Clock times: "23:00", "11 pm", "11:00 p.m.", "7:05AM", "23:00:00" -> "HH:MM"
// (or "HH:MM:SS" when seconds are nonzero). Bare numbers are not times.
inline std::optional<std::string> normalize_clock_time(std::string_view raw) {
  std::string s;
  for (char c : raw)
    if (!std::isspace(static_cast<unsigned char>(c)) && c != '.')
      s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  static const std::regex re(R"(^(\d{1,2})(?::(\d{2}))?(?::(\d{2}))?(am|pm)?$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) return std::nullopt;
  if (!m[2].matched && !m[4].matched) return std::nullopt;
  int h = std::stoi(m[1].str());
  const int mi = m[2].matched ? std::stoi(m[2].str()) : 0;
  const int se = m[3].matched ? std::stoi(m[3].str()) : 0;
  if (mi > 59 || se > 59) return std::nullopt;
  if (m[4].matched) {
    if (h < 1 || h > 12) return std::nullopt;
    h %= 12;
    if (m[4].str() == "pm") h += 12;
  } else if (h > 23) {
    return std::nullopt;
  }
  char buf[32];
  if (se) std::snprintf(buf, sizeof buf, "%02d:%02d:%02d", h, mi, se);
  else std::snprintf(buf, sizeof buf, "%02d:%02d", h, mi);
  return std::string(buf);
}

struct ReferenceJudgeOptions {
  bool time_normalization = true;
  std::vector<ValueNormalizer> normalizers;  // applied in addition to the time table
};

// Rule-based judge: the response must validate against the candidate
// schemas and match the sample's gold call by name and parameter set, with
// values compared numerically, case- and whitespace-insensitively, or
// through a normalizer that maps both sides to the same canonical string.
class ReferenceJudge : public Judge {
 public:
  explicit ReferenceJudge(ReferenceJudgeOptions o = {}) : opts_(std::move(o)) {
    if (opts_.time_normalization) norms_.push_back(normalize_clock_time);
    for (auto& n : opts_.normalizers) norms_.push_back(n);
  }

  JudgeVerdict judge(const Sample& s) override {
    if (!s.gold) throw input_error("sample '" + s.id + "' has no gold call; the reference judge needs one");
    const auto& call = s.y.call;
    const auto& gold = *s.gold;
    if (!s.x.pool.contains(call.name)) return {0, "function '" + call.name + "' is not among the candidates"};
    if (auto err = validate_call(call, s.x.pool); !err.empty()) return {0, err};
    if (call.name != gold.name) return {0, "called '" + call.name + "', expected '" + gold.name + "'"};
    for (const auto& [k, v] : gold.parameters.items()) {
      if (!call.parameters.contains(k)) return {0, "missing parameter '" + k + "'"};
      if (!equal(call.parameters[k], v)) return {0, "parameter '" + k + "' differs"};
    }
    for (const auto& [k, v] : call.parameters.items())
      if (!gold.parameters.contains(k)) return {0, "unexpected parameter '" + k + "'"};
    return {1, "matches gold"};
  }

  std::string name() const override { return "reference"; }

  bool equal(const json& a, const json& b) const {
    if (values_equal(a, b)) return true;
    if (a.is_string() && b.is_string()) {
      for (const auto& n : norms_) {
        auto x = n(a.get_ref<const std::string&>()), y = n(b.get_ref<const std::string&>());
        if (x && y && *x == *y) return true;
      }
      return false;
    }
    if (a.is_array() && b.is_array() && a.size() == b.size()) {
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!equal(a[i], b[i])) return false;
      return true;
    }
    if (a.is_object() && b.is_object() && a.size() == b.size()) {
      for (const auto& [k, v] : a.items())
        if (!b.contains(k) || !equal(v, b[k])) return false;
      return true;
    }
    return false;
  }

 private:
  ReferenceJudgeOptions opts_;
  std::vector<ValueNormalizer> norms_;
};

// POSTs {"x", "y"} and expects {"value": 0|1, "rationale"?}. Transport
// failures surface as retriable runtime errors, never as a 0 verdict.
class RemoteJudge : public Judge {
 public:
  RemoteJudge(std::string url, RetryPolicy policy = {}) : url_(std::move(url)), ep_(parse_endpoint(url_)), policy_(policy) {}

  JudgeVerdict judge(const Sample& s) override {
    const json res = post_json(ep_, json{{"x", to_json(s.x)}, {"y", to_json(s.y)}}, policy_);
    if (!res.is_object() || !res.contains("value")) throw runtime_error(url_ + ": response lacks \"value\"");
    const json& v = res["value"];
    int value = -1;
    if (v.is_boolean()) value = v.get<bool>() ? 1 : 0;
    else if (v.is_number_integer()) value = v.get<int>();
    if (value != 0 && value != 1) throw runtime_error(url_ + ": \"value\" must be 0 or 1, got " + v.dump());
    std::string why;
    if (res.contains("rationale") && res["rationale"].is_string()) why = res["rationale"].get<std::string>();
    return {value, why};
  }

  std::string name() const override { return "remote:" + url_; }

 private:
  std::string url_;
  HttpEndpoint ep_;
  RetryPolicy policy_;
};

// Memoizes any judge by content key. Concurrent requests for the same key
// share one backend call. With a store path, verdicts are appended as JSONL
// and reloaded on construction, so an interrupted run resumes where it
// stopped.
class MemoJudge : public Judge {
 public:
  explicit MemoJudge(Judge& backend, std::optional<std::filesystem::path> store = std::nullopt)
      : backend_(backend), store_(std::move(store)) {
    if (store_ && std::filesystem::exists(*store_)) {
      for (const auto& row : read_jsonl(*store_)) {
        if (!row.contains("key") || !row.contains("value"))
          throw input_error("verdict store '" + store_->string() + "' has a malformed line");
        std::promise<JudgeVerdict> p;
        p.set_value({row["value"].get<int>(), row.value("rationale", "")});
        cache_[row["key"].get<std::string>()] = p.get_future().share();
      }
      loaded_ = cache_.size();
    }
  }

  JudgeVerdict judge(const Sample& s) override {
    const std::string key = content_key(s);
    std::promise<JudgeVerdict> mine;
    std::shared_future<JudgeVerdict> fut;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = cache_.find(key);
      if (it == cache_.end()) {
        fut = mine.get_future().share();
        cache_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (!owner) return fut.get();
    try {
      ++calls_;
      JudgeVerdict v = backend_.judge(s);
      if (v.value != 0 && v.value != 1)
        throw runtime_error("judge '" + backend_.name() + "' returned non-binary verdict " + std::to_string(v.value));
      persist(key, v);
      mine.set_value(v);
      return v;
    } catch (...) {
      {
        std::lock_guard lock(mu_);
        cache_.erase(key);
      }
      mine.set_exception(std::current_exception());
      throw;
    }
  }

  std::string name() const override { return "memo(" + backend_.name() + ")"; }
  std::size_t backend_calls() const { return calls_.load(); }
  std::size_t loaded() const { return loaded_; }

 private:
  void persist(const std::string& key, const JudgeVerdict& v) {
    if (!store_) return;
    std::lock_guard lock(io_);
    if (store_->has_parent_path()) std::filesystem::create_directories(store_->parent_path());
    std::ofstream out(*store_, std::ios::app);
    out << canonical_dump(json{{"key", key}, {"value", v.value}, {"rationale", v.rationale}}) << "\n";
    if (!out) throw runtime_error("cannot append to verdict store '" + store_->string() + "'");
  }

  Judge& backend_;
  std::optional<std::filesystem::path> store_;
  std::mutex mu_, io_;
  std::map<std::string, std::shared_future<JudgeVerdict>> cache_;
  std::atomic<std::size_t> calls_{0};
  std::size_t loaded_ = 0;
};

// ---------------------------------------------------------------------------
// Filtering and Achievable Rate

struct FilterDrop {
  std::size_t index;
  std::string id;
  std::string rationale;
};

struct FilterReport {
  std::size_t total = 0, kept = 0, dropped = 0;
  std::size_t duplicates = 0;  // samples whose (x, y) repeats an earlier one; kept as-is
  std::vector<FilterDrop> drops;
};

inline json to_json(const FilterReport& r) {
  json drops = json::array();
  for (const auto& d : r.drops) drops.push_back({{"index", d.index}, {"id", d.id}, {"rationale", d.rationale}});
  return json{{"total", r.total},
              {"kept", r.kept},
              {"dropped", r.dropped},
              {"duplicates", r.duplicates},
              {"drops", drops}};
}

struct FilterResult {
  std::vector<Sample> kept;
  FilterReport report;
};

namespace detail {

inline std::vector<JudgeVerdict> judge_all(const std::vector<Sample>& data, Judge& judge, std::size_t threads) {
  std::vector<JudgeVerdict> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    out[i] = judge.judge(data[i]);
    if (out[i].value != 0 && out[i].value != 1)
      throw runtime_error("judge '" + judge.name() + "' returned non-binary verdict for sample '" + data[i].id + "'");
  });
  return out;
}

}  // namespace detail

inline FilterResult rft_filter(const std::vector<Sample>& data, Judge& judge, std::size_t threads = 1) {
  const auto verdicts = detail::judge_all(data, judge, threads);
  FilterResult r;
  r.report.total = data.size();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!seen.insert(content_key(data[i])).second) ++r.report.duplicates;
    if (verdicts[i].value == 1) {
      r.kept.push_back(data[i]);
    } else {
      r.report.drops.push_back({i, data[i].id, verdicts[i].rationale});
    }
  }
  r.report.kept = r.kept.size();
  r.report.dropped = r.report.drops.size();
  return r;
}

struct ArReport {
  double rate = 0.0;
  std::size_t passed = 0, total = 0;
  std::vector<int> verdicts;
};

inline json to_json(const ArReport& r) {
  return json{{"rate", r.rate}, {"passed", r.passed}, {"total", r.total}, {"verdicts", r.verdicts}};
}

inline ArReport achievable_rate(const std::vector<Sample>& data, Judge& judge, std::size_t threads = 1) {
  if (data.empty()) throw input_error("achievable rate of an empty dataset is undefined");
  const auto verdicts = detail::judge_all(data, judge, threads);
  ArReport r;
  r.total = data.size();
  for (const auto& v : verdicts) {
    r.verdicts.push_back(v.value);
    r.passed += static_cast<std::size_t>(v.value);
  }
  r.rate = static_cast<double>(r.passed) / static_cast<double>(r.total);
  return r;
}

}  // namespace tinyxfer
