// SPDX-License-Identifier: Apache-2.0
//
// Reward functions for RL over function-call outputs.
//
// Two modes share one template parser ("<think>...</think><answer>...</answer>"):
//   - tiered mode: format reward in {0, 1} and an answer reward in
//     {-2, -1.5, -1.25, -1.2, 2} with chain-of-thought consistency rules;
//   - public mode: alpha * R_format + beta * R_answer, where R_answer is the
//     mean per-call Jaccard overlap of parameter key/value pairs.
//
// Everything here is a pure function of its inputs.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tinyxfer/common.hpp"

namespace tinyxfer {

// ---------------------------------------------------------------------------
// Calls and function pools

struct FunctionCall {
  std::string name;
  json parameters = json::object();

  bool operator==(const FunctionCall&) const = default;
};

inline json to_json(const FunctionCall& c) { return json{{"name", c.name}, {"parameters", c.parameters}}; }

// Accepts {"name", "parameters"} or {"name", "arguments"}; arguments given as
// a JSON-encoded string are decoded.
inline std::optional<FunctionCall> call_from_json(const json& j) {
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string() || j["name"].get<std::string>().empty())
    return std::nullopt;
  FunctionCall c{j["name"].get<std::string>(), json::object()};
  const char* key = j.contains("parameters") ? "parameters" : j.contains("arguments") ? "arguments" : nullptr;
  if (key) {
    json p = j[key];
    if (p.is_string()) {
      p = json::parse(p.get<std::string>(), nullptr, false);
      if (p.is_discarded()) return std::nullopt;
    }
    if (p.is_null()) p = json::object();
    if (!p.is_object()) return std::nullopt;
    c.parameters = std::move(p);
  }
  return c;
}

inline FunctionCall call_from_json_or_throw(const json& j, const std::string& what) {
  auto c = call_from_json(j);
  if (!c) throw input_error(what + " is not a function call (need a non-empty \"name\" and object \"parameters\")");
  return *c;
}

enum class ParamType { String, Integer, Number, Boolean, Array, Object, Any };

struct ParamSpec {
  std::string name;
  ParamType type = ParamType::Any;
  bool required = false;
  std::string description;
};

struct FunctionSchema {
  std::string name;
  std::string description;
  std::vector<ParamSpec> params;

  const ParamSpec* param(std::string_view p) const {
    for (const auto& s : params)
      if (s.name == p) return &s;
    return nullptr;
  }
};

inline std::string_view to_string(ParamType t) {
  switch (t) {
    case ParamType::String: return "string";
    case ParamType::Integer: return "integer";
    case ParamType::Number: return "number";
    case ParamType::Boolean: return "boolean";
    case ParamType::Array: return "array";
    case ParamType::Object: return "object";
    case ParamType::Any: return "any";
  }
  return "any";
}

namespace detail {

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Type strings as they appear in tool specs: "str", "int, optional",
// "List[str]", "Dict[str, Any]", JSON-schema names, ...
inline std::pair<ParamType, bool> parse_type_string(std::string_view raw) {
  std::string t = ascii_lower(trim(raw));
  bool optional = false;
  if (auto p = t.find(", optional"); p != std::string::npos) {
    optional = true;
    t = t.substr(0, p);
  }
  if (t.starts_with("optional[") && t.ends_with("]")) {
    optional = true;
    t = t.substr(9, t.size() - 10);
  }
  auto head = t.substr(0, t.find('['));
  if (head == "str" || head == "string") return {ParamType::String, optional};
  if (head == "int" || head == "integer") return {ParamType::Integer, optional};
  if (head == "float" || head == "number" || head == "double") return {ParamType::Number, optional};
  if (head == "bool" || head == "boolean") return {ParamType::Boolean, optional};
  if (head == "list" || head == "array" || head == "tuple" || head == "set") return {ParamType::Array, optional};
  if (head == "dict" || head == "object") return {ParamType::Object, optional};
  return {ParamType::Any, optional};
}

}  // namespace detail

class FunctionPool {
 public:
  void add(FunctionSchema s) {
    if (s.name.empty()) throw input_error("function schema without a name");
    if (by_name_.count(s.name)) throw input_error("duplicate function '" + s.name + "' in pool");
    by_name_.emplace(s.name, std::move(s));
  }
  const FunctionSchema* find(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    return it == by_name_.end() ? nullptr : &it->second;
  }
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  std::size_t size() const { return by_name_.size(); }
  std::size_t argument_count() const {
    std::size_t n = 0;
    for (const auto& [k, s] : by_name_) n += s.params.size();
    return n;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, s] : by_name_) out.push_back(k);
    return out;
  }
  const std::map<std::string, FunctionSchema>& schemas() const { return by_name_; }

 private:
  std::map<std::string, FunctionSchema> by_name_;
};

// Accepts a list of tool specs in either of two shapes:
//   {"name", "description", "parameters": {"p": {"type": "str, optional", ...}}}
//   {"name", "parameters": {"type": "object", "properties": {...}, "required": [...]}}
// A {"type": "function", "function": {...}} wrapper is unwrapped.
inline FunctionSchema schema_from_json(const json& j0) {
  const json& j = j0.contains("function") && j0["function"].is_object() ? j0["function"] : j0;
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string())
    throw input_error("tool spec without a string \"name\"");
  FunctionSchema s;
  s.name = j["name"].get<std::string>();
  s.description = j.value("description", "");
  if (!j.contains("parameters") || j["parameters"].is_null()) return s;
  const json& p = j["parameters"];
  if (!p.is_object()) throw input_error("tool '" + s.name + "': \"parameters\" must be an object");
  const bool json_schema = p.contains("properties") && p["properties"].is_object();
  const json& props = json_schema ? p["properties"] : p;
  std::vector<std::string> required;
  if (json_schema && p.contains("required")) required = p["required"].get<std::vector<std::string>>();
  for (const auto& [name, spec] : props.items()) {
    ParamSpec ps;
    ps.name = name;
    bool optional = false;
    if (spec.is_object()) {
      if (spec.contains("type") && spec["type"].is_string())
        std::tie(ps.type, optional) = detail::parse_type_string(spec["type"].get<std::string>());
      ps.description = spec.value("description", "");
      if (spec.contains("default")) optional = true;
      if (spec.contains("required") && spec["required"].is_boolean()) optional = !spec["required"].get<bool>();
    } else if (spec.is_string()) {
      std::tie(ps.type, optional) = detail::parse_type_string(spec.get<std::string>());
    }
    ps.required = json_schema ? std::find(required.begin(), required.end(), name) != required.end() : !optional;
    s.params.push_back(std::move(ps));
  }
  return s;
}

inline FunctionPool pool_from_json(const json& j) {
  FunctionPool pool;
  if (j.is_string()) return pool_from_json(parse_json(j.get<std::string>(), "tools"));
  if (!j.is_array()) throw input_error("tools must be a JSON array");
  for (const auto& t : j) pool.add(schema_from_json(t));
  return pool;
}

inline json to_json(const FunctionSchema& s) {
  json params = json::object();
  for (const auto& p : s.params)
    params[p.name] = {{"type", std::string(to_string(p.type)) + (p.required ? "" : ", optional")},
                      {"description", p.description}};
  return json{{"name", s.name}, {"description", s.description}, {"parameters", params}};
}

inline json to_json(const FunctionPool& pool) {
  json out = json::array();
  for (const auto& [k, s] : pool.schemas()) out.push_back(to_json(s));
  return out;
}

// ---------------------------------------------------------------------------
// Value comparison

namespace detail {

inline std::string normalize_text(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : trim(s)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

}  // namespace detail

// Numbers compare numerically, strings after trim + whitespace collapse +
// case fold, arrays element-wise, objects key-wise.
inline bool values_equal(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return a.get<double>() == b.get<double>();
  if (a.is_string() && b.is_string())
    return detail::normalize_text(a.get_ref<const std::string&>()) ==
           detail::normalize_text(b.get_ref<const std::string&>());
  if (a.is_array() && b.is_array()) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!values_equal(a[i], b[i])) return false;
    return true;
  }
  if (a.is_object() && b.is_object()) {
    if (a.size() != b.size()) return false;
    for (const auto& [k, v] : a.items())
      if (!b.contains(k) || !values_equal(v, b[k])) return false;
    return true;
  }
  return a == b;
}

// Number of (key, value) pairs present in both parameter objects.
inline std::size_t shared_pairs(const json& pred, const json& gold) {
  std::size_t n = 0;
  for (const auto& [k, v] : pred.items())
    if (gold.contains(k) && values_equal(v, gold[k])) ++n;
  return n;
}

inline bool calls_match(const FunctionCall& pred, const FunctionCall& gold) {
  return pred.name == gold.name && pred.parameters.size() == gold.parameters.size() &&
         shared_pairs(pred.parameters, gold.parameters) == gold.parameters.size();
}

// |P_pred ∩ P_gold| / |P_pred ∪ P_gold| over key/value pairs; 1 when both
// sets are empty.
inline double parameter_jaccard(const json& pred, const json& gold) {
  const std::size_t inter = shared_pairs(pred, gold);
  const std::size_t uni = pred.size() + gold.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Template parsing

enum class ParseError {
  None,
  MissingThink,
  DuplicateThink,
  MissingAnswer,
  DuplicateAnswer,
  BlockOrder,
  ExtraContent,
  MalformedJson,
  NotACall,
};

inline std::string_view to_string(ParseError e) {
  switch (e) {
    case ParseError::None: return "ok";
    case ParseError::MissingThink: return "missing think block";
    case ParseError::DuplicateThink: return "duplicate think block";
    case ParseError::MissingAnswer: return "missing answer block";
    case ParseError::DuplicateAnswer: return "duplicate answer block";
    case ParseError::BlockOrder: return "blocks out of order";
    case ParseError::ExtraContent: return "content outside blocks";
    case ParseError::MalformedJson: return "malformed JSON in answer";
    case ParseError::NotACall: return "answer is not a function call";
  }
  return "?";
}

enum class AnswerShape {
  Single,  // one JSON call object
  List,    // a JSON array of calls, a single object, or <tool_call> blocks
};

struct ThinkAnswerOutput {
  std::string think;
  std::string answer;
  std::vector<FunctionCall> calls;
};

struct ParseOutcome {
  std::optional<ThinkAnswerOutput> output;
  ParseError error = ParseError::None;

  bool ok() const { return output.has_value(); }
};

namespace detail {

inline std::size_t count_of(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto p = text.find(needle); p != std::string_view::npos; p = text.find(needle, p + needle.size())) ++n;
  return n;
}

inline bool blank(std::string_view s) { return trim(s).empty(); }

inline ParseOutcome parse_failure(ParseError e) { return ParseOutcome{std::nullopt, e}; }

inline std::optional<std::vector<FunctionCall>> calls_from_tool_call_blocks(std::string_view body,
                                                                            ParseError& err) {
  constexpr std::string_view open = "<tool_call>", close = "</tool_call>";
  std::vector<FunctionCall> calls;
  std::size_t pos = 0;
  while (true) {
    const auto o = body.find(open, pos);
    if (o == std::string_view::npos) break;
    if (!blank(body.substr(pos, o - pos))) return err = ParseError::ExtraContent, std::nullopt;
    const auto c = body.find(close, o);
    if (c == std::string_view::npos) return err = ParseError::MalformedJson, std::nullopt;
    const json j = json::parse(body.substr(o + open.size(), c - o - open.size()), nullptr, false);
    if (j.is_discarded()) return err = ParseError::MalformedJson, std::nullopt;
    auto call = call_from_json(j);
    if (!call) return err = ParseError::NotACall, std::nullopt;
    calls.push_back(std::move(*call));
    pos = c + close.size();
  }
  if (!blank(body.substr(pos))) return err = ParseError::ExtraContent, std::nullopt;
  return calls;
}

}  // namespace detail

inline ParseOutcome parse_think_answer(std::string_view text, AnswerShape shape = AnswerShape::Single) {
  using detail::count_of;
  constexpr std::string_view t0 = "<think>", t1 = "</think>", a0 = "<answer>", a1 = "</answer>";
  const std::size_t nt0 = count_of(text, t0), nt1 = count_of(text, t1);
  const std::size_t na0 = count_of(text, a0), na1 = count_of(text, a1);
  if (nt0 == 0 || nt1 == 0) return detail::parse_failure(ParseError::MissingThink);
  if (nt0 > 1 || nt1 > 1) return detail::parse_failure(ParseError::DuplicateThink);
  if (na0 == 0 || na1 == 0) return detail::parse_failure(ParseError::MissingAnswer);
  if (na0 > 1 || na1 > 1) return detail::parse_failure(ParseError::DuplicateAnswer);
  const auto p0 = text.find(t0), p1 = text.find(t1), q0 = text.find(a0), q1 = text.find(a1);
  if (!(p0 < p1 && p1 < q0 && q0 < q1)) return detail::parse_failure(ParseError::BlockOrder);
  if (!detail::blank(text.substr(0, p0)) || !detail::blank(text.substr(p1 + t1.size(), q0 - p1 - t1.size())) ||
      !detail::blank(text.substr(q1 + a1.size())))
    return detail::parse_failure(ParseError::ExtraContent);

  ThinkAnswerOutput out;
  out.think = std::string(text.substr(p0 + t0.size(), p1 - p0 - t0.size()));
  out.answer = std::string(text.substr(q0 + a0.size(), q1 - q0 - a0.size()));

  if (shape == AnswerShape::List && out.answer.find("<tool_call>") != std::string::npos) {
    ParseError err = ParseError::None;
    auto calls = detail::calls_from_tool_call_blocks(out.answer, err);
    if (!calls) return detail::parse_failure(err);
    out.calls = std::move(*calls);
    return ParseOutcome{std::move(out), ParseError::None};
  }
  const json j = json::parse(out.answer, nullptr, false);
  if (j.is_discarded()) return detail::parse_failure(ParseError::MalformedJson);
  if (shape == AnswerShape::List && j.is_array()) {
    for (const auto& e : j) {
      auto c = call_from_json(e);
      if (!c) return detail::parse_failure(ParseError::NotACall);
      out.calls.push_back(std::move(*c));
    }
  } else {
    auto c = call_from_json(j);
    if (!c) return detail::parse_failure(ParseError::NotACall);
    out.calls.push_back(std::move(*c));
  }
  return ParseOutcome{std::move(out), ParseError::None};
}

// ---------------------------------------------------------------------------
// Schema validation

inline bool value_conforms(const json& v, ParamType t) {
  switch (t) {
    case ParamType::String: return v.is_string();
    case ParamType::Integer:
      return v.is_number_integer() || (v.is_number_float() && std::isfinite(v.get<double>()) &&
                                       v.get<double>() == std::floor(v.get<double>()));
    case ParamType::Number: return v.is_number();
    case ParamType::Boolean: return v.is_boolean();
    case ParamType::Array: return v.is_array();
    case ParamType::Object: return v.is_object();
    case ParamType::Any: return true;
  }
  return false;
}

// Empty string when the call is valid against the pool; otherwise the first
// problem found. Unknown parameters are rejected; optional parameters may be
// null.
inline std::string validate_call(const FunctionCall& call, const FunctionPool& pool) {
  const FunctionSchema* s = pool.find(call.name);
  if (!s) return "unknown function '" + call.name + "'";
  for (const auto& [k, v] : call.parameters.items()) {
    const ParamSpec* p = s->param(k);
    if (!p) return "unknown parameter '" + k + "' for '" + call.name + "'";
    if (v.is_null() && !p->required) continue;
    if (!value_conforms(v, p->type))
      return "parameter '" + k + "' of '" + call.name + "' should be " + std::string(to_string(p->type));
  }
  for (const auto& p : s->params)
    if (p.required && !call.parameters.contains(p.name))
      return "missing required parameter '" + p.name + "' for '" + call.name + "'";
  return {};
}

// ---------------------------------------------------------------------------
// Tiered rewards

inline constexpr double kAnswerInvalid = -2.0;
inline constexpr double kAnswerOther = -1.5;
inline constexpr double kAnswerParamName = -1.25;
inline constexpr double kAnswerParamValue = -1.2;
inline constexpr double kAnswerExact = 2.0;

inline int format_reward(std::string_view text, const FunctionPool& pool) {
  const auto parsed = parse_think_answer(text);
  if (!parsed.ok()) return 0;
  const FunctionCall& call = parsed.output->calls.front();
  const FunctionSchema* s = pool.find(call.name);
  if (!s) return 0;
  for (const auto& [k, v] : call.parameters.items())
    if (!s->param(k)) return 0;
  return 1;
}

// Function names mentioned in `text`, in order of appearance. A mention is
// an occurrence bounded by non-identifier characters; at a given position the
// longest matching name wins.
inline std::vector<std::string> function_mentions(std::string_view text, const std::vector<std::string>& names) {
  auto ident = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (i > 0 && ident(text[i - 1])) continue;
    const std::string* best = nullptr;
    for (const auto& n : names) {
      if (n.empty() || text.compare(i, n.size(), n) != 0) continue;
      const std::size_t end = i + n.size();
      if (end < text.size() && ident(text[end])) continue;
      if (!best || n.size() > best->size()) best = &n;
    }
    if (best) {
      out.push_back(*best);
      i += best->size() - 1;
    }
  }
  return out;
}

struct TieredReward {
  int s_format = 0;
  double s_answer = kAnswerInvalid;
  std::string reason;
};

inline json to_json(const TieredReward& r) {
  return json{{"s_format", r.s_format}, {"s_answer", r.s_answer}, {"reason", r.reason}};
}

inline TieredReward tiered_reward(std::string_view text, const FunctionCall& gold, const FunctionPool& pool) {
  TieredReward r;
  r.s_format = format_reward(text, pool);
  const auto parsed = parse_think_answer(text);
  if (!parsed.ok()) {
    r.reason = std::string(to_string(parsed.error));
    return r;
  }
  const FunctionCall& pred = parsed.output->calls.front();
  if (!pool.contains(pred.name)) {
    r.reason = "function '" + pred.name + "' is not in the pool";
    return r;
  }
  auto names = pool.names();
  if (!pool.contains(gold.name)) names.push_back(gold.name);
  const auto mentions = function_mentions(parsed.output->think, names);
  if (std::find(mentions.begin(), mentions.end(), gold.name) == mentions.end()) {
    r.reason = "reasoning never mentions '" + gold.name + "'";
    return r;
  }
  if (mentions.back() != pred.name) {
    r.reason = "reasoning ends with '" + mentions.back() + "' but the answer calls '" + pred.name + "'";
    return r;
  }
  if (calls_match(pred, gold)) {
    r.s_answer = kAnswerExact;
    r.reason = "exact match";
  } else if (pred.name != gold.name) {
    r.s_answer = kAnswerOther;
    r.reason = "wrong function";
  } else if (shared_pairs(pred.parameters, gold.parameters) > 0) {
    r.s_answer = kAnswerParamValue;
    r.reason = "function and at least one parameter value correct";
  } else if (std::any_of(pred.parameters.items().begin(), pred.parameters.items().end(),
                         [&](const auto& kv) { return gold.parameters.contains(kv.key()); })) {
    r.s_answer = kAnswerParamName;
    r.reason = "function and at least one parameter name correct";
  } else {
    r.s_answer = kAnswerOther;
    r.reason = "function correct, no parameter correct";
  }
  return r;
}

inline double answer_reward(std::string_view text, const FunctionCall& gold, const FunctionPool& pool) {
  return tiered_reward(text, gold, pool).s_answer;
}

// ---------------------------------------------------------------------------
// Public-dataset reward

struct PublicReward {
  int r_format = 0;
  double r_answer = 0.0;
  double alpha = 1.0, beta = 2.0;
  double total = 0.0;
  std::vector<double> per_call;
  std::string reason;
};

inline json to_json(const PublicReward& r) {
  return json{{"r_format", r.r_format}, {"r_answer", r.r_answer}, {"alpha", r.alpha}, {"beta", r.beta},
              {"total", r.total},       {"per_call", r.per_call}, {"reason", r.reason}};
}

// Pairs each predicted call with a gold call: first the earliest unmatched
// gold call with the same name, then leftovers in order. Returns gold indices.
inline std::vector<std::size_t> match_calls(const std::vector<FunctionCall>& pred,
                                            const std::vector<FunctionCall>& gold) {
  std::vector<std::size_t> assign(pred.size(), gold.size());
  std::vector<bool> used(gold.size(), false);
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t g = 0; g < gold.size(); ++g)
      if (!used[g] && gold[g].name == pred[i].name) {
        assign[i] = g;
        used[g] = true;
        break;
      }
  std::size_t next = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (assign[i] != gold.size()) continue;
    while (next < gold.size() && used[next]) ++next;
    if (next == gold.size()) break;
    assign[i] = next;
    used[next] = true;
  }
  return assign;
}

inline PublicReward public_reward(std::string_view text, const std::vector<FunctionCall>& gold,
                                  const FunctionPool& tools, double alpha = 1.0, double beta = 2.0) {
  if (gold.empty()) throw input_error("public reward needs at least one gold call");
  PublicReward r;
  r.alpha = alpha;
  r.beta = beta;
  const auto parsed = parse_think_answer(text, AnswerShape::List);
  if (!parsed.ok()) {
    r.reason = std::string(to_string(parsed.error));
    return r;
  }
  const auto& pred = parsed.output->calls;
  r.r_format = 1;
  for (const auto& c : pred)
    if (auto problem = validate_call(c, tools); !problem.empty()) {
      r.r_format = 0;
      r.reason = problem;
      break;
    }
  if (pred.size() != gold.size()) {
    r.reason = "call count " + std::to_string(pred.size()) + " differs from gold " + std::to_string(gold.size());
  } else {
    const auto assign = match_calls(pred, gold);
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const FunctionCall& g = gold[assign[i]];
      const double ri = pred[i].name == g.name ? parameter_jaccard(pred[i].parameters, g.parameters) : 0.0;
      r.per_call.push_back(ri);
      sum += ri;
    }
    r.r_answer = sum / static_cast<double>(pred.size());
  }
  r.total = alpha * r.r_format + beta * r.r_answer;
  return r;
}

// Exact-match check used for accuracy: identical names and key/value pairs.
inline bool exact_match(const std::vector<FunctionCall>& pred, const std::vector<FunctionCall>& gold) {
  if (pred.size() != gold.size()) return false;
  const auto assign = match_calls(pred, gold);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (!calls_match(pred[i], gold[assign[i]])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Batch evaluation

struct RewardBatchSummary {
  std::size_t count = 0;
  double mean_score = 0.0;  // mean s_answer (tiered) or mean total (public)
  std::map<std::string, std::size_t> histogram;  // tier or r_format/r_answer bucket -> count
};

// One JSONL record: {"output_text", "gold", "tools", "mode"} where mode is
// "tiered" (gold is one call) or "public" (gold is a list of calls; optional
// "alpha", "beta").
inline json evaluate_reward_record(const json& rec) {
  const std::string mode = rec.value("mode", "public");
  if (!rec.contains("output_text") || !rec["output_text"].is_string())
    throw input_error("reward record needs a string \"output_text\"");
  const std::string& text = rec["output_text"].get_ref<const std::string&>();
  const FunctionPool pool = pool_from_json(rec.value("tools", json::array()));
  if (!rec.contains("gold")) throw input_error("reward record needs \"gold\"");
  if (mode == "tiered") {
    const json& g = rec["gold"].is_array() && rec["gold"].size() == 1 ? rec["gold"][0] : rec["gold"];
    return to_json(tiered_reward(text, call_from_json_or_throw(g, "gold"), pool));
  }
  if (mode != "public") throw config_error("unknown reward mode '" + mode + "' (tiered, public)");
  std::vector<FunctionCall> gold;
  if (rec["gold"].is_array())
    for (const auto& g : rec["gold"]) gold.push_back(call_from_json_or_throw(g, "gold"));
  else
    gold.push_back(call_from_json_or_throw(rec["gold"], "gold"));
  return to_json(public_reward(text, gold, pool, rec.value("alpha", 1.0), rec.value("beta", 2.0)));
}

inline std::pair<std::vector<json>, RewardBatchSummary> evaluate_reward_batch(const std::vector<json>& records) {
  std::vector<json> out;
  RewardBatchSummary s;
  double total = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    json r;
    try {
      r = evaluate_reward_record(records[i]);
    } catch (const Error& e) {
      throw Error(e.kind(), "record " + std::to_string(i + 1) + ": " + e.what());
    }
    if (r.contains("s_answer")) {
      total += r["s_answer"].get<double>();
      ++s.histogram["s_answer=" + json(r["s_answer"]).dump()];
    } else {
      total += r["total"].get<double>();
      ++s.histogram["r_format=" + std::to_string(r["r_format"].get<int>())];
    }
    out.push_back(std::move(r));
  }
  s.count = out.size();
  s.mean_score = out.empty() ? 0.0 : total / static_cast<double>(out.size());
  return {std::move(out), s};
}

}  // namespace tinyxfer
