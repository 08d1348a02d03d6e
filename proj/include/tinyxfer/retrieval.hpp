// SPDX-License-Identifier: Apache-2.0
//
// Embedding-based API retrieval: exact cosine top-k over a small pool,
// recall@n, and the rejection-sampling loop that validates generated API
// descriptions.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tinyxfer/common.hpp"
#include "tinyxfer/http.hpp"

namespace tinyxfer {

struct APIDoc {
  std::string id;
  std::string name;
  std::string description;
  json parameters = json::object();
};

inline json to_json(const APIDoc& d) {
  return json{{"id", d.id}, {"name", d.name}, {"description", d.description}, {"parameters", d.parameters}};
}

// Accepts APIDoc objects or tool specs; a missing id defaults to the name.
inline std::vector<APIDoc> docs_from_json(const json& j) {
  if (!j.is_array()) throw input_error("API pool must be a JSON array");
  std::vector<APIDoc> out;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& e = j[i];
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string())
      throw input_error("API pool entry " + std::to_string(i) + " needs a string \"name\"");
    APIDoc d;
    d.name = e["name"].get<std::string>();
    d.id = e.contains("id") ? e["id"].get<std::string>() : d.name;
    d.description = e.value("description", "");
    if (e.contains("parameters")) d.parameters = e["parameters"];
    if (!ids.insert(d.id).second) throw input_error("duplicate API id '" + d.id + "'");
    out.push_back(std::move(d));
  }
  return out;
}

// Text embedded for a doc: name plus description.
inline std::string doc_text(const APIDoc& d) { return d.name + ": " + d.description; }

// ---------------------------------------------------------------------------
// Embedders

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(std::string_view text) = 0;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

// Bag of words through a fixed random projection: each lowercase
// alphanumeric token maps to a pseudo-random vector in [-1, 1]^dim seeded by
// its hash; the text embedding is their sum. Identical texts give identical
// vectors on every platform.
class HashEmbedder : public Embedder {
 public:
  explicit HashEmbedder(std::size_t dim = 256, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    if (dim == 0) throw config_error("embedding dimension must be >= 1");
  }

  std::vector<double> embed(std::string_view text) override {
    std::vector<double> v(dim_, 0.0);
    for (const auto& tok : detail::word_tokens(text)) {
      const std::uint64_t h = detail::fnv1a(tok) ^ seed_;
      for (std::size_t k = 0; k < dim_; ++k) {
        const std::uint64_t r = detail::splitmix64(h + k * 0xD1B54A32D192ED03ULL);
        v[k] += static_cast<double>(r >> 11) * 0x1.0p-52 - 1.0;
      }
    }
    return v;
  }

  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

// POSTs {"input": text} and expects {"embedding": [numbers]}.
class RemoteEmbedder : public Embedder {
 public:
  RemoteEmbedder(std::string url, RetryPolicy policy = {}) : url_(std::move(url)), ep_(parse_endpoint(url_)), policy_(policy) {}

  std::vector<double> embed(std::string_view text) override {
    const json res = post_json(ep_, json{{"input", std::string(text)}}, policy_);
    if (!res.is_object() || !res.contains("embedding") || !res["embedding"].is_array())
      throw runtime_error(url_ + ": response lacks an \"embedding\" array");
    std::vector<double> v;
    for (const auto& x : res["embedding"]) {
      if (!x.is_number()) throw runtime_error(url_ + ": embedding contains a non-number");
      v.push_back(x.get<double>());
    }
    return v;
  }

 private:
  std::string url_;
  HttpEndpoint ep_;
  RetryPolicy policy_;
};

// ---------------------------------------------------------------------------
// Index

struct EmbeddingIndex {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> vectors;  // unit L2 norm
  std::vector<APIDoc> docs;                  // empty when built from raw vectors

  std::size_t size() const { return ids.size(); }
};

namespace detail {

inline std::vector<double> unit(std::vector<double> v, const std::string& what) {
  const double n = norm2(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw input_error(what + " has a zero or non-finite embedding");
  for (double& x : v) x /= n;
  return v;
}

}  // namespace detail

inline EmbeddingIndex index_from_vectors(std::vector<std::string> ids, std::vector<std::vector<double>> vecs) {
  if (ids.empty()) throw input_error("cannot index an empty pool");
  if (ids.size() != vecs.size()) throw input_error("ids and vectors differ in count");
  EmbeddingIndex ix;
  ix.dim = vecs.front().size();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!seen.insert(ids[i]).second) throw input_error("duplicate id '" + ids[i] + "'");
    if (vecs[i].size() != ix.dim)
      throw input_error("doc '" + ids[i] + "' has dimension " + std::to_string(vecs[i].size()) + ", expected " +
                        std::to_string(ix.dim));
    ix.vectors.push_back(detail::unit(std::move(vecs[i]), "doc '" + ids[i] + "'"));
  }
  ix.ids = std::move(ids);
  return ix;
}

inline EmbeddingIndex index_build(const std::vector<APIDoc>& docs, Embedder& embedder, std::size_t threads = 1) {
  if (docs.empty()) throw input_error("cannot index an empty pool");
  std::vector<std::vector<double>> vecs(docs.size());
  parallel_for(docs.size(), threads, [&](std::size_t i) { vecs[i] = embedder.embed(doc_text(docs[i])); });
  std::vector<std::string> ids;
  for (const auto& d : docs) ids.push_back(d.id);
  auto ix = index_from_vectors(std::move(ids), std::move(vecs));
  ix.docs = docs;
  return ix;
}

struct Hit {
  std::string id;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

// Descending cosine, ties by ascending id.
inline std::vector<Hit> top_k(const EmbeddingIndex& ix, std::vector<double> query, std::size_t k) {
  if (k == 0) throw config_error("k must be >= 1");
  if (query.size() != ix.dim)
    throw input_error("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                      std::to_string(ix.dim));
  query = detail::unit(std::move(query), "query");
  std::vector<Hit> hits(ix.size());
  for (std::size_t i = 0; i < ix.size(); ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < ix.dim; ++d) s += ix.vectors[i][d] * query[d];
    hits[i] = {ix.ids[i], std::clamp(s, -1.0, 1.0)};
  }
  const std::size_t n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(),
                    [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; });
  hits.resize(n);
  return hits;
}

inline std::vector<Hit> retrieve(const EmbeddingIndex& ix, Embedder& embedder, std::string_view text, std::size_t k) {
  return top_k(ix, embedder.embed(text), k);
}

// ---------------------------------------------------------------------------
// Recall

struct RecallRow {
  std::size_t n = 0;
  std::size_t hits = 0;
  double recall = 0.0;
};

inline std::vector<RecallRow> recall_at_n(const std::vector<std::vector<std::string>>& runs,
                                          const std::vector<std::string>& gold, std::vector<std::size_t> n_values) {
  if (runs.size() != gold.size())
    throw input_error("recall: " + std::to_string(runs.size()) + " ranked lists but " + std::to_string(gold.size()) +
                      " gold ids");
  std::sort(n_values.begin(), n_values.end());
  n_values.erase(std::unique(n_values.begin(), n_values.end()), n_values.end());
  // 1-based rank of the gold id, 0 when absent.
  std::vector<std::size_t> rank(runs.size(), 0);
  for (std::size_t q = 0; q < runs.size(); ++q) {
    auto it = std::find(runs[q].begin(), runs[q].end(), gold[q]);
    if (it != runs[q].end()) rank[q] = static_cast<std::size_t>(it - runs[q].begin()) + 1;
  }
  std::vector<RecallRow> out;
  for (std::size_t n : n_values) {
    RecallRow r{n, 0, 0.0};
    for (std::size_t q = 0; q < runs.size(); ++q)
      if (rank[q] != 0 && rank[q] <= n) ++r.hits;
    r.recall = runs.empty() ? 0.0 : static_cast<double>(r.hits) / static_cast<double>(runs.size());
    out.push_back(r);
  }
  return out;
}

inline json to_json(const std::vector<RecallRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"n", r.n}, {"hits", r.hits}, {"recall", r.recall}});
  return out;
}

// ---------------------------------------------------------------------------
// Description validation

struct Selection {
  std::string api;
  json params = json::object();
};

struct ValidationComponents {
  // Query -> candidate descriptions; the second argument is the requested count.
  std::function<std::vector<std::string>(const std::string&, std::size_t)> generate;
  // Description -> ranked candidate APIs.
  std::function<std::vector<Hit>(const std::string&)> retrieve;
  // (query, description, candidates) -> chosen API and arguments.
  std::function<Selection(const std::string&, const std::string&, const std::vector<Hit>&)> select;
  std::function<json(const std::string&, const json&)> execute;
  // (query, execution result) -> success.
  std::function<bool(const std::string&, const json&)> judge;
};

struct ValidationConfig {
  std::size_t descriptions = 4;
  std::size_t top_gate = 5;
  std::size_t threads = 1;
};

struct ValidatedRecord {
  std::string query;
  std::string description;
  std::string api;
  json params;
  json result;
  std::size_t rank = 0;
};

inline json to_json(const ValidatedRecord& r) {
  return json{{"query", r.query},   {"description", r.description}, {"api", r.api},
              {"params", r.params}, {"result", r.result},           {"rank", r.rank}};
}

struct ValidationResult {
  std::vector<ValidatedRecord> records;
  std::vector<json> audit;  // one entry per description, or one per skipped query
};

inline ValidationResult validate_descriptions(const std::vector<std::string>& queries, const ValidationComponents& c,
                                              const ValidationConfig& cfg = {}) {
  if (!c.generate || !c.retrieve || !c.select || !c.execute || !c.judge)
    throw config_error("description validation needs generator, retriever, selector, executor and judge");
  if (cfg.top_gate == 0) throw config_error("top gate must be >= 1");
  struct PerQuery {
    std::vector<ValidatedRecord> records;
    std::vector<json> audit;
  };
  std::vector<PerQuery> slots(queries.size());
  parallel_for(queries.size(), cfg.threads, [&](std::size_t qi) {
    const std::string& q = queries[qi];
    PerQuery local;
    std::string stage = "generate";
    try {
      const auto des = c.generate(q, cfg.descriptions);
      if (des.empty()) local.audit.push_back({{"query_index", qi}, {"decision", "no descriptions"}});
      for (std::size_t di = 0; di < des.size(); ++di) {
        const std::string& d = des[di];
        json entry{{"query_index", qi}, {"description_index", di}, {"description", d}};
        stage = "retrieve";
        const auto cands = c.retrieve(d);
        json ids = json::array();
        for (const auto& h : cands) ids.push_back(h.id);
        entry["candidates"] = ids;
        stage = "select";
        const auto sel = c.select(q, d, cands);
        entry["selected"] = sel.api;
        entry["params"] = sel.params;
        std::size_t rank = 0;
        for (std::size_t i = 0; i < cands.size(); ++i)
          if (cands[i].id == sel.api) {
            rank = i + 1;
            break;
          }
        entry["rank"] = rank;
        stage = "execute";
        const json r = c.execute(sel.api, sel.params);
        entry["result"] = r;
        stage = "judge";
        const bool ok = c.judge(q, r);
        entry["success"] = ok;
        std::string decision;
        if (!ok) decision = "rejected: judge failed";
        else if (rank == 0) decision = "rejected: selected API not among candidates";
        else if (rank > cfg.top_gate)
          decision = "rejected: rank " + std::to_string(rank) + " outside top " + std::to_string(cfg.top_gate);
        else decision = "accepted";
        entry["decision"] = decision;
        if (decision == "accepted") local.records.push_back({q, d, sel.api, sel.params, r, rank});
        local.audit.push_back(std::move(entry));
      }
    } catch (const std::exception& e) {
      local.records.clear();
      local.audit = {json{{"query_index", qi}, {"decision", "skipped"}, {"stage", stage}, {"reason", e.what()}}};
    }
    slots[qi] = std::move(local);
  });
  ValidationResult out;
  for (auto& s : slots) {
    for (auto& r : s.records) out.records.push_back(std::move(r));
    for (auto& a : s.audit) out.audit.push_back(std::move(a));
  }
  return out;
}

// Retriever over an index: top `k` candidates for a description.
inline std::function<std::vector<Hit>(const std::string&)> index_retriever(const EmbeddingIndex& ix, Embedder& e,
                                                                           std::size_t k = 10) {
  return [&ix, &e, k](const std::string& d) { return retrieve(ix, e, d, k); };
}

}  // namespace tinyxfer
