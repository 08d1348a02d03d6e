// SPDX-License-Identifier: Apache-2.0
//
// One-shot structured pruning: depth pruning by layer importance (LI), width
// pruning by channel importance (CI) over the embedding and FFN intermediate
// dimensions, and a perplexity-scored search over width configurations.
//
// Head dimension is never pruned.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tinyxfer/forward.hpp"

namespace tinyxfer {

// ---------------------------------------------------------------------------
// Layer importance

struct LayerImportanceReport {
  std::vector<double> scores;  // LI_i = 1 - mean cosine(X_i, X_{i+1}), in [0, 2]
  std::size_t tokens = 0;
};

namespace detail {

inline double row_cosine(const float* a, const float* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    ab += static_cast<double>(a[k]) * b[k];
    aa += static_cast<double>(a[k]) * a[k];
    bb += static_cast<double>(b[k]) * b[k];
  }
  if (aa == 0.0 && bb == 0.0) return 1.0;
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

}  // namespace detail

// Sums of per-token cosines between consecutive hidden states of one trace.
inline std::vector<double> trace_cosine_sums(std::span<const Tensor> trace) {
  std::vector<double> sums(trace.empty() ? 0 : trace.size() - 1, 0.0);
  for (std::size_t i = 0; i + 1 < trace.size(); ++i)
    for (std::size_t t = 0; t < trace[i].rows(); ++t)
      sums[i] += detail::row_cosine(trace[i].row(t), trace[i + 1].row(t), trace[i].cols());
  return sums;
}

inline LayerImportanceReport layer_importance_from_traces(
    std::span<const std::vector<Tensor>> traces) {
  if (traces.empty()) throw input_error("layer importance needs calibration data");
  LayerImportanceReport rep;
  std::vector<double> sums(traces.front().size() - 1, 0.0);
  for (const auto& trace : traces) {
    const auto s = trace_cosine_sums(trace);
    for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += s[i];
    rep.tokens += trace.front().rows();
  }
  for (double s : sums) rep.scores.push_back(1.0 - s / static_cast<double>(rep.tokens));
  return rep;
}

inline LayerImportanceReport layer_importance(const Checkpoint& ck,
                                              std::span<const TokenSeq> calib,
                                              std::size_t threads = 1) {
  if (calib.empty()) throw input_error("layer importance needs calibration data");
  std::vector<std::vector<double>> per_seq(calib.size());
  parallel_for(calib.size(), threads, [&](std::size_t s) {
    ForwardOptions opts;
    opts.capture_trace = true;
    per_seq[s] = trace_cosine_sums(forward(ck, calib[s], opts).trace);
  });
  LayerImportanceReport rep;
  std::vector<double> sums(ck.arch.layers, 0.0);
  for (std::size_t s = 0; s < calib.size(); ++s) {
    for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += per_seq[s][i];
    rep.tokens += calib[s].size();
  }
  for (double s : sums) rep.scores.push_back(1.0 - s / static_cast<double>(rep.tokens));
  return rep;
}

// Indices (ascending) of the round(ratio * l) layers with the smallest LI;
// ties remove the lower index first.
inline std::vector<std::size_t> layers_to_remove(const LayerImportanceReport& rep, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw config_error("depth prune ratio must be in (0, 1)");
  const std::size_t l = rep.scores.size();
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(l)));
  if (n >= l)
    throw config_error("depth prune ratio " + std::to_string(ratio) + " would remove all " +
                       std::to_string(l) + " layers");
  std::vector<std::size_t> order(l);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rep.scores[a] < rep.scores[b]; });
  std::vector<std::size_t> out(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(out.begin(), out.end());
  return out;
}

inline Checkpoint remove_layers(const Checkpoint& ck, std::span<const std::size_t> removed) {
  Checkpoint out;
  out.arch = ck.arch;
  out.arch.layers = ck.arch.layers - removed.size();
  std::size_t dst = 0;
  for (std::size_t i = 0; i < ck.arch.layers; ++i) {
    if (std::find(removed.begin(), removed.end(), i) != removed.end()) continue;
    const std::string from = "layers." + std::to_string(i) + ".";
    const std::string to = "layers." + std::to_string(dst) + ".";
    for (const auto& [name, t] : ck.tensors)
      if (name.starts_with(from)) out.tensors.emplace(to + name.substr(from.size()), t);
    ++dst;
  }
  for (const auto& [name, t] : ck.tensors)
    if (!name.starts_with("layers.")) out.tensors.emplace(name, t);
  validate(out);
  return out;
}

inline Checkpoint depth_prune(const Checkpoint& ck, const LayerImportanceReport& rep,
                              double ratio) {
  if (rep.scores.size() != ck.arch.layers)
    throw config_error("layer importance report does not match the checkpoint depth");
  const auto removed = layers_to_remove(rep, ratio);
  return remove_layers(ck, removed);
}

inline json to_json(const LayerImportanceReport& rep, std::span<const std::size_t> removed = {}) {
  std::vector<std::size_t> rank(rep.scores.size());
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(),
                   [&](std::size_t a, std::size_t b) { return rep.scores[a] < rep.scores[b]; });
  return json{{"metric", "layer_importance"},
              {"scores", rep.scores},
              {"ascending_rank", rank},
              {"removed_layers", std::vector<std::size_t>(removed.begin(), removed.end())},
              {"calibration_tokens", rep.tokens}};
}

// ---------------------------------------------------------------------------
// Channel importance

enum class InterImportance {
  GateUpEnergy,   // sum of squared gate and up activations
  SwigluProduct,  // squared silu(gate) * up
};

struct ChannelImportanceReport {
  std::vector<double> embedding;           // h scores, L2-normalized
  std::vector<std::vector<double>> inter;  // per layer d_i scores, each L2-normalized
  std::size_t tokens = 0;
  InterImportance mode = InterImportance::GateUpEnergy;
};

namespace detail {

inline void l2_normalize(std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  if (ss == 0.0) return;
  const double inv = 1.0 / std::sqrt(ss);
  for (double& x : v) x *= inv;
}

struct ChannelEnergy {
  std::vector<double> embedding;
  std::vector<std::vector<double>> inter;
};

inline ChannelEnergy channel_energy(const Checkpoint& ck, std::span<const Token> tokens,
                                    InterImportance mode) {
  const auto& a = ck.arch;
  ChannelEnergy e{std::vector<double>(a.hidden, 0.0),
                  std::vector<std::vector<double>>(a.layers, std::vector<double>(a.ffn_inter, 0.0))};
  Tensor gate;
  ForwardOptions opts;
  opts.observer = [&](std::size_t layer, ActivationSite site, const Tensor& x) {
    switch (site) {
      case ActivationSite::AttnNorm:
      case ActivationSite::FfnNorm:
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c)
            e.embedding[c] += static_cast<double>(x.row(r)[c]) * x.row(r)[c];
        break;
      case ActivationSite::Gate:
        if (mode == InterImportance::SwigluProduct) {
          gate = x;
          break;
        }
        [[fallthrough]];
      case ActivationSite::Up:
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) {
            double v = x.row(r)[c];
            if (mode == InterImportance::SwigluProduct) v *= detail::silu(gate.row(r)[c]);
            e.inter[layer][c] += v * v;
          }
        break;
    }
  };
  forward(ck, tokens, opts);
  return e;
}

}  // namespace detail

inline ChannelImportanceReport channel_importance(const Checkpoint& ck,
                                                  std::span<const TokenSeq> calib,
                                                  InterImportance mode = InterImportance::GateUpEnergy,
                                                  std::size_t threads = 1) {
  if (calib.empty()) throw input_error("channel importance needs calibration data");
  std::vector<detail::ChannelEnergy> per_seq(calib.size());
  parallel_for(calib.size(), threads, [&](std::size_t s) {
    per_seq[s] = detail::channel_energy(ck, calib[s], mode);
  });
  ChannelImportanceReport rep;
  rep.mode = mode;
  rep.embedding.assign(ck.arch.hidden, 0.0);
  rep.inter.assign(ck.arch.layers, std::vector<double>(ck.arch.ffn_inter, 0.0));
  for (std::size_t s = 0; s < calib.size(); ++s) {
    rep.tokens += calib[s].size();
    for (std::size_t c = 0; c < rep.embedding.size(); ++c) rep.embedding[c] += per_seq[s].embedding[c];
    for (std::size_t l = 0; l < rep.inter.size(); ++l)
      for (std::size_t c = 0; c < rep.inter[l].size(); ++c) rep.inter[l][c] += per_seq[s].inter[l][c];
  }
  for (double& x : rep.embedding) x = std::sqrt(x);
  detail::l2_normalize(rep.embedding);
  for (auto& layer : rep.inter) {
    for (double& x : layer) x = std::sqrt(x);
    detail::l2_normalize(layer);
  }
  return rep;
}

// Indices (ascending) of the `keep` highest-scoring channels. Channels are
// ranked individually; on equal scores the lower index is kept.
inline std::vector<std::size_t> top_channels(std::span<const double> scores, std::size_t keep) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(keep, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Width pruning

struct WidthConfig {
  std::size_t hidden = 0;  // h'
  std::size_t inter = 0;   // d_i'
  ParamCount predicted;
  std::optional<double> ppl;
};

inline json to_json(const WidthConfig& c) {
  json j{{"hidden", c.hidden},
         {"inter", c.inter},
         {"predicted_non_embedding", c.predicted.non_embedding},
         {"predicted_embedding", c.predicted.embedding},
         {"predicted_total", c.predicted.total}};
  j["ppl"] = c.ppl ? json(*c.ppl) : json(nullptr);
  return j;
}

// Keeps the listed embedding channels everywhere the hidden dimension
// appears (embedding columns, q/k/v and gate/up input columns, o/down output
// rows, every norm, LM head columns) and the listed intermediate channels per
// layer (gate/up rows, down columns).
inline Checkpoint prune_channels(const Checkpoint& ck, std::span<const std::size_t> keep_hidden,
                                 std::span<const std::vector<std::size_t>> keep_inter) {
  const auto& a = ck.arch;
  if (keep_inter.size() != a.layers) throw config_error("need one intermediate keep-list per layer");
  const std::size_t d_new = a.layers ? keep_inter.front().size() : a.ffn_inter;
  for (const auto& k : keep_inter)
    if (k.size() != d_new) throw config_error("every layer must keep the same intermediate width");
  if (keep_hidden.empty() || d_new == 0) throw config_error("cannot prune a dimension to zero");

  auto take_cols = [](const Tensor& t, std::span<const std::size_t> cols) {
    Tensor out({t.rows(), cols.size()});
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < cols.size(); ++c) out.row(r)[c] = t.row(r)[cols[c]];
    return out;
  };
  auto take_rows = [](const Tensor& t, std::span<const std::size_t> rows) {
    Tensor out({rows.size(), t.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(t.row(rows[r]), t.cols(), out.row(r));
    return out;
  };
  auto take_vec = [](const Tensor& t, std::span<const std::size_t> idx) {
    Tensor out({idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) out.data[i] = t.data[idx[i]];
    return out;
  };

  Checkpoint out;
  out.arch = a;
  out.arch.hidden = keep_hidden.size();
  out.arch.ffn_inter = d_new;
  out.tensors["embed_tokens"] = take_cols(ck.at("embed_tokens"), keep_hidden);
  out.tensors["norm"] = take_vec(ck.at("norm"), keep_hidden);
  if (!a.tied_head) out.tensors["lm_head"] = take_cols(ck.at("lm_head"), keep_hidden);
  for (std::size_t i = 0; i < a.layers; ++i) {
    auto put = [&](std::string_view suffix, Tensor t) {
      out.tensors[layer_tensor(i, suffix)] = std::move(t);
    };
    put("input_layernorm", take_vec(ck.layer(i, "input_layernorm"), keep_hidden));
    put("post_attention_layernorm", take_vec(ck.layer(i, "post_attention_layernorm"), keep_hidden));
    for (auto s : {"q_proj", "k_proj", "v_proj"}) {
      put(std::string(s) + ".weight", take_cols(ck.layer(i, std::string(s) + ".weight"), keep_hidden));
      put(std::string(s) + ".bias", ck.layer(i, std::string(s) + ".bias"));
    }
    put("o_proj.weight", take_rows(ck.layer(i, "o_proj.weight"), keep_hidden));
    put("gate_proj.weight",
        take_cols(take_rows(ck.layer(i, "gate_proj.weight"), keep_inter[i]), keep_hidden));
    put("up_proj.weight",
        take_cols(take_rows(ck.layer(i, "up_proj.weight"), keep_inter[i]), keep_hidden));
    put("down_proj.weight",
        take_cols(take_rows(ck.layer(i, "down_proj.weight"), keep_hidden), keep_inter[i]));
  }
  validate(out);
  return out;
}

// Removes the lowest-CI channels down to cfg.hidden / cfg.inter.
inline Checkpoint width_prune(const Checkpoint& ck, const WidthConfig& cfg,
                              const ChannelImportanceReport& rep) {
  const auto& a = ck.arch;
  if (cfg.hidden < 1 || cfg.hidden > a.hidden || cfg.inter < 1 || cfg.inter > a.ffn_inter)
    throw config_error("width config (" + std::to_string(cfg.hidden) + ", " +
                       std::to_string(cfg.inter) + ") does not fit architecture (" +
                       std::to_string(a.hidden) + ", " + std::to_string(a.ffn_inter) + ")");
  if (rep.embedding.size() != a.hidden || rep.inter.size() != a.layers)
    throw config_error("channel importance report does not match the checkpoint");
  const auto keep_h = top_channels(rep.embedding, cfg.hidden);
  std::vector<std::vector<std::size_t>> keep_i;
  for (const auto& layer : rep.inter) {
    if (layer.size() != a.ffn_inter)
      throw config_error("channel importance report does not match the checkpoint");
    keep_i.push_back(top_channels(layer, cfg.inter));
  }
  return prune_channels(ck, keep_h, keep_i);
}

inline json to_json(const ChannelImportanceReport& rep, const WidthConfig* cfg = nullptr) {
  json j{{"metric", "channel_importance"},
         {"inter_mode", rep.mode == InterImportance::GateUpEnergy ? "gate_up_energy" : "swiglu_product"},
         {"normalization", "l2_within_subgroup"},
         {"embedding", rep.embedding},
         {"inter", rep.inter},
         {"calibration_tokens", rep.tokens}};
  if (cfg) {
    j["config"] = to_json(*cfg);
    j["kept_embedding_channels"] = top_channels(rep.embedding, cfg->hidden);
    json kept = json::array();
    for (const auto& layer : rep.inter) kept.push_back(top_channels(layer, cfg->inter));
    j["kept_inter_channels"] = kept;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Architecture search

struct WidthSearchSpace {
  std::size_t hidden_granularity = 64;
  std::size_t inter_granularity = 256;
  double tolerance = 0.03;  // relative band around the target parameter count
};

namespace detail {

inline std::vector<std::size_t> grid(std::size_t full, std::size_t step) {
  std::vector<std::size_t> out;
  for (std::size_t v = step; v <= full; v += step) out.push_back(v);
  if (out.empty() || out.back() != full) out.push_back(full);
  return out;
}

}  // namespace detail

// Grid shapes whose predicted total parameter count lies within the
// tolerance band around (1 - ratio) * baseline total. Total (not
// non-embedding) parameters are used because the embedding shrinks with h'.
inline std::vector<WidthConfig> enumerate_width_candidates(const ModelArch& arch, double ratio,
                                                           const WidthSearchSpace& space = {}) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw config_error("target ratio must be in [0, 1)");
  if (space.hidden_granularity == 0 || space.inter_granularity == 0)
    throw config_error("granularity must be positive");
  const double base = static_cast<double>(count_params(arch).total);
  const double target = (1.0 - ratio) * base;
  std::vector<WidthConfig> out;
  std::vector<double> achievable;
  for (std::size_t h : detail::grid(arch.hidden, space.hidden_granularity))
    for (std::size_t d : detail::grid(arch.ffn_inter, space.inter_granularity)) {
      ModelArch a = arch;
      a.hidden = h;
      a.ffn_inter = d;
      const auto pc = count_params(a);
      const double p = static_cast<double>(pc.total);
      achievable.push_back(1.0 - p / base);
      if (std::abs(p - target) <= space.tolerance * target) out.push_back({h, d, pc, std::nullopt});
    }
  if (out.empty()) {
    std::sort(achievable.begin(), achievable.end(),
              [&](double x, double y) { return std::abs(x - ratio) < std::abs(y - ratio); });
    std::string near;
    for (std::size_t i = 0; i < std::min<std::size_t>(3, achievable.size()); ++i)
      near += (i ? ", " : "") + std::to_string(achievable[i]);
    throw config_error("no width configuration within " + std::to_string(space.tolerance * 100) +
                       "% of target ratio " + std::to_string(ratio) +
                       "; nearest achievable ratios: " + near);
  }
  return out;
}

// One-shot prunes every candidate and ranks by calibration perplexity
// (ascending; ties keep the larger shape first).
inline std::vector<WidthConfig> arch_search(const Checkpoint& ck, double ratio,
                                            std::span<const TokenSeq> calib,
                                            const WidthSearchSpace& space = {},
                                            std::size_t threads = 1) {
  auto candidates = enumerate_width_candidates(ck.arch, ratio, space);
  const auto rep = channel_importance(ck, calib, InterImportance::GateUpEnergy, threads);
  for (auto& c : candidates) c.ppl = corpus_perplexity(width_prune(ck, c, rep), calib, threads);
  std::stable_sort(candidates.begin(), candidates.end(), [](const WidthConfig& x, const WidthConfig& y) {
    if (*x.ppl != *y.ppl) return *x.ppl < *y.ppl;
    return x.predicted.total > y.predicted.total;
  });
  return candidates;
}

}  // namespace tinyxfer
