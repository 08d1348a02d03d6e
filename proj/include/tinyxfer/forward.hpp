// SPDX-License-Identifier: Apache-2.0
//
// Deterministic full-recompute forward pass (RMSNorm, RoPE, GQA attention,
// SwiGLU FFN), perplexity, and token-corpus loading.
//
// Numeric policy: weights and activations are stored as f32; every dot
// product and reduction accumulates in f64 and is rounded once on store.

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinyxfer/model.hpp"

namespace tinyxfer {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Points in a layer where activations can be observed.
enum class ActivationSite {
  AttnNorm,  // output of input_layernorm  [n x h]
  FfnNorm,   // output of post_attention_layernorm [n x h]
  Gate,      // x * W_gate^T, pre-activation [n x d_i]
  Up,        // x * W_up^T [n x d_i]
};

// Called with the input of every linear projection (name of its weight
// tensor). The hook may modify the input in place; activation quantization
// uses this.
using LinearInputHook = std::function<void(std::string_view weight_name, Tensor& input)>;
using ActivationObserver =
    std::function<void(std::size_t layer, ActivationSite site, const Tensor& value)>;

struct ForwardOptions {
  bool capture_trace = false;
  LinearInputHook linear_input;
  ActivationObserver observer;
};

struct ForwardResult {
  Tensor logits;              // [n x v]
  std::vector<Tensor> trace;  // l+1 hidden states [n x h] when captured
};

namespace detail {

// y[n x out] = x[n x in] * W[out x in]^T (+ b)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
  const std::size_t n = x.rows(), in = x.cols(), out = w.rows();
  if (w.cols() != in) throw runtime_error("linear: input width mismatch");
  Tensor y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    const float* xr = x.row(r);
    float* yr = y.row(r);
    for (std::size_t o = 0; o < out; ++o) {
      const float* wr = w.row(o);
      double acc = bias ? static_cast<double>(bias->data[o]) : 0.0;
      for (std::size_t k = 0; k < in; ++k) acc += static_cast<double>(xr[k]) * wr[k];
      yr[o] = static_cast<float>(acc);
    }
  }
  return y;
}

inline Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t n = x.rows(), h = x.cols();
  Tensor y({n, h});
  for (std::size_t r = 0; r < n; ++r) {
    const float* xr = x.row(r);
    double ss = 0.0;
    for (std::size_t k = 0; k < h; ++k) ss += static_cast<double>(xr[k]) * xr[k];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(h) + eps);
    float* yr = y.row(r);
    for (std::size_t k = 0; k < h; ++k)
      yr[k] = static_cast<float>(static_cast<double>(xr[k]) * inv * weight.data[k]);
  }
  return y;
}

// Rotates each head's (j, j + d/2) pairs by position * base^(-2j/d).
inline void apply_rope(Tensor& x, std::size_t heads, std::size_t head_dim, double base) {
  const std::size_t half = head_dim / 2;
  for (std::size_t pos = 0; pos < x.rows(); ++pos) {
    float* row = x.row(pos);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      float* v = row + hd * head_dim;
      for (std::size_t j = 0; j < half; ++j) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(j) / head_dim);
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = v[j], b = v[j + half];
        v[j] = static_cast<float>(a * c - b * s);
        v[j + half] = static_cast<float>(a * s + b * c);
      }
    }
  }
}

// Causal grouped-query attention; query head g reads kv head g / (n_a / n_kv).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const ModelArch& a) {
  const std::size_t n = q.rows(), dh = a.head_dim, group = a.heads / a.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({n, a.q_dim()});
  std::vector<double> scores(n);
  for (std::size_t hq = 0; hq < a.heads; ++hq) {
    const std::size_t hk = hq / group;
    for (std::size_t i = 0; i < n; ++i) {
      const float* qi = q.row(i) + hq * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const float* kj = k.row(j) + hk * dh;
        double dot = 0.0;
        for (std::size_t d = 0; d < dh; ++d) dot += static_cast<double>(qi[d]) * kj[d];
        scores[j] = dot * scale;
        mx = std::max(mx, scores[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        denom += scores[j];
      }
      float* oi = out.row(i) + hq * dh;
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += scores[j] * v.row(j)[hk * dh + d];
        oi[d] = static_cast<float>(acc / denom);
      }
    }
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

inline void check_tokens(const ModelArch& arch, std::span<const Token> tokens) {
  if (tokens.empty()) throw input_error("token sequence is empty");
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= arch.vocab)
      throw input_error("token id " + std::to_string(tokens[i]) + " at position " +
                        std::to_string(i) + " is out of range for vocab " +
                        std::to_string(arch.vocab));
}

inline ForwardResult forward(const Checkpoint& ck, std::span<const Token> tokens,
                             const ForwardOptions& opts) {
  const ModelArch& a = ck.arch;
  check_tokens(a, tokens);
  const std::size_t n = tokens.size(), h = a.hidden;

  auto project = [&](const Tensor& x, std::size_t layer, std::string_view suffix,
                     const Tensor* bias) {
    const std::string name = layer_tensor(layer, suffix);
    if (!opts.linear_input) return detail::linear(x, ck.at(name), bias);
    Tensor xin = x;
    opts.linear_input(name, xin);
    return detail::linear(xin, ck.at(name), bias);
  };

  ForwardResult res;
  Tensor x({n, h});
  const Tensor& emb = ck.at("embed_tokens");
  for (std::size_t t = 0; t < n; ++t)
    std::copy_n(emb.row(static_cast<std::size_t>(tokens[t])), h, x.row(t));

  for (std::size_t i = 0; i < a.layers; ++i) {
    if (opts.capture_trace) res.trace.push_back(x);

    Tensor xn = detail::rmsnorm(x, ck.layer(i, "input_layernorm"), a.rms_eps);
    if (opts.observer) opts.observer(i, ActivationSite::AttnNorm, xn);
    Tensor q = project(xn, i, "q_proj.weight", &ck.layer(i, "q_proj.bias"));
    Tensor k = project(xn, i, "k_proj.weight", &ck.layer(i, "k_proj.bias"));
    Tensor v = project(xn, i, "v_proj.weight", &ck.layer(i, "v_proj.bias"));
    detail::apply_rope(q, a.heads, a.head_dim, a.rope_base);
    detail::apply_rope(k, a.kv_heads, a.head_dim, a.rope_base);
    Tensor att = detail::attention(q, k, v, a);
    Tensor o = project(att, i, "o_proj.weight", nullptr);
    for (std::size_t e = 0; e < x.size(); ++e) x.data[e] += o.data[e];

    Tensor xf = detail::rmsnorm(x, ck.layer(i, "post_attention_layernorm"), a.rms_eps);
    if (opts.observer) opts.observer(i, ActivationSite::FfnNorm, xf);
    Tensor gate = project(xf, i, "gate_proj.weight", nullptr);
    Tensor up = project(xf, i, "up_proj.weight", nullptr);
    if (opts.observer) {
      opts.observer(i, ActivationSite::Gate, gate);
      opts.observer(i, ActivationSite::Up, up);
    }
    for (std::size_t e = 0; e < gate.size(); ++e)
      gate.data[e] = static_cast<float>(detail::silu(gate.data[e]) * up.data[e]);
    Tensor down = project(gate, i, "down_proj.weight", nullptr);
    for (std::size_t e = 0; e < x.size(); ++e) x.data[e] += down.data[e];
  }
  if (opts.capture_trace) res.trace.push_back(x);

  Tensor xn = detail::rmsnorm(x, ck.at("norm"), a.rms_eps);
  res.logits = detail::linear(xn, ck.head());
  return res;
}

inline Tensor forward(const Checkpoint& ck, std::span<const Token> tokens) {
  return forward(ck, tokens, ForwardOptions{}).logits;
}

// ---------------------------------------------------------------------------
// Logits-producing models

// Anything that maps a token sequence to per-position next-token logits.
template <typename M>
concept LogitsModel = requires(const M& m, std::span<const Token> t) {
  { model_logits(m, t) } -> std::same_as<Tensor>;
  { model_vocab(m) } -> std::convertible_to<std::size_t>;
};

inline Tensor model_logits(const Checkpoint& ck, std::span<const Token> tokens) {
  return forward(ck, tokens);
}
inline std::size_t model_vocab(const Checkpoint& ck) { return ck.arch.vocab; }

// ---------------------------------------------------------------------------
// Cross-entropy and perplexity

// Sum of next-token cross-entropy (nats) over positions 1..n-1, computed with
// a log-sum-exp per row.
inline double next_token_nll_sum(const Tensor& logits, std::span<const Token> tokens) {
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const float* row = logits.row(t);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max<double>(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[static_cast<std::size_t>(tokens[t + 1])];
  }
  return total;
}

inline double perplexity_from_logits(const Tensor& logits, std::span<const Token> tokens) {
  if (tokens.size() < 2) throw input_error("perplexity needs at least 2 tokens");
  return std::exp(next_token_nll_sum(logits, tokens) / static_cast<double>(tokens.size() - 1));
}

template <LogitsModel M>
double perplexity(const M& model, std::span<const Token> tokens) {
  if (tokens.size() < 2) throw input_error("perplexity needs at least 2 tokens");
  return perplexity_from_logits(model_logits(model, tokens), tokens);
}

// Token-weighted perplexity over several sequences; sequences evaluate in
// parallel and the reduction runs in index order.
template <LogitsModel M>
double corpus_perplexity(const M& model, std::span<const TokenSeq> corpus,
                         std::size_t threads = 1) {
  std::vector<double> nll(corpus.size(), 0.0);
  std::size_t count = 0;
  for (const auto& s : corpus) count += s.size() >= 2 ? s.size() - 1 : 0;
  if (count == 0) throw input_error("perplexity needs a sequence with at least 2 tokens");
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    if (corpus[i].size() >= 2) nll[i] = next_token_nll_sum(model_logits(model, corpus[i]), corpus[i]);
  });
  double total = 0.0;
  for (double v : nll) total += v;
  return std::exp(total / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Corpus files
//
// Either a raw stream of u32 little-endian token ids (one sequence), or JSONL
// where each line carries a "tokens" array (one sequence per line).

inline std::vector<TokenSeq> load_corpus(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  std::vector<TokenSeq> out;
  if (ext == ".jsonl" || ext == ".json") {
    for (const auto& row : read_jsonl(path)) {
      if (!row.contains("tokens")) continue;
      out.push_back(row.at("tokens").get<TokenSeq>());
    }
    return out;
  }
  const std::string bytes = read_file(path);
  if (bytes.size() % 4 != 0)
    throw input_error(path.string() + ": token stream length is not a multiple of 4");
  TokenSeq seq(bytes.size() / 4);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::uint32_t id;
    std::memcpy(&id, bytes.data() + 4 * i, 4);
    if (id > static_cast<std::uint32_t>(std::numeric_limits<Token>::max()))
      throw input_error(path.string() + ": token id too large");
    seq[i] = static_cast<Token>(id);
  }
  out.push_back(std::move(seq));
  return out;
}

inline void save_token_stream(const TokenSeq& seq, const std::filesystem::path& path) {
  ByteWriter w;
  for (Token t : seq) w.put<std::uint32_t>(static_cast<std::uint32_t>(t));
  write_file(path, w.bytes());
}

// Splits sequences into windows of at most `len` tokens (len 0 keeps them whole).
inline std::vector<TokenSeq> chunk_corpus(const std::vector<TokenSeq>& corpus, std::size_t len) {
  if (len == 0) return corpus;
  std::vector<TokenSeq> out;
  for (const auto& s : corpus)
    for (std::size_t i = 0; i < s.size(); i += len)
      out.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(i),
                       s.begin() + static_cast<std::ptrdiff_t>(std::min(s.size(), i + len)));
  return out;
}

}  // namespace tinyxfer
