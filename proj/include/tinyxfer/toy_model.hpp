// SPDX-License-Identifier: Apache-2.0
//
// Deterministic desk-scale models and corpora used by the tests, the bundled
// fixtures and the CLI's fixture generator.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "tinyxfer/forward.hpp"

namespace tinyxfer {

// Shape of the bundled toy checkpoint.
inline ModelArch toy_arch() {
  ModelArch a;
  a.layers = 4;
  a.hidden = 32;
  a.heads = 4;
  a.kv_heads = 2;
  a.head_dim = 8;
  a.ffn_inter = 64;
  a.vocab = 48;
  a.tied_head = true;
  return a;
}

// Random checkpoint with the per-channel heterogeneity trained models show:
// embedding columns and FFN rows carry log-uniform scales in [0.1, 2], and
// norm weights vary in [0.5, 1.5]. Without it every channel looks alike and
// importance-guided pruning has nothing to find.
inline Checkpoint make_toy_checkpoint(const ModelArch& arch, std::uint64_t seed) {
  Checkpoint ck = make_random_checkpoint(arch, seed, 1.0);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> logu(std::log(0.1), std::log(2.0));
  std::uniform_real_distribution<double> normw(0.5, 1.5);

  std::vector<double> col_scale(arch.hidden);
  for (auto& c : col_scale) c = std::exp(logu(rng));
  auto& emb = ck.at("embed_tokens");
  for (std::size_t r = 0; r < emb.rows(); ++r)
    for (std::size_t c = 0; c < arch.hidden; ++c) emb.row(r)[c] *= static_cast<float>(col_scale[c]);

  for (std::size_t i = 0; i < arch.layers; ++i) {
    for (auto* norm : {&ck.layer(i, "input_layernorm"), &ck.layer(i, "post_attention_layernorm")})
      for (auto& w : norm->data) w = static_cast<float>(normw(rng));
    auto& gate = ck.layer(i, "gate_proj.weight");
    auto& up = ck.layer(i, "up_proj.weight");
    for (std::size_t j = 0; j < arch.ffn_inter; ++j) {
      const auto s = static_cast<float>(std::exp(logu(rng)));
      for (std::size_t c = 0; c < arch.hidden; ++c) {
        gate.row(j)[c] *= s;
        up.row(j)[c] *= s;
      }
    }
  }
  for (auto& w : ck.at("norm").data) w = static_cast<float>(normw(rng));
  return ck;
}

inline Checkpoint make_toy_checkpoint(std::uint64_t seed = 42) {
  return make_toy_checkpoint(toy_arch(), seed);
}

// Samples sequences autoregressively from the model itself, so the model is
// the best predictor of its own corpus (a stand-in for a trained model on
// held-out text). The first token is uniform.
template <LogitsModel M>
std::vector<TokenSeq> sample_corpus(const M& model, std::size_t sequences, std::size_t length,
                                    std::uint64_t seed, double temperature = 1.0) {
  const std::size_t v = model_vocab(model);
  std::mt19937_64 rng(seed);
  std::vector<TokenSeq> out;
  for (std::size_t s = 0; s < sequences; ++s) {
    TokenSeq seq{static_cast<Token>(std::uniform_int_distribution<std::size_t>(0, v - 1)(rng))};
    while (seq.size() < length) {
      const Tensor logits = model_logits(model, seq);
      const float* row = logits.row(seq.size() - 1);
      std::vector<double> w(v);
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max<double>(mx, row[j]);
      for (std::size_t j = 0; j < v; ++j) w[j] = std::exp((row[j] - mx) / temperature);
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      seq.push_back(static_cast<Token>(pick(rng)));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<TokenSeq> random_corpus(std::size_t vocab, std::size_t sequences,
                                           std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, vocab - 1);
  std::vector<TokenSeq> out(sequences, TokenSeq(length));
  for (auto& s : out)
    for (auto& t : s) t = static_cast<Token>(tok(rng));
  return out;
}

}  // namespace tinyxfer
