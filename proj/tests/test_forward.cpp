// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "oracles.hpp"
#include "tinyxfer/forward.hpp"
#include "tinyxfer/toy_model.hpp"

using namespace tinyxfer;

namespace {

ModelArch tiny_arch() {
  ModelArch a;
  a.layers = 1;
  a.hidden = 8;
  a.heads = 2;
  a.kv_heads = 1;
  a.head_dim = 4;
  a.ffn_inter = 16;
  a.vocab = 11;
  return a;
}

double max_rel_err(const Tensor& got, const oracle::Mat& want) {
  double worst = 0.0;
  for (std::size_t r = 0; r < want.size(); ++r)
    for (std::size_t c = 0; c < want[r].size(); ++c) {
      const double w = want[r][c], g = got.row(r)[c];
      worst = std::max(worst, std::abs(g - w) / std::max(1.0, std::abs(w)));
    }
  return worst;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  auto ck = make_zero_checkpoint(tiny_arch());
  const TokenSeq toks{1, 2, 3, 4};
  const Tensor logits = forward(ck, toks);
  for (float x : logits.data) EXPECT_EQ(x, 0.0f);
}

TEST(Forward, MatchesDenseReferenceOnSeed42) {
  const auto ck = make_random_checkpoint(tiny_arch(), 42);
  const TokenSeq toks{1, 2, 3};
  const Tensor logits = forward(ck, toks);
  const auto ref = oracle::reference_forward(ck, {1, 2, 3});
  EXPECT_LT(max_rel_err(logits, ref.logits), 1e-5);
}

TEST(Forward, MatchesDenseReferenceOnToyModel) {
  const auto ck = make_toy_checkpoint(42);
  const TokenSeq toks{5, 17, 3, 40, 0, 22, 9, 9, 31, 47};
  const auto ref = oracle::reference_forward(ck, {toks.begin(), toks.end()});
  EXPECT_LT(max_rel_err(forward(ck, toks), ref.logits), 1e-5);
}

TEST(Forward, TraceShape) {
  const auto ck = make_random_checkpoint(tiny_arch(), 42);
  const TokenSeq toks{1, 2, 3};
  ForwardOptions opts;
  opts.capture_trace = true;
  const auto res = forward(ck, toks, opts);
  ASSERT_EQ(res.trace.size(), ck.arch.layers + 1);
  for (const auto& x : res.trace) EXPECT_EQ(x.shape, (std::vector<std::size_t>{3, 8}));
}

TEST(Forward, DeterministicBitIdentical) {
  const auto ck = make_toy_checkpoint(42);
  const TokenSeq toks{4, 8, 15, 16, 23, 42};
  const Tensor a = forward(ck, toks), b = forward(ck, toks);
  ASSERT_EQ(a.data.size(), b.data.size());
  EXPECT_EQ(0, std::memcmp(a.data.data(), b.data.data(), 4 * a.data.size()));
}

TEST(Forward, SoftmaxRowsSumToOne) {
  const auto ck = make_toy_checkpoint(42);
  const TokenSeq toks{1, 2, 3, 4, 5};
  const Tensor logits = forward(ck, toks);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = -1e300, s = 0.0, total = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) mx = std::max<double>(mx, logits.row(r)[c]);
    for (std::size_t c = 0; c < logits.cols(); ++c) s += std::exp(logits.row(r)[c] - mx);
    for (std::size_t c = 0; c < logits.cols(); ++c) total += std::exp(logits.row(r)[c] - mx) / s;
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Forward, TokenOutOfRange) {
  const auto ck = make_random_checkpoint(tiny_arch(), 42);
  const TokenSeq bad{1, 11};
  EXPECT_THROW(forward(ck, bad), Error);
  const TokenSeq empty;
  EXPECT_THROW(forward(ck, empty), Error);
}

TEST(Forward, GqaWithFullKvHeadsEqualsMultiHead) {
  auto a = tiny_arch();
  a.kv_heads = a.heads;
  const auto ck = make_random_checkpoint(a, 7);
  const TokenSeq toks{0, 3, 6, 9, 10};
  const auto ref = oracle::reference_forward(ck, {0, 3, 6, 9, 10});
  EXPECT_LT(max_rel_err(forward(ck, toks), ref.logits), 1e-5);
}

TEST(RmsNorm, UnitRootMeanSquare) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 3.0);
  Tensor x({6, 32});
  for (auto& v : x.data) v = static_cast<float>(n01(rng));
  const Tensor y = detail::rmsnorm(x, Tensor({32}, 1.0f), 1e-6);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < 32; ++c) ss += static_cast<double>(y.row(r)[c]) * y.row(r)[c];
    EXPECT_NEAR(std::sqrt(ss / 32.0), 1.0, 1e-5);
  }
}

TEST(Perplexity, UniformModelEqualsVocab) {
  // Zero weights give all-zero logits, i.e. a uniform predictor.
  const auto ck = make_zero_checkpoint(tiny_arch());
  const TokenSeq toks{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 3};
  EXPECT_NEAR(perplexity(ck, toks), 11.0, 1e-6);
  auto big = toy_arch();
  const auto zero = make_zero_checkpoint(big);
  const auto corpus = random_corpus(big.vocab, 3, 9, 1);
  EXPECT_NEAR(corpus_perplexity(zero, corpus), static_cast<double>(big.vocab), 1e-6);
}

TEST(Perplexity, OracleModelApproachesOne) {
  // Logits giving the true next token probability 1 - 1e-9.
  const std::size_t v = 11;
  const TokenSeq toks{3, 1, 4, 1, 5, 9, 2, 6};
  Tensor logits({toks.size(), v}, 0.0f);
  const double gap = std::log((1.0 - 1e-9) * (v - 1) / 1e-9);
  for (std::size_t t = 0; t + 1 < toks.size(); ++t)
    logits.row(t)[static_cast<std::size_t>(toks[t + 1])] = static_cast<float>(gap);
  EXPECT_NEAR(perplexity_from_logits(logits, toks), 1.0, 1e-6);
}

TEST(Perplexity, MatchesReferenceCrossEntropy) {
  const auto ck = make_toy_checkpoint(42);
  const auto corpus = sample_corpus(ck, 2, 24, 9);
  for (const auto& seq : corpus) {
    const std::vector<int> s(seq.begin(), seq.end());
    const double want = oracle::reference_perplexity(oracle::reference_forward(ck, s).logits, s);
    EXPECT_NEAR(perplexity(ck, seq), want, 1e-5 * want);
  }
  const double ppl = corpus_perplexity(ck, corpus);
  EXPECT_LT(ppl, static_cast<double>(ck.arch.vocab));  // the model predicts its own samples
}

TEST(Perplexity, TooShort) {
  const auto ck = make_zero_checkpoint(tiny_arch());
  const TokenSeq one{1};
  EXPECT_THROW(perplexity(ck, one), Error);
}

TEST(Corpus, BinaryAndJsonl) {
  const auto dir = std::filesystem::temp_directory_path() / "tinyxfer_test_forward";
  std::filesystem::create_directories(dir);
  const TokenSeq seq{1, 2, 3, 65535};
  save_token_stream(seq, dir / "c.bin");
  EXPECT_EQ(load_corpus(dir / "c.bin"), std::vector<TokenSeq>{seq});
  write_file(dir / "c.jsonl", "{\"tokens\":[1,2]}\n{\"tokens\":[3]}\n");
  EXPECT_EQ(load_corpus(dir / "c.jsonl"), (std::vector<TokenSeq>{{1, 2}, {3}}));
  write_file(dir / "odd.bin", "abc");
  EXPECT_THROW(load_corpus(dir / "odd.bin"), Error);
}
