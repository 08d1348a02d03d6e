// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "tinyxfer/quant.hpp"
#include "tinyxfer/toy_model.hpp"

using namespace tinyxfer;

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Tensor t({rows, cols});
  for (auto& v : t.data) v = static_cast<float>(n(rng));
  return t;
}

// Activations with correlated features: Z * M for a random mixing matrix M.
Tensor correlated_acts(std::size_t tokens, std::size_t features, std::uint64_t seed) {
  const Tensor z = gaussian(tokens, features, seed);
  const Tensor m = gaussian(features, features, seed + 1000, 1.0 / std::sqrt(features));
  Tensor x({tokens, features});
  for (std::size_t r = 0; r < tokens; ++r)
    for (std::size_t c = 0; c < features; ++c) {
      double acc = 0.5 * z.row(r)[c];
      for (std::size_t k = 0; k < features; ++k) acc += static_cast<double>(z.row(r)[k]) * m.row(k)[c];
      x.row(r)[c] = static_cast<float>(acc);
    }
  return x;
}

void expect_rtn_bound(const Tensor& w, const QuantizedLinear& q) {
  const Tensor d = q.dequantize();
  const auto qm = (1 << (q.bits - 1)) - 1;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double s = q.scale(r, c);
      ASSERT_LE(std::abs(static_cast<double>(w.row(r)[c]) - d.row(r)[c]), s / 2.0)
          << "row " << r << " col " << c;
      ASSERT_LE(std::abs(q.ints[r * w.cols() + c]), qm);
    }
}

// E4M3 value table written directly from the bit layout.
std::vector<double> e4m3_table() {
  std::vector<double> out;
  for (int code = 0; code < 256; ++code) {
    const int s = (code >> 7) & 1, e = (code >> 3) & 15, m = code & 7;
    if (e == 15 && m == 7) {
      out.push_back(std::nan(""));
      continue;
    }
    const double mag = e == 0 ? m / 8.0 * std::pow(2.0, -6) : (1.0 + m / 8.0) * std::pow(2.0, e - 7);
    out.push_back(s ? -mag : mag);
  }
  return out;
}

std::vector<TokenSeq> toy_eval_corpus(const Checkpoint& ck) { return sample_corpus(ck, 40, 26, 11); }

}  // namespace

// --- RTN ---------------------------------------------------------------------

TEST(Rtn, ConstantGroupRoundTripsExactly) {
  for (int bits : {8, 4}) {
    const Tensor w({2, 128}, 0.5f);
    const auto q = quantize_rtn(w, bits, 128);
    const auto qm = (1 << (bits - 1)) - 1;
    for (auto v : q.ints) EXPECT_EQ(v, qm);
    EXPECT_EQ(q.scales[0], static_cast<float>(0.5 / qm));
    EXPECT_EQ(q.dequantize(), w);
  }
}

TEST(Rtn, ZeroMatrixIsExact) {
  const Tensor w({4, 40}, 0.0f);
  const auto q = quantize_rtn(w, 8, 16);
  EXPECT_EQ(q.groups(), 3u);
  for (auto v : q.ints) EXPECT_EQ(v, 0);
  for (auto s : q.scales) EXPECT_EQ(s, 0.0f);
  EXPECT_EQ(q.dequantize(), w);
}

TEST(Rtn, ErrorBoundHoldsExhaustively) {
  const Tensor w = gaussian(64, 256, 3);
  for (int bits : {8, 4}) {
    const auto q = quantize_rtn(w, bits, 128);
    EXPECT_EQ(q.groups(), 2u);
    expect_rtn_bound(w, q);
  }
  // Short trailing group.
  const Tensor odd = gaussian(16, 200, 4, 0.02);
  const auto q = quantize_rtn(odd, 8, 128);
  EXPECT_EQ(q.groups(), 2u);
  expect_rtn_bound(odd, q);
}

TEST(Rtn, DequantizationIsIntTimesScale) {
  const Tensor w = gaussian(8, 50, 5);
  const auto q = quantize_rtn(w, 4, 16);
  const Tensor d = q.dequantize();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 50; ++c) {
      const float want = static_cast<float>(q.ints[r * 50 + c]) * q.scale(r, c);
      EXPECT_EQ(std::memcmp(&want, &d.row(r)[c], 4), 0);
    }
}

TEST(Rtn, RejectsBadInput) {
  Tensor w = gaussian(2, 4, 1);
  EXPECT_THROW(quantize_rtn(w, 1, 4), Error);
  EXPECT_THROW(quantize_rtn(w, 8, 0), Error);
  w.data[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(quantize_rtn(w, 8, 4), Error);
}

TEST(Packing, RoundTripsLosslessly) {
  std::mt19937_64 rng(9);
  for (int bits : {4, 8}) {
    const int qm = (1 << (bits - 1)) - 1;
    std::uniform_int_distribution<int> d(-qm, qm);
    for (std::size_t n : {1u, 2u, 7u, 64u, 129u}) {
      std::vector<std::int32_t> v(n);
      for (auto& x : v) x = d(rng);
      const auto packed = pack_ints(v, bits);
      EXPECT_EQ(packed.size(), bits == 4 ? (n + 1) / 2 : n);
      EXPECT_EQ(unpack_ints(packed, n, bits), v);
    }
  }
  // Low nibble holds the even index.
  const std::vector<std::int32_t> two{3, -2};
  EXPECT_EQ(static_cast<unsigned char>(pack_ints(two, 4)[0]), 0xE3);
  EXPECT_THROW(pack_ints(two, 6), Error);
}

// --- GPTQ --------------------------------------------------------------------

TEST(Gptq, DiagonalHessianEqualsRtn) {
  const std::size_t in = 48;
  Tensor x({2 * in, in}, 0.0f);
  for (std::size_t i = 0; i < in; ++i) {
    x.row(i)[i] = 0.5f + static_cast<float>(i) * 0.1f;
    x.row(in + i)[i] = -1.0f;
  }
  const Tensor w = gaussian(12, in, 21);
  for (int bits : {4, 8}) {
    const auto g = gptq_quantize(w, x, bits, 16);
    const auto r = quantize_rtn(w, bits, 16);
    EXPECT_EQ(g.ints, r.ints);
    EXPECT_EQ(g.scales, r.scales);
  }
}

TEST(Gptq, NoWorseThanRtnOnRandomFixtures) {
  for (int bits : {8, 4}) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Tensor x = correlated_acts(128, 32, 100 + seed);
      const Tensor w = gaussian(16, 32, 500 + seed, 0.2);
      const double g = layer_output_mse(x, w, gptq_quantize(w, x, bits, 16).dequantize());
      const double r = layer_output_mse(x, w, quantize_rtn(w, bits, 16).dequantize());
      wins += g <= r;
    }
    EXPECT_GE(wins, 95) << "bits=" << bits;
  }
}

TEST(Gptq, ResolutionLimit) {
  const Tensor x = correlated_acts(64, 24, 1);
  const Tensor w = gaussian(8, 24, 2);
  const auto q = gptq_quantize(w, x, 24, 8);
  EXPECT_LT(layer_output_mse(x, w, q.dequantize()), 1e-10);
}

TEST(Gptq, Errors) {
  const Tensor w = gaussian(4, 8, 1);
  try {
    gptq_quantize(w, Tensor({16, 8}, 0.0f), 8, 8);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("larger damping"), std::string::npos);
  }
  EXPECT_THROW(gptq_quantize(w, gaussian(16, 7, 1), 8, 8), Error);
  EXPECT_THROW(gptq_quantize(w, gaussian(16, 8, 1), 8, 8, 0.0), Error);
}

// --- FP8 ---------------------------------------------------------------------

TEST(Fp8, DecodeMatchesFormatTable) {
  const auto table = e4m3_table();
  for (int code = 0; code < 256; ++code) {
    const double got = fp8_e4m3_decode(static_cast<std::uint8_t>(code));
    if (std::isnan(table[code])) {
      EXPECT_TRUE(std::isnan(got));
      continue;
    }
    EXPECT_EQ(got, table[code]) << code;
    EXPECT_EQ(fp8_e4m3_encode(got), code) << code;
    EXPECT_EQ(fp8_e4m3_round(got), got);
  }
  double mx = 0.0;
  for (double v : table)
    if (!std::isnan(v)) mx = std::max(mx, v);
  EXPECT_EQ(mx, 448.0);
}

TEST(Fp8, RoundsToNearestWithTiesToEven) {
  const auto table = e4m3_table();
  std::vector<std::pair<double, int>> finite;
  for (int code = 0; code < 256; ++code)
    if (!std::isnan(table[code])) finite.push_back({table[code], code});
  auto brute = [&](double x) {
    if (x >= 448.0) return 448.0;
    if (x <= -448.0) return -448.0;
    double best = 0.0, best_d = 1e300;
    int best_code = 0;
    for (auto [v, code] : finite) {
      const double d = std::abs(v - x);
      if (d < best_d || (d == best_d && (code & 1) == 0 && (best_code & 1) == 1)) {
        best = v, best_d = d, best_code = code;
      }
    }
    return best;
  };
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> wide(-500.0, 500.0), narrow(-0.05, 0.05);
  for (int i = 0; i < 20000; ++i) {
    const double x = i % 2 ? wide(rng) : narrow(rng);
    ASSERT_EQ(fp8_e4m3_round(x), brute(x)) << x;
  }
  // Exact midpoints.
  for (std::size_t i = 0; i + 1 < finite.size(); ++i) {
    const double a = finite[i].first, b = finite[i + 1].first;
    if (std::signbit(a) != std::signbit(b) || a == b) continue;
    ASSERT_EQ(fp8_e4m3_round((a + b) / 2.0), brute((a + b) / 2.0)) << a << " " << b;
  }
}

TEST(Fp8, SaturatesAt448) {
  EXPECT_EQ(fp8_e4m3_round(449.0), 448.0);
  EXPECT_EQ(fp8_e4m3_round(1e9), 448.0);
  EXPECT_EQ(fp8_e4m3_round(-470.0), -448.0);
  EXPECT_TRUE(std::isnan(fp8_e4m3_round(std::nan(""))));
}

TEST(Fp8, RepresentableValuesAreExact) {
  const Tensor x({7}, std::vector<float>{0, 1, -1, 2, -2, 448, 3});
  EXPECT_EQ(fp8_cast(x), x);
}

TEST(Fp8, CastIsIdempotentProjection) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor x = gaussian(8, 33, seed, std::pow(10.0, static_cast<double>(seed % 7) - 3.0));
    for (bool per_row : {false, true}) {
      const Tensor once = fp8_cast(x, per_row);
      const Tensor twice = fp8_cast(once, per_row);
      ASSERT_EQ(once, twice) << seed;
      double mx = 0.0, mx_once = 0.0;
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        mx = std::max(mx, std::abs(static_cast<double>(x.data[i])));
        mx_once = std::max(mx_once, std::abs(static_cast<double>(once.data[i])));
      }
      if (!per_row) {
        const double scale = mx / 448.0;
        for (float v : once.data) {
          const double q = v / scale;
          EXPECT_LE(std::abs(q), 448.0 * (1 + 1e-9));
          EXPECT_NEAR(fp8_e4m3_round(q), q, 2e-7 * std::max(1.0, std::abs(q)));  // f32 storage
        }
      }
      EXPECT_NEAR(mx_once, mx, 1e-6 * mx);
    }
  }
  Tensor with_nan({3}, std::vector<float>{1.0f, std::nanf(""), -2.0f});
  const Tensor y = fp8_cast(with_nan);
  EXPECT_TRUE(std::isnan(y.data[1]));
  EXPECT_EQ(y.data[2], -2.0f);
}

TEST(Fp8, StoredCodesDequantizeToCast) {
  const Tensor w = gaussian(6, 20, 2);
  for (bool per_row : {false, true}) {
    const auto q = fp8_quantize(w, per_row);
    EXPECT_EQ(q.scales.size(), per_row ? 6u : 1u);
    const Tensor d = q.dequantize();
    const Tensor c = fp8_cast(w, per_row);
    for (std::size_t i = 0; i < d.data.size(); ++i) EXPECT_NEAR(d.data[i], c.data[i], 1e-6 * std::abs(c.data[i]));
  }
}

// --- quantized models --------------------------------------------------------

TEST(QuantizedForward, W8A16AgreesWithFullPrecision) {
  const auto ck = make_toy_checkpoint(42);
  const auto corpus = toy_eval_corpus(ck);
  const auto qm = quantize_model(ck, {QuantKind::W8A16});
  std::size_t agree = 0, total = 0;
  for (const auto& seq : corpus) {
    const Tensor a = forward(ck, seq), b = quantized_forward(qm, seq).logits;
    for (std::size_t t = 0; t + 1 < seq.size(); ++t, ++total) {
      const auto ra = std::span(a.row(t), a.cols()), rb = std::span(b.row(t), b.cols());
      agree += std::max_element(ra.begin(), ra.end()) - ra.begin() ==
               std::max_element(rb.begin(), rb.end()) - rb.begin();
    }
  }
  EXPECT_EQ(total, 1000u);
  EXPECT_GE(static_cast<double>(agree) / total, 0.99);
  const double fp = corpus_perplexity(ck, corpus), q8 = corpus_perplexity(qm, corpus);
  EXPECT_LE(std::abs(q8 - fp) / fp, 0.01);
}

TEST(QuantizedForward, FourBitIsWorseThanEightBit) {
  const auto ck = make_toy_checkpoint(42);
  const auto corpus = toy_eval_corpus(ck);
  const auto calib = sample_corpus(ck, 32, 24, 5);
  const double fp = corpus_perplexity(ck, corpus);
  const double q8 = corpus_perplexity(quantize_model(ck, {QuantKind::W8A16}), corpus);
  QuantScheme s4{QuantKind::W4A16};
  const auto q4m = quantize_model(ck, s4, calib);
  const double q4 = corpus_perplexity(q4m, corpus);
  EXPECT_GT(q4, q8);
  EXPECT_GT(q4, fp);
  EXPECT_FALSE(q4m.int_weights.empty());
  for (const auto& [name, q] : q4m.int_weights) EXPECT_EQ(q.bits, 4);
}

TEST(QuantizedForward, ResolutionLimitMatchesFullPrecision) {
  const auto ck = make_toy_checkpoint(42);
  QuantScheme s{QuantKind::W8A16};
  s.bits_override = 24;
  const auto qm = quantize_model(ck, s);
  const TokenSeq toks{1, 5, 9, 13, 17, 21};
  const Tensor a = forward(ck, toks), b = quantized_forward(qm, toks).logits;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    EXPECT_NEAR(a.data[i], b.data[i], 1e-5 * std::max(1.0f, std::abs(a.data[i])));
}

TEST(QuantizedForward, EmbeddingAndHeadUntouched) {
  const auto ck = make_toy_checkpoint(42);
  for (auto kind : {QuantKind::W8A16, QuantKind::W8A8Fp8}) {
    const auto qm = quantize_model(ck, {kind});
    EXPECT_EQ(qm.dense.at("embed_tokens"), ck.at("embed_tokens"));
    EXPECT_EQ(qm.dense.at("norm"), ck.at("norm"));
    EXPECT_EQ(qm.dense.layer(0, "q_proj.bias"), ck.layer(0, "q_proj.bias"));
    EXPECT_EQ(qm.int_weights.size() + qm.fp8_weights.size(), 7 * ck.arch.layers);
  }
}

TEST(QuantizedForward, W8A8IsDeterministicAndCastsActivations) {
  const auto ck = make_toy_checkpoint(42);
  const auto qm = quantize_model(ck, {QuantKind::W8A8Fp8});
  const TokenSeq toks{3, 1, 4, 1, 5, 9, 2, 6};
  const Tensor a = quantized_forward(qm, toks).logits, b = quantized_forward(qm, toks).logits;
  EXPECT_EQ(a, b);
  std::size_t seen = 0;
  ForwardOptions probe;
  probe.linear_input = [&](std::string_view, Tensor& x) {
    // Called before the cast: inputs are the raw activations.
    ++seen;
    (void)x;
  };
  quantized_forward(qm, toks, probe);
  EXPECT_EQ(seen, 7 * ck.arch.layers);
  // Without the activation cast the logits differ.
  EXPECT_NE(forward(qm.dense, toks), a);
  const auto corpus = toy_eval_corpus(ck);
  EXPECT_LT(corpus_perplexity(qm, corpus), 1.1 * corpus_perplexity(ck, corpus));
}

TEST(QuantizedContainer, RoundTrips) {
  const auto ck = make_toy_checkpoint(42);
  const auto calib = sample_corpus(ck, 4, 16, 5);
  for (auto kind : {QuantKind::W8A16, QuantKind::W4A16, QuantKind::W8A8Fp8}) {
    const auto qm = quantize_model(ck, {kind}, calib);
    const auto bytes = encode_quantized(qm);
    const auto back = decode_quantized(bytes, "mem");
    EXPECT_EQ(back.dense.tensors, qm.dense.tensors) << to_string(kind);
    EXPECT_EQ(to_json(back.scheme), to_json(qm.scheme));
    for (const auto& [name, q] : qm.int_weights) {
      EXPECT_EQ(back.int_weights.at(name).ints, q.ints);
      EXPECT_EQ(back.int_weights.at(name).scales, q.scales);
    }
    EXPECT_EQ(encode_quantized(back), bytes);
    EXPECT_THROW(decode_checkpoint(bytes, "mem"), Error);
  }
  // An int4 container is smaller than the f32 original.
  EXPECT_LT(encode_quantized(quantize_model(ck, {QuantKind::W4A16}, calib)).size(), encode_checkpoint(ck).size());
}

TEST(QuantScheme, Validation) {
  const auto ck = make_toy_checkpoint(42);
  EXPECT_THROW(quantize_model(ck, {QuantKind::W4A16}), Error);  // GPTQ without calibration
  QuantScheme s;
  s.group_size = 0;
  EXPECT_THROW(s.validate(), Error);
  EXPECT_EQ(quant_kind_from_string("W8A8-FP8"), QuantKind::W8A8Fp8);
  EXPECT_THROW(quant_kind_from_string("W2A2"), Error);
}
