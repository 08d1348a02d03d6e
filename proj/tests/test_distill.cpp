// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "tinyxfer/distill.hpp"
#include "tinyxfer/fixtures.hpp"
#include "tinyxfer/toy_model.hpp"

using namespace tinyxfer;

namespace {

std::vector<double> random_logits(std::mt19937_64& rng, std::size_t n, double sd = 2.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> z(n);
  for (auto& x : z) x = d(rng);
  return z;
}

LogitsCacheRecord random_record(std::mt19937_64& rng, std::size_t v, std::size_t k) {
  std::vector<float> row(v);
  std::normal_distribution<double> d(0.0, 2.0);
  for (auto& x : row) x = static_cast<float>(d(rng));
  return top_k_record(row, k, 0, 0);
}

// Untruncated divergence computed directly from full-vocab softmaxes.
double full_divergence(std::span<const double> t, std::span<const double> s, const DistillConfig& cfg) {
  const auto p = softmax(t), q = softmax(s);
  if (cfg.kind == LossKind::FKL) return kl(p, q);
  if (cfg.kind == LossKind::RKL) return kl(q, p);
  return akl(t, s, cfg.mu).loss;
}

}  // namespace

TEST(Kl, HandValues) {
  const std::vector<double> a{0.3, 0.7};
  EXPECT_DOUBLE_EQ(kl(a, a), 0.0);
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
  EXPECT_NEAR(kl(p, q), 0.14384103622589042, 1e-12);
  const std::vector<double> one{1.0, 0.0}, half{0.5, 0.5};
  EXPECT_NEAR(kl(one, half), 0.6931471805599453, 1e-12);
  const std::vector<double> three{0.2, 0.3, 0.5};
  EXPECT_THROW(kl(p, three), Error);
}

TEST(Kl, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto p = softmax(std::span<const double>(random_logits(rng, 7)));
    const auto q = softmax(std::span<const double>(random_logits(rng, 7)));
    EXPECT_GE(kl(p, q), 0.0);
    EXPECT_NEAR(kl(p, p), 0.0, 1e-12);
  }
}

TEST(Akl, IdenticalLogits) {
  const std::vector<double> z{1.0, -2.0, 0.5};
  const auto r = akl(z, z, 0.9);
  EXPECT_DOUBLE_EQ(r.loss, 0.0);
  EXPECT_DOUBLE_EQ(r.alpha_head, 1.0);
}

TEST(Akl, ScriptedReferenceValue) {
  // Frozen from tests/reference/oracles.py (head = {0,1}, gaps 0.575 each).
  const std::vector<double> t{2, 1, 0}, s{0, 1, 2};
  const auto r = akl(t, s, 0.9);
  EXPECT_NEAR(r.loss, 1.1504207652088825, 1e-12);
  EXPECT_NEAR(r.alpha_head, 0.5, 1e-12);
}

TEST(Akl, AlphaOneIsForwardKl) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto t = random_logits(rng, 9), s = random_logits(rng, 9);
    const auto p = softmax(std::span<const double>(t)), q = softmax(std::span<const double>(s));
    EXPECT_DOUBLE_EQ(akl(t, s, 0.5, 1.0).loss, kl(p, q));
    EXPECT_DOUBLE_EQ(akl(t, s, 0.5, 0.0).loss, kl(q, p));
    // mu = 1 puts every token in the head set.
    const auto r = akl(t, s, 1.0);
    EXPECT_DOUBLE_EQ(r.alpha_head, 1.0);
    EXPECT_DOUBLE_EQ(r.loss, kl(p, q));
  }
}

TEST(Akl, ShiftInvariantAndNonNegative) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    auto t = random_logits(rng, 6), s = random_logits(rng, 6);
    const double base = akl(t, s, 0.7).loss;
    EXPECT_GE(base, 0.0);
    for (auto& x : t) x += 13.5;
    for (auto& x : s) x -= 4.25;
    EXPECT_NEAR(akl(t, s, 0.7).loss, base, 1e-10);
  }
}

TEST(Akl, DimensionErrors) {
  const std::vector<double> a{1, 2}, b{1, 2, 3}, one{1};
  EXPECT_THROW(akl(a, b, 0.9), Error);
  EXPECT_THROW(akl(one, one, 0.9), Error);
}

TEST(Cache, FullVocabEqualsSoftmax) {
  const auto ck = make_toy_checkpoint(42);
  const std::vector<TokenSeq> data{{1, 2, 3, 4}, {7, 7}};
  const auto cache = build_cache(ck, data, ck.arch.vocab);
  ASSERT_EQ(cache.size(), 6u);
  for (const auto& rec : cache) {
    const Tensor logits = forward(ck, data[rec.sample_id]);
    const auto full = softmax(std::span<const float>(logits.row(rec.position), ck.arch.vocab));
    const auto cached = softmax(std::span<const float>(rec.logits));
    for (std::size_t j = 0; j < rec.k(); ++j) EXPECT_NEAR(cached[j], full[rec.ids[j]], 1e-6);
  }
}

TEST(Cache, TopThreeMatchesArgsort) {
  const auto ck = make_toy_checkpoint(42);
  const std::vector<TokenSeq> data{{5, 9, 13, 2, 44}};
  const auto cache = build_cache(ck, data, 3);
  const Tensor logits = forward(ck, data[0]);
  for (const auto& rec : cache) {
    std::vector<std::uint32_t> order(ck.arch.vocab);
    std::iota(order.begin(), order.end(), 0u);
    const float* row = logits.row(rec.position);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
    EXPECT_EQ(rec.ids, std::vector<std::uint32_t>(order.begin(), order.begin() + 3));
  }
}

TEST(Cache, TieBreakPrefersLowerId) {
  const std::vector<float> row{1.0f, 3.0f, 3.0f, 0.0f, 3.0f};
  const auto rec = top_k_record(row, 2, 0, 0);
  EXPECT_EQ(rec.ids, (std::vector<std::uint32_t>{1, 2}));
}

TEST(Cache, EmptyDatasetAndBadK) {
  const auto ck = make_toy_checkpoint(42);
  const std::vector<TokenSeq> none;
  const auto cache = build_cache(ck, none, 4);
  EXPECT_TRUE(cache.empty());
  EXPECT_TRUE(decode_cache(encode_cache(cache), "mem").empty());
  EXPECT_THROW(build_cache(ck, none, ck.arch.vocab + 1), Error);
}

TEST(Cache, RoundTripIsBitExact) {
  std::mt19937_64 rng(8);
  std::vector<LogitsCacheRecord> recs;
  for (int i = 0; i < 20; ++i) {
    auto r = random_record(rng, 50, 5);
    r.sample_id = static_cast<std::uint64_t>(i) << 33;
    r.position = static_cast<std::uint32_t>(i * 7);
    recs.push_back(r);
  }
  const auto bytes = encode_cache(recs);
  EXPECT_EQ(bytes.size(), 12u + 20u * (8 + 4 + 2 + 5 * 8));
  const auto back = decode_cache(bytes, "mem");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].ids, recs[i].ids);
    EXPECT_EQ(0, std::memcmp(back[i].logits.data(), recs[i].logits.data(), 20));
  }
  EXPECT_THROW(decode_cache(bytes.substr(0, bytes.size() - 1), "cut"), Error);
}

TEST(KdLoss, StationaryAtTeacher) {
  std::mt19937_64 rng(2);
  const auto rec = random_record(rng, 30, 6);
  std::vector<float> student(30, -5.0f);
  for (std::size_t j = 0; j < rec.k(); ++j) student[rec.ids[j]] = rec.logits[j] + 0.75f;
  for (auto kind : {LossKind::FKL, LossKind::RKL, LossKind::AKL}) {
    DistillConfig cfg;
    cfg.kind = kind;
    const auto r = kd_loss_and_grad(rec, student, cfg);
    EXPECT_NEAR(r.loss, 0.0, 1e-12);
    for (double g : r.grad) EXPECT_LE(std::abs(g), 1e-6);
  }
}

TEST(KdLoss, ForwardKlHandValue) {
  // Teacher probs [0.75, 0.25] -> logits [ln 3, 0]; student restricted probs [0.5, 0.5].
  LogitsCacheRecord rec{0, 0, {4, 1}, {static_cast<float>(std::log(3.0)), 0.0f}};
  std::vector<float> student(6, 0.0f);
  DistillConfig cfg;
  cfg.kind = LossKind::FKL;
  EXPECT_NEAR(kd_loss_and_grad(rec, student, cfg).loss, 0.13081203594113697, 1e-7);
}

TEST(KdLoss, TokenOutsideStudentVocab) {
  LogitsCacheRecord rec{0, 0, {9}, {1.0f}};
  std::vector<float> student(5, 0.0f);
  EXPECT_THROW(kd_loss_and_grad(rec, student, DistillConfig{}), Error);
}

TEST(KdLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(100);
  const double h = 1e-4;
  for (auto kind : {LossKind::FKL, LossKind::RKL, LossKind::AKL}) {
    for (int fixture = 0; fixture < 100; ++fixture) {
      const std::size_t v = 12, k = 2 + fixture % 9;
      const auto rec = random_record(rng, v, k);
      auto z = random_logits(rng, k);
      DistillConfig cfg;
      cfg.kind = kind;
      cfg.mu = 0.5 + 0.1 * (fixture % 5);
      cfg.ce_mix = fixture % 4 == 0 ? 0.5 : 0.0;
      const auto r = kd_loss_and_grad_on_support(rec, z, cfg);
      for (std::size_t j = 0; j < k; ++j) {
        auto zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        const double fd = (kd_loss_and_grad_on_support(rec, zp, cfg).loss -
                           kd_loss_and_grad_on_support(rec, zm, cfg).loss) / (2 * h);
        EXPECT_LE(std::abs(fd - r.grad[j]), 1e-4 * std::max(std::abs(fd), std::abs(r.grad[j])) + 1e-8)
            << to_string(kind) << " fixture " << fixture << " coord " << j;
      }
    }
  }
}

TEST(KdLoss, FullSupportEqualsUntruncatedLoss) {
  std::mt19937_64 rng(21);
  for (auto kind : {LossKind::FKL, LossKind::RKL, LossKind::AKL}) {
    for (int i = 0; i < 20; ++i) {
      const std::size_t v = 16;
      std::vector<float> trow(v), srow(v);
      std::normal_distribution<double> d(0.0, 2.0);
      for (auto& x : trow) x = static_cast<float>(d(rng));
      for (auto& x : srow) x = static_cast<float>(d(rng));
      const auto rec = top_k_record(trow, v, 0, 0);
      DistillConfig cfg;
      cfg.kind = kind;
      const std::vector<double> t(trow.begin(), trow.end()), s(srow.begin(), srow.end());
      EXPECT_NEAR(kd_loss_and_grad(rec, srow, cfg).loss, full_divergence(t, s, cfg), 1e-6);
    }
  }
}

TEST(Config, Validation) {
  DistillConfig cfg;
  cfg.mu = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.ce_mix = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_EQ(loss_kind_from_string("akl"), LossKind::AKL);
  EXPECT_THROW(loss_kind_from_string("js"), Error);
}

TEST(Trainer, ZeroLearningRateIsFlat) {
  auto f = make_distill_fixture(7);
  DistillConfig cfg;
  cfg.kind = LossKind::FKL;
  const auto res = train_student(f.student, f.cache, f.corpus, cfg, 5, 0.0);
  EXPECT_EQ(res.student.weight, f.student.weight);
  EXPECT_EQ(res.student.bias, f.student.bias);
  for (double l : res.loss_curve) EXPECT_DOUBLE_EQ(l, res.loss_curve.front());
}

TEST(Trainer, DivergenceIsReported) {
  auto f = make_distill_fixture(7);
  DistillConfig cfg;
  cfg.kind = LossKind::FKL;
  EXPECT_THROW(train_student(f.student, f.cache, f.corpus, cfg, 50, std::numeric_limits<double>::infinity()), Error);
}

TEST(Trainer, SmoothedCurveIsMonotone) {
  auto f = make_distill_fixture(9);
  DistillConfig cfg;
  cfg.kind = LossKind::AKL;
  const auto res = train_student(f.student, f.cache, f.corpus, cfg, 100, 2.0);
  for (std::size_t i = 1; i < res.smoothed_curve.size(); ++i)
    EXPECT_LE(res.smoothed_curve[i], res.smoothed_curve[i - 1]);
  EXPECT_LT(res.loss_curve.back(), res.loss_curve.front());
}

TEST(Student, JsonRoundTrip) {
  auto f = make_distill_fixture(3);
  const auto back = LinearStudent::from_json(f.teacher.to_json());
  EXPECT_EQ(back.weight, f.teacher.weight);
  EXPECT_EQ(back.embedding, f.teacher.embedding);
}
