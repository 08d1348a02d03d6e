// SPDX-License-Identifier: Apache-2.0
//
// Logits-based knowledge distillation: forward/reverse/adaptive KL losses with
// analytic gradients, the top-k teacher logits cache, and a minimal
// linear-softmax student trainer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tinyxfer/forward.hpp"

namespace tinyxfer {

inline constexpr double kProbFloor = 1e-12;

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.size());
  if (z.empty()) return p;
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& x : p) x /= s;
  return p;
}

inline std::vector<double> softmax(std::span<const float> z) {
  std::vector<double> zd(z.begin(), z.end());
  return softmax(std::span<const double>(zd));
}

// KL(p || q) in nats. Terms with p_t = 0 contribute 0; q is floored at 1e-12.
inline double kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw input_error("kl: dimension mismatch (" + std::to_string(p.size()) + " vs " +
                      std::to_string(q.size()) + ")");
  double acc = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t] <= 0.0) continue;
    acc += p[t] * (std::log(p[t]) - std::log(std::max(q[t], kProbFloor)));
  }
  return std::max(acc, 0.0);
}

enum class LossKind { FKL, RKL, AKL };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::FKL: return "fkl";
    case LossKind::RKL: return "rkl";
    case LossKind::AKL: return "akl";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "fkl" || s == "FKL") return LossKind::FKL;
  if (s == "rkl" || s == "RKL") return LossKind::RKL;
  if (s == "akl" || s == "AKL") return LossKind::AKL;
  throw config_error("unknown loss kind '" + s + "' (expected fkl, rkl or akl)");
}

// Loss = ce_mix * CE + (1 - ce_mix) * divergence. KD losses average per
// token (per cached position), not per sequence.
struct DistillConfig {
  LossKind kind = LossKind::AKL;
  std::optional<double> alpha_head;  // fixed head weight; unset means adaptive (AKL only)
  double mu = 0.9;                   // head-mass threshold in (0, 1]
  std::size_t top_k = 100;
  double ce_mix = 0.0;

  void validate() const {
    if (!(mu > 0.0 && mu <= 1.0)) throw config_error("mu must be in (0, 1]");
    if (alpha_head && !(*alpha_head >= 0.0 && *alpha_head <= 1.0))
      throw config_error("alpha_head must be in [0, 1]");
    if (!(ce_mix >= 0.0 && ce_mix <= 1.0)) throw config_error("ce_mix must be in [0, 1]");
    if (top_k < 1) throw config_error("top_k must be >= 1");
  }
};

struct DivergenceResult {
  double loss = 0.0;
  double alpha_head = 1.0;
  std::vector<double> grad;  // d loss / d student logits
};

namespace detail {

// Indices of the head set: the shortest prefix of tokens ordered by
// descending teacher probability (ties: lower index first) whose mass
// reaches mu. All tokens when the mass never reaches mu.
inline std::vector<char> head_mask(std::span<const double> p, double mu) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  std::vector<char> head(p.size(), 0);
  double cum = 0.0;
  for (std::size_t idx : order) {
    head[idx] = 1;
    cum += p[idx];
    if (cum >= mu) break;
  }
  return head;
}

// Divergence between teacher probabilities p and softmax(z), with gradient
// with respect to z. `alpha` fixes the FKL weight; otherwise it follows the
// head/tail gap ratio and its dependence on z is differentiated too.
inline DivergenceResult divergence(std::span<const double> p, std::span<const double> z,
                                   std::optional<double> alpha, double mu) {
  const std::size_t n = p.size();
  const std::vector<double> q = softmax(z);
  DivergenceResult r;
  r.grad.assign(n, 0.0);

  const double fkl = kl(p, q);
  const double rkl = kl(q, p);

  // dF/dz_k = q_k - p_k ; dR/dz_k = q_k (log q_k - log p_k - R)
  std::vector<double> dF(n), dR(n);
  double rkl_raw = 0.0;
  std::vector<double> lr(n);
  for (std::size_t k = 0; k < n; ++k) {
    lr[k] = std::log(std::max(q[k], kProbFloor)) - std::log(std::max(p[k], kProbFloor));
    rkl_raw += q[k] * lr[k];
  }
  for (std::size_t k = 0; k < n; ++k) {
    dF[k] = q[k] - p[k];
    dR[k] = q[k] * (lr[k] - rkl_raw);
  }

  if (alpha) {
    r.alpha_head = *alpha;
    r.loss = *alpha * fkl + (1.0 - *alpha) * rkl;
    for (std::size_t k = 0; k < n; ++k) r.grad[k] = *alpha * dF[k] + (1.0 - *alpha) * dR[k];
    return r;
  }

  const std::vector<char> head = head_mask(p, mu);
  double g_head = 0.0, g_tail = 0.0;
  for (std::size_t t = 0; t < n; ++t) (head[t] ? g_head : g_tail) += std::abs(p[t] - q[t]);
  const double g = g_head + g_tail;
  if (g == 0.0) {
    r.alpha_head = 1.0;
    r.loss = 0.0;
    return r;
  }
  const double a = g_head / g;
  r.alpha_head = a;
  r.loss = a * fkl + (1.0 - a) * rkl;

  // d alpha / d q_j = (G^head_j * g_tail - g_head * G^tail_j) / g^2 with
  // G^S_j = d g_S / d q_j = -sign(p_j - q_j) [j in S].
  std::vector<double> da_dq(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double s = p[j] > q[j] ? -1.0 : (p[j] < q[j] ? 1.0 : 0.0);
    da_dq[j] = head[j] ? s * g_tail / (g * g) : -g_head * s / (g * g);
  }
  double mean_da = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean_da += da_dq[j] * q[j];
  for (std::size_t k = 0; k < n; ++k) {
    const double da_dz = q[k] * (da_dq[k] - mean_da);
    r.grad[k] = a * dF[k] + (1.0 - a) * dR[k] + (fkl - rkl) * da_dz;
  }
  return r;
}

inline std::optional<double> effective_alpha(const DistillConfig& cfg) {
  if (cfg.alpha_head) return cfg.alpha_head;
  if (cfg.kind == LossKind::FKL) return 1.0;
  if (cfg.kind == LossKind::RKL) return 0.0;
  return std::nullopt;
}

}  // namespace detail

struct AklResult {
  double loss = 0.0;
  double alpha_head = 1.0;
};

// Adaptive KL between softmax(teacher) and softmax(student). A fixed
// `alpha_override` replaces the adaptive head weight (1 = FKL, 0 = RKL).
inline AklResult akl(std::span<const double> teacher_logits, std::span<const double> student_logits,
                     double mu, std::optional<double> alpha_override = std::nullopt) {
  if (teacher_logits.size() != student_logits.size())
    throw input_error("akl: dimension mismatch");
  if (teacher_logits.size() < 2) throw input_error("akl: need at least 2 logits");
  const auto p = softmax(teacher_logits);
  const auto r = detail::divergence(p, student_logits, alpha_override, mu);
  return {r.loss, r.alpha_head};
}

// ---------------------------------------------------------------------------
// Logits cache

struct LogitsCacheRecord {
  std::uint64_t sample_id = 0;
  std::uint32_t position = 0;
  std::vector<std::uint32_t> ids;  // k distinct token ids, descending by logit
  std::vector<float> logits;       // k teacher logits, non-increasing

  std::size_t k() const { return ids.size(); }
  bool operator==(const LogitsCacheRecord&) const = default;
};

inline void validate(const LogitsCacheRecord& r) {
  if (r.ids.empty() || r.ids.size() != r.logits.size())
    throw input_error("cache record needs k >= 1 ids and as many logits");
  for (std::size_t i = 1; i < r.logits.size(); ++i)
    if (r.logits[i] > r.logits[i - 1]) throw input_error("cache record logits not sorted");
  std::vector<std::uint32_t> sorted = r.ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw input_error("cache record has duplicate token ids");
}

// Top-k of a logits row; ties resolve to the lower token id.
inline LogitsCacheRecord top_k_record(std::span<const float> row, std::size_t k,
                                      std::uint64_t sample_id, std::uint32_t position) {
  std::vector<std::uint32_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return row[a] > row[b] || (row[a] == row[b] && a < b);
                    });
  LogitsCacheRecord rec{sample_id, position, {}, {}};
  rec.ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto id : rec.ids) rec.logits.push_back(row[id]);
  return rec;
}

// One record per (sample, position), ordered by sample id then position.
template <LogitsModel M>
std::vector<LogitsCacheRecord> build_cache(const M& teacher, std::span<const TokenSeq> dataset,
                                           std::size_t k, std::size_t threads = 1) {
  const std::size_t v = model_vocab(teacher);
  if (k < 1 || k > v)
    throw config_error("top-k " + std::to_string(k) + " must be in [1, vocab=" +
                       std::to_string(v) + "]");
  std::vector<std::vector<LogitsCacheRecord>> per_sample(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t s) {
    if (dataset[s].empty()) return;
    const Tensor logits = model_logits(teacher, dataset[s]);
    for (std::size_t pos = 0; pos < dataset[s].size(); ++pos)
      per_sample[s].push_back(top_k_record(std::span<const float>(logits.row(pos), v), k, s,
                                           static_cast<std::uint32_t>(pos)));
  });
  std::vector<LogitsCacheRecord> out;
  for (auto& recs : per_sample)
    for (auto& r : recs) out.push_back(std::move(r));
  return out;
}

// Cache file:
//   magic "TXLOGIT1" (8 bytes), u32 version (1)
//   records: u64 sample id, u32 position, u16 k, k x u32 token ids, k x f32 logits
// All little-endian, no padding.
inline constexpr std::string_view kCacheMagic = "TXLOGIT1";
inline constexpr std::uint32_t kCacheVersion = 1;

inline std::string encode_cache(std::span<const LogitsCacheRecord> records) {
  ByteWriter w;
  w.put_bytes(kCacheMagic);
  w.put<std::uint32_t>(kCacheVersion);
  for (const auto& r : records) {
    if (r.k() > 0xFFFF) throw runtime_error("cache record k exceeds u16");
    w.put<std::uint64_t>(r.sample_id);
    w.put<std::uint32_t>(r.position);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.k()));
    w.put_span(std::span<const std::uint32_t>(r.ids));
    w.put_span(std::span<const float>(r.logits));
  }
  return w.take();
}

inline std::vector<LogitsCacheRecord> decode_cache(std::string_view bytes,
                                                   const std::string& origin) {
  ByteReader r(bytes);
  if (r.remaining() < kCacheMagic.size() || r.take(kCacheMagic.size(), "magic") != kCacheMagic)
    throw input_error(origin + ": not a logits cache (bad magic)");
  if (r.get<std::uint32_t>("version") != kCacheVersion)
    throw input_error(origin + ": unsupported logits cache version");
  std::vector<LogitsCacheRecord> out;
  try {
    while (r.remaining() > 0) {
      LogitsCacheRecord rec;
      rec.sample_id = r.get<std::uint64_t>("sample id");
      rec.position = r.get<std::uint32_t>("position");
      const auto k = r.get<std::uint16_t>("k");
      rec.ids.resize(k);
      rec.logits.resize(k);
      r.read_into(std::span<std::uint32_t>(rec.ids), "token ids");
      r.read_into(std::span<float>(rec.logits), "logits");
      validate(rec);
      out.push_back(std::move(rec));
    }
  } catch (const Error& e) {
    throw input_error(origin + ": " + e.what());
  }
  return out;
}

inline void save_cache(std::span<const LogitsCacheRecord> records,
                       const std::filesystem::path& path) {
  write_file(path, encode_cache(records));
}

inline std::vector<LogitsCacheRecord> load_cache(const std::filesystem::path& path) {
  return decode_cache(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Per-record loss

struct KdResult {
  double loss = 0.0;
  double alpha_head = 1.0;
  std::vector<double> grad;  // over the cached support, aligned with record.ids
};

// Loss on the cached support only: teacher probabilities are the softmax of
// the cached logits, student probabilities the softmax of the student logits
// at the cached ids (both renormalized over the support).
inline KdResult kd_loss_and_grad_on_support(const LogitsCacheRecord& rec,
                                            std::span<const double> support_logits,
                                            const DistillConfig& cfg) {
  std::vector<double> t(rec.logits.begin(), rec.logits.end());
  const auto p = softmax(std::span<const double>(t));
  auto d = detail::divergence(p, support_logits, detail::effective_alpha(cfg), cfg.mu);
  KdResult out{d.loss, d.alpha_head, std::move(d.grad)};
  if (cfg.ce_mix > 0.0) {
    // Cross-entropy against the teacher's argmax token (first cached id).
    const auto q = softmax(support_logits);
    const double ce = -std::log(std::max(q[0], kProbFloor));
    out.loss = cfg.ce_mix * ce + (1.0 - cfg.ce_mix) * out.loss;
    for (std::size_t j = 0; j < q.size(); ++j)
      out.grad[j] = cfg.ce_mix * (q[j] - (j == 0 ? 1.0 : 0.0)) + (1.0 - cfg.ce_mix) * out.grad[j];
  }
  return out;
}

inline KdResult kd_loss_and_grad(const LogitsCacheRecord& rec,
                                 std::span<const float> student_logits,
                                 const DistillConfig& cfg) {
  std::vector<double> z(rec.k());
  for (std::size_t j = 0; j < rec.k(); ++j) {
    if (rec.ids[j] >= student_logits.size())
      throw input_error("cached token id " + std::to_string(rec.ids[j]) +
                        " is outside the student vocab of " +
                        std::to_string(student_logits.size()));
    z[j] = student_logits[rec.ids[j]];
  }
  return kd_loss_and_grad_on_support(rec, z, cfg);
}

// ---------------------------------------------------------------------------
// Minimal student

// Linear-softmax LM over embedding-bag features: the feature at position t is
// the mean embedding of tokens t-window+1..t; logits = W f + b. Embeddings
// are fixed by `feature_seed`, so two models built with the same seed share
// the feature map and differ only in (W, b).
struct LinearStudent {
  std::size_t vocab = 0;
  std::size_t dim = 0;
  std::size_t window = 1;
  std::uint64_t feature_seed = 0;
  std::vector<float> embedding;  // [vocab x dim]
  std::vector<double> weight;    // [vocab x dim]
  std::vector<double> bias;      // [vocab]

  static LinearStudent make(std::size_t vocab, std::size_t dim, std::size_t window,
                            std::uint64_t feature_seed) {
    LinearStudent s{vocab, dim, window, feature_seed, {}, {}, {}};
    std::mt19937_64 rng(feature_seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    s.embedding.resize(vocab * dim);
    for (auto& e : s.embedding) e = static_cast<float>(n01(rng));
    s.weight.assign(vocab * dim, 0.0);
    s.bias.assign(vocab, 0.0);
    return s;
  }

  // Random head with entries N(0, scale^2 / dim).
  void randomize_head(std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, scale / std::sqrt(static_cast<double>(dim)));
    for (auto& w : weight) w = n01(rng);
    for (auto& b : bias) b = 0.0;
  }

  std::vector<double> features(std::span<const Token> tokens, std::size_t pos) const {
    std::vector<double> f(dim, 0.0);
    const std::size_t start = pos + 1 >= window ? pos + 1 - window : 0;
    for (std::size_t t = start; t <= pos; ++t)
      for (std::size_t d = 0; d < dim; ++d)
        f[d] += embedding[static_cast<std::size_t>(tokens[t]) * dim + d];
    const double inv = 1.0 / static_cast<double>(pos - start + 1);
    for (auto& x : f) x *= inv;
    return f;
  }

  double logit(std::span<const double> f, std::size_t token) const {
    double acc = bias[token];
    for (std::size_t d = 0; d < dim; ++d) acc += weight[token * dim + d] * f[d];
    return acc;
  }

  json to_json() const {
    return json{{"format", "tinyxfer-linear-student"}, {"version", 1},
                {"vocab", vocab}, {"dim", dim}, {"window", window},
                {"feature_seed", feature_seed}, {"weight", weight}, {"bias", bias}};
  }

  static LinearStudent from_json(const json& j) {
    try {
      auto s = make(j.at("vocab").get<std::size_t>(), j.at("dim").get<std::size_t>(),
                    j.at("window").get<std::size_t>(), j.at("feature_seed").get<std::uint64_t>());
      s.weight = j.at("weight").get<std::vector<double>>();
      s.bias = j.at("bias").get<std::vector<double>>();
      if (s.weight.size() != s.vocab * s.dim || s.bias.size() != s.vocab)
        throw input_error("linear student parameter sizes do not match its shape");
      return s;
    } catch (const json::exception& e) {
      throw input_error(std::string("malformed linear student: ") + e.what());
    }
  }
};

inline Tensor model_logits(const LinearStudent& s, std::span<const Token> tokens) {
  Tensor out({tokens.size(), s.vocab});
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const auto f = s.features(tokens, pos);
    for (std::size_t v = 0; v < s.vocab; ++v) out.row(pos)[v] = static_cast<float>(s.logit(f, v));
  }
  return out;
}
inline std::size_t model_vocab(const LinearStudent& s) { return s.vocab; }

struct TrainResult {
  LinearStudent student;
  std::vector<double> loss_curve;      // mean loss before each step, plus the final loss
  std::vector<double> smoothed_curve;  // running minimum of loss_curve
};

// Full-batch gradient descent on the mean per-record loss. `corpus[s]` holds
// the tokens of sample id s.
inline TrainResult train_student(LinearStudent student, std::span<const LogitsCacheRecord> cache,
                                 std::span<const TokenSeq> corpus, const DistillConfig& cfg,
                                 std::size_t steps, double lr) {
  cfg.validate();
  if (cache.empty()) throw input_error("train_student: logits cache is empty");
  const std::size_t dim = student.dim;

  std::vector<std::vector<double>> feats;
  feats.reserve(cache.size());
  for (const auto& rec : cache) {
    if (rec.sample_id >= corpus.size() || rec.position >= corpus[rec.sample_id].size())
      throw input_error("cache record (" + std::to_string(rec.sample_id) + ", " +
                        std::to_string(rec.position) + ") has no matching corpus token");
    for (auto id : rec.ids)
      if (id >= student.vocab) throw input_error("cached token id outside the student vocab");
    feats.push_back(student.features(corpus[rec.sample_id], rec.position));
  }

  TrainResult res;
  const double inv_n = 1.0 / static_cast<double>(cache.size());
  std::vector<double> gw(student.weight.size()), gb(student.bias.size());
  std::vector<double> z;
  for (std::size_t step = 0; step <= steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < cache.size(); ++r) {
      const auto& rec = cache[r];
      z.resize(rec.k());
      for (std::size_t j = 0; j < rec.k(); ++j) {
        z[j] = student.logit(feats[r], rec.ids[j]);
        if (!std::isfinite(z[j])) total = std::numeric_limits<double>::quiet_NaN();
      }
      const KdResult kd = kd_loss_and_grad_on_support(rec, z, cfg);
      total += kd.loss;
      for (std::size_t j = 0; j < rec.k(); ++j) {
        const double g = kd.grad[j] * inv_n;
        gb[rec.ids[j]] += g;
        double* row = gw.data() + rec.ids[j] * dim;
        for (std::size_t d = 0; d < dim; ++d) row[d] += g * feats[r][d];
      }
    }
    const double mean = total * inv_n;
    if (!std::isfinite(mean))
      throw runtime_error("train_student diverged at step " + std::to_string(step) +
                          " (mean loss " + std::to_string(mean) + ", lr " + std::to_string(lr) +
                          "); lower the learning rate");
    res.loss_curve.push_back(mean);
    if (step == steps) break;
    for (std::size_t i = 0; i < gw.size(); ++i) student.weight[i] -= lr * gw[i];
    for (std::size_t i = 0; i < gb.size(); ++i) student.bias[i] -= lr * gb[i];
  }
  res.smoothed_curve.resize(res.loss_curve.size());
  std::partial_sum(res.loss_curve.begin(), res.loss_curve.end(), res.smoothed_curve.begin(),
                   [](double a, double b) { return std::min(a, b); });
  res.student = std::move(student);
  return res;
}

// Teacher calibration hook: the distillation stages accept any externally
// fine-tuned teacher checkpoint. This helper only checks that a calibrated
// teacher is a drop-in replacement for the original one.
inline void check_teacher_compatible(const Checkpoint& original, const Checkpoint& calibrated) {
  if (original.arch.vocab != calibrated.arch.vocab)
    throw config_error("calibrated teacher vocab differs from the original teacher");
}

}  // namespace tinyxfer
