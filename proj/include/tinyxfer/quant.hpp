// SPDX-License-Identifier: Apache-2.0
//
// Post-training quantization: per-group symmetric integer weights (RTN and
// GPTQ), FP8 E4M3 emulation for weights and activations, and evaluation of
// the quantized model through the float forward pass.
//
// Integer layout: groups run along the input dimension of each output row;
// a row whose length is not a multiple of group_size ends in a short group.
// Embedding and LM head stay in f32.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyxfer/forward.hpp"

namespace tinyxfer {

// ---------------------------------------------------------------------------
// Integer weights

struct QuantizedLinear {
  std::size_t rows = 0, cols = 0;
  int bits = 8;
  std::size_t group_size = 128;
  std::vector<std::int32_t> ints;  // rows x cols
  std::vector<float> scales;       // rows x groups()

  std::size_t groups() const { return (cols + group_size - 1) / group_size; }
  float scale(std::size_t r, std::size_t c) const { return scales[r * groups() + c / group_size]; }

  // int * scale, in f32.
  Tensor dequantize() const {
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out.row(r)[c] = static_cast<float>(ints[r * cols + c]) * scale(r, c);
    return out;
  }
};

namespace detail {

inline std::int32_t qmax(int bits) { return (std::int32_t{1} << (bits - 1)) - 1; }

inline void check_quant_args(const Tensor& w, int bits, std::size_t group_size) {
  if (w.shape.size() != 2) throw config_error("quantization needs a 2-D weight matrix");
  if (bits < 2 || bits > 24) throw config_error("bits must be in [2, 24], got " + std::to_string(bits));
  if (group_size == 0) throw config_error("group_size must be positive");
  for (float x : w.data)
    if (!std::isfinite(x)) throw input_error("weight matrix contains non-finite values");
}

inline float group_scale(double max_abs, int bits) {
  return static_cast<float>(max_abs / static_cast<double>(qmax(bits)));
}

inline std::int32_t quantize_value(double w, float scale, int bits) {
  if (scale == 0.0f) return 0;
  const auto q = static_cast<std::int32_t>(std::llround(w / static_cast<double>(scale)));
  return std::clamp(q, -qmax(bits), qmax(bits));
}

inline QuantizedLinear empty_quantized(const Tensor& w, int bits, std::size_t group_size) {
  QuantizedLinear q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = bits;
  q.group_size = group_size;
  q.ints.assign(q.rows * q.cols, 0);
  q.scales.assign(q.rows * q.groups(), 0.0f);
  return q;
}

}  // namespace detail

inline QuantizedLinear quantize_rtn(const Tensor& w, int bits, std::size_t group_size) {
  detail::check_quant_args(w, bits, group_size);
  auto q = detail::empty_quantized(w, bits, group_size);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t g = 0; g < q.groups(); ++g) {
      const std::size_t c0 = g * group_size, c1 = std::min(q.cols, c0 + group_size);
      double mx = 0.0;
      for (std::size_t c = c0; c < c1; ++c) mx = std::max(mx, std::abs(static_cast<double>(w.row(r)[c])));
      const float s = detail::group_scale(mx, bits);
      q.scales[r * q.groups() + g] = s;
      for (std::size_t c = c0; c < c1; ++c) q.ints[r * q.cols + c] = detail::quantize_value(w.row(r)[c], s, bits);
    }
  return q;
}

// X^T X over the rows of an activation matrix (tokens x in_features).
inline Eigen::MatrixXd gram(const Tensor& x) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(x.cols()),
                                            static_cast<Eigen::Index>(x.cols()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(x.cols()));
    for (std::size_t c = 0; c < x.cols(); ++c) v[static_cast<Eigen::Index>(c)] = x.row(r)[c];
    m.selfadjointView<Eigen::Lower>().rankUpdate(v);
  }
  return m.selfadjointView<Eigen::Lower>();
}

// GPTQ from an accumulated X^T X. H = 2 X^T X + damping * mean(diag) * I;
// columns are quantized in natural order and each column's error is spread
// over the remaining columns through the upper Cholesky factor of H^-1.
// A group's scales are taken from the partially updated weights when the
// group is reached.
inline QuantizedLinear gptq_quantize_gram(const Tensor& w, const Eigen::MatrixXd& xtx, int bits,
                                          std::size_t group_size, double damping = 0.01) {
  detail::check_quant_args(w, bits, group_size);
  const auto n = static_cast<Eigen::Index>(w.cols());
  if (xtx.rows() != n || xtx.cols() != n)
    throw config_error("calibration activations have " + std::to_string(xtx.rows()) +
                       " features, weight expects " + std::to_string(n));
  if (!(damping > 0.0)) throw config_error("GPTQ damping must be positive");

  Eigen::MatrixXd h = 2.0 * xtx;
  const double mean_diag = h.diagonal().mean();
  h.diagonal().array() += damping * mean_diag;
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  auto not_pd = [&] {
    return runtime_error("GPTQ Hessian is not positive definite with damping " +
                         std::to_string(damping) + "; retry with a larger damping (e.g. " +
                         std::to_string(damping * 10.0) + ")");
  };
  if (!(mean_diag > 0.0) || llt.info() != Eigen::Success) throw not_pd();
  const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success) throw not_pd();
  const Eigen::MatrixXd u = llt_inv.matrixU();

  auto q = detail::empty_quantized(w, bits, group_size);
  Eigen::MatrixXd wd(static_cast<Eigen::Index>(q.rows), n);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c)
      wd(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = w.row(r)[c];

  for (Eigen::Index j = 0; j < n; ++j) {
    const auto col = static_cast<std::size_t>(j);
    if (col % group_size == 0) {
      const auto c1 = static_cast<Eigen::Index>(std::min(q.cols, col + group_size));
      for (std::size_t r = 0; r < q.rows; ++r) {
        double mx = 0.0;
        for (Eigen::Index c = j; c < c1; ++c) mx = std::max(mx, std::abs(wd(static_cast<Eigen::Index>(r), c)));
        q.scales[r * q.groups() + col / group_size] = detail::group_scale(mx, bits);
      }
    }
    for (std::size_t r = 0; r < q.rows; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const float s = q.scale(r, col);
      const auto qi = detail::quantize_value(wd(ri, j), s, bits);
      q.ints[r * q.cols + col] = qi;
      const double deq = static_cast<double>(static_cast<float>(qi) * s);
      const double err = (wd(ri, j) - deq) / u(j, j);
      if (j + 1 < n) wd.row(ri).tail(n - j - 1) -= err * u.row(j).tail(n - j - 1);
    }
  }
  return q;
}

inline QuantizedLinear gptq_quantize(const Tensor& w, const Tensor& calib_acts, int bits,
                                     std::size_t group_size, double damping = 0.01) {
  if (calib_acts.cols() != w.cols())
    throw config_error("calibration activations have " + std::to_string(calib_acts.cols()) +
                       " features, weight expects " + std::to_string(w.cols()));
  return gptq_quantize_gram(w, gram(calib_acts), bits, group_size, damping);
}

// Mean squared error of X W^T against X Wq^T.
inline double layer_output_mse(const Tensor& x, const Tensor& w, const Tensor& wq) {
  const Tensor a = detail::linear(x, w), b = detail::linear(x, wq);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

// Two's-complement packing: one byte per value for 8 bits, two per byte for
// 4 bits with the even flat index in the low nibble.
inline std::string pack_ints(std::span<const std::int32_t> ints, int bits) {
  std::string out;
  if (bits == 8) {
    for (auto v : ints) out.push_back(static_cast<char>(static_cast<std::int8_t>(v)));
  } else if (bits == 4) {
    out.assign((ints.size() + 1) / 2, '\0');
    for (std::size_t i = 0; i < ints.size(); ++i) {
      const auto nib = static_cast<unsigned char>(ints[i] & 0xF);
      out[i / 2] = static_cast<char>(static_cast<unsigned char>(out[i / 2]) | (i % 2 ? nib << 4 : nib));
    }
  } else {
    throw config_error("only 4- and 8-bit weights can be packed, got " + std::to_string(bits));
  }
  return out;
}

inline std::vector<std::int32_t> unpack_ints(std::string_view bytes, std::size_t count, int bits) {
  std::vector<std::int32_t> out(count);
  if (bits == 8) {
    if (bytes.size() != count) throw input_error("int8 payload size mismatch");
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::int8_t>(bytes[i]);
  } else if (bits == 4) {
    if (bytes.size() != (count + 1) / 2) throw input_error("int4 payload size mismatch");
    for (std::size_t i = 0; i < count; ++i) {
      const auto byte = static_cast<unsigned char>(bytes[i / 2]);
      const int nib = i % 2 ? byte >> 4 : byte & 0xF;
      out[i] = nib >= 8 ? nib - 16 : nib;
    }
  } else {
    throw config_error("only 4- and 8-bit weights can be unpacked");
  }
  return out;
}

// ---------------------------------------------------------------------------
// FP8 E4M3 (finite-only variant: bias 7, max 448, no infinities)

inline constexpr double kFp8Max = 448.0;

// Value of an E4M3 code. 0x7F / 0xFF are NaN.
inline double fp8_e4m3_decode(std::uint8_t code) {
  const int sign = code >> 7, exp = (code >> 3) & 0xF, man = code & 0x7;
  if (exp == 0xF && man == 0x7) return std::numeric_limits<double>::quiet_NaN();
  const double mag = exp == 0 ? std::ldexp(man, -9) : std::ldexp(8 + man, exp - 10);
  return sign ? -mag : mag;
}

// Nearest E4M3 value, ties to even mantissa, saturating at +-448.
inline double fp8_e4m3_round(double x) {
  if (std::isnan(x)) return x;
  const double a = std::abs(x);
  if (a >= kFp8Max) return std::copysign(kFp8Max, x);
  int e;
  std::frexp(a, &e);  // a in [2^(e-1), 2^e)
  const double quantum = a < std::ldexp(1.0, -6) ? std::ldexp(1.0, -9) : std::ldexp(1.0, e - 4);
  const double r = std::nearbyint(a / quantum) * quantum;
  return std::copysign(std::min(r, kFp8Max), x);
}

inline std::uint8_t fp8_e4m3_encode(double x) {
  if (std::isnan(x)) return 0x7F;
  const double v = fp8_e4m3_round(x);
  const std::uint8_t sign = std::signbit(v) ? 0x80 : 0x00;
  const double a = std::abs(v);
  if (a < std::ldexp(1.0, -6)) return sign | static_cast<std::uint8_t>(std::llround(a * 512.0));
  int e;
  const double m = std::frexp(a, &e);  // m in [0.5, 1)
  const auto man = static_cast<std::uint8_t>(std::llround(m * 16.0) - 8);
  return sign | static_cast<std::uint8_t>((e + 6) << 3) | man;
}

namespace detail {

inline void fp8_cast_span(std::span<float> xs) {
  double mx = 0.0;
  for (float v : xs)
    if (!std::isnan(v)) mx = std::max(mx, std::abs(static_cast<double>(v)));
  if (mx == 0.0 || !std::isfinite(mx)) return;
  const double scale = mx / kFp8Max;
  for (float& v : xs) v = static_cast<float>(fp8_e4m3_round(v / scale) * scale);
}

}  // namespace detail

// Per-tensor (or per-row) scale max|x| / 448, round to E4M3, rescale.
inline Tensor fp8_cast(Tensor x, bool per_row = false) {
  if (per_row && x.shape.size() == 2) {
    for (std::size_t r = 0; r < x.rows(); ++r) detail::fp8_cast_span({x.row(r), x.cols()});
  } else {
    detail::fp8_cast_span(x.data);
  }
  return x;
}

struct Fp8Tensor {
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;  // one per tensor, or one per row

  Tensor dequantize() const {
    Tensor out(shape);
    const std::size_t per = scales.size() == 1 ? out.data.size() : out.cols();
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = static_cast<float>(fp8_e4m3_decode(codes[i]) * static_cast<double>(scales[i / per]));
    return out;
  }
};

inline Fp8Tensor fp8_quantize(const Tensor& x, bool per_row = false) {
  Fp8Tensor q;
  q.shape = x.shape;
  q.codes.resize(x.data.size());
  const std::size_t per = per_row ? x.cols() : x.data.size();
  for (std::size_t start = 0; start < x.data.size(); start += per) {
    double mx = 0.0;
    for (std::size_t i = start; i < start + per; ++i) mx = std::max(mx, std::abs(static_cast<double>(x.data[i])));
    const float s = static_cast<float>(mx / kFp8Max);
    q.scales.push_back(s);
    for (std::size_t i = start; i < start + per; ++i)
      q.codes[i] = s == 0.0f ? 0 : fp8_e4m3_encode(x.data[i] / static_cast<double>(s));
  }
  return q;
}

// ---------------------------------------------------------------------------
// Schemes and quantized models

enum class QuantKind { W8A16, W4A16, W8A8Fp8 };
enum class WeightMethod { Auto, Rtn, Gptq };  // Auto: GPTQ for W4A16, RTN for W8A16

inline std::string to_string(QuantKind k) {
  switch (k) {
    case QuantKind::W8A16: return "W8A16";
    case QuantKind::W4A16: return "W4A16";
    case QuantKind::W8A8Fp8: return "W8A8-FP8";
  }
  return "?";
}

inline QuantKind quant_kind_from_string(const std::string& s) {
  if (s == "W8A16" || s == "w8a16") return QuantKind::W8A16;
  if (s == "W4A16" || s == "w4a16") return QuantKind::W4A16;
  if (s == "W8A8-FP8" || s == "W8A8" || s == "w8a8") return QuantKind::W8A8Fp8;
  throw config_error("unknown quantization scheme '" + s + "' (W8A16, W4A16, W8A8-FP8)");
}

struct QuantScheme {
  QuantKind kind = QuantKind::W8A16;
  std::size_t group_size = 128;
  std::size_t calib_samples = 512;
  double damping = 0.01;
  WeightMethod method = WeightMethod::Auto;
  std::optional<int> bits_override;  // test hook for the resolution limit
  bool fp8_per_row = false;          // FP8 weight scales per output row

  int bits() const {
    if (bits_override) return *bits_override;
    return kind == QuantKind::W4A16 ? 4 : 8;
  }
  bool use_gptq() const {
    if (kind == QuantKind::W8A8Fp8) return false;
    return method == WeightMethod::Gptq || (method == WeightMethod::Auto && kind == QuantKind::W4A16);
  }
  void validate() const {
    if (group_size == 0) throw config_error("group_size must be positive");
    if (bits() < 2 || bits() > 24) throw config_error("bits must be in [2, 24]");
    if (use_gptq() && calib_samples == 0) throw config_error("GPTQ needs calibration samples");
    if (!(damping > 0.0)) throw config_error("damping must be positive");
  }
};

inline json to_json(const QuantScheme& s) {
  return json{{"kind", to_string(s.kind)},
              {"group_size", s.group_size},
              {"bits", s.bits()},
              {"method", s.kind == QuantKind::W8A8Fp8 ? "fp8" : s.use_gptq() ? "gptq" : "rtn"},
              {"calib_samples", s.calib_samples},
              {"damping", s.damping},
              {"fp8_granularity", s.fp8_per_row ? "row" : "tensor"}};
}

struct QuantizedModel {
  QuantScheme scheme;
  std::map<std::string, QuantizedLinear> int_weights;
  std::map<std::string, Fp8Tensor> fp8_weights;
  Checkpoint dense;  // float view: unquantized tensors plus dequantized weights
};

inline bool is_linear_weight(const std::string& name) {
  if (!name.starts_with("layers.")) return false;
  return std::any_of(std::begin(kLinearSuffixes), std::end(kLinearSuffixes),
                     [&](std::string_view s) { return name.ends_with(s); });
}

// X^T X of every linear layer's input, captured from the float model.
inline std::map<std::string, Eigen::MatrixXd> capture_linear_grams(const Checkpoint& ck,
                                                                   std::span<const TokenSeq> calib) {
  std::map<std::string, Eigen::MatrixXd> grams;
  ForwardOptions opts;
  opts.linear_input = [&](std::string_view name, Tensor& x) {
    auto g = gram(x);
    auto it = grams.find(std::string(name));
    if (it == grams.end()) grams.emplace(std::string(name), std::move(g));
    else it->second += g;
  };
  for (const auto& seq : calib) forward(ck, seq, opts);
  return grams;
}

inline QuantizedModel quantize_model(const Checkpoint& ck, const QuantScheme& scheme,
                                     std::span<const TokenSeq> calib = {}, std::size_t threads = 1) {
  scheme.validate();
  validate(ck);
  std::map<std::string, Eigen::MatrixXd> grams;
  if (scheme.use_gptq()) {
    if (calib.empty()) throw input_error("GPTQ quantization needs calibration sequences");
    grams = capture_linear_grams(ck, calib.first(std::min(calib.size(), scheme.calib_samples)));
  }
  std::vector<std::string> names;
  for (const auto& [name, t] : ck.tensors)
    if (is_linear_weight(name)) names.push_back(name);

  QuantizedModel qm;
  qm.scheme = scheme;
  qm.dense = ck;
  std::vector<QuantizedLinear> ints(names.size());
  std::vector<Fp8Tensor> fp8(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    const Tensor& w = ck.at(names[i]);
    if (scheme.kind == QuantKind::W8A8Fp8) fp8[i] = fp8_quantize(w, scheme.fp8_per_row);
    else if (scheme.use_gptq())
      ints[i] = gptq_quantize_gram(w, grams.at(names[i]), scheme.bits(), scheme.group_size, scheme.damping);
    else ints[i] = quantize_rtn(w, scheme.bits(), scheme.group_size);
  });
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (scheme.kind == QuantKind::W8A8Fp8) {
      qm.dense.tensors[names[i]] = fp8[i].dequantize();
      qm.fp8_weights.emplace(names[i], std::move(fp8[i]));
    } else {
      qm.dense.tensors[names[i]] = ints[i].dequantize();
      qm.int_weights.emplace(names[i], std::move(ints[i]));
    }
  }
  return qm;
}

inline ForwardResult quantized_forward(const QuantizedModel& qm, std::span<const Token> tokens,
                                       ForwardOptions opts = {}) {
  if (qm.scheme.kind == QuantKind::W8A8Fp8) {
    auto inner = opts.linear_input;
    opts.linear_input = [inner](std::string_view name, Tensor& x) {
      if (inner) inner(name, x);
      detail::fp8_cast_span(x.data);
    };
  }
  return forward(qm.dense, tokens, opts);
}

inline Tensor model_logits(const QuantizedModel& qm, std::span<const Token> tokens) {
  return quantized_forward(qm, tokens).logits;
}
inline std::size_t model_vocab(const QuantizedModel& qm) { return qm.dense.arch.vocab; }

// ---------------------------------------------------------------------------
// Container

inline std::string encode_quantized(const QuantizedModel& qm) {
  const Checkpoint& ck = qm.dense;
  Container c;
  json tensors_meta = json::object();
  for (const auto& [name, shape] : expected_tensors(ck.arch)) {
    if (auto it = qm.int_weights.find(name); it != qm.int_weights.end()) {
      const auto& q = it->second;
      c.tensors.push_back({name, q.bits == 4 ? "int4" : "int8", {q.rows, q.cols}, pack_ints(q.ints, q.bits)});
      RawTensor s{name + ".scales", "f32", {q.rows, q.groups()}, {}};
      s.bytes.assign(reinterpret_cast<const char*>(q.scales.data()), 4 * q.scales.size());
      c.tensors.push_back(std::move(s));
      tensors_meta[name] = {{"bits", q.bits}, {"group_size", q.group_size}, {"scales", name + ".scales"}};
    } else if (auto f = qm.fp8_weights.find(name); f != qm.fp8_weights.end()) {
      const auto& q = f->second;
      c.tensors.push_back({name, "f8e4m3", q.shape, std::string(q.codes.begin(), q.codes.end())});
      RawTensor s{name + ".scales", "f32", {q.scales.size()}, {}};
      s.bytes.assign(reinterpret_cast<const char*>(q.scales.data()), 4 * q.scales.size());
      c.tensors.push_back(std::move(s));
      tensors_meta[name] = {{"scales", name + ".scales"}};
    } else {
      const Tensor& t = ck.at(name);
      RawTensor raw{name, "f32", t.shape, {}};
      raw.bytes.assign(reinterpret_cast<const char*>(t.data.data()), 4 * t.data.size());
      c.tensors.push_back(std::move(raw));
    }
  }
  json quant = to_json(qm.scheme);
  quant["tensors"] = tensors_meta;
  c.header = {{"arch", to_json(ck.arch)}, {"conventions", conventions_json()}, {"quant", quant}};
  return encode_container(c);
}

inline QuantizedModel decode_quantized(std::string_view bytes, const std::string& origin) {
  Container c = decode_container(bytes, origin);
  if (!c.header.contains("arch") || !c.header.contains("quant"))
    throw input_error(origin + ": not a quantized checkpoint");
  QuantizedModel qm;
  std::map<std::string, RawTensor> raw;
  for (auto& t : c.tensors) raw.emplace(t.name, std::move(t));
  try {
    const json& q = c.header.at("quant");
    qm.scheme.kind = quant_kind_from_string(q.at("kind").get<std::string>());
    qm.scheme.group_size = q.at("group_size").get<std::size_t>();
    qm.scheme.calib_samples = q.at("calib_samples").get<std::size_t>();
    qm.scheme.damping = q.at("damping").get<double>();
    const std::string method = q.at("method").get<std::string>();
    qm.scheme.method = method == "gptq" ? WeightMethod::Gptq : method == "rtn" ? WeightMethod::Rtn : WeightMethod::Auto;
    qm.scheme.fp8_per_row = q.at("fp8_granularity").get<std::string>() == "row";
    if (q.at("bits").get<int>() != qm.scheme.bits()) qm.scheme.bits_override = q.at("bits").get<int>();
    qm.dense.arch = arch_from_json(c.header.at("arch"));

    auto floats = [&](const RawTensor& r) {
      if (r.dtype != "f32") throw input_error(origin + ": tensor '" + r.name + "' should be f32");
      Tensor t(r.shape);
      std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
      return t;
    };
    auto get = [&](const std::string& name) -> const RawTensor& {
      auto it = raw.find(name);
      if (it == raw.end()) throw input_error(origin + ": missing tensor '" + name + "'");
      return it->second;
    };
    const json& meta = q.at("tensors");
    for (const auto& [name, shape] : expected_tensors(qm.dense.arch)) {
      const RawTensor& r = get(name);
      if (!meta.contains(name)) {
        qm.dense.tensors[name] = floats(r);
        continue;
      }
      const Tensor scales = floats(get(meta.at(name).at("scales").get<std::string>()));
      if (r.dtype == "f8e4m3") {
        Fp8Tensor f{r.shape, std::vector<std::uint8_t>(r.bytes.begin(), r.bytes.end()), scales.data};
        qm.dense.tensors[name] = f.dequantize();
        qm.fp8_weights.emplace(name, std::move(f));
      } else {
        QuantizedLinear l;
        l.rows = r.shape.at(0);
        l.cols = r.shape.at(1);
        l.bits = meta.at(name).at("bits").get<int>();
        l.group_size = meta.at(name).at("group_size").get<std::size_t>();
        l.ints = unpack_ints(r.bytes, l.rows * l.cols, l.bits);
        l.scales = scales.data;
        if (l.scales.size() != l.rows * l.groups())
          throw input_error(origin + ": scale count mismatch for tensor '" + name + "'");
        qm.dense.tensors[name] = l.dequantize();
        qm.int_weights.emplace(name, std::move(l));
      }
    }
  } catch (const json::exception& e) {
    throw input_error(origin + ": malformed quant header (" + e.what() + ")");
  }
  validate(qm.dense);
  return qm;
}

inline void save_quantized(const QuantizedModel& qm, const std::filesystem::path& path) {
  write_file(path, encode_quantized(qm));
}

inline QuantizedModel load_quantized(const std::filesystem::path& path) {
  return decode_quantized(read_file(path), path.string());
}

// True if the container at `path` carries a quantization header.
inline bool is_quantized_file(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return decode_container(bytes, path.string()).header.contains("quant");
}

}  // namespace tinyxfer
