// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "tinyxfer/model.hpp"
#include "tinyxfer/toy_model.hpp"

using namespace tinyxfer;
namespace fs = std::filesystem;

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

ModelArch qwen05() {
  ModelArch a;
  a.layers = 24;
  a.hidden = 896;
  a.heads = 14;
  a.kv_heads = 2;
  a.head_dim = 64;
  a.ffn_inter = 4864;
  a.vocab = 151936;
  return a;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "tinyxfer_test_model";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto ck = make_random_checkpoint(tiny_arch(), 42);
  const auto path = temp_path("tiny.ckpt");
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.arch, ck.arch);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    const auto& u = back.at(name);
    EXPECT_EQ(u.shape, t.shape) << name;
    EXPECT_EQ(0, std::memcmp(u.data.data(), t.data.data(), 4 * t.data.size())) << name;
  }
}

TEST(Checkpoint, TruncatedPayloadNamesTheTensor) {
  auto bytes = encode_checkpoint(make_random_checkpoint(tiny_arch(), 42));
  bytes.resize(bytes.size() - 4);
  try {
    decode_checkpoint(bytes, "truncated");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape/payload mismatch"), std::string::npos) << msg;
    // The last tensor in the blob is the final norm.
    EXPECT_NE(msg.find("'norm'"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, MalformedHeaderAndMissingTensor) {
  EXPECT_THROW(decode_checkpoint("NOTACKPT", "bad"), Error);

  auto ck = make_random_checkpoint(tiny_arch(), 1);
  ck.tensors.erase("layers.0.up_proj.weight");
  try {
    validate(ck);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.up_proj.weight"), std::string::npos);
  }
}

TEST(Checkpoint, WrongShapeIsRejected) {
  auto ck = make_random_checkpoint(tiny_arch(), 1);
  ck.at("norm") = Tensor({7});
  EXPECT_THROW(validate(ck), Error);
}

TEST(Checkpoint, UntiedHeadRoundTrips) {
  auto a = tiny_arch();
  a.tied_head = false;
  const auto ck = make_random_checkpoint(a, 3);
  EXPECT_TRUE(ck.tensors.contains("lm_head"));
  const auto back = decode_checkpoint(encode_checkpoint(ck), "mem");
  EXPECT_EQ(back.at("lm_head"), ck.at("lm_head"));
}

TEST(Arch, InvalidArchitecturesAreRejected) {
  auto a = tiny_arch();
  a.kv_heads = 3;
  EXPECT_THROW(validate(a), Error);
  a = tiny_arch();
  a.hidden = 0;
  EXPECT_THROW(validate(a), Error);
}

TEST(CountParams, QwenHalfBillionEmbedding) {
  const auto c = count_params(qwen05());
  EXPECT_EQ(c.embedding, 136134656u);  // 151936 * 896
  EXPECT_NEAR(static_cast<double>(c.non_embedding) / 1e9, 0.358, 0.358 * 0.02);
  EXPECT_EQ(c.total, c.embedding + c.non_embedding);
}

TEST(CountParams, WidthTwoConfiguration) {
  auto a = qwen05();
  a.hidden = 832;
  a.ffn_inter = 3840;
  const auto c = count_params(a);
  EXPECT_NEAR(static_cast<double>(c.non_embedding) / 1e9, 0.271, 0.271 * 0.02);
  EXPECT_EQ(c.embedding, 151936u * 832u);
}

TEST(CountParams, EmptyStackOnlyCountsFinalNorm) {
  auto a = qwen05();
  a.layers = 0;
  EXPECT_EQ(count_params(a).non_embedding, a.hidden);
}

TEST(CountParams, UntiedHeadCountsOnce) {
  auto a = qwen05();
  const auto tied = count_params(a);
  a.tied_head = false;
  const auto untied = count_params(a);
  EXPECT_EQ(untied.non_embedding, tied.non_embedding + tied.embedding);
  EXPECT_EQ(untied.total, tied.total + tied.embedding);
}

TEST(CountParams, StrictlyMonotoneInLayersHiddenInter) {
  const auto base = count_params(toy_arch()).total;
  for (int which = 0; which < 3; ++which) {
    auto a = toy_arch();
    if (which == 0) a.layers += 1;
    if (which == 1) a.hidden += 1;
    if (which == 2) a.ffn_inter += 1;
    EXPECT_GT(count_params(a).total, base) << which;
    EXPECT_GT(count_params(a).non_embedding, count_params(toy_arch()).non_embedding) << which;
  }
}

TEST(CountParams, MatchesTensorInventory) {
  for (bool tied : {true, false}) {
    auto a = toy_arch();
    a.tied_head = tied;
    std::uint64_t n = 0;
    for (const auto& [_, shape] : expected_tensors(a)) n += Tensor::numel(shape);
    EXPECT_EQ(count_params(a).total, n);
  }
}
