// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints and logits written by tests/reference/reference_model.py (an
// independent Python implementation) must load and reproduce exactly.
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "tinyxfer/forward.hpp"

using namespace tinyxfer;

namespace {

std::filesystem::path g_dir;

std::vector<float> read_f32(const std::filesystem::path& p) {
  const std::string bytes = read_file(p);
  std::vector<float> v(bytes.size() / 4);
  std::memcpy(v.data(), bytes.data(), v.size() * 4);
  return v;
}

}  // namespace

TEST(Reference, LogitsMatchBitForBit) {
  const json index = read_json_file(g_dir / "index.json");
  ASSERT_EQ(index.size(), 2u);
  for (const auto& e : index) {
    SCOPED_TRACE(e["name"].get<std::string>());
    const Checkpoint ck = load_checkpoint(g_dir / e["checkpoint"].get<std::string>());
    const TokenSeq tokens = e["tokens"].get<TokenSeq>();
    const Tensor logits = forward(ck, tokens);
    const auto expected = read_f32(g_dir / e["logits"].get<std::string>());
    ASSERT_EQ(logits.data.size(), expected.size());
    double max_diff = 0.0;
    for (std::size_t i = 0; i < expected.size(); ++i)
      max_diff = std::max(max_diff, std::abs(static_cast<double>(logits.data[i]) - expected[i]));
    EXPECT_EQ(max_diff, 0.0);
  }
}

TEST(Reference, CrossEntropyMatches) {
  for (const auto& e : read_json_file(g_dir / "index.json")) {
    const Checkpoint ck = load_checkpoint(g_dir / e["checkpoint"].get<std::string>());
    const TokenSeq tokens = e["tokens"].get<TokenSeq>();
    const double nll = next_token_nll_sum(forward(ck, tokens), tokens) / static_cast<double>(tokens.size() - 1);
    const double ref = e["mean_nll"].get<double>();
    EXPECT_NEAR(nll, ref, 1e-5 * std::abs(ref)) << e["name"];
    EXPECT_NEAR(std::log(perplexity(ck, tokens)), ref, 1e-5 * std::abs(ref));
  }
}

TEST(Reference, ReencodedCheckpointRoundTrips) {
  // The C++ writer emits the same tensors; reloading gives identical weights.
  for (const auto& e : read_json_file(g_dir / "index.json")) {
    const Checkpoint ck = load_checkpoint(g_dir / e["checkpoint"].get<std::string>());
    const Checkpoint back = decode_checkpoint(encode_checkpoint(ck), "memory");
    EXPECT_EQ(back.arch.vocab, ck.arch.vocab);
    for (const auto& [name, t] : ck.tensors) EXPECT_EQ(back.at(name), t) << name;
  }
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 2) {
    std::cerr << "usage: test_reference DIR\n";
    return 2;
  }
  g_dir = argv[1];
  return RUN_ALL_TESTS();
}
