#include <bit>
#include <cstring>

#include "test_util.hpp"

using namespace steerlab;
using testutil::TempDir;

namespace {

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(ActivationStore, EmptySetWritesEmptyTensor) {
  TempDir tmp;
  save_activation_set(ActivationSet(2, 3), tmp.path());
  EXPECT_EQ(fs::file_size(tmp / "activations.bin"), 0u);
  const auto m = json::parse(io::read_text(tmp / "manifest.json"));
  EXPECT_TRUE(m.at("records").empty());
  EXPECT_EQ(m.at("format_version"), 1);
  EXPECT_EQ(load_activation_set(tmp.path()).size(), 0u);
}

TEST(ActivationStore, OneRecordIsTwentyFourBytes) {
  TempDir tmp;
  ActivationSet set(2, 3);
  set.add(testutil::record(0, Label::faithful, {1, 2, 3, 4, 5, 6}));
  save_activation_set(set, tmp.path());
  EXPECT_EQ(fs::file_size(tmp / "activations.bin"), 24u);
}

TEST(ActivationStore, TensorLayoutMatchesOffsetFormula) {
  TempDir tmp;
  const int L = 3, d = 4;
  auto set = testutil::random_set(7, 5, L, d);
  save_activation_set(set, tmp.path());
  const auto bytes = io::read_bytes(tmp / "activations.bin");
  ASSERT_EQ(bytes.size(), 5u * L * d * 4);
  for (int r = 0; r < 5; ++r) {
    for (int l = 0; l < L; ++l) {
      for (int k = 0; k < d; ++k) {
        const std::size_t off = ((static_cast<std::size_t>(r) * L + l) * d + k) * 4;
        // little-endian decode done by hand
        const std::uint32_t bits = bytes[off] | (bytes[off + 1] << 8) | (bytes[off + 2] << 16) |
                                   (static_cast<std::uint32_t>(bytes[off + 3]) << 24);
        EXPECT_EQ(bits, std::bit_cast<std::uint32_t>(set.vector(r, l)[k]));
      }
    }
  }
}

TEST(ActivationStore, RoundTripHundredRecordsBitExact) {
  TempDir tmp;
  auto set = testutil::random_set(42, 100, 4, 16);
  set.mutable_records()[3].label = Label::unlabeled;
  set.mutable_records()[3].score.reset();
  set.mutable_records()[4].role = TokenRole::response_mean;
  set.mutable_records()[5].values[0] = -0.0f;
  set.mutable_records()[6].values[1] = 1e-42f;
  save_activation_set(set, tmp.path());
  const auto back = load_activation_set(tmp.path());
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& a = set.records()[i];
    const auto& b = back.records()[i];
    EXPECT_TRUE(bitwise_equal(a.values, b.values)) << "record " << i;
    EXPECT_EQ(a.record_id, b.record_id);
    EXPECT_EQ(a.prompt_id, b.prompt_id);
    EXPECT_EQ(a.source_iteration, b.source_iteration);
    EXPECT_EQ(a.role, b.role);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.score, b.score);
  }
}

TEST(ActivationStore, SaveLoadIsIdentityProperty) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TempDir tmp;
    std::mt19937_64 rng(seed);
    const int L = 1 + static_cast<int>(rng() % 4);
    const int d = 1 + static_cast<int>(rng() % 9);
    const auto set = testutil::random_set(seed, static_cast<int>(rng() % 20), L, d);
    save_activation_set(set, tmp.path());
    EXPECT_EQ(load_activation_set(tmp.path()), set);
    EXPECT_EQ(fs::file_size(tmp / "activations.bin"), set.size() * L * d * 4);
  }
}

TEST(ActivationStore, TruncatedTensorIsLengthError) {
  TempDir tmp;
  save_activation_set(testutil::random_set(1, 3, 2, 3), tmp.path());
  fs::resize_file(tmp / "activations.bin", 3 * 2 * 3 * 4 - 4);
  try {
    load_activation_set(tmp.path());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("length"), std::string::npos);
  }
}

TEST(ActivationStore, UnsupportedVersionRejected) {
  TempDir tmp;
  save_activation_set(testutil::random_set(1, 2, 2, 3), tmp.path());
  auto m = json::parse(io::read_text(tmp / "manifest.json"));
  m["format_version"] = 99;
  io::write_text(tmp / "manifest.json", m.dump());
  try {
    load_activation_set(tmp.path());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos);
  }
}

TEST(ActivationStore, MissingFilesAreIoErrors) {
  TempDir tmp;
  EXPECT_THROW(load_activation_set(tmp / "nothing"), IoError);
  save_activation_set(testutil::random_set(1, 2, 2, 3), tmp.path());
  fs::remove(tmp / "activations.bin");
  EXPECT_THROW(load_activation_set(tmp.path()), IoError);
}

TEST(ActivationStore, NonFiniteValueRejectedOnLoad) {
  TempDir tmp;
  save_activation_set(testutil::random_set(1, 2, 2, 3), tmp.path());
  auto bytes = io::read_bytes(tmp / "activations.bin");
  std::vector<unsigned char> nan;
  io::append_f32(nan, std::numeric_limits<float>::quiet_NaN());
  std::copy(nan.begin(), nan.end(), bytes.begin() + 8);
  io::write_bytes(tmp / "activations.bin", bytes);
  EXPECT_THROW(load_activation_set(tmp.path()), FormatError);
}

TEST(ActivationStore, InvariantsEnforced) {
  ActivationSet set(2, 3);
  EXPECT_THROW(set.add(testutil::record(0, Label::unlabeled, {1, 2, 3})), DimensionError);
  auto bad = testutil::record(0, Label::faithful, {1, 2, 3, 4, 5, 6});
  bad.score.reset();
  EXPECT_THROW(set.add(bad), FormatError);
  auto inf = testutil::record(0, Label::unlabeled, {1, 2, 3, 4, 5, std::numeric_limits<float>::infinity()});
  EXPECT_THROW(set.add(inf), FormatError);
  set.add(testutil::record(0, Label::unlabeled, {1, 2, 3, 4, 5, 6}));
  set.add(testutil::record(0, Label::unlabeled, {1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(set.validate(), FormatError);
}

TEST(ActivationStore, GoldenFixtureFromNumpy) {
  const fs::path dir = fs::path(STEERLAB_FIXTURES) / "golden";
  const auto set = load_activation_set(dir);
  const auto expected = json::parse(io::read_text(dir / "expected.json")).at("bits");
  ASSERT_EQ(set.size(), expected.size());
  EXPECT_EQ(set.num_layers(), 3);
  EXPECT_EQ(set.hidden_dim(), 5);
  for (std::size_t r = 0; r < set.size(); ++r) {
    const auto& vals = set.records()[r].values;
    ASSERT_EQ(vals.size(), expected[r].size());
    for (std::size_t k = 0; k < vals.size(); ++k) {
      EXPECT_EQ(std::bit_cast<std::uint32_t>(vals[k]), expected[r][k].get<std::uint32_t>()) << r << "," << k;
    }
  }
  EXPECT_EQ(set.records()[2].role, TokenRole::response_mean);
  EXPECT_EQ(set.records()[2].score, 0.8125);
  EXPECT_EQ(set.records()[3].label, Label::unlabeled);
  EXPECT_FALSE(set.records()[3].score.has_value());
  EXPECT_EQ(set.records()[3].record_id, 5);
}

TEST(Merge, IdentityWithEmpty) {
  const auto x = testutil::random_set(3, 6, 2, 4);
  const auto m = merge(x, ActivationSet(2, 4));
  EXPECT_EQ(m, x);  // ids were already 0..n-1
}

TEST(Merge, CardinalityAndSequentialIds) {
  const auto a = testutil::random_set(1, 10, 2, 4);
  auto b = testutil::random_set(2, 5, 2, 4);
  for (auto& r : b.mutable_records()) r.record_id += 100;
  const auto m = merge(a, b);
  ASSERT_EQ(m.size(), 15u);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m.records()[i].record_id, static_cast<std::int64_t>(i));
  // vectors preserved element-wise
  for (std::size_t i = 0; i < 10; ++i) EXPECT_TRUE(bitwise_equal(m.records()[i].values, a.records()[i].values));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(bitwise_equal(m.records()[10 + i].values, b.records()[i].values));
  EXPECT_EQ(m.records()[10].prompt_id, b.records()[0].prompt_id);
}

TEST(Merge, AssociativeUpToIds) {
  const auto a = testutil::random_set(1, 3, 2, 2);
  const auto b = testutil::random_set(2, 4, 2, 2);
  const auto c = testutil::random_set(3, 5, 2, 2);
  EXPECT_EQ(merge(merge(a, b), c), merge(a, merge(b, c)));
}

TEST(Merge, ShapeMismatch) {
  EXPECT_THROW(merge(ActivationSet(2, 3), ActivationSet(2, 4)), DimensionError);
  EXPECT_THROW(merge(ActivationSet(3, 3), ActivationSet(2, 3)), DimensionError);
}

TEST(Prompts, JsonLinesRoundTrip) {
  TempDir tmp;
  PromptSet p({{3, "hello \"world\"\nnext", Category::benign}, {7, "refuse me", Category::malicious}});
  save_prompts(p, tmp / "p.jsonl");
  EXPECT_EQ(load_prompts(tmp / "p.jsonl"), p);
}

TEST(Prompts, DuplicateIdsAndBadLines) {
  EXPECT_THROW(PromptSet({{1, "a", Category::benign}, {1, "b", Category::malicious}}), FormatError);
  TempDir tmp;
  io::write_text(tmp / "p.jsonl", "{\"prompt_id\":1,\"category\":\"benign\",\"text\":\"a\"}\n{oops\n");
  try {
    load_prompts(tmp / "p.jsonl");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(load_prompts(tmp / "missing.jsonl"), IoError);
}

TEST(FilterPrompts, KeepsBenignAtOrAboveThreshold) {
  PromptSet p({{1, "m", Category::malicious}, {2, "b-high", Category::benign}, {3, "b-low", Category::benign}});
  const auto out = filter_prompts(p, {{2, 0.7}, {3, 0.3}}, 0.5);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].prompt_id, 1);
  EXPECT_EQ(out[1].prompt_id, 2);
}

TEST(FilterPrompts, ZeroThresholdIsIdentity) {
  PromptSet p({{1, "m", Category::malicious}, {2, "b", Category::benign}, {3, "c", Category::benign}});
  EXPECT_EQ(filter_prompts(p, {{2, 0.0}, {3, 0.4}}, 0.0), p);
}

TEST(FilterPrompts, AllBelowWarnsAndEmptiesBenign) {
  testutil::WarningCapture warnings;
  PromptSet p({{2, "b", Category::benign}, {3, "c", Category::benign}});
  const auto out = filter_prompts(p, {{2, 0.1}, {3, 0.2}}, 0.5);
  EXPECT_TRUE(out.empty());
  EXPECT_EQ(warnings.messages.size(), 1u);
}

TEST(FilterPrompts, MissingBenignScoreIsError) {
  PromptSet p({{1, "m", Category::malicious}, {2, "b", Category::benign}});
  EXPECT_THROW(filter_prompts(p, {}, 0.5), ValueError);
}
