#include <gtest/gtest.h>

#include <set>

#include "refgen/bank/event_bank.hpp"
#include "refgen/text/text_encoder.hpp"

using namespace refgen;
using text::kNullId;
using text::kPadId;
using text::kSeqLen;

namespace {

double row_diff(const Tensor<float>& a, const Tensor<float>& b, int row) {
  const int d = a.dim(1);
  double s = 0;
  for (int j = 0; j < d; ++j) s += std::abs(a.data[row * d + j] - b.data[row * d + j]);
  return s;
}

std::string words(int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += "w" + std::to_string(i) + " ";
  return s;
}

}  // namespace

TEST(Tokenize, EmptyCaptionIsAllNull) {
  for (const char* c : {"", "   ", "...,;"}) {
    auto ids = text::tokenize(c);
    for (int v : ids) EXPECT_EQ(v, kNullId) << "'" << c << "'";
  }
}

TEST(Tokenize, ShortCaptionIsPadded) {
  auto ids = text::tokenize("Dog barks, loudly!");
  EXPECT_EQ(ids[0], text::token_id("dog"));
  EXPECT_EQ(ids[1], text::token_id("barks"));
  EXPECT_EQ(ids[2], text::token_id("loudly"));
  for (int i = 3; i < kSeqLen; ++i) EXPECT_EQ(ids[i], kPadId);
}

TEST(Tokenize, LongCaptionIsTruncated) {
  auto ids = text::tokenize(words(80));
  for (int i = 0; i < kSeqLen; ++i) EXPECT_EQ(ids[i], text::token_id("w" + std::to_string(i)));
}

TEST(Tokenize, IdsStayInVocabularyForArbitraryBytes) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    for (int i = 0; i < 64; ++i) s.push_back(static_cast<char>(rng.index(256)));
    for (int v : text::tokenize(s)) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, text::kVocab);
    }
  }
  auto ids = text::tokenize("caf\xC3\xA9 \xE6\x97\xA5\xE6\x9C\xAC");
  EXPECT_EQ(ids[0], text::token_id("caf\xC3\xA9"));
  EXPECT_GE(ids[1], 2);
  EXPECT_EQ(ids[2], kPadId);
}

TEST(Tokenize, CatalogWordsDoNotCollide) {
  std::map<int, std::string> seen;
  for (const auto& label : bank::catalog_labels())
    for (const auto& w : text::split_words(label)) {
      auto [it, fresh] = seen.emplace(text::token_id(w), w);
      EXPECT_TRUE(fresh || it->second == w) << w << " collides with " << it->second;
    }
}

TEST(TextEncoder, EmbeddingShapeAndDeterminism) {
  text::TextEncoder<float> enc(32, 7);
  auto a = enc.embed_value("a bell rings");
  EXPECT_EQ(a.shape, (Shape{kSeqLen, 32}));
  EXPECT_EQ(a.data, enc.embed_value("a bell rings").data);
  EXPECT_EQ(a.data, text::TextEncoder<float>(32, 7).embed_value("a bell rings").data);
  EXPECT_NE(a.data, enc.embed_value("").data);
}

TEST(TextEncoder, EmptyCaptionsShareOneEmbedding) {
  text::TextEncoder<float> enc(16, 1);
  EXPECT_EQ(enc.embed_value("").data, enc.embed_value("  ").data);
}

TEST(TextEncoder, OneTokenChangesOneRow) {
  text::TextEncoder<float> enc(16, 2);
  auto a = enc.embed_value("dog barks then bell rings");
  auto b = enc.embed_value("dog barks then horn rings");
  for (int r = 0; r < kSeqLen; ++r) {
    if (r == 3)
      EXPECT_GT(row_diff(a, b, r), 0.0);
    else
      EXPECT_EQ(row_diff(a, b, r), 0.0) << "row " << r;
  }
}

TEST(TextEncoder, BundleStacksSlotsInOrder) {
  text::TextEncoder<float> enc(8, 3);
  std::vector<std::string> caps{"dog barks", "", "bell"};
  auto b = enc.bundle(caps, 3);
  EXPECT_EQ(b.shape, (Shape{3 * kSeqLen, 8}));
  for (int k = 0; k < 3; ++k) {
    auto e = enc.embed_value(caps[k]);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(b.data[k * e.size() + i], e.data[i]);
  }
  auto swapped = enc.bundle({"bell", "", "dog barks"}, 3);
  EXPECT_NE(b.data, swapped.data);
  EXPECT_THROW(enc.bundle({"a", "b"}, 3), ValidationError);
}

TEST(TextEncoder, ChannelMajorTransposes) {
  Tensor<float> rows({2, 3});
  for (int i = 0; i < 6; ++i) rows.data[i] = static_cast<float>(i);
  auto cm = text::channel_major(rows);
  EXPECT_EQ(cm.shape, (Shape{3, 2}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(cm.data[j * 2 + i], rows.data[i * 3 + j]);
}

TEST(TextEncoder, TableGradientMatchesFiniteDifference) {
  text::TextEncoder<double> enc(4, 5);
  const std::string cap = "dog barks dog";
  Rng rng(9);
  Tensor<double> target = Tensor<double>::randn({kSeqLen, 4}, rng);
  auto loss = [&] { return nn::mse(enc.embed(cap), target); };
  enc.params.zero_grad();
  nn::backward(loss());
  const int id = text::token_id("dog");
  for (int j = 0; j < 4; ++j) {
    auto& w = enc.table.mutable_value();
    const std::size_t at = static_cast<std::size_t>(id) * 4 + j;
    const double orig = w[at], h = 1e-5;
    double lp, lm;
    {
      nn::NoGradGuard ng;
      w[at] = orig + h;
      lp = loss().item();
      w[at] = orig - h;
      lm = loss().item();
      w[at] = orig;
    }
    const double fd = (lp - lm) / (2 * h), an = enc.table.grad()[at];
    EXPECT_NEAR(an, fd, 1e-3 * std::max(1.0, std::abs(fd)));
  }
}

TEST(TextEncoder, ArchiveRoundTrip) {
  text::TextEncoder<float> enc(8, 11);
  Archive ar;
  enc.store(ar);
  auto back = text::TextEncoder<float>::restore(ar);
  EXPECT_EQ(back.embed_value("rain on a roof").data, enc.embed_value("rain on a roof").data);
}
