#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "refgen/forge/manifest.hpp"

using namespace refgen;
using namespace refgen::forge;
namespace fs = std::filesystem;

namespace {

bank::EventSpec tone(const std::string& id, const std::string& label, double hz, double dur) {
  bank::EventSpec s;
  s.event_id = id;
  s.label = label;
  s.timbre.base_hz = hz;
  s.duration_s = dur;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("refgen_forge_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(MixAtSnr, GainOracle) {
  // Constant-magnitude segments make RMS exact: signal 0.5, noise 0.25.
  std::vector<float> sig(64, 0.5f), noise(64);
  for (int i = 0; i < 64; ++i) noise[i] = (i % 2 ? 0.25f : -0.25f);
  double g = 0;
  auto out = mix_at_snr(sig, noise, 0.0, &g);
  EXPECT_NEAR(g, 2.0, 1e-12);
  EXPECT_NEAR(out[1], 0.5 + 2.0 * 0.25, 1e-6);

  std::vector<float> s2(64, 0.2f), n2(64, 0.1f);
  mix_at_snr(s2, n2, 6.0206, &g);
  EXPECT_NEAR(g, 1.0, 1e-3);

  auto hi = mix_at_snr(sig, noise, 100.0);
  for (std::size_t i = 0; i < hi.size(); ++i) EXPECT_NEAR(hi[i], sig[i], 1e-4);

  EXPECT_THROW(mix_at_snr(sig, std::vector<float>(64, 0.0f), 0.0), ValidationError);
}

TEST(MixAtSnr, AchievedSnrMatchesRequest) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<float> s(1000), n(1000);
    for (auto& v : s) v = static_cast<float>(rng.normal() * 0.3);
    for (auto& v : n) v = static_cast<float>(rng.normal() * 0.1);
    double snr = rng.uniform(-15, 15), g = 0;
    auto out = mix_at_snr(s, n, snr, &g);
    std::vector<double> added(1000);
    double e = 0;
    for (int i = 0; i < 1000; ++i) e += (g * n[i]) * (g * n[i]);
    double achieved = 20 * std::log10(audio::rms(s) / std::sqrt(e / 1000));
    EXPECT_NEAR(achieved, snr, 1e-6);
  }
}

TEST(Caption, Examples) {
  EXPECT_EQ(caption_from_labels({"a dog barking"}, {}, 1), "a dog barking");
  EXPECT_EQ(caption_from_labels({"a dog barking", "a siren wailing"}, {"followed by"}, 1),
            "a dog barking followed by a siren wailing");
  std::vector<std::string> labels = {"a", "b c", "d", "e"};
  EXPECT_EQ(caption_from_labels(labels, default_connection_phrases(), 9),
            caption_from_labels(labels, default_connection_phrases(), 9));
  EXPECT_THROW(caption_from_labels({"x", "y"}, {}, 1), ValidationError);
  EXPECT_THROW(caption_from_labels({}, {"then"}, 1), ValidationError);
  EXPECT_EQ(caption_phrase("dog_bark"), "the sound of dog bark");
  EXPECT_EQ(caption_phrase("a dog barking"), "a dog barking");
}

TEST(Caption, LabelsAppearInOrder) {
  auto cat = bank::default_catalog(12, 2);
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::string> labels;
    for (int i = 0; i < 1 + static_cast<int>(rng.index(5)); ++i) labels.push_back(cat[rng.index(12)].label);
    auto c = caption_from_labels(labels, default_connection_phrases(), t);
    std::size_t at = 0;
    for (const auto& l : labels) {
      at = c.find(l, at);
      ASSERT_NE(at, std::string::npos) << c;
      at += l.size();
    }
  }
}

TEST(Concatenation, ExactLengthAndTiling) {
  auto cat = bank::default_catalog(12, 3);
  ForgeConfig cfg;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto ex = build_concatenation_example(cat, cfg, seed);
    ASSERT_EQ(ex.target.size(), 160000u);
    ASSERT_EQ(ex.references.size(), 3u);
    double t = 0;
    std::set<std::string> ref_text;
    for (const auto& r : ex.regions) {
      EXPECT_DOUBLE_EQ(r.start_s, t);
      EXPECT_GT(r.end_s, r.start_s);
      t = r.end_s;
      EXPECT_NE(ex.target_caption.find(r.label), std::string::npos);
    }
    EXPECT_DOUBLE_EQ(t, 10.0);
    // Every target event appears in some reference caption; references partition the pieces.
    std::size_t ref_regions = 0;
    for (const auto& ref : ex.references) {
      ref_regions += ref.regions.size();
      EXPECT_EQ(ref.caption.empty(), ref.regions.empty());
      EXPECT_LE(ref.audio.duration(), 10.0);
    }
    EXPECT_EQ(ref_regions, ex.regions.size());
    for (const auto& r : ex.regions) {
      bool found = false;
      for (const auto& ref : ex.references) found |= ref.caption.find(r.label) != std::string::npos;
      EXPECT_TRUE(found) << r.label;
    }
  }
}

TEST(Concatenation, ThreePlusThreePlusFour) {
  std::vector<bank::EventSpec> b = {tone("a", "a low hum", 200, 3.0), tone("b", "a high tone", 900, 4.0)};
  ForgeConfig cfg;
  bool seen = false;
  for (std::uint64_t seed = 0; seed < 200 && !seen; ++seed) {
    auto ex = build_concatenation_example(b, cfg, seed);
    if (ex.regions.size() == 3 && ex.regions[0].end_s == 3.0 && ex.regions[1].end_s == 6.0) {
      EXPECT_EQ(ex.regions[2].event_id, "b");
      EXPECT_EQ(ex.target.size(), 160000u);
      seen = true;
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Concatenation, RepeatedSingleEventTiles) {
  std::vector<bank::EventSpec> b = {tone("a", "a low hum", 200, 4.0), tone("b", "a high tone", 900, 4.0)};
  ForgeConfig cfg;
  cfg.max_distinct_events = 1;
  auto ex = build_concatenation_example(b, cfg, 5);
  ASSERT_EQ(ex.regions.size(), 3u);
  EXPECT_DOUBLE_EQ(ex.regions[0].end_s, 4.0);
  EXPECT_DOUBLE_EQ(ex.regions[1].end_s, 8.0);
  EXPECT_DOUBLE_EQ(ex.regions[2].end_s, 10.0);
  EXPECT_EQ(ex.regions[0].event_id, ex.regions[2].event_id);
}

TEST(Concatenation, FewerPiecesThanSlotsLeavesNullSlots) {
  std::vector<bank::EventSpec> b = {tone("a", "a low hum", 200, 4.9), tone("b", "a high tone", 900, 4.9)};
  ForgeConfig cfg;
  cfg.k_max = 5;
  auto ex = build_concatenation_example(b, cfg, 1);
  int nulls = 0;
  for (const auto& r : ex.references) {
    if (r.is_null()) {
      ++nulls;
      EXPECT_TRUE(r.audio.is_silent());
      EXPECT_EQ(r.audio.size(), 160000u);
    }
  }
  EXPECT_EQ(nulls, 5 - static_cast<int>(ex.regions.size()));
}

TEST(Concatenation, DeterministicAndBankErrors) {
  auto cat = bank::default_catalog(6, 1);
  ForgeConfig cfg;
  auto a = build_concatenation_example(cat, cfg, 77), b = build_concatenation_example(cat, cfg, 77);
  EXPECT_EQ(a.target.samples, b.target.samples);
  EXPECT_EQ(a.target_caption, b.target_caption);
  EXPECT_THROW(build_concatenation_example({cat[0]}, cfg, 1), ForgeError);
  cfg.max_draws = 1;
  EXPECT_THROW(build_concatenation_example(cat, cfg, 1), ForgeError);
}

TEST(Overlay, PlacementAndReconstruction) {
  std::vector<bank::EventSpec> b = {tone("f", "a low hum", 200, 3.0), tone("k", "a high tone", 900, 4.0)};
  ForgeConfig cfg;
  cfg.mode = Mode::Overlay;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto ex = build_overlay_example(b, cfg, seed);
    ASSERT_EQ(ex.regions.size(), 3u);
    const double df = ex.regions[0].end_s, db = 10.0 - ex.regions[1].start_s;
    EXPECT_DOUBLE_EQ(ex.regions[0].start_s, 0.0);
    EXPECT_DOUBLE_EQ(ex.regions[1].end_s, 10.0);
    EXPECT_TRUE((df == 3.0 && db == 4.0) || (df == 4.0 && db == 3.0));
    EXPECT_DOUBLE_EQ(ex.regions[2].end_s - ex.regions[2].start_s, 10.0);
    EXPECT_LE(ex.target.peak(), 1.0f);
    auto rec = reconstruct_overlay(ex);
    double worst = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) worst = std::max<double>(worst, std::abs(rec[i] - ex.target.samples[i]));
    EXPECT_LE(worst, 1e-5);
  }
}

TEST(Overlay, ZeroDbMatchesBaseRms) {
  auto cat = bank::default_catalog(12, 4);
  ForgeConfig cfg;
  cfg.mode = Mode::Overlay;
  cfg.snr_lo_db = cfg.snr_hi_db = 0.0;
  auto ex = build_overlay_example(cat, cfg, 3);
  EXPECT_EQ(ex.snr_db, (std::vector<double>{0.0, 0.0}));
  const auto& base = ex.references[2].audio.samples;
  const std::size_t nf = ex.references[0].audio.size();
  std::vector<float> seg(base.begin(), base.begin() + nf), added(nf);
  for (std::size_t i = 0; i < nf; ++i) added[i] = static_cast<float>(ex.target.samples[i] / ex.peak_scale - base[i]);
  EXPECT_NEAR(audio::rms(added) / audio::rms(seg), 1.0, 1e-4);
}

TEST(Overlay, RequiresThreeSlots) {
  ForgeConfig cfg;
  cfg.mode = Mode::Overlay;
  cfg.k_max = 2;
  EXPECT_THROW(build_overlay_example(bank::default_catalog(4, 1), cfg, 0), ValidationError);
  cfg.k_max = 3;
  cfg.snr_lo_db = 5;
  cfg.snr_hi_db = -5;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(General, AllReferencesNull) {
  auto cat = bank::default_catalog(12, 4);
  ForgeConfig cfg;
  cfg.mode = Mode::General;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto ex = build_general_example(cat, cfg, seed);
    EXPECT_FALSE(ex.target_caption.empty());
    EXPECT_FALSE(ex.regions.empty());
    for (const auto& r : ex.references) {
      EXPECT_TRUE(r.is_null());
      EXPECT_TRUE(r.audio.is_silent());
      EXPECT_EQ(r.audio.size(), 160000u);
    }
  }
}

TEST(Dataset, SplitAndDeterminism) {
  auto cat = bank::default_catalog(12, 4);
  ForgeConfig cfg;
  cfg.n_examples = 100;
  cfg.rng_seed = 21;
  auto dir = scratch("ds1");
  auto paths = build_dataset(cat, cfg, dir);
  auto train = read_manifest(paths.train_manifest), test = read_manifest(paths.test_manifest);
  EXPECT_EQ(train.records.size(), 80u);
  EXPECT_EQ(test.records.size(), 20u);
  std::set<std::string> ids;
  for (const auto& r : train.records) ids.insert(r.id);
  for (const auto& r : test.records) EXPECT_EQ(ids.count(r.id), 0u);

  auto dir2 = scratch("ds2");
  auto paths2 = build_dataset(cat, cfg, dir2);
  EXPECT_EQ(slurp(paths.train_manifest), slurp(paths2.train_manifest));
  EXPECT_EQ(slurp(paths.test_manifest), slurp(paths2.test_manifest));

  auto ex = load_example(test, test.records[0]);
  EXPECT_EQ(ex.target.size(), 160000u);
  EXPECT_EQ(ex.references.size(), 3u);
}

TEST(Dataset, OverlayRoundTripWithinPcm16Quantization) {
  auto cat = bank::default_catalog(12, 4);
  ForgeConfig cfg;
  cfg.mode = Mode::Overlay;
  cfg.n_examples = 4;
  auto dir = scratch("ov");
  auto paths = build_dataset(cat, cfg, dir);
  auto man = read_manifest(paths.train_manifest);
  for (const auto& r : man.records) {
    auto ex = load_example(man, r);
    auto rec = reconstruct_overlay(ex);
    double worst = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) worst = std::max<double>(worst, std::abs(rec[i] - ex.target.samples[i]));
    // Three independently quantized files, each off by at most half an LSB, plus the mix gains.
    EXPECT_LT(worst, 20.0 / 32768.0);
  }
}

TEST(Dataset, PresetsAndErrors) {
  auto p = full_scale_preset(Mode::Concatenation);
  EXPECT_EQ(p.n_examples - p.n_test(), 92299u);
  EXPECT_EQ(p.n_test(), 200u);
  auto o = full_scale_preset(Mode::Overlay);
  EXPECT_EQ(o.n_examples - o.n_test(), 146481u);
  EXPECT_EQ(o.n_test(), 200u);

  auto blocker = scratch("blocker");
  std::ofstream(blocker) << "x";
  ForgeConfig cfg;
  cfg.n_examples = 2;
  EXPECT_THROW(build_dataset(bank::default_catalog(4, 1), cfg, blocker / "sub"), IoError);
  EXPECT_THROW(read_manifest(scratch("missing.jsonl")), IoError);
}
