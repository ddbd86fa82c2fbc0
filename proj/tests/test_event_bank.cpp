#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include <Eigen/Dense>

#include "refgen/bank/event_bank.hpp"
#include "refgen/codec/mel.hpp"

using namespace refgen;
using namespace refgen::bank;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("refgen_bank_" + name);
  fs::create_directories(p.parent_path());
  return p;
}

EventSpec sine_spec(double hz, double dur) {
  EventSpec s;
  s.event_id = "t";
  s.label = "a tone";
  s.timbre.base_hz = hz;
  s.duration_s = dur;
  return s;
}

}  // namespace

TEST(EventBank, SineLengthAndDeterminism) {
  auto a = synthesize_event(sine_spec(440, 1.0), 3);
  EXPECT_EQ(a.size(), 16000u);
  auto b = synthesize_event(sine_spec(440, 1.0), 3);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_LE(a.peak(), 0.9f + 1e-7f);
}

TEST(EventBank, SilentFilteredNoise) {
  auto s = sine_spec(500, 0.5);
  s.timbre.family = Family::FilteredNoise;
  s.timbre.partials = {0.0, 0.0};
  s.timbre.noise_mix = 0.0;
  EXPECT_TRUE(synthesize_event(s, 1).is_silent());
}

TEST(EventBank, RejectsBadSpecs) {
  EXPECT_THROW(synthesize_event(sine_spec(8000, 1.0), 1), ValidationError);
  EXPECT_THROW(synthesize_event(sine_spec(440, 5.5), 1), ValidationError);
  EXPECT_THROW(synthesize_event(sine_spec(440, 0.0), 1), ValidationError);
  EXPECT_THROW(default_catalog(1, 0), ValidationError);
}

TEST(EventBank, CatalogContract) {
  auto cat = default_catalog(12, 7);
  ASSERT_EQ(cat.size(), 12u);
  std::set<std::string> ids, labels;
  for (const auto& s : cat) {
    ids.insert(s.event_id);
    labels.insert(s.label);
    for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
      auto clip = synthesize_event(s, seed);
      EXPECT_LE(clip.peak(), 0.9f + 1e-7f) << s.event_id;
      EXPECT_GT(clip.peak(), 0.5f) << s.event_id;
      EXPECT_EQ(clip.size(), AudioClip::sample_count(s.duration_s, 16000));
    }
  }
  EXPECT_EQ(ids.size(), 12u);
  EXPECT_EQ(labels.size(), 12u);
  EXPECT_EQ(default_catalog(2, 5), default_catalog(2, 5));
  EXPECT_NE(default_catalog(12, 5), default_catalog(12, 6));
}

// Per-band mean and std of the log-mel over the frames the event covers.
Eigen::VectorXd mel_stats(const AudioClip& clip) {
  const codec::MelParams p;
  const auto m = codec::mel_forward(clip, p);
  const int frames = std::max<int>(1, static_cast<int>(clip.size()) / p.hop);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(2 * p.n_mels + 1);
  for (int b = 0; b < p.n_mels; ++b) {
    double s = 0, ss = 0;
    for (int t = 0; t < frames; ++t) {
      const double v = m.data[t * p.n_mels + b];
      s += v;
      ss += v * v;
    }
    const double mean = s / frames;
    f(b) = mean;
    f(p.n_mels + b) = std::sqrt(std::max(0.0, ss / frames - mean * mean));
  }
  f(2 * p.n_mels) = 1.0;
  return f;
}

TEST(EventBank, CatalogIsLinearlySeparable) {
  for (std::uint64_t cat_seed : {3ull, 41ull}) {
    const auto cat = default_catalog(12, cat_seed);
    const int per = 6;
    Eigen::MatrixXd x(12 * per, 129);
    Eigen::MatrixXd y = Eigen::MatrixXd::Constant(12 * per, 12, -1.0);
    for (int c = 0; c < 12; ++c)
      for (int r = 0; r < per; ++r) {
        x.row(c * per + r) = mel_stats(synthesize_event(cat[c], 100 + r)).transpose();
        y(c * per + r, c) = 1.0;
      }
    // one-vs-rest ridge regression
    const Eigen::MatrixXd gram = x.transpose() * x + 1e-3 * Eigen::MatrixXd::Identity(129, 129);
    const Eigen::MatrixXd w = gram.ldlt().solve(x.transpose() * y);
    const Eigen::MatrixXd scores = x * w;
    int correct = 0;
    for (int i = 0; i < scores.rows(); ++i) {
      Eigen::Index best;
      scores.row(i).maxCoeff(&best);
      correct += best == i / per;
    }
    EXPECT_GE(correct, 0.95 * scores.rows()) << "catalog seed " << cat_seed;
  }
}

TEST(EventBank, CatalogRecordRoundTrip) {
  auto cat = default_catalog(12, 11);
  auto path = scratch("catalog.tsv");
  write_catalog(path, cat);
  EXPECT_EQ(read_catalog(path), cat);
  EXPECT_THROW(from_record("ev\tlabel\tfm"), ValidationError);
}

TEST(Ingest, Pcm16Scaling) {
  auto path = scratch("mono.wav");
  audio::write_wav_pcm16(path, {0, 32767, -32768, 100}, 16000, 1);
  auto clip = ingest_wav(path);
  ASSERT_EQ(clip.size(), 4u);
  EXPECT_FLOAT_EQ(clip.samples[1], 32767.0f / 32768.0f);
  EXPECT_FLOAT_EQ(clip.samples[2], -1.0f);
}

TEST(Ingest, AntiphaseStereoCancels) {
  auto path = scratch("stereo.wav");
  std::vector<std::int16_t> inter;
  for (int i = 0; i < 400; ++i) {
    auto v = static_cast<std::int16_t>(10000 * std::sin(i * 0.1));
    inter.push_back(v);
    inter.push_back(static_cast<std::int16_t>(-v));
  }
  audio::write_wav_pcm16(path, inter, 16000, 2);
  auto clip = ingest_wav(path);
  EXPECT_EQ(clip.size(), 400u);
  EXPECT_TRUE(clip.is_silent());
}

TEST(Ingest, UpsampleMatchesAnalyticSinusoid) {
  const int n = 8000;
  const double f = 440.0;
  std::vector<std::int16_t> pcm(n);
  for (int i = 0; i < n; ++i) pcm[i] = static_cast<std::int16_t>(std::lround(16000 * std::sin(2 * std::numbers::pi * f * i / 8000.0)));
  auto path = scratch("8k.wav");
  audio::write_wav_pcm16(path, pcm, 8000, 1);
  auto clip = ingest_wav(path, 16000);
  EXPECT_LE(std::abs(static_cast<long>(clip.size()) - 2 * n), 1);
  // Oracle: the continuous sinusoid sampled at 16 kHz; edges excluded for the filter support.
  double worst = 0;
  for (std::size_t i = 200; i + 200 < clip.size(); ++i) {
    double ref = 16000.0 / 32768.0 * std::sin(2 * std::numbers::pi * f * i / 16000.0);
    worst = std::max(worst, std::abs(clip.samples[i] - ref));
  }
  EXPECT_LT(worst, 5e-3);
}

TEST(Ingest, MissingFileNamesPath) {
  try {
    ingest_wav("/nonexistent/clip.wav");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/clip.wav"), std::string::npos);
  }
}
