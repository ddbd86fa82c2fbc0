#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "refgen/audio/wav.hpp"
#include "refgen/eval/report.hpp"

using namespace refgen;
using namespace refgen::eval;
namespace fs = std::filesystem;

namespace {

GaussianStats gauss(std::vector<double> mean, std::vector<double> cov_rowmajor) {
  const int d = static_cast<int>(mean.size());
  GaussianStats g;
  g.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), d);
  g.cov = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_rowmajor.data(), d, d);
  return g;
}

GaussianStats random_stats(int d, int rank, Rng& rng) {
  Eigen::MatrixXd a(d, rank);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < rank; ++j) a(i, j) = rng.normal();
  GaussianStats g;
  g.cov = a * a.transpose() / rank;
  g.mean = Eigen::VectorXd(d);
  for (int i = 0; i < d; ++i) g.mean[i] = rng.normal();
  return g;
}

std::vector<double> random_simplex(int n, Rng& rng, bool sparse) {
  std::vector<double> p(n);
  double s = 0;
  for (auto& v : p) {
    v = sparse && rng.bernoulli(0.3) ? 0.0 : -std::log(rng.uniform(1e-12, 1.0));
    s += v;
  }
  if (s == 0) p[0] = s = 1;
  for (auto& v : p) v /= s;
  return p;
}

// Trained once; the accuracy gate is checked by its own test.
const ClassifierTrainResult& shared_training() {
  static const ClassifierTrainResult res = [] {
    ClassifierConfig cfg;
    cfg.per_class_train = 20;
    cfg.per_class_test = 6;
    cfg.epochs = 20;
    cfg.min_accuracy = 0.0;
    return train_event_classifier(bank::default_catalog(12, 0), cfg);
  }();
  return res;
}

const EventClassifier& shared_classifier() { return shared_training().model; }

struct PairDir {
  fs::path dir, target, identity, shuffled;
};

// Target clips plus an identical and a shuffled "generated" manifest.
const PairDir& pair_dir() {
  static const PairDir d = [] {
    PairDir p;
    p.dir = fs::temp_directory_path() / "refgen_eval_pairs";
    fs::remove_all(p.dir);
    fs::create_directories(p.dir / "audio");
    const auto specs = bank::default_catalog(12, 0);
    Rng rng(17);
    std::vector<forge::ManifestRecord> recs;
    for (int i = 0; i < 12; ++i) {
      const auto clip = classifier_sample(specs[i], rng);
      forge::ManifestRecord r;
      r.id = "x" + std::to_string(i);
      r.target_path = "audio/" + r.id + ".wav";
      r.target_caption = specs[i].label;
      r.regions = {{0.0, 10.0, specs[i].event_id, specs[i].label}};
      audio::write_wav(p.dir / r.target_path, clip);
      recs.push_back(r);
    }
    p.target = p.dir / "target.jsonl";
    p.identity = p.dir / "identity.jsonl";
    p.shuffled = p.dir / "shuffled.jsonl";
    forge::write_manifest(p.target, recs);
    forge::write_manifest(p.identity, recs);
    auto sh = recs;
    for (std::size_t i = 0; i < sh.size(); ++i) sh[i].target_path = recs[(i + 1) % recs.size()].target_path;
    forge::write_manifest(p.shuffled, sh);
    return p;
  }();
  return d;
}

}  // namespace

TEST(Frechet, IdenticalStatsGiveZero) {
  Rng rng(1);
  auto g = random_stats(6, 6, rng);
  EXPECT_NEAR(frechet_distance(g, g), 0.0, 1e-6);
  auto diag = gauss({0, 0}, {1, 0, 0, 4});
  EXPECT_NEAR(frechet_distance(diag, diag), 0.0, 1e-6);
}

TEST(Frechet, OneDimensionalClosedForm) {
  EXPECT_NEAR(frechet_distance(gauss({0}, {1}), gauss({1}, {1})), 1.0, 1e-6);
  // (m1 - m2)^2 + (s1 - s2)^2
  EXPECT_NEAR(frechet_distance(gauss({2}, {9}), gauss({-1}, {4})), 9.0 + 1.0, 1e-9);
}

TEST(Frechet, DiagonalMatchesPerAxisSum) {
  auto a = gauss({0, 1}, {1, 0, 0, 4}), b = gauss({1, 1}, {9, 0, 0, 1});
  const double want = 1.0 + (1 - 3) * (1 - 3) + (2 - 1) * (2 - 1);
  EXPECT_NEAR(frechet_distance(a, b), want, 1e-9);
}

TEST(Frechet, SymmetricAndNonNegative) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto a = random_stats(5, 5, rng), b = random_stats(5, 5, rng);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-8 * std::max(1.0, ab));
  }
}

TEST(Frechet, SquareRootResidualIsSmall) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto a = random_stats(8, 8, rng), b = random_stats(8, t % 2 ? 3 : 8, rng);
    EXPECT_LT(frechet_distance_detailed(a, b).sqrt_residual, 1e-6);
  }
}

TEST(Frechet, RankDeficientFirstCovarianceIsHandled) {
  Rng rng(4);
  auto a = random_stats(6, 2, rng), b = random_stats(6, 6, rng);
  auto r = frechet_distance_detailed(a, b);
  EXPECT_LT(r.sqrt_residual, 1e-6);
  EXPECT_GE(r.distance, 0.0);
  EXPECT_NEAR(r.distance, frechet_distance_detailed(b, a).distance, 1e-4 * std::max(1.0, r.distance));
}

TEST(Frechet, MatchesMonteCarloOptimalCoupling) {
  // In 1-D the optimal coupling pairs sorted samples; W2^2 equals the Frechet distance.
  Rng rng(5);
  for (auto [m1, s1, m2, s2] : std::vector<std::array<double, 4>>{{0, 1, 1, 1}, {0, 1, 0, 3}, {2, 0.5, -1, 2}}) {
    const int n = 200000;
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = m1 + s1 * rng.normal();
      y[i] = m2 + s2 * rng.normal();
    }
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    double w2 = 0;
    for (int i = 0; i < n; ++i) w2 += (x[i] - y[i]) * (x[i] - y[i]);
    w2 /= n;
    const double fd = frechet_distance(gauss({m1}, {s1 * s1}), gauss({m2}, {s2 * s2}));
    EXPECT_NEAR(fd, w2, 0.05 * fd) << m1 << " " << s1 << " " << m2 << " " << s2;
  }
}

TEST(Frechet, RejectsNonPsdAndMismatchedShapes) {
  EXPECT_THROW(frechet_distance(gauss({0, 0}, {1, 0, 0, -0.5}), gauss({0, 0}, {1, 0, 0, 1})), ValidationError);
  EXPECT_THROW(frechet_distance(gauss({0}, {1}), gauss({0, 0}, {1, 0, 0, 1})), ValidationError);
  // Tiny negative eigenvalues inside the tolerance are clipped.
  EXPECT_NO_THROW(frechet_distance(gauss({0, 0}, {1, 0, 0, -1e-10}), gauss({0, 0}, {1, 0, 0, 1})));
}

TEST(FitGaussian, UnbiasedCovariance) {
  FeatureSet f{Eigen::MatrixXd(3, 2), "test"};
  f.rows << 1, 2, 3, 6, 5, 4;
  auto g = fit_gaussian(f);
  EXPECT_DOUBLE_EQ(g.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(g.mean[1], 4.0);
  EXPECT_DOUBLE_EQ(g.cov(0, 0), (4 + 0 + 4) / 2.0);
  EXPECT_DOUBLE_EQ(g.cov(1, 1), (4 + 4 + 0) / 2.0);
  EXPECT_DOUBLE_EQ(g.cov(0, 1), (-2 * -2 + 0 * 2 + 2 * 0) / 2.0);
}

TEST(FitGaussian, RejectsTooFewRowsAndNonFinite) {
  FeatureSet one{Eigen::MatrixXd::Zero(1, 3), "test"};
  EXPECT_THROW(fit_gaussian(one), ValidationError);
  FeatureSet bad{Eigen::MatrixXd::Zero(4, 3), "test"};
  bad.rows(2, 1) = std::nan("");
  EXPECT_THROW(fit_gaussian(bad), ValidationError);
}

TEST(KlDivergence, HandValues) {
  EXPECT_DOUBLE_EQ(kl_divergence({0.25, 0.75}, {0.25, 0.75}), 0.0);
  EXPECT_NEAR(kl_divergence({0.5, 0.5}, {0.9, 0.1}), 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1), 1e-12);
  EXPECT_NEAR(kl_divergence({0.5, 0.5}, {0.9, 0.1}), 0.5108, 1e-3);
  EXPECT_NEAR(kl_divergence({1, 0, 0, 0}, {0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-12);
}

TEST(KlDivergence, MatchesBruteForceOnRandomSimplexPairs) {
  Rng rng(6);
  for (int t = 0; t < 1000; ++t) {
    const int n = 2 + static_cast<int>(rng.index(15));
    auto p = random_simplex(n, rng, t % 3 == 0), q = random_simplex(n, rng, t % 5 == 0);
    double brute = 0;
    for (int i = 0; i < n; ++i)
      if (p[i] > 0) brute += p[i] * std::log(p[i] / std::max(q[i], 1e-12));
    const double kl = kl_divergence(p, q);
    EXPECT_GE(kl, 0.0);
    EXPECT_EQ(kl, std::max(0.0, brute));
  }
}

TEST(KlDivergence, ClipsZeroTargetProbabilities) {
  EXPECT_NEAR(kl_divergence({0.5, 0.5}, {1.0, 0.0}), 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-9);
}

TEST(KlDivergence, RejectsInvalidInputs) {
  EXPECT_THROW(kl_divergence({1.2, -0.2}, {0.5, 0.5}), ValidationError);
  EXPECT_THROW(kl_divergence({0.5, 0.4}, {0.5, 0.5}), ValidationError);
  EXPECT_THROW(kl_divergence({0.5, 0.5}, {1.0}), ValidationError);
}

TEST(ClapScore, HandValues) {
  EXPECT_NEAR(clap_score({1, 2, 3}, {1, 2, 3}), 1.0, 1e-12);
  EXPECT_NEAR(clap_score({1, 0}, {0, 1}), 0.0, 1e-12);
  EXPECT_NEAR(clap_score({1, 0}, {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}), 0.7071, 1e-4);
  EXPECT_NEAR(clap_a_score({1, -2}, {-1, 2}), -1.0, 1e-12);
  EXPECT_EQ(clap_a_score({0, 0}, {0, 0}), 0.0);
  EXPECT_EQ(clap_a_score({0, 0}, {3, 4}), 0.0);
  EXPECT_THROW(clap_score({1}, {1, 2}), ValidationError);
}

TEST(EventClassifier, ReachesAccuracyGate) {
  EXPECT_GE(shared_training().heldout_accuracy, 0.90);
}

TEST(EventClassifier, ProbabilitiesAndDuplicates) {
  const auto& clf = shared_classifier();
  const auto specs = bank::default_catalog(12, 0);
  Rng rng(8);
  for (int c = 0; c < 12; ++c) {
    const auto clip = classifier_sample(specs[c], rng);
    const auto out = clf.analyze(clip);
    double s = 0;
    for (double p : out.probs) {
      EXPECT_GE(p, 0.0);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(out.embedding.size(), static_cast<std::size_t>(clf.embed_dim()));
    for (double e : out.embedding) EXPECT_GE(e, 0.0);
    AudioClip copy = clip;
    EXPECT_EQ(clf.predict(copy), clf.predict(clip));
  }
}

TEST(EventClassifier, PrototypesPerLabel) {
  const auto& clf = shared_classifier();
  ASSERT_EQ(clf.prototypes().size(), clf.labels().size());
  const auto one = clf.text_embedding({clf.labels()[3]});
  EXPECT_EQ(one, clf.prototypes()[3]);
  const auto two = clf.text_embedding({clf.labels()[0], clf.labels()[1], "not a label"});
  for (int j = 0; j < clf.embed_dim(); ++j) EXPECT_NEAR(two[j], 0.5 * (clf.prototypes()[0][j] + clf.prototypes()[1][j]), 1e-12);
  EXPECT_TRUE(clf.text_embedding({"not a label"}).empty());
}

TEST(EventClassifier, ArchiveRoundTrip) {
  const auto& clf = shared_classifier();
  Archive ar;
  clf.store(ar);
  auto back = EventClassifier::restore(ar);
  Rng rng(9);
  const auto clip = classifier_sample(bank::default_catalog(12, 0)[5], rng);
  EXPECT_EQ(back.analyze(clip).embedding, clf.analyze(clip).embedding);
  EXPECT_EQ(back.labels(), clf.labels());
  EXPECT_EQ(back.prototypes().size(), clf.prototypes().size());
}

TEST(EventClassifier, NeedsTwentyExamplesPerEvent) {
  ClassifierConfig cfg;
  cfg.per_class_train = 19;
  EXPECT_THROW(train_event_classifier(bank::default_catalog(4, 0), cfg), ValidationError);
}

TEST(EventClassifier, AccuracyGateRaisesTrainingError) {
  ClassifierConfig cfg;
  cfg.per_class_train = 20;
  cfg.per_class_test = 2;
  cfg.epochs = 0;
  cfg.min_accuracy = 1.01;
  try {
    train_event_classifier(bank::default_catalog(3, 0), cfg);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("held-out accuracy"), std::string::npos);
  }
}

TEST(EvaluateManifest, IdentityRun) {
  const auto& p = pair_dir();
  auto rep = evaluate_manifest(p.identity, p.target, shared_classifier());
  EXPECT_LE(rep.fad, 1e-6);
  EXPECT_LE(rep.kl, 1e-6);
  EXPECT_NEAR(rep.clap_a, 1.0, 1e-12);
  EXPECT_EQ(rep.examples.size(), 12u);
  EXPECT_EQ(rep.clap_count, 12u);
  EXPECT_EQ(rep.extractor, shared_classifier().id());
}

TEST(EvaluateManifest, ShuffledRunKeepsSetMetricButLosesPairing) {
  const auto& p = pair_dir();
  auto id = evaluate_manifest(p.identity, p.target, shared_classifier());
  auto sh = evaluate_manifest(p.shuffled, p.target, shared_classifier());
  EXPECT_NEAR(sh.fad, 0.0, 1e-6);
  EXPECT_GT(sh.kl, id.kl);
  EXPECT_LT(sh.clap_a, id.clap_a);
}

TEST(EvaluateManifest, DeterministicAndPersisted) {
  const auto& p = pair_dir();
  auto a = evaluate_manifest(p.shuffled, p.target, shared_classifier());
  auto b = evaluate_manifest(p.shuffled, p.target, shared_classifier());
  EXPECT_EQ(a.jsonl(), b.jsonl());
  a.write(p.dir / "report");
  ASSERT_TRUE(fs::exists(p.dir / "report.jsonl"));
  ASSERT_TRUE(fs::exists(p.dir / "report.txt"));
  std::ifstream is(p.dir / "report.jsonl");
  int lines = 0;
  for (std::string l; std::getline(is, l);) {
    auto j = nlohmann::json::parse(l);
    EXPECT_EQ(j.at("extractor").get<std::string>(), a.extractor);
    ++lines;
  }
  EXPECT_EQ(lines, 13);
}

TEST(EvaluateManifest, MissingIdsAreListed) {
  const auto& p = pair_dir();
  auto recs = forge::read_manifest(p.identity).records;
  recs.erase(recs.begin() + 4);
  recs[0].id = "stray";
  const auto partial = p.dir / "partial.jsonl";
  forge::write_manifest(partial, recs);
  try {
    evaluate_manifest(partial, p.target, shared_classifier());
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("x4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("x0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stray"), std::string::npos) << msg;
  }
}
