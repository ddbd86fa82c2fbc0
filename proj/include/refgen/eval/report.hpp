#pragma once

// Paired evaluation of a generated manifest against its target manifest.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "refgen/eval/classifier.hpp"
#include "refgen/eval/metrics.hpp"
#include "refgen/forge/manifest.hpp"

namespace refgen::eval {

namespace fs = std::filesystem;
using nlohmann::json;

struct ExampleMetrics {
  std::string id;
  double kl = 0;
  double clap_a = 0;
  std::optional<double> clap;  // absent when the target names no known label
  std::string predicted;
};

struct MetricReport {
  std::string extractor;
  double fad = 0, kl = 0, clap_a = 0, clap = 0;
  std::size_t clap_count = 0;
  std::vector<ExampleMetrics> examples;
  std::string config;

  std::string jsonl() const {
    std::ostringstream os;
    for (const auto& e : examples) {
      json j{{"id", e.id}, {"kl", e.kl}, {"clap_a", e.clap_a}, {"predicted", e.predicted}, {"extractor", extractor}};
      if (e.clap) j["clap"] = *e.clap;
      os << j.dump() << '\n';
    }
    json s{{"summary", true}, {"extractor", extractor}, {"fad", fad},  {"kl", kl},
           {"clap_a", clap_a}, {"clap", clap},         {"n", examples.size()}, {"config", config}};
    os << s.dump() << '\n';
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "metric   value        extractor\n";
    os << "FAD      " << std::setw(12) << fad << ' ' << extractor << '\n';
    os << "KL       " << std::setw(12) << kl << ' ' << extractor << '\n';
    os << "CLAP     " << std::setw(12) << clap << ' ' << extractor << " (label prototypes, " << clap_count << " clips)\n";
    os << "CLAP_A   " << std::setw(12) << clap_a << ' ' << extractor << '\n';
    os << "examples " << examples.size() << '\n';
    return os.str();
  }

  /// Writes <stem>.jsonl and <stem>.txt.
  void write(const fs::path& stem) const {
    write_atomically(fs::path(stem.string() + ".jsonl"), [&](std::ostream& os) { os << jsonl(); });
    write_atomically(fs::path(stem.string() + ".txt"), [&](std::ostream& os) { os << table(); });
  }
};

/// Labels named by a record's regions, falling back to catalog words in the caption.
inline std::vector<std::string> record_labels(const forge::ManifestRecord& r, const EventClassifier& clf) {
  std::vector<std::string> out;
  for (const auto& g : r.regions)
    if (std::find(out.begin(), out.end(), g.label) == out.end()) out.push_back(g.label);
  if (out.empty())
    for (const auto& l : clf.labels())
      if (r.target_caption.find(l) != std::string::npos) out.push_back(l);
  return out;
}

/// Metrics from already-analyzed pairs; `labels[i]` are the target labels of pair i.
inline MetricReport score_pairs(const std::vector<std::string>& ids, const std::vector<EventClassifier::Output>& gen,
                                const std::vector<EventClassifier::Output>& tgt,
                                const std::vector<std::vector<std::string>>& labels, const EventClassifier& clf) {
  REFGEN_CHECK(gen.size() == tgt.size() && ids.size() == gen.size(), "score_pairs: size mismatch");
  MetricReport rep;
  rep.extractor = clf.id();
  const int d = clf.embed_dim();
  FeatureSet fg{Eigen::MatrixXd(gen.size(), d), rep.extractor}, ft{Eigen::MatrixXd(tgt.size(), d), rep.extractor};
  for (std::size_t i = 0; i < gen.size(); ++i) {
    for (int j = 0; j < d; ++j) {
      fg.rows(i, j) = gen[i].embedding[j];
      ft.rows(i, j) = tgt[i].embedding[j];
    }
    ExampleMetrics m;
    m.id = ids[i];
    m.kl = kl_divergence(tgt[i].probs, gen[i].probs);
    m.clap_a = clap_a_score(tgt[i].embedding, gen[i].embedding);
    const auto te = clf.text_embedding(labels[i]);
    if (!te.empty()) m.clap = clap_score(gen[i].embedding, te);
    m.predicted = clf.labels()[std::max_element(gen[i].probs.begin(), gen[i].probs.end()) - gen[i].probs.begin()];
    rep.kl += m.kl;
    rep.clap_a += m.clap_a;
    if (m.clap) {
      rep.clap += *m.clap;
      ++rep.clap_count;
    }
    rep.examples.push_back(std::move(m));
  }
  const double n = static_cast<double>(gen.size());
  rep.kl /= n;
  rep.clap_a /= n;
  if (rep.clap_count) rep.clap /= static_cast<double>(rep.clap_count);
  rep.fad = frechet_distance(fit_gaussian(fg), fit_gaussian(ft));
  return rep;
}

/// Pairs generated and target records by id. Every target id needs a
/// generated counterpart and vice versa.
inline MetricReport evaluate_manifest(const fs::path& generated, const fs::path& target, const EventClassifier& clf) {
  const auto gm = forge::read_manifest(generated);
  const auto tm = forge::read_manifest(target);
  std::map<std::string, const forge::ManifestRecord*> gen_by_id;
  for (const auto& r : gm.records) gen_by_id[r.id] = &r;
  std::set<std::string> tgt_ids;
  for (const auto& r : tm.records) tgt_ids.insert(r.id);
  std::vector<std::string> missing_gen, missing_tgt;
  for (const auto& r : tm.records)
    if (!gen_by_id.count(r.id)) missing_gen.push_back(r.id);
  for (const auto& r : gm.records)
    if (!tgt_ids.count(r.id)) missing_tgt.push_back(r.id);
  if (!missing_gen.empty() || !missing_tgt.empty()) {
    std::string msg = "evaluate_manifest: ids do not align;";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" missing from ") + what + ":";
      for (std::size_t i = 0; i < ids.size() && i < 20; ++i) msg += " " + ids[i];
      if (ids.size() > 20) msg += " (+" + std::to_string(ids.size() - 20) + " more)";
    };
    list("generated", missing_gen);
    list("target", missing_tgt);
    throw ValidationError(msg);
  }
  if (tm.records.size() < 2) throw ValidationError("evaluate_manifest: need at least 2 pairs for FAD");

  const int rate = clf.mel_params().sample_rate;
  std::vector<std::string> ids;
  std::vector<EventClassifier::Output> gen, tgt;
  std::vector<std::vector<std::string>> labels;
  for (const auto& r : tm.records) {
    const auto* g = gen_by_id.at(r.id);
    ids.push_back(r.id);
    tgt.push_back(clf.analyze(bank::ingest_wav(tm.resolve(r.target_path), rate)));
    gen.push_back(clf.analyze(bank::ingest_wav(gm.resolve(g->target_path), rate)));
    labels.push_back(record_labels(r, clf));
  }
  auto rep = score_pairs(ids, gen, tgt, labels, clf);
  rep.config = "generated=" + generated.string() + " target=" + target.string();
  return rep;
}

}  // namespace refgen::eval
