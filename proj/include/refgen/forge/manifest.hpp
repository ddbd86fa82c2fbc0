#pragma once

// Line-delimited JSON manifests and on-disk dataset emission.
//
// Record: {id, mode, target_path, target_caption,
//          references: [{path, caption, regions}], regions: [{start_s, end_s, label, event_id}],
//          snr_db: [...], peak_scale}
// Paths are stored relative to the manifest's directory. Null slots have path "".

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "refgen/forge/forge.hpp"

namespace refgen::forge {

namespace fs = std::filesystem;
using nlohmann::json;

struct ReferenceRecord {
  std::string path;  // empty for a null slot
  std::string caption;
  std::vector<Region> regions;
};

struct ManifestRecord {
  std::string id;
  std::string mode = "concatenation";
  std::string target_path;
  std::string target_caption;
  std::vector<ReferenceRecord> references;
  std::vector<Region> regions;
  std::vector<double> snr_db;
  double peak_scale = 1.0;
};

struct Manifest {
  fs::path dir;  // base for relative paths
  std::vector<ManifestRecord> records;

  fs::path resolve(const std::string& p) const {
    fs::path q(p);
    return q.is_absolute() ? q : dir / q;
  }
};

inline json regions_json(const std::vector<Region>& rs) {
  json a = json::array();
  for (const auto& r : rs) a.push_back({{"start_s", r.start_s}, {"end_s", r.end_s}, {"label", r.label}, {"event_id", r.event_id}});
  return a;
}

inline std::vector<Region> regions_from(const json& a) {
  std::vector<Region> out;
  for (const auto& r : a)
    out.push_back({r.at("start_s").get<double>(), r.at("end_s").get<double>(), r.value("event_id", ""),
                   r.at("label").get<std::string>()});
  return out;
}

inline std::string to_json_line(const ManifestRecord& m) {
  json refs = json::array();
  for (const auto& r : m.references) refs.push_back({{"path", r.path}, {"caption", r.caption}, {"regions", regions_json(r.regions)}});
  json j = {{"id", m.id},
            {"mode", m.mode},
            {"target_path", m.target_path},
            {"target_caption", m.target_caption},
            {"references", refs},
            {"regions", regions_json(m.regions)},
            {"snr_db", m.snr_db},
            {"peak_scale", m.peak_scale}};
  return j.dump();
}

inline ManifestRecord from_json_line(const std::string& line) {
  json j = json::parse(line);
  ManifestRecord m;
  m.id = j.at("id").get<std::string>();
  m.mode = j.value("mode", "concatenation");
  m.target_path = j.at("target_path").get<std::string>();
  m.target_caption = j.at("target_caption").get<std::string>();
  for (const auto& r : j.at("references"))
    m.references.push_back({r.at("path").get<std::string>(), r.at("caption").get<std::string>(),
                            r.contains("regions") ? regions_from(r["regions"]) : std::vector<Region>{}});
  if (j.contains("regions")) m.regions = regions_from(j["regions"]);
  if (j.contains("snr_db")) m.snr_db = j["snr_db"].get<std::vector<double>>();
  m.peak_scale = j.value("peak_scale", 1.0);
  return m;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  write_atomically(path, [&](std::ostream& os) {
    for (const auto& r : records) os << to_json_line(r) << '\n';
  });
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.records.push_back(from_json_line(line));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

/// Loads a record back into memory. Audio is fitted to 10 s for targets only.
inline CustomizedExample load_example(const Manifest& man, const ManifestRecord& r, int rate = audio::kDefaultRate) {
  CustomizedExample ex;
  ex.id = r.id;
  ex.mode = parse_mode(r.mode);
  ex.target = bank::ingest_wav(man.resolve(r.target_path), rate).fitted(audio::kClipSeconds);
  ex.target.label.reset();
  ex.target_caption = r.target_caption;
  for (const auto& ref : r.references) {
    if (ref.path.empty()) {
      ex.references.push_back(ReferencePair::null(rate));
      continue;
    }
    auto clip = bank::ingest_wav(man.resolve(ref.path), rate);
    clip.label.reset();
    ex.references.push_back({clip, ref.caption, ref.regions});
  }
  ex.regions = r.regions;
  ex.snr_db = r.snr_db;
  ex.peak_scale = r.peak_scale;
  return ex;
}

struct DatasetPaths {
  fs::path train_manifest, test_manifest;
};

inline std::string example_id(Mode mode, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%06zu", mode_name(mode)[0], index);
  return buf;
}

/// Writes WAVs under out_dir/audio and train.jsonl / test.jsonl. Example i is
/// built from derive_seed(rng_seed, i), so output never depends on build order.
inline DatasetPaths build_dataset(const std::vector<EventSpec>& bank, const ForgeConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "audio", ec);
  if (ec || !fs::is_directory(out_dir / "audio")) throw IoError("cannot create output directory " + out_dir.string());

  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < cfg.n_examples; ++i) {
    auto ex = build_example(bank, cfg, derive_seed(cfg.rng_seed, static_cast<std::uint64_t>(i)));
    ManifestRecord m;
    m.id = example_id(cfg.mode, i);
    m.mode = mode_name(cfg.mode);
    m.target_path = "audio/" + m.id + "_target.wav";
    audio::write_wav(out_dir / m.target_path, ex.target);
    m.target_caption = ex.target_caption;
    for (std::size_t k = 0; k < ex.references.size(); ++k) {
      const auto& ref = ex.references[k];
      ReferenceRecord rr{"", ref.caption, ref.regions};
      if (!ref.is_null()) {
        rr.path = "audio/" + m.id + "_ref" + std::to_string(k) + ".wav";
        audio::write_wav(out_dir / rr.path, ref.audio);
      }
      m.references.push_back(std::move(rr));
    }
    m.regions = ex.regions;
    m.snr_db = ex.snr_db;
    m.peak_scale = ex.peak_scale;
    records.push_back(std::move(m));
  }

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.rng_seed, "split"));
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t n_test = cfg.n_test();
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + n_test), train_idx(order.begin() + n_test, order.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::vector<ManifestRecord> train, test;
  for (auto i : train_idx) train.push_back(records[i]);
  for (auto i : test_idx) test.push_back(records[i]);

  DatasetPaths out{out_dir / "train.jsonl", out_dir / "test.jsonl"};
  write_manifest(out.train_manifest, train);
  write_manifest(out.test_manifest, test);
  return out;
}

}  // namespace refgen::forge
