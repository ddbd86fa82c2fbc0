#pragma once

// INI run configuration: parsing with line-numbered errors, command-line and
// environment overrides, and an echo that reproduces the run.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "refgen/core/error.hpp"
#include "refgen/eval/classifier.hpp"
#include "refgen/forge/forge.hpp"
#include "refgen/gen/mrc_unet.hpp"
#include "refgen/gen/train.hpp"

namespace refgen::cli {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

struct RunConfig {
  std::string subcommand;
  std::uint64_t seed = 0;
  fs::path out_dir = "out";

  struct Paths {
    fs::path bank, train_manifest, test_manifest, checkpoint, base_checkpoint, classifier, generated_manifest;
  } paths;

  forge::ForgeConfig forge;
  int n_events = 12;

  std::string codec_mode = "deterministic";
  int vae_epochs = 3;
  double vae_kl_weight = 1e-4;

  gen::MrcConfig model;
  gen::TrainConfig train;
  bool resume = false;

  std::string prompt;
  std::string references;  // "path|caption;path|caption"
  int gen_steps = 25;
  double guidance = 2.0;
  int griffin_lim_iterations = 32;
  long gen_count = 0;  // 0 = every record of the test manifest

  int k_new = 4;
  gen::TrainConfig adapt;

  eval::ClassifierConfig classifier;

  // Derived defaults for unset paths.
  fs::path train_manifest() const { return paths.train_manifest.empty() ? out_dir / "train.jsonl" : paths.train_manifest; }
  fs::path test_manifest() const { return paths.test_manifest.empty() ? out_dir / "test.jsonl" : paths.test_manifest; }
  fs::path checkpoint() const { return paths.checkpoint.empty() ? out_dir / "model.ckpt" : paths.checkpoint; }
  fs::path classifier_path() const { return paths.classifier.empty() ? out_dir / "classifier.bin" : paths.classifier; }
  fs::path generated_manifest() const {
    return paths.generated_manifest.empty() ? out_dir / "generated" / "generated.jsonl" : paths.generated_manifest;
  }
};

namespace detail {

/// "section.key" -> 1-based line number, from a plain scan of the file.
inline std::map<std::string, int> key_lines(const std::string& text) {
  std::map<std::string, int> out;
  std::istringstream is(text);
  std::string line, section;
  int n = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos) out[(section.empty() ? "" : section + ".") + trim(t.substr(0, eq))] = n;
  }
  return out;
}

class Reader {
 public:
  Reader(const pt::ptree& tree, std::map<std::string, int> lines, std::string source)
      : tree_(tree), lines_(std::move(lines)), source_(std::move(source)) {}

  template <class V>
  void get(const std::string& key, V& out) {
    used_.insert(key);
    auto node = tree_.get_optional<std::string>(key);
    if (!node) return;
    std::istringstream is(*node);
    V v{};
    if constexpr (std::is_same_v<V, std::string>) {
      v = *node;
    } else if constexpr (std::is_same_v<V, bool>) {
      const auto& s = *node;
      if (s == "true" || s == "1" || s == "yes") v = true;
      else if (s == "false" || s == "0" || s == "no") v = false;
      else fail(key, "expected a boolean, got '" + s + "'");
    } else {
      is >> v;
      if (!is || !(is >> std::ws).eof()) fail(key, "cannot parse '" + *node + "'");
    }
    out = v;
  }

  void get(const std::string& key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  /// Rejects keys nobody asked for (typos).
  void check_unused() const {
    for (const auto& [section, sub] : tree_)
      for (const auto& [key, v] : sub) {
        (void)v;
        const std::string full = section + "." + key;
        if (!used_.count(full)) fail(full, "unknown key");
      }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    auto it = lines_.find(key);
    const std::string where = it == lines_.end() ? source_ : source_ + ":" + std::to_string(it->second);
    throw ConfigError(where + ": " + key + ": " + msg);
  }

 private:
  const pt::ptree& tree_;
  std::map<std::string, int> lines_;
  std::string source_;
  std::set<std::string> used_;
};

template <class Fn>
void visit(RunConfig& c, Fn&& f) {
  f("run.seed", c.seed);
  f("run.out_dir", c.out_dir);
  f("paths.bank", c.paths.bank);
  f("paths.train_manifest", c.paths.train_manifest);
  f("paths.test_manifest", c.paths.test_manifest);
  f("paths.checkpoint", c.paths.checkpoint);
  f("paths.base_checkpoint", c.paths.base_checkpoint);
  f("paths.classifier", c.paths.classifier);
  f("paths.generated_manifest", c.paths.generated_manifest);
  f("forge.n_examples", c.forge.n_examples);
  f("forge.k_max", c.forge.k_max);
  f("forge.snr_lo_db", c.forge.snr_lo_db);
  f("forge.snr_hi_db", c.forge.snr_hi_db);
  f("forge.train_fraction", c.forge.train_fraction);
  f("forge.max_distinct_events", c.forge.max_distinct_events);
  f("forge.n_events", c.n_events);
  f("codec.mode", c.codec_mode);
  f("codec.vae_epochs", c.vae_epochs);
  f("codec.vae_kl_weight", c.vae_kl_weight);
  f("model.n_hidden", c.model.n_hidden);
  f("model.k_max", c.model.k_max);
  f("model.d_text", c.model.d_text);
  f("model.sigma_data", c.model.sigma_data);
  f("model.pos_channels", c.model.pos_channels);
  f("train.steps", c.train.steps);
  f("train.batch", c.train.batch);
  f("train.lr", c.train.lr);
  f("train.warmup", c.train.warmup);
  f("train.cosine", c.train.cosine);
  f("train.weight_decay", c.train.weight_decay);
  f("train.mask_p", c.train.mask_p);
  f("train.drop_p", c.train.drop_p);
  f("train.cfg_dropout", c.train.cfg_dropout);
  f("train.checkpoint_every", c.train.checkpoint_every);
  f("train.smooth_window", c.train.smooth_window);
  f("train.resume", c.resume);
  f("generate.prompt", c.prompt);
  f("generate.references", c.references);
  f("generate.steps", c.gen_steps);
  f("generate.guidance", c.guidance);
  f("generate.griffin_lim_iterations", c.griffin_lim_iterations);
  f("generate.count", c.gen_count);
  f("adapt.k_new", c.k_new);
  f("adapt.steps", c.adapt.steps);
  f("adapt.batch", c.adapt.batch);
  f("adapt.lr", c.adapt.lr);
  f("adapt.warmup", c.adapt.warmup);
  f("eval.per_class_train", c.classifier.per_class_train);
  f("eval.per_class_test", c.classifier.per_class_test);
  f("eval.epochs", c.classifier.epochs);
  f("eval.min_accuracy", c.classifier.min_accuracy);
}

}  // namespace detail

inline const std::vector<std::string>& path_keys() {
  static const std::vector<std::string> k = {"run.out_dir",         "paths.bank",       "paths.train_manifest",
                                             "paths.test_manifest", "paths.checkpoint", "paths.base_checkpoint",
                                             "paths.classifier",    "paths.generated_manifest"};
  return k;
}

/// REFGEN_OUT_DIR, REFGEN_BANK, REFGEN_TRAIN_MANIFEST, ...
inline std::string env_name(const std::string& key) {
  std::string s = "REFGEN_" + key.substr(key.find('.') + 1);
  for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

inline RunConfig defaults_for(const std::string& sub) {
  RunConfig c;
  c.subcommand = sub;
  c.adapt.steps = 1000;
  c.adapt.batch = 1;
  c.adapt.lr = 1e-3;
  c.adapt.warmup = 50;
  return c;
}

/// Parses `text` (INI) on top of the defaults, then applies `section.key=value`
/// overrides, then REFGEN_* environment variables for path keys.
inline RunConfig parse_run_config(const std::string& sub, const std::string& text, const std::string& source,
                                  const std::vector<std::string>& overrides = {}, bool use_env = true) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  auto lines = detail::key_lines(text);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || o.find('.') > eq) throw ConfigError("override '" + o + "' must look like section.key=value");
    tree.put(o.substr(0, eq), o.substr(eq + 1));
    lines.erase(o.substr(0, eq));
  }
  if (use_env)
    for (const auto& key : path_keys())
      if (const char* v = std::getenv(env_name(key).c_str())) {
        tree.put(key, std::string(v));
        lines.erase(key);
      }
  RunConfig c = defaults_for(sub);
  detail::Reader r(tree, lines, source);
  std::string mode = forge::mode_name(c.forge.mode), attention = "011";
  r.get("forge.mode", mode);
  r.get("model.attention", attention);
  long test_count = -1;
  r.get("forge.test_count", test_count);
  detail::visit(c, [&](const std::string& key, auto& field) { r.get(key, field); });
  r.check_unused();
  try {
    c.forge.mode = forge::parse_mode(mode);
  } catch (const ValidationError& e) {
    r.fail("forge.mode", e.what());
  }
  if (attention.size() != gen::kLevels || attention.find_first_not_of("01") != std::string::npos)
    r.fail("model.attention", "expected " + std::to_string(gen::kLevels) + " characters of 0/1");
  for (int l = 0; l < gen::kLevels; ++l) c.model.attention[l] = attention[l] == '1';
  if (test_count >= 0) c.forge.test_count = static_cast<std::size_t>(test_count);
  if (c.codec_mode != "deterministic" && c.codec_mode != "vae") r.fail("codec.mode", "expected deterministic or vae");
  // One seed drives every module through named sub-streams.
  c.forge.rng_seed = derive_seed(c.seed, "forge");
  c.model.seed = derive_seed(c.seed, "model");
  c.train.seed = derive_seed(c.seed, "train-run");
  c.adapt.seed = derive_seed(c.seed, "adapt-run");
  c.classifier.seed = derive_seed(c.seed, "eval");
  c.train.checkpoint_path = c.checkpoint().string();
  c.adapt.mask_p = c.train.mask_p;
  c.adapt.drop_p = c.train.drop_p;
  c.adapt.cfg_dropout = c.train.cfg_dropout;
  c.adapt.weight_decay = c.train.weight_decay;
  return c;
}

inline RunConfig load_run_config(const std::string& sub, const fs::path& path, const std::vector<std::string>& overrides = {},
                                 bool use_env = true) {
  if (path.empty()) return parse_run_config(sub, "", "<defaults>", overrides, use_env);
  std::ifstream is(path);
  if (!is) throw IoError("config file not found: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(sub, ss.str(), path.string(), overrides, use_env);
}

/// Every effective setting as INI; feeding it back yields the same RunConfig.
inline std::string echo(RunConfig c) {
  std::map<std::string, std::map<std::string, std::string>> sections;
  auto put = [&](const std::string& key, const std::string& v) {
    const auto dot = key.find('.');
    sections[key.substr(0, dot)][key.substr(dot + 1)] = v;
  };
  detail::visit(c, [&](const std::string& key, auto& field) {
    using V = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<V, fs::path>) {
      put(key, field.string());
    } else if constexpr (std::is_same_v<V, std::string>) {
      put(key, field);
    } else if constexpr (std::is_same_v<V, bool>) {
      put(key, field ? "true" : "false");
    } else if constexpr (std::is_floating_point_v<V>) {
      char buf[32];
      put(key, std::string(buf, std::to_chars(buf, buf + sizeof buf, field).ptr));
    } else {
      put(key, std::to_string(field));
    }
  });
  put("forge.mode", forge::mode_name(c.forge.mode));
  put("forge.test_count", c.forge.test_count ? std::to_string(*c.forge.test_count) : "-1");
  std::string a;
  for (bool b : c.model.attention) a += b ? '1' : '0';
  put("model.attention", a);
  std::ostringstream os;
  os << "; refgen " << c.subcommand << " effective configuration\n";
  for (const auto& [section, kv] : sections) {
    os << "\n[" << section << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  }
  return os.str();
}

}  // namespace refgen::cli
