#pragma once

// Subcommand implementations behind the refgen executable.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>

#include "refgen/audio/wav.hpp"
#include "refgen/cli/run_config.hpp"
#include "refgen/eval/report.hpp"
#include "refgen/forge/manifest.hpp"
#include "refgen/gen/sample.hpp"

namespace refgen::cli {

/// Exit status per error category.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Validation: return 3;
    case ErrorKind::Io: return 4;
    case ErrorKind::Forge: return 5;
    case ErrorKind::Training: return 6;
  }
  return 1;
}

inline void write_echo(const RunConfig& c) {
  write_atomically(c.out_dir / (c.subcommand + ".config.ini"), [&](std::ostream& os) { os << echo(c); });
}

inline fs::path bank_file(const RunConfig& c) { return c.paths.bank.empty() ? c.out_dir / "bank.tsv" : c.paths.bank; }

/// The catalog at paths.bank (or out_dir/bank.tsv) if present, else the
/// default catalog drawn from the run seed.
inline std::vector<bank::EventSpec> load_bank(const RunConfig& c) {
  const auto p = bank_file(c);
  if (fs::exists(p)) return bank::read_catalog(p);
  if (!c.paths.bank.empty()) throw IoError("event bank not found: " + p.string());
  return bank::default_catalog(c.n_events, derive_seed(c.seed, "bank"));
}

inline std::vector<forge::CustomizedExample> load_examples(const fs::path& manifest, int rate) {
  if (!fs::exists(manifest)) throw IoError("manifest not found: " + manifest.string());
  const auto man = forge::read_manifest(manifest);
  std::vector<forge::CustomizedExample> out;
  for (const auto& r : man.records) {
    try {
      out.push_back(forge::load_example(man, r, rate));
    } catch (const Error& e) {
      throw IoError("example " + r.id + " in " + manifest.string() + ": " + e.what());
    }
  }
  if (out.empty()) throw ValidationError("manifest " + manifest.string() + " has no records");
  return out;
}

inline codec::CodecParams make_codec(const RunConfig& c, const std::vector<forge::CustomizedExample>& examples) {
  codec::CodecParams p;
  if (c.codec_mode == "deterministic") return p;
  std::vector<codec::Mel> mels;
  for (const auto& ex : examples) mels.push_back(codec::mel_forward(ex.target, p.mel));
  codec::VaeTrainConfig vc;
  vc.epochs = c.vae_epochs;
  vc.kl_weight = c.vae_kl_weight;
  vc.seed = derive_seed(c.seed, "codec");
  return codec::train_toy_vae(mels, vc, p.mel).params;
}

struct LoadedModel {
  gen::Encoders enc;
  std::unique_ptr<gen::MrcUnet<float>> net;
};

inline LoadedModel load_model(const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  const auto ar = Archive::load(ckpt);
  return {gen::Encoders::restore(ar), gen::MrcUnet<float>::restore(ar)};
}

inline std::function<void(long, double)> progress(long total, std::ostream& log) {
  const long every = std::max(1L, total / 20);
  return [every, total, &log](long step, double loss) {
    if (step % every == 0 || step == total) log << "step " << step << "/" << total << " loss " << loss << std::endl;
  };
}

inline void write_loss_log(const fs::path& path, const std::vector<double>& losses, int window) {
  const auto sm = gen::smoothed(losses, window);
  write_atomically(path, [&](std::ostream& os) {
    os.precision(9);
    os << "step,loss,smoothed\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << ',' << sm[i] << '\n';
  });
}

// ---------------------------------------------------------------- subcommands

inline int cmd_forge(const RunConfig& c, std::ostream& log = std::cout) {
  const auto bank_specs = load_bank(c);
  fs::create_directories(c.out_dir);
  if (!fs::exists(bank_file(c))) bank::write_catalog(c.out_dir / "bank.tsv", bank_specs);
  const auto paths = forge::build_dataset(bank_specs, c.forge, c.out_dir);
  write_echo(c);
  log << "wrote " << paths.train_manifest.string() << " and " << paths.test_manifest.string() << '\n';
  return 0;
}

inline int cmd_train(const RunConfig& c, std::ostream& log = std::cout) {
  const auto examples = load_examples(c.train_manifest(), codec::MelParams{}.sample_rate);
  fs::create_directories(c.out_dir);
  gen::TrainState s;
  gen::Encoders enc{codec::CodecParams{}, text::TextEncoder<float>(1, 0), 1.0};
  if (c.resume && fs::exists(c.checkpoint())) {
    s = gen::resume_training(c.checkpoint(), c.train, &enc);
    log << "resuming from step " << s.step << '\n';
  } else {
    enc.codec = make_codec(c, examples);
    enc.text = text::TextEncoder<float>(c.model.d_text, derive_seed(c.seed, "text"));
    enc.latent_scale = gen::fit_latent_scale(examples, enc.codec);
    auto mc = c.model;
    mc.latent_channels = enc.codec.channels();
    mc.latent_time = enc.codec.latent_time();
    mc.latent_freq = enc.codec.latent_freq();
    s = gen::start_training(std::make_unique<gen::MrcUnet<float>>(mc), c.train);
  }
  std::vector<gen::EncodedExample> data;
  for (const auto& ex : examples) data.push_back(enc.encode(ex));
  write_echo(c);
  gen::train_loop(s, data, enc, c.train, progress(c.train.steps, log));
  gen::save_checkpoint(c.checkpoint(), s, enc, c.train);
  write_loss_log(c.out_dir / "train_loss.csv", s.losses, c.train.smooth_window);
  log << "checkpoint " << c.checkpoint().string() << '\n';
  return 0;
}

/// "path|caption;path|caption" -> reference pairs; regions cover each whole clip.
inline std::vector<forge::ReferencePair> parse_references(const std::string& spec, int rate) {
  std::vector<forge::ReferencePair> out;
  std::istringstream is(spec);
  for (std::string item; std::getline(is, item, ';');) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    const auto bar = item.find('|');
    if (bar == std::string::npos) throw ConfigError("generate.references entry '" + item + "' needs the form path|caption");
    const fs::path p = item.substr(0, bar);
    if (!fs::exists(p)) throw IoError("reference audio not found: " + p.string());
    auto clip = bank::ingest_wav(p, rate);
    clip.label.reset();
    const std::string caption = item.substr(bar + 1);
    const double dur = std::min(clip.duration(), audio::kClipSeconds);
    out.push_back({clip.fitted(audio::kClipSeconds), caption, {{0.0, dur, "", caption}}});
  }
  return out;
}

inline int cmd_generate(const RunConfig& c, std::ostream& log = std::cout) {
  const auto m = load_model(c.checkpoint());
  const int rate = m.enc.codec.mel.sample_rate;
  gen::GenerateOptions opt;
  opt.steps = c.gen_steps;
  opt.guidance = c.guidance;
  opt.griffin_lim_iterations = c.griffin_lim_iterations;
  const auto out_manifest = c.generated_manifest();
  const auto dir = out_manifest.parent_path().empty() ? fs::path(".") : out_manifest.parent_path();
  fs::create_directories(dir / "audio");
  std::vector<forge::ManifestRecord> records;

  auto emit = [&](const std::string& id, const std::string& caption, const std::vector<forge::ReferencePair>& refs,
                  const std::vector<forge::ReferenceRecord>& ref_records) {
    opt.seed = derive_seed(derive_seed(c.seed, "generate"), id);
    const auto clip = gen::generate(*m.net, m.enc, caption, refs, opt);
    forge::ManifestRecord r;
    r.id = id;
    r.target_path = "audio/" + id + ".wav";
    r.target_caption = caption;
    r.references = ref_records;
    audio::write_wav(dir / r.target_path, clip);
    records.push_back(std::move(r));
    log << "generated " << (dir / ("audio/" + id + ".wav")).string() << '\n';
  };

  if (!c.prompt.empty()) {
    const auto refs = parse_references(c.references, rate);
    std::vector<forge::ReferenceRecord> rr;
    for (const auto& r : refs) rr.push_back({"", r.caption, r.regions});
    emit("prompt", c.prompt, refs, rr);
  } else {
    const auto man_path = c.test_manifest();
    if (!fs::exists(man_path)) throw IoError("manifest not found: " + man_path.string());
    const auto man = forge::read_manifest(man_path);
    long n = 0;
    for (const auto& r : man.records) {
      if (c.gen_count > 0 && n++ >= c.gen_count) break;
      const auto ex = forge::load_example(man, r, rate);
      auto rr = r.references;
      for (auto& ref : rr)
        if (!ref.path.empty()) ref.path = fs::absolute(man.resolve(ref.path)).lexically_normal().string();
      emit(r.id, r.target_caption, ex.references, rr);
    }
  }
  forge::write_manifest(out_manifest, records);
  write_echo(c);
  return 0;
}

inline int cmd_adapt(const RunConfig& c, std::ostream& log = std::cout) {
  const auto base = c.paths.base_checkpoint.empty() ? c.checkpoint() : c.paths.base_checkpoint;
  auto m = load_model(base);
  const auto examples = load_examples(c.train_manifest(), m.enc.codec.mel.sample_rate);
  std::vector<gen::EncodedExample> data;
  for (const auto& ex : examples) data.push_back(m.enc.encode(ex));
  fs::create_directories(c.out_dir);
  write_echo(c);
  auto s = gen::adapt_reference_count(std::move(m.net), c.k_new, data, m.enc, c.adapt, progress(c.adapt.steps, log));
  const auto out = c.out_dir / ("adapted_k" + std::to_string(c.k_new) + ".ckpt");
  gen::save_checkpoint(out, s, m.enc, c.adapt);
  write_loss_log(c.out_dir / "adapt_loss.csv", s.losses, c.train.smooth_window);
  log << "checkpoint " << out.string() << '\n';
  return 0;
}

inline eval::EventClassifier load_or_train_classifier(const RunConfig& c, std::ostream& log) {
  const auto p = c.classifier_path();
  if (fs::exists(p)) return eval::EventClassifier::restore(Archive::load(p));
  if (!c.paths.classifier.empty()) throw IoError("classifier not found: " + p.string());
  auto res = eval::train_event_classifier(load_bank(c), c.classifier);
  log << "event classifier held-out accuracy " << res.heldout_accuracy << '\n';
  Archive ar;
  res.model.store(ar);
  ar.save(p);
  return std::move(res.model);
}

inline int cmd_eval(const RunConfig& c, std::ostream& log = std::cout) {
  for (const auto& p : {c.generated_manifest(), c.test_manifest()})
    if (!fs::exists(p)) throw IoError("manifest not found: " + p.string());
  fs::create_directories(c.out_dir);
  const auto clf = load_or_train_classifier(c, log);
  auto rep = eval::evaluate_manifest(c.generated_manifest(), c.test_manifest(), clf);
  rep.write(c.out_dir / "report");
  write_echo(c);
  log << rep.table();
  return 0;
}

// ---------------------------------------------------------------- selftest

/// Property checks that need no data on disk. Prints one line per check.
inline bool cmd_selftest(std::ostream& log = std::cout) {
  bool all = true;
  auto check = [&](const std::string& name, const std::function<bool()>& fn) {
    bool ok = false;
    std::string why;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      why = std::string(" (") + e.what() + ")";
    }
    log << (ok ? "PASS " : "FAIL ") << name << why << '\n';
    all = all && ok;
  };
  Rng rng(2024);

  check("flow endpoints", [&] {
    for (int t = 0; t < 20; ++t) {
      auto z0 = Tensor<float>::randn({2, 8, 4}, rng), z1 = Tensor<float>::randn({2, 8, 4}, rng);
      if (gen::flow_interpolate(z0, z1, 0.0).data != z0.data) return false;
      const auto e = gen::flow_interpolate(z0, z1, 1.0);
      double err = 0, n0 = 0;
      for (std::size_t i = 0; i < z0.size(); ++i) {
        err += (e.data[i] - z1.data[i]) * (e.data[i] - z1.data[i]);
        n0 += z0.data[i] * z0.data[i];
      }
      if (std::sqrt(err) > gen::kSigma * std::sqrt(n0) + 1e-6 * std::sqrt(n0)) return false;
    }
    return true;
  });

  check("velocity is independent of lambda", [&] {
    auto z0 = Tensor<double>::randn({3, 5}, rng), z1 = Tensor<double>::randn({3, 5}, rng);
    const auto v = gen::velocity_target(z0, z1);
    for (int i = 0; i < 10; ++i) {
      (void)gen::flow_interpolate(z0, z1, rng.uniform());
      if (gen::velocity_target(z0, z1).data != v.data) return false;
    }
    return true;
  });

  check("zero-init reference neutrality", [&] {
    gen::MrcConfig mc;
    mc.n_hidden = 4;
    mc.d_text = 8;
    mc.latent_time = 16;
    mc.latent_freq = 8;
    gen::MrcUnet<float> net(mc);
    nn::NoGradGuard ng;
    for (int t = 0; t < 3; ++t) {
      auto z = nn::Var<float>(Tensor<float>::randn({1, 16, 16, 8}, rng));
      gen::Conditioning<float> c{nn::Var<float>(Tensor<float>::randn({1, 16, 48, 8}, rng)),
                                 nn::Var<float>(Tensor<float>::randn({1, 8, 150}, rng)),
                                 nn::Var<float>(Tensor<float>::randn({1, 8, 50}, rng))};
      gen::Conditioning<float> n{nn::Var<float>(Tensor<float>({1, 16, 48, 8})), nn::Var<float>(Tensor<float>({1, 8, 150})),
                                 c.prompt};
      const double lam = rng.uniform();
      if (net.forward(z, {lam}, c).value().data != net.forward(z, {lam}, n).value().data) return false;
    }
    return true;
  });

  check("euler sampler telescopes under constant velocity", [&] {
    const Shape shape{2, 4, 4};
    const auto v = Tensor<float>::randn({1, 2, 4, 4}, rng);
    gen::VelocityModel<float> oracle = [&](const nn::Var<float>& z, const std::vector<double>&, const gen::Conditioning<float>&) {
      Tensor<float> out(z.shape());
      for (int b = 0; b < z.dim(0); ++b) std::copy(v.data.begin(), v.data.end(), out.data.begin() + b * v.size());
      return nn::Var<float>(std::move(out));
    };
    gen::Conditioning<float> c{nn::Var<float>(Tensor<float>({1, 1, 1, 1})), nn::Var<float>(Tensor<float>({1, 1, 1})),
                               nn::Var<float>(Tensor<float>({1, 1, 1}))};
    for (int steps : {1, 5, 25, 50}) {
      Rng r(steps);
      Tensor<float> z0;
      const auto z = gen::sample_ode<float>(oracle, c, c, shape, steps, 2.0, r, &z0);
      for (std::size_t i = 0; i < z.size(); ++i)
        if (z.data[i] != static_cast<float>(static_cast<double>(z0.data[i]) + static_cast<double>(v.data[i]))) return false;
    }
    try {
      Rng r(0);
      gen::sample_ode<float>(oracle, c, c, shape, 51, 2.0, r);
      return false;
    } catch (const ValidationError&) {
    }
    return true;
  });

  check("metric oracles", [&] {
    eval::GaussianStats a{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    eval::GaussianStats b{Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    if (std::abs(eval::frechet_distance(a, b) - 1.0) > 1e-6) return false;
    if (std::abs(eval::kl_divergence({0.5, 0.5}, {0.9, 0.1}) - 0.5108) > 1e-3) return false;
    if (std::abs(eval::kl_divergence({1, 0, 0, 0}, {0.25, 0.25, 0.25, 0.25}) - std::log(4.0)) > 1e-12) return false;
    if (std::abs(eval::clap_score({1, 0}, {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}) - 0.7071) > 1e-4) return false;
    return eval::clap_a_score({0, 0}, {1, 1}) == 0.0 && std::abs(eval::clap_a_score({1, 2}, {-1, -2}) + 1.0) < 1e-12;
  });

  log << (all ? "selftest passed" : "selftest FAILED") << '\n';
  return all;
}

}  // namespace refgen::cli
