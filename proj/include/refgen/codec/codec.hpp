#pragma once

// Mel <-> latent grid. Deterministic mode is a 4x4 space-to-depth rearrangement;
// vae mode is a small convolutional VAE whose posterior mean is the latent.

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "refgen/codec/mel.hpp"
#include "refgen/core/archive.hpp"
#include "refgen/nn/optim.hpp"

namespace refgen::codec {

using Latent = Tensor<float>;  // (C, T, F)

enum class CodecMode { Deterministic, Vae };

inline constexpr int kFactor = 4;

inline Latent space_to_depth(const Mel& mel) {
  REFGEN_CHECK(mel.rank() == 2 && mel.dim(0) % kFactor == 0 && mel.dim(1) % kFactor == 0,
               "space_to_depth: mel shape " + shape_str(mel.shape) + " not divisible by 4");
  const int t = mel.dim(0) / kFactor, f = mel.dim(1) / kFactor, w = mel.dim(1);
  Latent out({kFactor * kFactor, t, f});
  for (int i = 0; i < kFactor; ++i)
    for (int j = 0; j < kFactor; ++j)
      for (int a = 0; a < t; ++a)
        for (int b = 0; b < f; ++b)
          out.data[((i * kFactor + j) * t + a) * f + b] = mel.data[(a * kFactor + i) * w + b * kFactor + j];
  return out;
}

inline Mel depth_to_space(const Latent& z) {
  REFGEN_CHECK(z.rank() == 3 && z.dim(0) == kFactor * kFactor,
               "depth_to_space: latent shape " + shape_str(z.shape) + " needs 16 channels");
  const int t = z.dim(1), f = z.dim(2), w = f * kFactor;
  Mel out({t * kFactor, w});
  for (int i = 0; i < kFactor; ++i)
    for (int j = 0; j < kFactor; ++j)
      for (int a = 0; a < t; ++a)
        for (int b = 0; b < f; ++b)
          out.data[(a * kFactor + i) * w + b * kFactor + j] = z.data[((i * kFactor + j) * t + a) * f + b];
  return out;
}

/// Toy mel VAE working on the 4x4 space-to-depth grid, so every layer runs at
/// latent resolution. Mels are scaled by 1/4 on the way in.
struct ToyVae {
  static constexpr int kLatent = 8;
  static constexpr float kInScale = 0.25f;

  nn::ParamSet<float> params;
  nn::Conv2d<float> e1, e2, mu_head, lv_head, d1, d2, d3;

  explicit ToyVae(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "toy-vae"));
    const int c = kFactor * kFactor;
    e1 = nn::Conv2d<float>(params, "vae.e1", c, 32, 3, rng);
    e2 = nn::Conv2d<float>(params, "vae.e2", 32, 32, 1, rng);
    mu_head = nn::Conv2d<float>(params, "vae.mu", 32, kLatent, 1, rng);
    lv_head = nn::Conv2d<float>(params, "vae.lv", 32, kLatent, 1, rng, 1, true);
    d1 = nn::Conv2d<float>(params, "vae.d1", kLatent, 32, 3, rng);
    d2 = nn::Conv2d<float>(params, "vae.d2", 32, 32, 1, rng);
    d3 = nn::Conv2d<float>(params, "vae.d3", 32, c, 3, rng);
  }

  // x: (N, 16, T/4, F/4) rearranged, scaled mel.
  std::pair<nn::Var<float>, nn::Var<float>> encode(const nn::Var<float>& x) const {
    auto h = nn::silu(e2(nn::silu(e1(x))));
    return {mu_head(h), lv_head(h)};
  }

  nn::Var<float> decode(const nn::Var<float>& z) const { return d3(nn::silu(d2(nn::silu(d1(z))))); }
};

struct CodecParams {
  CodecMode mode = CodecMode::Deterministic;
  MelParams mel;
  std::shared_ptr<ToyVae> vae;

  int channels() const { return mode == CodecMode::Deterministic ? kFactor * kFactor : ToyVae::kLatent; }
  int latent_time() const { return mel.frames / kFactor; }
  int latent_freq() const { return mel.n_mels / kFactor; }
};

inline void check_mel(const Mel& mel, const CodecParams& p) {
  if (mel.rank() != 2 || mel.dim(0) != p.mel.frames || mel.dim(1) != p.mel.n_mels)
    throw ValidationError("mel shape " + shape_str(mel.shape) + ", expected (" + std::to_string(p.mel.frames) + ", " +
                          std::to_string(p.mel.n_mels) + ")");
}

/// (N, 16, T/4, F/4) batch of rearranged mels times the VAE input scale.
inline Tensor<float> vae_input_batch(const std::vector<const Mel*>& mels) {
  const int n = static_cast<int>(mels.size());
  Latent first = space_to_depth(*mels[0]);
  Tensor<float> x({n, first.dim(0), first.dim(1), first.dim(2)});
  const std::size_t per = first.size();
  for (int b = 0; b < n; ++b) {
    Latent z = b == 0 ? first : space_to_depth(*mels[b]);
    for (std::size_t i = 0; i < per; ++i) x.data[b * per + i] = z.data[i] * ToyVae::kInScale;
  }
  return x;
}

inline Latent encode_latent(const Mel& mel, const CodecParams& p) {
  check_mel(mel, p);
  if (p.mode == CodecMode::Deterministic) return space_to_depth(mel);
  REFGEN_CHECK(p.vae != nullptr, "vae codec without weights");
  nn::NoGradGuard ng;
  auto [mu, lv] = p.vae->encode(nn::Var<float>(vae_input_batch({&mel})));
  return mu.value().reshaped({ToyVae::kLatent, p.latent_time(), p.latent_freq()});
}

inline Mel decode_latent(const Latent& z, const CodecParams& p) {
  if (z.rank() != 3 || z.dim(0) != p.channels() || z.dim(1) != p.latent_time() || z.dim(2) != p.latent_freq())
    throw ValidationError("latent shape " + shape_str(z.shape) + " does not match the codec");
  if (p.mode == CodecMode::Deterministic) return depth_to_space(z);
  nn::NoGradGuard ng;
  auto y = p.vae->decode(nn::Var<float>(z.reshaped({1, z.dim(0), z.dim(1), z.dim(2)}))).value();
  Latent grid = y.reshaped({kFactor * kFactor, z.dim(1), z.dim(2)});
  for (auto& v : grid.data) v /= ToyVae::kInScale;
  return depth_to_space(grid);
}

inline Latent encode_clip(const AudioClip& clip, const CodecParams& p) {
  return encode_latent(mel_forward(clip, p.mel), p);
}

struct VaeTrainConfig {
  int epochs = 3;
  double kl_weight = 1e-4;
  int batch = 4;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct VaeTrainResult {
  CodecParams params;
  std::vector<double> epoch_recon;  // mean reconstruction MSE (scaled units) per epoch
  std::vector<double> epoch_kl;
};

inline VaeTrainResult train_toy_vae(const std::vector<Mel>& mels, const VaeTrainConfig& cfg, const MelParams& mp = {}) {
  if (mels.size() < 100) throw ValidationError("train_toy_vae needs at least 100 mels, got " + std::to_string(mels.size()));
  if (cfg.epochs < 0) throw ValidationError("epochs must be >= 0");
  VaeTrainResult res;
  res.params.mode = CodecMode::Vae;
  res.params.mel = mp;
  res.params.vae = std::make_shared<ToyVae>(cfg.seed);
  for (const auto& m : mels) check_mel(m, res.params);
  auto& vae = *res.params.vae;
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = 0.0;
  oc.warmup_steps = 0;
  nn::AdamW<float> opt(vae.params, oc);
  Rng rng(derive_seed(cfg.seed, "vae-train"));
  std::vector<std::size_t> order(mels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double rsum = 0, ksum = 0;
    int nb = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
      std::vector<const Mel*> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch); ++i) batch.push_back(&mels[order[i]]);
      Tensor<float> x = vae_input_batch(batch);
      vae.params.zero_grad();
      auto [mu, lv] = vae.encode(nn::Var<float>(x));
      Tensor<float> eps = Tensor<float>::randn(mu.shape(), rng);
      auto z = nn::reparameterize(mu, lv, eps);
      auto recon = nn::mse(vae.decode(z), x);
      auto kl = nn::gaussian_kl(mu, lv);
      auto loss = cfg.kl_weight > 0 ? nn::add(recon, nn::scale(kl, static_cast<float>(cfg.kl_weight))) : recon;
      if (!std::isfinite(loss.item()))
        throw TrainingError("toy VAE diverged at epoch " + std::to_string(ep) + ", batch " + std::to_string(nb) +
                            " (recon " + std::to_string(recon.item()) + ", kl " + std::to_string(kl.item()) + ")");
      nn::backward(loss);
      opt.step();
      rsum += recon.item();
      ksum += kl.item();
      ++nb;
    }
    res.epoch_recon.push_back(rsum / nb);
    res.epoch_kl.push_back(ksum / nb);
  }
  return res;
}

/// Mean squared error of decode(encode(mel)) against mel, in mel units.
inline double roundtrip_mse(const Mel& mel, const CodecParams& p) {
  Mel r = decode_latent(encode_latent(mel, p), p);
  double s = 0;
  for (std::size_t i = 0; i < mel.size(); ++i) s += (r.data[i] - mel.data[i]) * (r.data[i] - mel.data[i]);
  return s / mel.size();
}

// ---------------------------------------------------------------- persistence

inline void store(Archive& ar, const CodecParams& p) {
  ar.strings["codec.mode"] = p.mode == CodecMode::Deterministic ? "deterministic" : "vae";
  std::ostringstream mel;
  mel.precision(17);
  mel << p.mel.sample_rate << ' ' << p.mel.n_fft << ' ' << p.mel.hop << ' ' << p.mel.n_mels << ' ' << p.mel.frames << ' '
      << p.mel.fmin << ' ' << p.mel.fmax;
  ar.strings["codec.mel"] = mel.str();
  if (p.vae)
    for (const auto& [name, v] : p.vae->params.items()) ar.tensors[name] = v.value();
}

inline CodecParams restore_codec(const Archive& ar) {
  CodecParams p;
  if (ar.strings.count("codec.mel")) {
    std::istringstream is(ar.string("codec.mel"));
    is >> p.mel.sample_rate >> p.mel.n_fft >> p.mel.hop >> p.mel.n_mels >> p.mel.frames >> p.mel.fmin >> p.mel.fmax;
    if (!is) throw IoError("malformed codec.mel record");
  }
  const auto mode = ar.strings.count("codec.mode") ? ar.string("codec.mode") : std::string("deterministic");
  if (mode == "vae") {
    p.mode = CodecMode::Vae;
    p.vae = std::make_shared<ToyVae>(0);
    for (auto& [name, v] : p.vae->params.items()) {
      const auto& t = ar.tensor(name);
      require_same_shape(t.shape, v.shape(), name.c_str());
      v.mutable_value() = t;
    }
  } else if (mode != "deterministic") {
    throw ValidationError("unknown codec mode '" + mode + "'");
  }
  return p;
}

}  // namespace refgen::codec
