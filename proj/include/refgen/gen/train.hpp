#pragma once

// Training data, augmentation, flow-matching loss and the training loop.

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "refgen/codec/codec.hpp"
#include "refgen/forge/manifest.hpp"
#include "refgen/gen/flow.hpp"
#include "refgen/gen/mrc_unet.hpp"
#include "refgen/nn/optim.hpp"
#include "refgen/text/text_encoder.hpp"

namespace refgen::gen {

using audio::AudioClip;
namespace fs = std::filesystem;

/// Latent time frames [begin, end) of one event inside a reference slot.
struct FrameSpan {
  int begin = 0, end = 0;
};

/// One reference slot after encoding. A null slot has an all-zero latent and an
/// empty caption.
struct EncodedReference {
  Tensor<float> latent;   // (C, T, F), scaled
  Tensor<float> caption;  // (D, 50) channel-major embedding
  std::string text;
  std::vector<FrameSpan> events;
  bool null = true;
};

struct EncodedExample {
  std::string id;
  Tensor<float> z1;      // (C, T, F), scaled
  Tensor<float> prompt;  // (D, 50)
  std::string caption;
  std::vector<EncodedReference> references;
};

/// Frozen encoders plus the latent normalization; shared by training and sampling.
struct Encoders {
  codec::CodecParams codec;
  text::TextEncoder<float> text;
  double latent_scale = 1.0;

  Tensor<float> caption(const std::string& s) const { return text::channel_major(text.embed_value(s)); }

  Tensor<float> latent(const AudioClip& clip) const {
    auto z = codec::encode_clip(clip, codec);
    for (auto& v : z.data) v = static_cast<float>(v * latent_scale);
    return z;
  }

  Tensor<float> null_latent() const { return Tensor<float>({codec.channels(), codec.latent_time(), codec.latent_freq()}); }

  EncodedReference null_reference() const { return {null_latent(), caption(""), "", {}, true}; }

  EncodedReference reference(const forge::ReferencePair& r) const {
    if (r.is_null()) return null_reference();
    EncodedReference e{latent(r.audio), caption(r.caption), r.caption, {}, false};
    const double per_second = static_cast<double>(codec.mel.sample_rate) / codec.mel.hop / codec::kFactor;
    const int t = codec.latent_time();
    for (const auto& reg : r.regions) {
      FrameSpan s{std::clamp(static_cast<int>(std::floor(reg.start_s * per_second)), 0, t),
                  std::clamp(static_cast<int>(std::ceil(reg.end_s * per_second)), 0, t)};
      if (s.end > s.begin) e.events.push_back(s);
    }
    return e;
  }

  EncodedExample encode(const forge::CustomizedExample& ex) const {
    EncodedExample out{ex.id, latent(ex.target), caption(ex.target_caption), ex.target_caption, {}};
    for (const auto& r : ex.references) out.references.push_back(reference(r));
    return out;
  }

  void store(Archive& ar) const {
    codec::store(ar, codec);
    text.store(ar);
    ar.strings["latent.scale"] = std::to_string(latent_scale);
  }

  static Encoders restore(const Archive& ar) {
    return {codec::restore_codec(ar), text::TextEncoder<float>::restore(ar), std::stod(ar.string("latent.scale"))};
  }
};

/// 1 / std over every element of the unscaled target latents. The shift stays 0
/// so silence keeps mapping to the all-zero null latent.
inline double fit_latent_scale(const std::vector<forge::CustomizedExample>& examples, const codec::CodecParams& codec) {
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (const auto& ex : examples) {
    for (float v : codec::encode_clip(ex.target, codec).data) {
      s += v;
      s2 += static_cast<double>(v) * v;
      ++n;
    }
  }
  if (n == 0) throw ValidationError("cannot fit the latent scale on an empty dataset");
  const double mean = s / n, var = s2 / n - mean * mean;
  return var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
}

/// Loads and encodes every record of a manifest.
inline std::vector<EncodedExample> encode_manifest(const fs::path& manifest_path, const Encoders& enc) {
  if (!fs::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path.string());
  auto man = forge::read_manifest(manifest_path);
  std::vector<EncodedExample> out;
  for (const auto& r : man.records) {
    try {
      out.push_back(enc.encode(forge::load_example(man, r, enc.codec.mel.sample_rate)));
    } catch (const Error& e) {
      throw IoError("example " + r.id + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- augmentation

struct AugmentStats {
  long slots = 0, dropped = 0;
  long eligible = 0, masked = 0;  // examples with a maskable surviving slot / examples masked

  double drop_rate() const { return slots ? static_cast<double>(dropped) / slots : 0.0; }
  double mask_rate() const { return eligible ? static_cast<double>(masked) / eligible : 0.0; }
};

/// Drops each slot to the null pair with probability drop_p, then with
/// probability mask_p zeroes one event's frames in one surviving slot. The
/// target is never touched. Random draws are made in a fixed order whatever
/// the outcome, so the stream position depends only on the slot count.
inline EncodedExample augment_references(const EncodedExample& ex, double mask_p, double drop_p, Rng& rng,
                                         const EncodedReference& null_ref, AugmentStats* stats = nullptr) {
  EncodedExample out = ex;
  for (auto& r : out.references) {
    const bool drop = rng.bernoulli(drop_p);
    if (stats) {
      ++stats->slots;
      stats->dropped += drop;
    }
    if (drop) r = null_ref;
  }
  const bool mask = rng.bernoulli(mask_p);
  const double pick = rng.uniform(), pick_event = rng.uniform();
  std::vector<std::size_t> live;
  for (std::size_t k = 0; k < out.references.size(); ++k)
    if (!out.references[k].null && !out.references[k].events.empty()) live.push_back(k);
  if (live.empty()) return out;
  if (stats) {
    ++stats->eligible;
    stats->masked += mask;
  }
  if (!mask) return out;
  auto& r = out.references[live[std::min(live.size() - 1, static_cast<std::size_t>(pick * live.size()))]];
  const auto& span = r.events[std::min(r.events.size() - 1, static_cast<std::size_t>(pick_event * r.events.size()))];
  const int c = r.latent.dim(0), t = r.latent.dim(1), f = r.latent.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int i = span.begin; i < span.end; ++i)
      std::fill_n(r.latent.data.begin() + (static_cast<std::size_t>(ch) * t + i) * f, f, 0.0f);
  return out;
}

// ---------------------------------------------------------------- batches

template <class T>
struct TrainBatch {
  Tensor<T> z1;  // (N, C, T, F)
  Conditioning<T> cond;
  std::vector<std::string> ids;
};

namespace detail {

template <class T>
void put(Tensor<T>& dst, std::size_t offset, const Tensor<float>& src) {
  std::transform(src.data.begin(), src.data.end(), dst.data.begin() + offset, [](float v) { return static_cast<T>(v); });
}

}  // namespace detail

/// Stacks examples into network inputs. Reference latents are concatenated
/// along time and caption embeddings along the token axis, in slot order.
/// `null_prompt[i]` replaces example i's prompt with `null_caption`.
template <class T>
TrainBatch<T> make_batch(const std::vector<const EncodedExample*>& exs, const Tensor<float>& null_caption,
                         const std::vector<bool>& null_prompt = {}) {
  REFGEN_CHECK(!exs.empty(), "empty batch");
  const int n = static_cast<int>(exs.size());
  const auto& z = exs[0]->z1;
  const int c = z.dim(0), t = z.dim(1), f = z.dim(2), k = static_cast<int>(exs[0]->references.size());
  const int d = exs[0]->prompt.dim(0), l = exs[0]->prompt.dim(1);
  TrainBatch<T> b;
  b.z1 = Tensor<T>({n, c, t, f});
  Tensor<T> refs({n, c, k * t, f}), rtext({n, d, k * l}), prompt({n, d, l});
  for (int i = 0; i < n; ++i) {
    const auto& ex = *exs[i];
    if (ex.z1.shape != z.shape || static_cast<int>(ex.references.size()) != k)
      throw ValidationError("example " + ex.id + ": latent or reference count does not match the batch");
    b.ids.push_back(ex.id);
    detail::put(b.z1, static_cast<std::size_t>(i) * z.size(), ex.z1);
    detail::put(prompt, static_cast<std::size_t>(i) * d * l,
                !null_prompt.empty() && null_prompt[i] ? null_caption : ex.prompt);
    for (int s = 0; s < k; ++s) {
      const auto& r = ex.references[s];
      if (r.latent.shape != z.shape) throw ValidationError("example " + ex.id + ": reference latent shape mismatch");
      for (int ch = 0; ch < c; ++ch)
        std::transform(r.latent.data.begin() + static_cast<std::size_t>(ch) * t * f,
                       r.latent.data.begin() + static_cast<std::size_t>(ch + 1) * t * f,
                       refs.data.begin() + ((static_cast<std::size_t>(i) * c + ch) * k * t + s * t) * f,
                       [](float v) { return static_cast<T>(v); });
      for (int row = 0; row < d; ++row)
        std::transform(r.caption.data.begin() + static_cast<std::size_t>(row) * l,
                       r.caption.data.begin() + static_cast<std::size_t>(row + 1) * l,
                       rtext.data.begin() + (static_cast<std::size_t>(i) * d + row) * k * l + s * l,
                       [](float v) { return static_cast<T>(v); });
    }
  }
  b.cond = {nn::Var<T>(std::move(refs)), nn::Var<T>(std::move(rtext)), nn::Var<T>(std::move(prompt))};
  return b;
}

/// Conditioning with every reference slot and the prompt nulled.
template <class T>
Conditioning<T> null_conditioning(int n, int k, const Shape& latent, const Tensor<float>& null_caption) {
  const int d = null_caption.dim(0), l = null_caption.dim(1);
  Tensor<T> refs({n, latent[0], k * latent[1], latent[2]}), rtext({n, d, k * l}), prompt({n, d, l});
  for (int i = 0; i < n; ++i)
    for (int row = 0; row < d; ++row)
      for (int j = 0; j < l; ++j) {
        const T v = static_cast<T>(null_caption.data[static_cast<std::size_t>(row) * l + j]);
        prompt.data[(static_cast<std::size_t>(i) * d + row) * l + j] = v;
        for (int s = 0; s < k; ++s) rtext.data[(static_cast<std::size_t>(i) * d + row) * k * l + s * l + j] = v;
      }
  return {nn::Var<T>(std::move(refs)), nn::Var<T>(std::move(rtext)), nn::Var<T>(std::move(prompt))};
}

// ---------------------------------------------------------------- loss

template <class T>
struct FlowDraw {
  Tensor<T> z0;
  std::vector<double> lambdas;
};

/// Per example: lambda ~ U(0, 1), then z0 ~ N(0, I). Exposed so tests can replay
/// the draws that rfm_loss makes from the same stream.
template <class T>
FlowDraw<T> draw_flow_noise(const Shape& batch_shape, Rng& rng) {
  FlowDraw<T> d;
  for (int i = 0; i < batch_shape[0]; ++i) d.lambdas.push_back(rng.uniform());
  d.z0 = Tensor<T>::randn(batch_shape, rng);
  return d;
}

template <class T>
using VelocityModel = std::function<nn::Var<T>(const nn::Var<T>&, const std::vector<double>&, const Conditioning<T>&)>;

/// Mean over the batch of ||mu(z_lambda, R, lambda, E, C) - v||^2.
template <class T>
nn::Var<T> rfm_loss(const VelocityModel<T>& model, const TrainBatch<T>& batch, Rng& rng, double sigma = kSigma) {
  const auto draw = draw_flow_noise<T>(batch.z1.shape, rng);
  const int n = batch.z1.dim(0);
  const std::size_t per = batch.z1.size() / n;
  Tensor<T> zl(batch.z1.shape), v = velocity_target(draw.z0, batch.z1, sigma);
  for (int i = 0; i < n; ++i) {
    const double a = 1.0 - (1.0 - sigma) * draw.lambdas[i], lam = draw.lambdas[i];
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) zl[j] = static_cast<T>(a * draw.z0[j] + lam * batch.z1[j]);
  }
  auto sse = nn::per_example_sse(model(nn::Var<T>(std::move(zl)), draw.lambdas, batch.cond), v);
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(sse.value()[i])))
      throw TrainingError("non-finite loss on example " + (i < static_cast<int>(batch.ids.size()) ? batch.ids[i] : "?") +
                          " at lambda " + std::to_string(draw.lambdas[i]));
  return nn::mean_all(sse);
}

template <class T>
VelocityModel<T> as_model(const MrcUnet<T>& net) {
  return [&net](const nn::Var<T>& z, const std::vector<double>& lam, const Conditioning<T>& c) { return net.forward(z, lam, c); };
}

// ---------------------------------------------------------------- training loop

struct TrainConfig {
  long steps = 2000;
  int batch = 4;
  double lr = 1e-3;
  long warmup = 200;
  bool cosine = false;  // decay the rate to zero by the last step
  double weight_decay = 1e-2;
  double mask_p = 0.10;
  double drop_p = 0.40;
  double cfg_dropout = 0.10;
  long checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_path;
  int smooth_window = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0 || batch < 1 || smooth_window < 1) throw ValidationError("train config: steps >= 0, batch >= 1 required");
    if (!(lr > 0)) throw ValidationError("train config: learning rate must be positive");
    for (double p : {mask_p, drop_p, cfg_dropout})
      if (!(p >= 0 && p <= 1)) throw ValidationError("train config: probabilities must lie in [0, 1]");
    if (checkpoint_every > 0 && checkpoint_path.empty()) throw ValidationError("train config: checkpoint_every needs a checkpoint path");
  }

  std::string echo() const {
    std::ostringstream os;
    os << "steps = " << steps << "\nbatch = " << batch << "\nlr = " << lr << "\nwarmup = " << warmup << "\ncosine = " << cosine
       << "\nweight_decay = " << weight_decay << "\nmask_p = " << mask_p << "\ndrop_p = " << drop_p
       << "\ncfg_dropout = " << cfg_dropout << "\ncheckpoint_every = " << checkpoint_every << "\nseed = " << seed << "\n";
    return os.str();
  }
};

/// Large-scale optimizer settings.
inline TrainConfig full_scale_train_preset() {
  TrainConfig c;
  c.lr = 5e-5;
  c.warmup = 10000;
  c.steps = 2000000;
  return c;
}

/// Mean of each trailing window of `w` losses; out[i] covers losses[max(0, i-w+1) .. i].
inline std::vector<double> smoothed(const std::vector<double>& losses, int w) {
  std::vector<double> out(losses.size());
  double acc = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    acc += losses[i];
    if (i >= static_cast<std::size_t>(w)) acc -= losses[i - w];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, w));
  }
  return out;
}

/// Everything a run needs to continue bit-exactly.
struct TrainState {
  std::unique_ptr<MrcUnet<float>> model;
  std::unique_ptr<nn::AdamW<float>> opt;
  Rng rng;
  long step = 0;
  std::vector<double> losses;
  AugmentStats aug;
};

inline nn::ParamSet<float>& trainable(MrcUnet<float>& m) { return m.k_align ? m.align_params : m.params; }
inline const nn::ParamSet<float>& trainable(const MrcUnet<float>& m) { return m.k_align ? m.align_params : m.params; }

inline TrainState start_training(std::unique_ptr<MrcUnet<float>> model, const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.model = std::move(model);
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  oc.warmup_steps = cfg.warmup;
  if (cfg.cosine) oc.decay_end = cfg.steps;
  s.opt = std::make_unique<nn::AdamW<float>>(trainable(*s.model), oc);
  s.rng = Rng(derive_seed(cfg.seed, "train"));
  return s;
}

inline void save_checkpoint(const fs::path& path, const TrainState& s, const Encoders& enc, const TrainConfig& cfg) {
  Archive ar;
  ar.strings["format"] = "refgen-checkpoint-1";
  ar.strings["train.config"] = cfg.echo();
  ar.strings["train.step"] = std::to_string(s.step);
  ar.strings["train.rng"] = s.rng.state();
  enc.store(ar);
  s.model->store(ar);
  const auto& items = trainable(*s.model).items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    ar.tensors["opt.m." + items[i].first] = s.opt->first_moments()[i];
    ar.tensors["opt.v." + items[i].first] = s.opt->second_moments()[i];
  }
  ar.strings["opt.steps"] = std::to_string(s.opt->steps_taken());
  Tensor<float> log({static_cast<int>(s.losses.size())});
  for (std::size_t i = 0; i < s.losses.size(); ++i) log[i] = static_cast<float>(s.losses[i]);
  ar.tensors["train.loss"] = log;
  ar.save(path);
}

/// Restores model, optimizer moments, rng position and loss log.
inline TrainState resume_training(const fs::path& path, const TrainConfig& cfg, Encoders* enc_out = nullptr) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  auto ar = Archive::load(path);
  if (ar.string("format") != "refgen-checkpoint-1") throw IoError("unsupported checkpoint format in " + path.string());
  auto s = start_training(MrcUnet<float>::restore(ar), cfg);
  auto& items = trainable(*s.model).items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    s.opt->first_moments()[i] = ar.tensor("opt.m." + items[i].first);
    s.opt->second_moments()[i] = ar.tensor("opt.v." + items[i].first);
  }
  s.opt->set_steps_taken(std::stol(ar.string("opt.steps")));
  s.rng.set_state(ar.string("train.rng"));
  s.step = std::stol(ar.string("train.step"));
  if (ar.has_tensor("train.loss"))
    for (float v : ar.tensor("train.loss").data) s.losses.push_back(v);
  if (enc_out) *enc_out = Encoders::restore(ar);
  return s;
}

/// Runs until s.step == cfg.steps. `on_step(step, loss)` is called after each update.
inline void train_loop(TrainState& s, const std::vector<EncodedExample>& data, const Encoders& enc, const TrainConfig& cfg,
                       const std::function<void(long, double)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train_loop: no training examples");
  const int k = s.model->reference_slots();
  for (const auto& ex : data)
    if (static_cast<int>(ex.references.size()) != k)
      throw ValidationError("example " + ex.id + " has " + std::to_string(ex.references.size()) + " references, model expects " +
                      std::to_string(k));
  // Keep freed activation buffers in the heap instead of returning them to the OS every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const auto null_ref = enc.null_reference();
  const auto model = as_model(*s.model);
  auto& ps = trainable(*s.model);
  while (s.step < cfg.steps) {
    std::vector<EncodedExample> aug;
    std::vector<bool> null_prompt;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& ex = data[s.rng.index(data.size())];
      aug.push_back(augment_references(ex, cfg.mask_p, cfg.drop_p, s.rng, null_ref, &s.aug));
      null_prompt.push_back(s.rng.bernoulli(cfg.cfg_dropout));
    }
    std::vector<const EncodedExample*> ptrs;
    for (const auto& e : aug) ptrs.push_back(&e);
    auto batch = make_batch<float>(ptrs, null_ref.caption, null_prompt);
    ps.zero_grad();
    auto loss = rfm_loss(model, batch, s.rng);
    nn::backward(loss);
    s.opt->step();
    ++s.step;
    s.losses.push_back(loss.item());
    if (on_step) on_step(s.step, loss.item());
    if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) save_checkpoint(cfg.checkpoint_path, s, enc, cfg);
  }
}

// ---------------------------------------------------------------- reference-count adaptation

/// Adds alignment blocks for k_new slots, freezes the rest and fine-tunes only
/// the alignment weights on `data` (whose examples carry k_new references).
inline TrainState adapt_reference_count(std::unique_ptr<MrcUnet<float>> base, int k_new,
                                        const std::vector<EncodedExample>& data, const Encoders& enc, const TrainConfig& cfg,
                                        const std::function<void(long, double)>& on_step = {}) {
  if (!base) throw ValidationError("adapt_reference_count: missing base weights");
  if (k_new == base->cfg.k_max) throw ValidationError("adapt_reference_count: K_new equals K_max");
  base->add_alignment(k_new, derive_seed(cfg.seed, "align"));
  auto s = start_training(std::move(base), cfg);
  train_loop(s, data, enc, cfg, on_step);
  return s;
}

}  // namespace refgen::gen
