#pragma once

// Concatenation, overlay and general (empty-reference) example builders.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "refgen/bank/event_bank.hpp"

namespace refgen::forge {

using audio::AudioClip;
using bank::EventSpec;

enum class Mode { Concatenation, Overlay, General };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Concatenation: return "concatenation";
    case Mode::Overlay: return "overlay";
    case Mode::General: return "general";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "concatenation") return Mode::Concatenation;
  if (s == "overlay") return Mode::Overlay;
  if (s == "general") return Mode::General;
  throw ValidationError("unknown forge mode '" + s + "'");
}

struct Region {
  double start_s = 0, end_s = 0;
  std::string event_id;
  std::string label;
  bool operator==(const Region&) const = default;
};

/// Null slot: full-length silence with an empty caption.
struct ReferencePair {
  AudioClip audio;
  std::string caption;
  std::vector<Region> regions;  // event spans inside the reference clip

  static ReferencePair null(int rate = audio::kDefaultRate) {
    return {AudioClip::silence(audio::kClipSeconds, rate), "", {}};
  }
  bool is_null() const { return caption.empty(); }
};

struct CustomizedExample {
  std::string id;
  Mode mode = Mode::Concatenation;
  AudioClip target;
  std::string target_caption;
  std::vector<ReferencePair> references;
  std::vector<Region> regions;
  std::vector<double> snr_db;  // overlay only: front, back
  double peak_scale = 1.0;     // overlay only: limiter gain applied to the mix
};

inline const std::vector<std::string>& default_connection_phrases() {
  static const std::vector<std::string> p = {"followed by", "and then", "after that", "before", "then"};
  return p;
}

struct ForgeConfig {
  Mode mode = Mode::Concatenation;
  std::size_t n_examples = 100;
  int k_max = 3;
  double snr_lo_db = -15.0, snr_hi_db = 15.0;
  std::vector<std::string> connection_phrases = default_connection_phrases();
  std::uint64_t rng_seed = 0;
  double train_fraction = 0.8;
  std::optional<std::size_t> test_count;  // overrides train_fraction when set
  int sample_rate = audio::kDefaultRate;
  int max_distinct_events = 0;  // per example; 0 = unlimited
  double base_noise_rms = 0.01;
  int max_draws = 64;

  void validate() const {
    if (k_max < 1) throw ValidationError("k_max must be >= 1");
    if (!(snr_lo_db <= snr_hi_db) || !std::isfinite(snr_lo_db) || !std::isfinite(snr_hi_db))
      throw ValidationError("snr range must be a non-empty closed interval");
    if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ValidationError("train fraction outside [0, 1]");
    if (test_count && *test_count > n_examples) throw ValidationError("test count exceeds n_examples");
    if (mode == Mode::Overlay && k_max < 3) throw ValidationError("overlay mode needs k_max >= 3 (front, back, base)");
  }

  std::size_t n_test() const {
    return test_count ? *test_count : static_cast<std::size_t>(std::llround(n_examples * (1.0 - train_fraction)));
  }
};

/// Full-size dataset split counts.
inline ForgeConfig full_scale_preset(Mode mode) {
  ForgeConfig c;
  c.mode = mode;
  c.test_count = 200;
  switch (mode) {
    case Mode::Concatenation: c.n_examples = 92299 + 200; break;
    case Mode::Overlay: c.n_examples = 146481 + 200; break;
    case Mode::General:
      c.n_examples = 49501 + 928;
      c.test_count = 928;
      break;
  }
  return c;
}

// ---------------------------------------------------------------- primitives

/// signal + g * noise with g chosen so RMS(signal) / RMS(g * noise) hits snr_db.
inline std::vector<float> mix_at_snr(const std::vector<float>& signal, const std::vector<float>& noise, double snr_db,
                                     double* gain_out = nullptr) {
  if (signal.size() != noise.size()) throw ValidationError("mix_at_snr: segment lengths differ");
  const double rn = audio::rms(noise);
  if (!(rn > 0)) throw ValidationError("mix_at_snr: noise segment has zero RMS");
  const double g = (audio::rms(signal) / rn) / std::pow(10.0, snr_db / 20.0);
  if (gain_out) *gain_out = g;
  std::vector<float> out(signal.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(signal[i] + g * noise[i]);
  return out;
}

/// Bare class labels (single token) become "the sound of <label>".
inline std::string caption_phrase(const std::string& label) {
  if (label.find(' ') != std::string::npos) return label;
  std::string words = label;
  std::replace(words.begin(), words.end(), '_', ' ');
  std::replace(words.begin(), words.end(), '-', ' ');
  return "the sound of " + words;
}

inline std::string caption_from_labels(const std::vector<std::string>& labels, const std::vector<std::string>& phrases,
                                       std::uint64_t seed) {
  if (labels.empty()) throw ValidationError("caption_from_labels: no labels");
  if (labels.size() > 1 && phrases.empty()) throw ValidationError("caption_from_labels: empty connection list");
  Rng rng(derive_seed(seed, "caption"));
  std::string out = labels[0];
  for (std::size_t i = 1; i < labels.size(); ++i) out += " " + phrases[rng.index(phrases.size())] + " " + labels[i];
  return out;
}

// ---------------------------------------------------------------- builders

namespace detail {

struct Piece {
  std::size_t event;  // index into the bank
  AudioClip clip;
  std::size_t start;  // sample offset in target
  std::size_t span;   // samples covered in target (clip length incl. padding)
};

inline std::vector<std::size_t> short_events(const std::vector<EventSpec>& bank) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (bank[i].duration_s < 5.0) idx.push_back(i);
  if (idx.size() < 2) throw ForgeError("event bank needs at least 2 events shorter than 5 s");
  return idx;
}

inline std::vector<std::size_t> event_pool(const std::vector<EventSpec>& bank, const ForgeConfig& cfg, Rng& rng) {
  auto pool = short_events(bank);
  if (cfg.max_distinct_events > 0 && static_cast<std::size_t>(cfg.max_distinct_events) < pool.size()) {
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    pool.resize(cfg.max_distinct_events);
    std::sort(pool.begin(), pool.end());
  }
  return pool;
}

inline std::vector<Piece> draw_sequence(const std::vector<EventSpec>& bank, const ForgeConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "sequence"));
  const auto pool = event_pool(bank, cfg, rng);
  const std::size_t total = AudioClip::sample_count(audio::kClipSeconds, cfg.sample_rate);
  const std::size_t min_piece = AudioClip::sample_count(0.25, cfg.sample_rate);
  std::vector<Piece> pieces;
  std::size_t filled = 0;
  int draws = 0;
  while (filled < total) {
    const std::size_t remaining = total - filled;
    if (remaining < min_piece && !pieces.empty()) {
      pieces.back().clip.samples.resize(pieces.back().clip.size() + remaining, 0.0f);
      pieces.back().span += remaining;
      break;
    }
    if (++draws > cfg.max_draws) throw ForgeError("could not fill 10 s within " + std::to_string(cfg.max_draws) + " draws");
    const std::size_t ev = pool[rng.index(pool.size())];
    AudioClip clip = bank::synthesize_event(bank[ev], derive_seed(seed, static_cast<std::uint64_t>(draws)), cfg.sample_rate);
    if (clip.size() == 0) continue;
    if (clip.size() > remaining) clip.samples.resize(remaining);
    pieces.push_back({ev, clip, filled, clip.size()});
    filled += clip.size();
  }
  return pieces;
}

inline double seconds(std::size_t samples, int rate) {
  return static_cast<double>(samples) / rate;
}

inline void fill_target(CustomizedExample& ex, const std::vector<EventSpec>& bank, const std::vector<Piece>& pieces,
                        const ForgeConfig& cfg, std::uint64_t seed) {
  ex.target = AudioClip::silence(audio::kClipSeconds, cfg.sample_rate);
  std::vector<std::string> phrases;
  for (const auto& p : pieces) {
    std::copy(p.clip.samples.begin(), p.clip.samples.end(), ex.target.samples.begin() + p.start);
    const auto& spec = bank[p.event];
    ex.regions.push_back({seconds(p.start, cfg.sample_rate), seconds(p.start + p.span, cfg.sample_rate), spec.event_id,
                          spec.label});
    phrases.push_back(caption_phrase(spec.label));
  }
  ex.target_caption = caption_from_labels(phrases, cfg.connection_phrases, derive_seed(seed, "target"));
}

}  // namespace detail

inline CustomizedExample build_concatenation_example(const std::vector<EventSpec>& bank, const ForgeConfig& cfg,
                                                     std::uint64_t seed) {
  cfg.validate();
  CustomizedExample ex;
  ex.mode = Mode::Concatenation;
  auto pieces = detail::draw_sequence(bank, cfg, seed);
  detail::fill_target(ex, bank, pieces, cfg, seed);

  // Disjoint groups covering every piece; with fewer pieces than slots the
  // leftover slots stay empty and become null references.
  Rng rng(derive_seed(seed, "groups"));
  std::vector<std::size_t> order(pieces.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> groups(cfg.k_max);
  for (std::size_t i = 0; i < order.size(); ++i) groups[i % cfg.k_max].push_back(order[i]);
  std::shuffle(groups.begin(), groups.end(), rng.engine());

  for (int k = 0; k < cfg.k_max; ++k) {
    auto& g = groups[k];
    if (g.empty()) {
      ex.references.push_back(ReferencePair::null(cfg.sample_rate));
      continue;
    }
    std::sort(g.begin(), g.end());
    ReferencePair ref;
    ref.audio = AudioClip({}, cfg.sample_rate);
    std::vector<std::string> phrases;
    for (auto idx : g) {
      const auto& p = pieces[idx];
      const auto& spec = bank[p.event];
      const std::size_t at = ref.audio.size();
      ref.audio.samples.insert(ref.audio.samples.end(), p.clip.samples.begin(), p.clip.samples.end());
      ref.regions.push_back({detail::seconds(at, cfg.sample_rate), detail::seconds(at + p.span, cfg.sample_rate),
                             spec.event_id, spec.label});
      phrases.push_back(caption_phrase(spec.label));
    }
    ref.caption = caption_from_labels(phrases, cfg.connection_phrases, derive_seed(seed, static_cast<std::uint64_t>(k)));
    ex.references.push_back(std::move(ref));
  }
  return ex;
}

inline CustomizedExample build_general_example(const std::vector<EventSpec>& bank, const ForgeConfig& cfg,
                                               std::uint64_t seed) {
  cfg.validate();
  CustomizedExample ex;
  ex.mode = Mode::General;
  detail::fill_target(ex, bank, detail::draw_sequence(bank, cfg, seed), cfg, seed);
  for (int k = 0; k < cfg.k_max; ++k) ex.references.push_back(ReferencePair::null(cfg.sample_rate));
  return ex;
}

/// Base bed for overlay: an event looped to 10 s plus low white noise.
inline AudioClip overlay_base(const EventSpec& spec, const ForgeConfig& cfg, std::uint64_t seed) {
  const std::size_t total = AudioClip::sample_count(audio::kClipSeconds, cfg.sample_rate);
  AudioClip unit = bank::synthesize_event(spec, derive_seed(seed, "base"), cfg.sample_rate);
  AudioClip base = AudioClip::silence(audio::kClipSeconds, cfg.sample_rate);
  Rng noise(derive_seed(seed, "bed"));
  for (std::size_t i = 0; i < total; ++i) {
    const float loop = unit.size() ? unit.samples[i % unit.size()] : 0.0f;
    base.samples[i] = static_cast<float>(0.5 * loop + cfg.base_noise_rms * noise.normal());
  }
  return base;
}

/// Places each event onto the base at its region with the stored SNR, then applies
/// the stored limiter gain. Shared by the builder and by reconstruction.
inline std::vector<float> overlay_mix(const std::vector<float>& base, const std::vector<const std::vector<float>*>& events,
                                      const std::vector<std::size_t>& starts, const std::vector<double>& snr_db,
                                      double peak_scale) {
  std::vector<float> out = base;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = *events[e];
    std::vector<float> seg(base.begin() + starts[e], base.begin() + starts[e] + ev.size());
    double g = 0;
    mix_at_snr(seg, ev, snr_db[e], &g);
    for (std::size_t i = 0; i < ev.size(); ++i) out[starts[e] + i] += static_cast<float>(g * ev[i]);
  }
  if (peak_scale != 1.0)
    for (auto& v : out) v = static_cast<float>(v * peak_scale);
  return out;
}

inline CustomizedExample build_overlay_example(const std::vector<EventSpec>& bank, const ForgeConfig& cfg,
                                               std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "overlay"));
  const auto pool = detail::event_pool(bank, cfg, rng);
  const std::size_t total = AudioClip::sample_count(audio::kClipSeconds, cfg.sample_rate);

  std::size_t fi = pool[rng.index(pool.size())];
  std::size_t bi = pool[rng.index(pool.size() - 1)];
  if (bi == fi) bi = pool.back();
  const std::size_t base_i = rng.index(bank.size());

  AudioClip front = bank::synthesize_event(bank[fi], derive_seed(seed, "front"), cfg.sample_rate);
  AudioClip back = bank::synthesize_event(bank[bi], derive_seed(seed, "back"), cfg.sample_rate);
  if (front.rms() == 0 || back.rms() == 0) throw ForgeError("overlay event rendered silent");
  AudioClip base = overlay_base(bank[base_i], cfg, seed);

  CustomizedExample ex;
  ex.mode = Mode::Overlay;
  const double span = cfg.snr_hi_db - cfg.snr_lo_db;
  ex.snr_db = {cfg.snr_lo_db + span * rng.uniform(), cfg.snr_lo_db + span * rng.uniform()};
  const std::vector<std::size_t> starts = {0, total - back.size()};
  auto mixed = overlay_mix(base.samples, {&front.samples, &back.samples}, starts, ex.snr_db, 1.0);
  float peak = 0;
  for (float v : mixed) peak = std::max(peak, std::abs(v));
  ex.peak_scale = peak > 1.0f ? 1.0 / peak : 1.0;
  ex.target = AudioClip(overlay_mix(base.samples, {&front.samples, &back.samples}, starts, ex.snr_db, ex.peak_scale),
                        cfg.sample_rate);

  const int r = cfg.sample_rate;
  const auto& fs = bank[fi];
  const auto& bs = bank[bi];
  const auto& base_s = bank[base_i];
  ex.regions = {{0.0, detail::seconds(front.size(), r), fs.event_id, fs.label},
                {detail::seconds(starts[1], r), audio::kClipSeconds, bs.event_id, bs.label},
                {0.0, audio::kClipSeconds, base_s.event_id, base_s.label}};
  const auto fp = caption_phrase(fs.label), bp = caption_phrase(bs.label), basep = caption_phrase(base_s.label);
  ex.target_caption = caption_from_labels({fp, bp}, cfg.connection_phrases, derive_seed(seed, "target")) + " over " + basep;
  ex.references.push_back({front, fp, {{0.0, front.duration(), fs.event_id, fs.label}}});
  ex.references.push_back({back, bp, {{0.0, back.duration(), bs.event_id, bs.label}}});
  ex.references.push_back({base, basep, {{0.0, audio::kClipSeconds, base_s.event_id, base_s.label}}});
  while (static_cast<int>(ex.references.size()) < cfg.k_max) ex.references.push_back(ReferencePair::null(r));
  return ex;
}

/// Recomputes an overlay target from its references, regions, SNRs and limiter gain.
inline std::vector<float> reconstruct_overlay(const CustomizedExample& ex) {
  REFGEN_CHECK(ex.mode == Mode::Overlay && ex.references.size() >= 3 && ex.snr_db.size() == 2,
               "not an overlay example");
  const int r = ex.target.sample_rate;
  const auto& base = ex.references[2].audio.samples;
  std::vector<std::size_t> starts = {AudioClip::sample_count(ex.regions[0].start_s, r),
                                     AudioClip::sample_count(ex.regions[1].start_s, r)};
  return overlay_mix(base, {&ex.references[0].audio.samples, &ex.references[1].audio.samples}, starts, ex.snr_db,
                     ex.peak_scale);
}

inline CustomizedExample build_example(const std::vector<EventSpec>& bank, const ForgeConfig& cfg, std::uint64_t seed) {
  switch (cfg.mode) {
    case Mode::Concatenation: return build_concatenation_example(bank, cfg, seed);
    case Mode::Overlay: return build_overlay_example(bank, cfg, seed);
    case Mode::General: return build_general_example(bank, cfg, seed);
  }
  throw ValidationError("bad mode");
}

}  // namespace refgen::forge
