#pragma once

// Synthetic catalog of distinguishable sound events, plus WAV ingestion.
//
// Catalog record file: one event per line, tab-separated, in this order:
//   event_id  label  family  base_hz  duration_s  noise_mix  partials
//   envelope  fm_ratio  fm_index  pulse_hz  bandwidth_hz
// `partials` is a comma list of amplitudes; `envelope` a comma list of
// time:gain breakpoints with time as a fraction of the duration.

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "refgen/audio/clip.hpp"
#include "refgen/audio/resample.hpp"
#include "refgen/audio/wav.hpp"
#include "refgen/core/archive.hpp"
#include "refgen/core/rng.hpp"

namespace refgen::bank {

using audio::AudioClip;

enum class Family { SineStack, FM, FilteredNoise, ImpulseTrain };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::SineStack: return "sine-stack";
    case Family::FM: return "fm";
    case Family::FilteredNoise: return "filtered-noise";
    case Family::ImpulseTrain: return "impulse-train";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "sine-stack") return Family::SineStack;
  if (s == "fm") return Family::FM;
  if (s == "filtered-noise") return Family::FilteredNoise;
  if (s == "impulse-train") return Family::ImpulseTrain;
  throw ValidationError("unknown timbre family '" + s + "'");
}

struct Breakpoint {
  double time;  // fraction of duration in [0, 1]
  double gain;
  bool operator==(const Breakpoint&) const = default;
};

/// Parametric sound recipe. Partial k (1-based) sits at k * base_hz; its role
/// depends on the family (sinusoid, FM carrier, noise band, or resonance
/// excited by each pulse). Partials at or above Nyquist are skipped.
struct Timbre {
  Family family = Family::SineStack;
  double base_hz = 440.0;
  std::vector<double> partials{1.0};
  std::vector<Breakpoint> envelope{{0.0, 0.0}, {0.05, 1.0}, {0.9, 1.0}, {1.0, 0.0}};
  double noise_mix = 0.0;
  double fm_ratio = 2.0;
  double fm_index = 1.5;
  double pulse_hz = 8.0;
  double bandwidth_hz = 60.0;
  bool operator==(const Timbre&) const = default;
};

struct EventSpec {
  std::string event_id;
  std::string label;
  Timbre timbre;
  double duration_s = 1.0;
  bool operator==(const EventSpec&) const = default;
};

inline void validate(const EventSpec& spec, int sample_rate) {
  if (!(spec.duration_s > 0.0 && spec.duration_s <= 5.0))
    throw ValidationError("event " + spec.event_id + ": duration " + std::to_string(spec.duration_s) + " s outside (0, 5]");
  if (!(spec.timbre.base_hz > 0.0) || spec.timbre.base_hz >= sample_rate / 2.0)
    throw ValidationError("event " + spec.event_id + ": base frequency " + std::to_string(spec.timbre.base_hz) +
                          " Hz must lie in (0, Nyquist)");
  if (spec.timbre.noise_mix < 0.0 || spec.timbre.noise_mix > 1.0)
    throw ValidationError("event " + spec.event_id + ": noise_mix outside [0, 1]");
  if (spec.timbre.envelope.size() < 2) throw ValidationError("event " + spec.event_id + ": envelope needs two breakpoints");
}

namespace detail {

inline double envelope_at(const std::vector<Breakpoint>& env, double frac) {
  if (frac <= env.front().time) return env.front().gain;
  for (std::size_t i = 1; i < env.size(); ++i)
    if (frac <= env[i].time) {
      double span = env[i].time - env[i - 1].time;
      double a = span > 0 ? (frac - env[i - 1].time) / span : 1.0;
      return env[i - 1].gain + a * (env[i].gain - env[i - 1].gain);
    }
  return env.back().gain;
}

// RBJ band-pass biquad (constant 0 dB peak gain).
struct BandPass {
  double b0, b2, a1, a2, x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  BandPass(double f0, double bw, double rate) {
    double w0 = 2 * std::numbers::pi * f0 / rate;
    double q = std::max(0.5, f0 / std::max(bw, 1.0));
    double alpha = std::sin(w0) / (2 * q);
    double a0 = 1 + alpha;
    b0 = alpha / a0;
    b2 = -alpha / a0;
    a1 = -2 * std::cos(w0) / a0;
    a2 = (1 - alpha) / a0;
  }
  double operator()(double x) {
    double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace detail

/// Renders one instance of an event. Deterministic in (spec, seed); the seed
/// only varies phases and noise realizations. Output is peak-normalized to 0.9.
inline AudioClip synthesize_event(const EventSpec& spec, std::uint64_t seed, int sample_rate = audio::kDefaultRate) {
  validate(spec, sample_rate);
  const auto& tb = spec.timbre;
  const std::size_t n = AudioClip::sample_count(spec.duration_s, sample_rate);
  const double nyq = sample_rate / 2.0;
  const double dt = 1.0 / sample_rate;
  Rng rng(derive_seed(seed, fnv1a(spec.event_id)));
  std::vector<double> y(n, 0.0);

  switch (tb.family) {
    case Family::SineStack:
    case Family::FM: {
      for (std::size_t k = 0; k < tb.partials.size(); ++k) {
        const double f = (k + 1) * tb.base_hz;
        const double a = tb.partials[k];
        const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
        if (a == 0.0 || f >= nyq) continue;
        const bool fm = tb.family == Family::FM;
        for (std::size_t i = 0; i < n; ++i) {
          const double t = i * dt;
          double arg = 2 * std::numbers::pi * f * t + phase;
          if (fm) arg += tb.fm_index * std::sin(2 * std::numbers::pi * tb.fm_ratio * tb.base_hz * t);
          y[i] += a * std::sin(arg);
        }
      }
      break;
    }
    case Family::FilteredNoise: {
      for (std::size_t k = 0; k < tb.partials.size(); ++k) {
        const double f = (k + 1) * tb.base_hz;
        const double a = tb.partials[k];
        detail::BandPass bp(std::min(f, nyq * 0.95), tb.bandwidth_hz * (k + 1), sample_rate);
        Rng band(derive_seed(rng.next(), k));
        if (a == 0.0 || f >= nyq) continue;
        for (std::size_t i = 0; i < n; ++i) y[i] += a * 4.0 * bp(band.normal());
      }
      break;
    }
    case Family::ImpulseTrain: {
      const double period = 1.0 / tb.pulse_hz;
      const double jitter = rng.uniform(0.0, period);
      const double decay = std::min(0.5 * period, 0.08);
      for (double onset = jitter * 0.25; onset < spec.duration_s; onset += period) {
        const std::size_t i0 = static_cast<std::size_t>(onset * sample_rate);
        const std::size_t len = std::min(n - std::min(n, i0), static_cast<std::size_t>(5 * decay * sample_rate));
        for (std::size_t k = 0; k < tb.partials.size(); ++k) {
          const double f = (k + 1) * tb.base_hz;
          const double a = tb.partials[k];
          if (a == 0.0 || f >= nyq) continue;
          for (std::size_t j = 0; j < len; ++j) {
            const double t = j * dt;
            y[i0 + j] += a * std::exp(-t / decay) * std::sin(2 * std::numbers::pi * f * t);
          }
        }
      }
      break;
    }
  }

  if (tb.noise_mix > 0.0) {
    Rng noise(derive_seed(seed, "broadband"));
    double tonal_rms = 0;
    for (double v : y) tonal_rms += v * v;
    tonal_rms = std::sqrt(tonal_rms / std::max<std::size_t>(n, 1));
    const double level = tonal_rms > 0 ? tonal_rms : 0.3;
    for (auto& v : y) v = (1.0 - tb.noise_mix) * v + tb.noise_mix * level * noise.normal();
  }

  double peak = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] *= detail::envelope_at(tb.envelope, static_cast<double>(i) / std::max<std::size_t>(n - 1, 1));
    peak = std::max(peak, std::abs(y[i]));
  }
  std::vector<float> out(n, 0.0f);
  if (peak > 0)
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(0.9 * y[i] / peak);
  return AudioClip(std::move(out), sample_rate, spec.label);
}

inline const std::vector<std::string>& catalog_labels() {
  static const std::vector<std::string> labels = {
      "a dog barking",     "a siren wailing",   "a bell ringing",    "a drum beating",
      "a bird chirping",   "an engine humming", "a whistle blowing", "rain falling",
      "a clock ticking",   "a horn honking",    "a phone ringing",   "a door knocking",
      "wind blowing",      "a cat meowing",     "a kettle whistling", "a crowd cheering",
      "a motor buzzing",   "a gong striking",   "an alarm beeping",  "water dripping",
      "a frog croaking",   "a saw cutting",     "a train passing",   "a violin playing"};
  return labels;
}

/// Deterministic catalog of pairwise-distinct events. Families rotate; base
/// frequencies are spread on a log scale between 150 Hz and 3.2 kHz.
inline std::vector<EventSpec> default_catalog(int n_events, std::uint64_t seed) {
  if (n_events < 2) throw ValidationError("default_catalog needs at least 2 events, got " + std::to_string(n_events));
  Rng rng(derive_seed(seed, "catalog"));
  std::vector<int> slots(n_events);
  for (int i = 0; i < n_events; ++i) slots[i] = i;
  std::shuffle(slots.begin(), slots.end(), rng.engine());
  const auto& labels = catalog_labels();
  std::vector<EventSpec> out;
  for (int i = 0; i < n_events; ++i) {
    EventSpec s;
    char id[16];
    std::snprintf(id, sizeof id, "ev%02d", i);
    s.event_id = id;
    s.label = labels[i % labels.size()];
    if (i >= static_cast<int>(labels.size())) s.label += " " + std::to_string(i / labels.size() + 1);
    Timbre& t = s.timbre;
    t.family = static_cast<Family>(i % 4);
    const double pos = (slots[i] + 0.5) / n_events;
    t.base_hz = 150.0 * std::pow(3200.0 / 150.0, pos) * rng.uniform(0.97, 1.03);
    const int n_partials = 1 + static_cast<int>(rng.index(4));
    t.partials.clear();
    for (int k = 0; k < n_partials; ++k) t.partials.push_back(k == 0 ? 1.0 : rng.uniform(0.2, 0.7) / (k + 1));
    switch (t.family) {
      case Family::SineStack:
        t.envelope = {{0.0, 0.0}, {0.05, 1.0}, {0.85, 0.8}, {1.0, 0.0}};
        t.noise_mix = 0.0;
        break;
      case Family::FM:
        t.envelope = {{0.0, 0.0}, {0.1, 1.0}, {0.5, 0.6}, {0.9, 0.9}, {1.0, 0.0}};
        t.fm_ratio = 0.5 + rng.index(3) * 0.5;
        t.fm_index = rng.uniform(0.8, 2.0);
        t.noise_mix = 0.0;
        break;
      case Family::FilteredNoise:
        t.envelope = {{0.0, 0.0}, {0.2, 1.0}, {0.8, 1.0}, {1.0, 0.0}};
        t.bandwidth_hz = t.base_hz * rng.uniform(0.08, 0.15);
        t.noise_mix = 0.0;
        break;
      case Family::ImpulseTrain:
        t.envelope = {{0.0, 1.0}, {1.0, 1.0}};
        t.pulse_hz = rng.uniform(4.0, 12.0);
        t.noise_mix = 0.05;
        break;
    }
    s.duration_s = std::round(rng.uniform(1.5, 4.5) * 100.0) / 100.0;
    out.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = i + 1; j < out.size(); ++j)
      if (out[i].timbre == out[j].timbre) throw ValidationError("catalog produced duplicate timbres");
  return out;
}

// ---------------------------------------------------------------- record file

inline std::string to_record(const EventSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << s.event_id << '\t' << s.label << '\t' << family_name(s.timbre.family) << '\t' << s.timbre.base_hz << '\t'
     << s.duration_s << '\t' << s.timbre.noise_mix << '\t';
  for (std::size_t i = 0; i < s.timbre.partials.size(); ++i) os << (i ? "," : "") << s.timbre.partials[i];
  os << '\t';
  for (std::size_t i = 0; i < s.timbre.envelope.size(); ++i)
    os << (i ? "," : "") << s.timbre.envelope[i].time << ':' << s.timbre.envelope[i].gain;
  os << '\t' << s.timbre.fm_ratio << '\t' << s.timbre.fm_index << '\t' << s.timbre.pulse_hz << '\t'
     << s.timbre.bandwidth_hz;
  return os.str();
}

inline EventSpec from_record(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, '\t')) f.push_back(item);
  if (f.size() != 12) throw ValidationError("catalog record needs 12 tab-separated fields, got " + std::to_string(f.size()));
  auto num = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw ValidationError("catalog record: bad number '" + v + "'");
    }
  };
  EventSpec s;
  s.event_id = f[0];
  s.label = f[1];
  s.timbre.family = parse_family(f[2]);
  s.timbre.base_hz = num(f[3]);
  s.duration_s = num(f[4]);
  s.timbre.noise_mix = num(f[5]);
  s.timbre.partials.clear();
  std::stringstream ps(f[6]);
  while (std::getline(ps, item, ',')) s.timbre.partials.push_back(num(item));
  s.timbre.envelope.clear();
  std::stringstream es(f[7]);
  while (std::getline(es, item, ',')) {
    auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("catalog record: bad breakpoint '" + item + "'");
    s.timbre.envelope.push_back({num(item.substr(0, colon)), num(item.substr(colon + 1))});
  }
  s.timbre.fm_ratio = num(f[8]);
  s.timbre.fm_index = num(f[9]);
  s.timbre.pulse_hz = num(f[10]);
  s.timbre.bandwidth_hz = num(f[11]);
  return s;
}

inline void write_catalog(const std::filesystem::path& path, const std::vector<EventSpec>& specs) {
  write_atomically(path, [&](std::ostream& os) {
    for (const auto& s : specs) os << to_record(s) << '\n';
  });
}

inline std::vector<EventSpec> read_catalog(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open catalog " + path.string());
  std::vector<EventSpec> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      out.push_back(from_record(line));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- ingestion

/// Reads a PCM16 WAV, averages stereo to mono, resamples to `rate`, and scales
/// samples by 1/32768.
inline AudioClip ingest_wav(const std::filesystem::path& path, int rate = audio::kDefaultRate) {
  auto wav = audio::read_wav_pcm16(path);
  const std::size_t frames = wav.interleaved.size() / wav.channels;
  std::vector<float> mono(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double s = 0;
    for (int c = 0; c < wav.channels; ++c) s += wav.interleaved[i * wav.channels + c];
    mono[i] = static_cast<float>(s / wav.channels / 32768.0);
  }
  auto res = audio::resample(mono, wav.sample_rate, rate);
  for (auto& v : res) v = std::clamp(v, -1.0f, 1.0f);
  return AudioClip(std::move(res), rate, path.stem().string());
}

}  // namespace refgen::bank
