#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "refgen/core/error.hpp"

namespace refgen::audio {

inline constexpr int kDefaultRate = 16000;
inline constexpr double kClipSeconds = 10.0;

/// Mono waveform with its sample rate. Samples are kept in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = kDefaultRate;
  std::optional<std::string> label;

  AudioClip() = default;
  AudioClip(std::vector<float> s, int rate, std::optional<std::string> l = std::nullopt)
      : samples(std::move(s)), sample_rate(rate), label(std::move(l)) {
    REFGEN_CHECK(rate > 0, "sample rate must be positive");
  }

  static AudioClip silence(double seconds, int rate = kDefaultRate) {
    return AudioClip(std::vector<float>(sample_count(seconds, rate), 0.0f), rate);
  }

  static std::size_t sample_count(double seconds, int rate) {
    return static_cast<std::size_t>(std::llround(seconds * rate));
  }

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }

  double rms() const {
    if (samples.empty()) return 0.0;
    double s = 0;
    for (float v : samples) s += static_cast<double>(v) * v;
    return std::sqrt(s / samples.size());
  }

  float peak() const {
    float m = 0;
    for (float v : samples) m = std::max(m, std::abs(v));
    return m;
  }

  bool is_silent() const {
    return std::all_of(samples.begin(), samples.end(), [](float v) { return v == 0.0f; });
  }

  /// Zero-pads or truncates to exactly `seconds`.
  AudioClip fitted(double seconds) const {
    AudioClip out = *this;
    out.samples.resize(sample_count(seconds, sample_rate), 0.0f);
    return out;
  }

  AudioClip segment(std::size_t begin, std::size_t count) const {
    REFGEN_CHECK(begin + count <= samples.size(), "segment out of range");
    return AudioClip(std::vector<float>(samples.begin() + begin, samples.begin() + begin + count), sample_rate, label);
  }
};

inline double rms(const std::vector<float>& x) {
  if (x.empty()) return 0.0;
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  return std::sqrt(s / x.size());
}

}  // namespace refgen::audio
