#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "refgen/audio/clip.hpp"

namespace refgen::audio {

/// Band-limited resampling by windowed-sinc interpolation (Hann window,
/// `half_taps` zero crossings per side, cutoff at the lower Nyquist rate).
inline std::vector<float> resample(const std::vector<float>& x, int from_rate, int to_rate, int half_taps = 16) {
  REFGEN_CHECK(from_rate > 0 && to_rate > 0, "resample: rates must be positive");
  if (from_rate == to_rate || x.empty()) return x;
  const double ratio = static_cast<double>(to_rate) / from_rate;
  const double cutoff = std::min(1.0, ratio);
  const double support = half_taps / cutoff;
  const std::size_t out_len = static_cast<std::size_t>(std::llround(x.size() * ratio));
  std::vector<float> y(out_len);
  const long n_in = static_cast<long>(x.size());
  for (std::size_t n = 0; n < out_len; ++n) {
    const double t = n / ratio;
    const long lo = static_cast<long>(std::ceil(t - support));
    const long hi = static_cast<long>(std::floor(t + support));
    double acc = 0;
    for (long k = std::max(0L, lo); k <= std::min(n_in - 1, hi); ++k) {
      const double d = t - k;
      const double arg = d * cutoff;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * d / support);
      acc += x[k] * cutoff * sinc * win;
    }
    y[n] = static_cast<float>(acc);
  }
  return y;
}

}  // namespace refgen::audio
