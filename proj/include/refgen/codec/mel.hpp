#pragma once

// STFT, log-mel analysis and Griffin-Lim resynthesis.

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include <fftw3.h>
#include <Eigen/Core>

#include "refgen/audio/clip.hpp"
#include "refgen/core/rng.hpp"
#include "refgen/core/tensor.hpp"

namespace refgen::codec {

using audio::AudioClip;
using Mel = Tensor<float>;  // (frames, bins)

struct MelParams {
  int sample_rate = audio::kDefaultRate;
  int n_fft = 1024;
  int hop = 160;
  int n_mels = 64;
  int frames = 1024;  // analysis frames are zero-padded up to this count
  double fmin = 0.0;
  double fmax = 8000.0;

  int bins() const { return n_fft / 2 + 1; }
  std::size_t clip_samples() const { return audio::AudioClip::sample_count(audio::kClipSeconds, sample_rate); }
  int analysis_frames() const { return static_cast<int>(clip_samples() / hop); }
};

using Spec = std::vector<std::vector<std::complex<float>>>;  // [frame][bin]

inline std::vector<float> hann(int n) {
  std::vector<float> w(n);
  for (int i = 0; i < n; ++i) w[i] = static_cast<float>(0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / n));
  return w;
}

namespace detail {

// Reusable single-precision real FFT of one size. Planning is serialized because
// the FFTW planner is not thread-safe; execution on distinct buffers is.
class RealFft {
public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftwf_alloc_real(n);
    out_ = fftwf_alloc_complex(n / 2 + 1);
    std::lock_guard<std::mutex> lock(planner_mutex());
    fwd_ = fftwf_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
    inv_ = fftwf_plan_dft_c2r_1d(n, out_, in_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftwf_destroy_plan(fwd_);
    fftwf_destroy_plan(inv_);
    fftwf_free(in_);
    fftwf_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  float* real() { return in_; }
  std::complex<float>* spectrum() { return reinterpret_cast<std::complex<float>*>(out_); }
  void forward() { fftwf_execute(fwd_); }
  void inverse() { fftwf_execute(inv_); }  // unnormalized
  int size() const { return n_; }

  static RealFft& for_size(int n) {
    thread_local std::vector<std::unique_ptr<RealFft>> cache;
    for (auto& f : cache)
      if (f->n_ == n) return *f;
    cache.push_back(std::make_unique<RealFft>(n));
    return *cache.back();
  }

private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }
  int n_;
  float* in_;
  fftwf_complex* out_;
  fftwf_plan fwd_, inv_;
};

}  // namespace detail

/// Centered frames: frame t spans samples [t*hop - n_fft/2, t*hop + n_fft/2), zero outside the signal.
inline Spec stft(const std::vector<float>& x, const MelParams& p, int n_frames) {
  const auto win = hann(p.n_fft);
  auto& fft = detail::RealFft::for_size(p.n_fft);
  Spec out(n_frames);
  float* frame = fft.real();
  const long n = static_cast<long>(x.size());
  for (int t = 0; t < n_frames; ++t) {
    const long start = static_cast<long>(t) * p.hop - p.n_fft / 2;
    for (int i = 0; i < p.n_fft; ++i) {
      const long j = start + i;
      frame[i] = (j >= 0 && j < n) ? x[j] * win[i] : 0.0f;
    }
    fft.forward();
    out[t].assign(fft.spectrum(), fft.spectrum() + p.bins());
  }
  return out;
}

/// Least-squares inverse of `stft` for a signal of `length` samples.
inline std::vector<float> istft(const Spec& s, const MelParams& p, std::size_t length) {
  const auto win = hann(p.n_fft);
  auto& fft = detail::RealFft::for_size(p.n_fft);
  std::vector<double> acc(length, 0.0), norm(length, 0.0);
  const long n = static_cast<long>(length);
  const float inv_n = 1.0f / p.n_fft;
  for (std::size_t t = 0; t < s.size(); ++t) {
    std::copy(s[t].begin(), s[t].end(), fft.spectrum());
    fft.inverse();
    const float* frame = fft.real();
    const long start = static_cast<long>(t) * p.hop - p.n_fft / 2;
    for (int i = 0; i < p.n_fft; ++i) {
      const long j = start + i;
      if (j < 0 || j >= n) continue;
      acc[j] += static_cast<double>(frame[i] * inv_n) * win[i];
      norm[j] += static_cast<double>(win[i]) * win[i];
    }
  }
  std::vector<float> out(length);
  for (std::size_t j = 0; j < length; ++j) out[j] = norm[j] > 1e-8 ? static_cast<float>(acc[j] / norm[j]) : 0.0f;
  return out;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// Triangular HTK-scale filters with unit peak, (n_mels, bins) row-major.
inline const Eigen::MatrixXf& mel_filterbank(const MelParams& p) {
  thread_local MelParams cached{0};
  thread_local Eigen::MatrixXf fb;
  if (cached.sample_rate == p.sample_rate && cached.n_fft == p.n_fft && cached.n_mels == p.n_mels &&
      cached.fmin == p.fmin && cached.fmax == p.fmax)
    return fb;
  const int bins = p.bins();
  fb = Eigen::MatrixXf::Zero(p.n_mels, bins);
  const double m0 = hz_to_mel(p.fmin), m1 = hz_to_mel(p.fmax);
  std::vector<double> edges(p.n_mels + 2);
  for (int i = 0; i < p.n_mels + 2; ++i) edges[i] = mel_to_hz(m0 + (m1 - m0) * i / (p.n_mels + 1));
  for (int m = 0; m < p.n_mels; ++m)
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * p.sample_rate / p.n_fft;
      const double up = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double down = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb(m, k) = static_cast<float>(std::max(0.0, std::min(up, down)));
    }
  cached = p;
  return fb;
}

/// |STFT| as a (frames, bins) matrix.
inline Eigen::MatrixXf magnitude(const Spec& s) {
  Eigen::MatrixXf m(s.size(), s.empty() ? 0 : s[0].size());
  for (std::size_t t = 0; t < s.size(); ++t)
    for (std::size_t k = 0; k < s[t].size(); ++k) m(t, k) = std::abs(s[t][k]);
  return m;
}

/// log(1 + mel-weighted |STFT|), shape (frames, n_mels). Input is fitted to 10 s.
inline Mel mel_forward(const AudioClip& clip, const MelParams& p = {}) {
  if (clip.sample_rate != p.sample_rate)
    throw ValidationError("mel_forward: clip rate " + std::to_string(clip.sample_rate) + " Hz, expected " +
                          std::to_string(p.sample_rate));
  auto x = clip.samples;
  x.resize(p.clip_samples(), 0.0f);
  const int nf = p.analysis_frames();
  Eigen::MatrixXf mel = magnitude(stft(x, p, nf)) * mel_filterbank(p).transpose();
  Mel out({p.frames, p.n_mels});
  for (int t = 0; t < nf && t < p.frames; ++t)
    for (int m = 0; m < p.n_mels; ++m) out.data[t * p.n_mels + m] = std::log1p(mel(t, m));
  return out;
}

/// Non-negative least squares estimate of |STFT| from mel magnitudes via
/// multiplicative updates; rows are frames.
inline Eigen::MatrixXf mel_to_linear(const Eigen::MatrixXf& mel_mag, const MelParams& p, int iterations = 60) {
  const auto& fb = mel_filterbank(p);
  Eigen::MatrixXf s = (mel_mag * fb).cwiseMax(0.0f);  // back-projection seeds the support
  s.array() += 1e-6f;
  const Eigen::MatrixXf numer = mel_mag * fb;
  for (int it = 0; it < iterations; ++it) {
    Eigen::MatrixXf denom = (s * fb.transpose()) * fb;
    s.array() *= numer.array() / (denom.array() + 1e-9f);
  }
  return s;
}

struct GriffinLimResult {
  AudioClip clip;
  std::vector<double> consistency;  // ||  |STFT(x_i)| - S || / ||S|| after each iteration
};

/// Phase reconstruction of a 10 s clip from a log-mel grid.
inline GriffinLimResult griffin_lim_detailed(const Mel& mel, const MelParams& p, int iterations, std::uint64_t seed = 0) {
  if (iterations < 1) throw ValidationError("griffin_lim: iterations must be >= 1");
  REFGEN_CHECK(mel.rank() == 2 && mel.dim(0) == p.frames && mel.dim(1) == p.n_mels,
               "griffin_lim: mel shape " + shape_str(mel.shape) + " does not match the analysis parameters");
  const int nf = p.analysis_frames();
  Eigen::MatrixXf mm(nf, p.n_mels);
  for (int t = 0; t < nf; ++t)
    for (int m = 0; m < p.n_mels; ++m) mm(t, m) = std::max(0.0f, std::expm1(mel.data[t * p.n_mels + m]));
  GriffinLimResult res;
  const std::size_t length = p.clip_samples();
  if (mm.maxCoeff() <= 0.0f) {
    res.clip = AudioClip(std::vector<float>(length, 0.0f), p.sample_rate);
    res.consistency.assign(iterations, 0.0);
    return res;
  }
  const Eigen::MatrixXf target = mel_to_linear(mm, p);
  const double tnorm = target.norm();
  Rng rng(derive_seed(seed, "griffin-lim"));
  Spec spec(nf, std::vector<std::complex<float>>(p.bins()));
  for (int t = 0; t < nf; ++t)
    for (int k = 0; k < p.bins(); ++k) spec[t][k] = std::polar(target(t, k), static_cast<float>(rng.uniform(0, 2 * std::numbers::pi)));
  std::vector<float> x;
  for (int it = 0; it < iterations; ++it) {
    x = istft(spec, p, length);
    Spec re = stft(x, p, nf);
    double err = 0;
    for (int t = 0; t < nf; ++t)
      for (int k = 0; k < p.bins(); ++k) {
        const float a = std::abs(re[t][k]);
        const double d = a - target(t, k);
        err += d * d;
        spec[t][k] = a > 1e-12f ? re[t][k] * (target(t, k) / a) : std::complex<float>(target(t, k), 0.0f);
      }
    res.consistency.push_back(std::sqrt(err) / tnorm);
  }
  for (auto& v : x) v = std::clamp(v, -1.0f, 1.0f);
  res.clip = AudioClip(std::move(x), p.sample_rate);
  return res;
}

inline AudioClip griffin_lim(const Mel& mel, const MelParams& p, int iterations, std::uint64_t seed = 0) {
  return griffin_lim_detailed(mel, p, iterations, seed).clip;
}

}  // namespace refgen::codec
