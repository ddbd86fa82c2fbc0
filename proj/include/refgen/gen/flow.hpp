#pragma once

// Rectified-flow path, velocity target and guidance combination.

#include <string>

#include "refgen/core/tensor.hpp"

namespace refgen::gen {

inline constexpr double kSigma = 1e-5;
inline constexpr int kMaxSteps = 50;
inline constexpr double kGuidance = 2.0;

namespace detail {
template <class T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape != b.shape)
    throw ValidationError(std::string(what) + ": shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
}
}  // namespace detail

/// (1 - (1 - sigma) * lambda) * z0 + lambda * z1.
template <class T>
Tensor<T> flow_interpolate(const Tensor<T>& z0, const Tensor<T>& z1, double lambda, double sigma = kSigma) {
  detail::require_pair(z0, z1, "flow_interpolate");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("flow_interpolate: lambda " + std::to_string(lambda) + " outside [0, 1]");
  if (!(sigma > 0.0 && sigma < 1.0)) throw ValidationError("flow_interpolate: sigma must lie in (0, 1)");
  Tensor<T> out(z0.shape);
  const double a = 1.0 - (1.0 - sigma) * lambda;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * z0[i] + lambda * z1[i]);
  return out;
}

/// z1 - (1 - sigma) * z0.
template <class T>
Tensor<T> velocity_target(const Tensor<T>& z0, const Tensor<T>& z1, double sigma = kSigma) {
  detail::require_pair(z0, z1, "velocity_target");
  Tensor<T> out(z0.shape);
  const double beta = 1.0 - sigma;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(z1[i] - beta * z0[i]);
  return out;
}

/// mu_uncond + w * (mu_cond - mu_uncond), evaluated as (1 - w) * mu_uncond + w * mu_cond
/// so that w = 1 and w = 0 return the inputs exactly.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& mu_cond, const Tensor<T>& mu_uncond, double w) {
  detail::require_pair(mu_cond, mu_uncond, "cfg_combine");
  Tensor<T> out(mu_cond.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((1.0 - w) * mu_uncond[i] + w * mu_cond[i]);
  return out;
}

inline void check_steps(int steps) {
  if (steps < 1 || steps > kMaxSteps)
    throw ValidationError("steps must be in [1, " + std::to_string(kMaxSteps) + "], got " + std::to_string(steps));
}

}  // namespace refgen::gen
