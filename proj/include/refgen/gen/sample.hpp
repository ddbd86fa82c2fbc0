#pragma once

// Guided Euler sampling and end-to-end generation.

#include <string>
#include <vector>

#include "refgen/gen/train.hpp"

namespace refgen::gen {

/// Explicit Euler on the uniform grid lambda_i = i / steps, starting from
/// z0 ~ N(0, I). The conditional and unconditional branches run as one batch of
/// two. Velocities are accumulated in double and z_i = z0 + (sum of mu) / steps,
/// which is the Euler recursion with step 1 / steps written without the
/// repeated rounding of z += mu / steps.
template <class T>
Tensor<T> sample_ode(const VelocityModel<T>& model, const Conditioning<T>& cond, const Conditioning<T>& uncond,
                     const Shape& latent, int steps, double w, Rng& rng, Tensor<T>* z0_out = nullptr) {
  check_steps(steps);
  if (cond.prompt.dim(0) != 1 || uncond.prompt.dim(0) != 1) throw ValidationError("sample_ode: expects one example");
  const Shape one{1, latent[0], latent[1], latent[2]};
  const Tensor<T> z0 = Tensor<T>::randn(one, rng);
  if (z0_out) *z0_out = z0;
  const std::size_t per = z0.size();

  auto stack = [](const nn::Var<T>& a, const nn::Var<T>& b) {
    Shape s = a.shape();
    s[0] = 2;
    Tensor<T> t(s);
    std::copy(a.value().data.begin(), a.value().data.end(), t.data.begin());
    std::copy(b.value().data.begin(), b.value().data.end(), t.data.begin() + a.size());
    return nn::Var<T>(std::move(t));
  };
  const Conditioning<T> both{stack(cond.refs, uncond.refs), stack(cond.ref_text, uncond.ref_text),
                             stack(cond.prompt, uncond.prompt)};

  nn::NoGradGuard ng;
  std::vector<double> acc(per, 0.0);
  Tensor<T> z = z0;
  for (int i = 0; i < steps; ++i) {
    const double lam = static_cast<double>(i) / steps;
    Tensor<T> zz({2, latent[0], latent[1], latent[2]});
    std::copy(z.data.begin(), z.data.end(), zz.data.begin());
    std::copy(z.data.begin(), z.data.end(), zz.data.begin() + per);
    const auto mu = model(nn::Var<T>(std::move(zz)), {lam, lam}, both).value();
    for (std::size_t j = 0; j < per; ++j) {
      const double c = mu.data[j], u = mu.data[per + j];
      acc[j] += (1.0 - w) * u + w * c;
      z.data[j] = static_cast<T>(static_cast<double>(z0.data[j]) + acc[j] / steps);
    }
  }
  return z;
}

struct GenerateOptions {
  int steps = 25;
  double guidance = kGuidance;
  int griffin_lim_iterations = 32;
  std::uint64_t seed = 0;
};

/// Conditioning for one example from a prompt and up to K reference pairs;
/// missing slots are null pairs.
inline Conditioning<float> conditioning_for(const Encoders& enc, const std::string& prompt,
                                            const std::vector<forge::ReferencePair>& refs, int k) {
  if (static_cast<int>(refs.size()) > k)
    throw ValidationError("generate: " + std::to_string(refs.size()) + " references given, model takes at most " +
                          std::to_string(k));
  EncodedExample ex{"generate", enc.null_latent(), enc.caption(prompt), prompt, {}};
  for (const auto& r : refs) ex.references.push_back(enc.reference(r));
  while (static_cast<int>(ex.references.size()) < k) ex.references.push_back(enc.null_reference());
  return make_batch<float>({&ex}, enc.caption("")).cond;
}

/// Samples a latent, undoes the latent scaling and returns the decoded mel.
inline codec::Mel generate_mel(const MrcUnet<float>& net, const Encoders& enc, const std::string& prompt,
                               const std::vector<forge::ReferencePair>& refs, const GenerateOptions& opt) {
  const int k = net.reference_slots();
  const auto cond = conditioning_for(enc, prompt, refs, k);
  const Shape latent{enc.codec.channels(), enc.codec.latent_time(), enc.codec.latent_freq()};
  const auto uncond = null_conditioning<float>(1, k, latent, enc.caption(""));
  Rng rng(derive_seed(opt.seed, "sample"));
  auto z = sample_ode<float>(as_model(net), cond, uncond, latent, opt.steps, opt.guidance, rng);
  Tensor<float> grid = z.reshaped(latent);
  for (auto& v : grid.data) v = static_cast<float>(v / enc.latent_scale);
  return codec::decode_latent(grid, enc.codec);
}

/// Prompt plus reference pairs to a 10 s waveform via Griffin-Lim.
inline AudioClip generate(const MrcUnet<float>& net, const Encoders& enc, const std::string& prompt,
                          const std::vector<forge::ReferencePair>& refs, const GenerateOptions& opt = {}) {
  auto mel = generate_mel(net, enc, prompt, refs, opt);
  for (auto& v : mel.data) v = std::max(v, 0.0f);
  return codec::griffin_lim(mel, enc.codec.mel, opt.griffin_lim_iterations, derive_seed(opt.seed, "vocoder"))
      .fitted(audio::kClipSeconds);
}

}  // namespace refgen::gen
