#pragma once

// Multi-reference UNet: a feature-encoding path over the noisy latent, a
// reference path with its own weights over the slot-stacked reference latents,
// and a decoder that receives both.

#include <array>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "refgen/core/archive.hpp"
#include "refgen/nn/layers.hpp"

namespace refgen::gen {

inline constexpr int kLevels = 3;
inline constexpr int kAlignTime = 96;
inline constexpr int kAlignFreq = 6;

struct MrcConfig {
  int latent_channels = 16;
  int n_hidden = 32;
  int k_max = 3;
  int d_text = 256;
  int latent_time = 256;
  int latent_freq = 16;
  std::array<bool, kLevels> attention{false, true, true};
  double sigma_data = 0.5;
  int pos_channels = 16;  // fixed sinusoidal coordinates fed to both stems; even, 0 disables
  std::uint64_t seed = 0;

  int width(int level) const { return n_hidden << level; }
  int temb_dim() const { return 4 * n_hidden; }
  void validate() const {
    if (n_hidden < 1 || latent_channels < 1 || k_max < 1 || d_text < 1)
      throw ValidationError("MRC config: widths and k_max must be positive");
    if (latent_time % 4 || latent_freq % 4) throw ValidationError("MRC config: latent grid must be divisible by 4");
    if (pos_channels < 0 || pos_channels % 2) throw ValidationError("MRC config: pos_channels must be even and >= 0");
  }
};

/// Full-size model widths: base (96) and large (128).
inline MrcConfig full_scale_model_preset(bool large = false) {
  MrcConfig c;
  c.n_hidden = large ? 128 : 96;
  return c;
}

/// Network inputs other than the noisy latent. Shapes:
/// refs (N, C, K*T, F), ref_text (N, D, K*50), prompt (N, D, 50).
template <class T>
struct Conditioning {
  nn::Var<T> refs, ref_text, prompt;
};

/// Coordinate channels for a (H, W) grid whose time axis repeats every `period`
/// rows: sin/cos pairs at octave frequencies, three quarters on time, the rest
/// on frequency. Shape (n, channels, H, W).
template <class T>
Tensor<T> coordinate_channels(int n, int channels, int h, int w, int period) {
  Tensor<T> out({n, channels, h, w});
  const int pairs = channels / 2, time_pairs = pairs - pairs / 4;
  for (int p = 0; p < pairs; ++p) {
    const bool on_time = p < time_pairs;
    const int octave = on_time ? p : p - time_pairs;
    const double len = on_time ? period : w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double pos = on_time ? y % period : x;
        const double a = 2 * std::numbers::pi * std::ldexp(1.0, octave) * (pos + 0.5) / len;
        out.at(0, 2 * p, y, x) = static_cast<T>(std::sin(a));
        out.at(0, 2 * p + 1, y, x) = static_cast<T>(std::cos(a));
      }
  }
  const std::size_t per = out.size() / n;
  for (int b = 1; b < n; ++b) std::copy_n(out.data.begin(), per, out.data.begin() + b * per);
  return out;
}

template <class T>
struct EncoderPath {
  int pos_channels = 0, period = 1;
  nn::Conv2d<T> stem;
  std::array<nn::ResBlock<T>, kLevels> blocks;
  std::array<std::optional<nn::CrossAttention<T>>, kLevels> attn;
  std::array<nn::Conv2d<T>, kLevels - 1> down;

  EncoderPath() = default;
  EncoderPath(nn::ParamSet<T>& ps, const std::string& name, const MrcConfig& c, Rng& rng) {
    pos_channels = c.pos_channels;
    period = c.latent_time;
    stem = nn::Conv2d<T>(ps, name + ".stem", c.latent_channels + c.pos_channels, c.width(0), 3, rng);
    for (int l = 0; l < kLevels; ++l) {
      const std::string ln = name + ".l" + std::to_string(l);
      blocks[l] = nn::ResBlock<T>(ps, ln + ".res", l == 0 ? c.width(0) : c.width(l - 1), c.width(l), c.temb_dim(), rng);
      if (c.attention[l]) attn[l].emplace(ps, ln + ".ca", c.width(l), c.d_text, rng);
      if (l + 1 < kLevels) down[l] = nn::Conv2d<T>(ps, ln + ".down", c.width(l), c.width(l), 3, rng, 2);
    }
  }

  /// Per-level features (before downsampling) and the bottom output.
  std::pair<std::array<nn::Var<T>, kLevels>, nn::Var<T>> operator()(const nn::Var<T>& x, const nn::Var<T>& temb,
                                                                    const nn::Var<T>& ctx) const {
    std::array<nn::Var<T>, kLevels> feats;
    nn::Var<T> h = pos_channels ? stem(nn::concat_channels(
                                      x, nn::Var<T>(coordinate_channels<T>(x.dim(0), pos_channels, x.dim(2), x.dim(3), period))))
                                : stem(x);
    for (int l = 0; l < kLevels; ++l) {
      h = blocks[l](h, temb);
      if (attn[l]) h = (*attn[l])(h, ctx);
      feats[l] = h;
      if (l + 1 < kLevels) h = down[l](h);
    }
    return {feats, h};
  }
};

/// Squeezes K_new folded slots onto the K_max layout the decoder was trained on,
/// through a fixed (96, 6) grid.
template <class T>
struct AlignmentBlock {
  nn::Conv2d<T> conv;
  AlignmentBlock() = default;
  AlignmentBlock(nn::ParamSet<T>& ps, const std::string& name, int width, int k_new, int k_max, Rng& rng) {
    conv = nn::Conv2d<T>(ps, name, k_new * width, k_max * width, 3, rng, 1, true);
    // Identity on the shared slots so adaptation starts from the trained behaviour.
    auto& w = conv.w.mutable_value();
    for (int s = 0; s < std::min(k_new, k_max); ++s)
      for (int ch = 0; ch < width; ++ch) w.at(s * width + ch, s * width + ch, 1, 1) = T(1);
  }
  nn::Var<T> squeeze(const nn::Var<T>& folded) const {
    return conv(nn::adaptive_avg_pool(folded, kAlignTime, kAlignFreq));
  }
};

template <class T>
struct MrcUnet {
  MrcConfig cfg;
  nn::ParamSet<T> params;
  nn::Linear<T> t1, t2;
  EncoderPath<T> feature, reference;
  nn::ResBlock<T> mid;
  std::optional<nn::CrossAttention<T>> mid_attn;
  std::array<nn::Conv2d<T>, kLevels> inject;
  std::array<nn::ResBlock<T>, kLevels> dec;
  std::array<std::optional<nn::CrossAttention<T>>, kLevels> dec_prompt, dec_ref;
  nn::GroupNorm<T> out_norm;
  nn::Conv2d<T> out;

  // Present only after adapt_reference_count.
  int k_align = 0;
  nn::ParamSet<T> align_params;
  std::array<AlignmentBlock<T>, kLevels> align;

  explicit MrcUnet(MrcConfig c) : cfg(c) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "mrc-init"));
    const int h0 = cfg.width(0);
    t1 = nn::Linear<T>(params, "temb.1", h0, cfg.temb_dim(), rng);
    t2 = nn::Linear<T>(params, "temb.2", cfg.temb_dim(), cfg.temb_dim(), rng);
    feature = EncoderPath<T>(params, "feat", cfg, rng);
    reference = EncoderPath<T>(params, "ref", cfg, rng);
    const int top = cfg.width(kLevels - 1);
    mid = nn::ResBlock<T>(params, "mid.res", top, top, cfg.temb_dim(), rng);
    if (cfg.attention[kLevels - 1]) mid_attn.emplace(params, "mid.ca", top, cfg.d_text, rng);
    for (int l = kLevels - 1; l >= 0; --l) {
      const std::string ln = "dec.l" + std::to_string(l);
      const int din = l == kLevels - 1 ? top : cfg.width(l + 1);
      inject[l] = nn::Conv2d<T>(params, ln + ".inject", 2 * cfg.k_max * cfg.width(l), din, 1, rng, 1, true);
      dec[l] = nn::ResBlock<T>(params, ln + ".res", din + cfg.width(l), cfg.width(l), cfg.temb_dim(), rng);
      if (cfg.attention[l]) {
        dec_prompt[l].emplace(params, ln + ".ca_prompt", cfg.width(l), cfg.d_text, rng);
        dec_ref[l].emplace(params, ln + ".ca_ref", cfg.width(l), cfg.d_text, rng, true);
      }
    }
    out_norm = nn::GroupNorm<T>(params, "out.norm", h0);
    out = nn::Conv2d<T>(params, "out.conv", h0, cfg.latent_channels, 3, rng);
  }

  MrcUnet(const MrcUnet&) = delete;
  MrcUnet& operator=(const MrcUnet&) = delete;

  int reference_slots() const { return k_align ? k_align : cfg.k_max; }

  /// Adds alignment blocks for `k_new` reference slots and freezes everything else.
  void add_alignment(int k_new, std::uint64_t seed) {
    if (k_new < 1) throw ValidationError("reference count must be positive");
    Rng rng(derive_seed(seed, "mrc-align"));
    align_params = nn::ParamSet<T>();
    for (int l = 0; l < kLevels; ++l)
      align[l] = AlignmentBlock<T>(align_params, "align.l" + std::to_string(l), cfg.width(l), k_new, cfg.k_max, rng);
    k_align = k_new;
    for (auto& [name, v] : params.items()) v.set_requires_grad(false);
  }

  void check_inputs(const nn::Var<T>& z, const std::vector<double>& lambdas, const Conditioning<T>& c) const {
    const int n = z.dim(0), k = reference_slots();
    auto bad = [](const std::string& what, const Shape& got, const Shape& want) {
      throw ValidationError("mrc_forward: " + what + " shape " + shape_str(got) + ", expected " + shape_str(want));
    };
    const Shape zs{n, cfg.latent_channels, cfg.latent_time, cfg.latent_freq};
    if (z.shape() != zs) bad("latent", z.shape(), zs);
    if (static_cast<int>(lambdas.size()) != n) throw ValidationError("mrc_forward: one lambda per example required");
    const Shape rs{n, cfg.latent_channels, k * cfg.latent_time, cfg.latent_freq};
    if (c.refs.shape() != rs) bad("reference latent", c.refs.shape(), rs);
    const Shape es{n, cfg.d_text, k * 50};
    if (c.ref_text.shape() != es) bad("reference caption", c.ref_text.shape(), es);
    const Shape cs{n, cfg.d_text, 50};
    if (c.prompt.shape() != cs) bad("prompt", c.prompt.shape(), cs);
  }

  /// Predicted velocity, same shape as z.
  nn::Var<T> forward(const nn::Var<T>& z, const std::vector<double>& lambdas, const Conditioning<T>& c) const {
    check_inputs(z, lambdas, c);
    const int k = reference_slots();
    std::vector<double> c_in, c_skip, c_out;
    for (double lam : lambdas) {
      const auto pc = precondition(lam);
      c_in.push_back(pc[0]);
      c_skip.push_back(pc[1]);
      c_out.push_back(pc[2]);
    }
    nn::Var<T> emb(nn::sinusoidal_embedding<T>(lambdas, cfg.width(0)));
    nn::Var<T> temb = nn::silu(t2(nn::silu(t1(emb))));

    auto [skips, bottom] = feature(nn::scale_examples(z, c_in), temb, c.prompt);
    auto [rfeat, rbottom] = reference(c.refs, temb, c.ref_text);
    (void)rbottom;

    nn::Var<T> d = mid(bottom, temb);
    if (mid_attn) d = (*mid_attn)(d, c.prompt);
    for (int l = kLevels - 1; l >= 0; --l) {
      if (l < kLevels - 1) d = nn::upsample_nearest2x(d);
      nn::Var<T> folded = nn::fold_slots(rfeat[l], k);
      if (k_align) {
        const int tl = folded.dim(2), fl = folded.dim(3);
        folded = nn::bilinear_resize(align[l].squeeze(folded), tl, fl);
      }
      d = nn::add(d, inject[l](nn::concat_channels(folded, nn::time_mean_broadcast(folded))));
      nn::Var<T> h = dec[l](nn::concat_channels(d, skips[l]), temb);
      if (dec_prompt[l]) h = (*dec_prompt[l])(h, c.prompt);
      if (dec_ref[l]) h = (*dec_ref[l])(h, c.ref_text);
      d = h;
    }
    return nn::add(nn::scale_examples(z, c_skip), nn::scale_examples(out(nn::silu(out_norm(d))), c_out));
  }

  /// {c_in, c_skip, c_out} at lambda. c_in whitens z_lambda for unit-variance
  /// latents. c_skip * z_lambda is the least-squares velocity estimate when the
  /// clean latent has spread sigma_data around the network's guess, and c_out
  /// is the standard deviation that estimate leaves.
  std::array<double, 3> precondition(double lambda) const {
    const double s2 = cfg.sigma_data * cfg.sigma_data, u = 1 - lambda;
    const double d = u * u + lambda * lambda * s2;
    return {1.0 / std::sqrt(u * u + lambda * lambda), (lambda * s2 - u) / d, cfg.sigma_data / std::sqrt(d)};
  }

  /// Output of the alignment squeeze at each level for the given conditioning (diagnostics).
  std::array<Shape, kLevels> alignment_grids(const Conditioning<T>& c, const std::vector<double>& lambdas) const {
    REFGEN_CHECK(k_align > 0, "no alignment blocks present");
    nn::NoGradGuard ng;
    nn::Var<T> emb(nn::sinusoidal_embedding<T>(lambdas, cfg.width(0)));
    nn::Var<T> temb = nn::silu(t2(nn::silu(t1(emb))));
    auto [rfeat, rb] = reference(c.refs, temb, c.ref_text);
    (void)rb;
    std::array<Shape, kLevels> out_shapes;
    for (int l = 0; l < kLevels; ++l) out_shapes[l] = align[l].squeeze(nn::fold_slots(rfeat[l], k_align)).shape();
    return out_shapes;
  }

  // ------------------------------------------------------------ persistence

  void store(Archive& ar, const std::string& prefix = "mrc.") const {
    ar.strings[prefix + "config"] = config_string();
    for (const auto& [name, v] : params.items()) ar.tensors[prefix + name] = v.value().template cast<float>();
    if (k_align) {
      ar.strings[prefix + "k_align"] = std::to_string(k_align);
      for (const auto& [name, v] : align_params.items()) ar.tensors[prefix + name] = v.value().template cast<float>();
    }
  }

  std::string config_string() const {
    std::string a;
    for (bool b : cfg.attention) a += b ? '1' : '0';
    return std::to_string(cfg.latent_channels) + ' ' + std::to_string(cfg.n_hidden) + ' ' + std::to_string(cfg.k_max) + ' ' +
           std::to_string(cfg.d_text) + ' ' + std::to_string(cfg.latent_time) + ' ' + std::to_string(cfg.latent_freq) + ' ' + a + ' ' + std::to_string(cfg.sigma_data) + ' ' + std::to_string(cfg.pos_channels);
  }

  static MrcConfig parse_config(const std::string& s) {
    MrcConfig c;
    std::istringstream is(s);
    std::string a;
    is >> c.latent_channels >> c.n_hidden >> c.k_max >> c.d_text >> c.latent_time >> c.latent_freq >> a >> c.sigma_data >> c.pos_channels;
    if (!is || a.size() != kLevels) throw IoError("malformed MRC config record '" + s + "'");
    for (int l = 0; l < kLevels; ++l) c.attention[l] = a[l] == '1';
    return c;
  }

  static std::unique_ptr<MrcUnet> restore(const Archive& ar, const std::string& prefix = "mrc.") {
    auto m = std::make_unique<MrcUnet>(parse_config(ar.string(prefix + "config")));
    m->load_values(ar, prefix);
    return m;
  }

  void load_values(const Archive& ar, const std::string& prefix = "mrc.") {
    auto load = [&](nn::ParamSet<T>& ps) {
      for (auto& [name, v] : ps.items()) {
        const auto& t = ar.tensor(prefix + name);
        require_same_shape(t.shape, v.shape(), (prefix + name).c_str());
        v.mutable_value() = t.template cast<T>();
      }
    };
    load(params);
    if (ar.strings.count(prefix + "k_align")) {
      add_alignment(std::stoi(ar.string(prefix + "k_align")), 0);
      load(align_params);
    }
  }
};

}  // namespace refgen::gen
