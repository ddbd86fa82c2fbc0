#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "refgen/nn/ops.hpp"

namespace refgen::nn {

/// Named, ordered parameter registry. Layers register into it at construction.
template <class T>
class ParamSet {
public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    for (const auto& [n, v] : items_)
      REFGEN_CHECK(n != name, "duplicate parameter name " + name);
    Var<T> v(std::move(init), true);
    items_.emplace_back(name, v);
    return v;
  }

  std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }

  Var<T>* find(const std::string& name) {
    for (auto& [n, v] : items_)
      if (n == name) return &v;
    return nullptr;
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (const auto& [n, v] : items_) c += v.size();
    return c;
  }

  void zero_grad() {
    for (auto& [n, v] : items_) v.zero_grad();
  }

private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

inline int norm_groups(int channels) {
  return std::gcd(channels, 8);
}

template <class T>
struct Conv2d {
  Var<T> w, b;
  int stride = 1;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, int in, int out, int k, Rng& rng, int stride_ = 1,
         bool zero_init = false)
      : stride(stride_) {
    const T sc = zero_init ? T(0) : static_cast<T>(1.0 / std::sqrt(static_cast<double>(in * k * k)));
    w = ps.add(name + ".w", Tensor<T>::randn({out, in, k, k}, rng, sc));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride); }
};

template <class T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng) {
    w = ps.add(name + ".w", Tensor<T>::randn({in, out}, rng, static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)))));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <class T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamSet<T>& ps, const std::string& name, int channels) : groups(norm_groups(channels)) {
    gamma = ps.add(name + ".g", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".b", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

/// Sinusoidal features of a flow position in [0, 1]; (N) -> (N, dim).
template <class T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& lambdas, int dim) {
  const int n = static_cast<int>(lambdas.size()), half = dim / 2;
  Tensor<T> out({n, dim});
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / half);
      double arg = lambdas[b] * 1000.0 * freq;
      out[b * dim + i] = static_cast<T>(std::sin(arg));
      out[b * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  return out;
}

/// GN-SiLU-conv, flow-embedding bias, GN-SiLU-conv, residual.
template <class T>
struct ResBlock {
  GroupNorm<T> n1, n2;
  Conv2d<T> c1, c2, skip;
  Linear<T> temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParamSet<T>& ps, const std::string& name, int in, int out, int temb_dim, Rng& rng)
      : n1(ps, name + ".n1", in),
        n2(ps, name + ".n2", out),
        c1(ps, name + ".c1", in, out, 3, rng),
        c2(ps, name + ".c2", out, out, 3, rng),
        temb(ps, name + ".temb", temb_dim, out, rng),
        has_skip(in != out) {
    if (has_skip) skip = Conv2d<T>(ps, name + ".skip", in, out, 1, rng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& t) const {
    Var<T> h = c1(silu(n1(x)));
    h = channel_bias(h, temb(t));
    h = c2(silu(n2(h)));
    return add(has_skip ? skip(x) : x, h);
  }
};

/// Single-head cross-attention from a feature map onto a token context.
/// Context is channel-major (N, D, L). The output projection may start at zero.
template <class T>
struct CrossAttention {
  GroupNorm<T> norm;
  Conv2d<T> q, k, v, o;

  CrossAttention() = default;
  CrossAttention(ParamSet<T>& ps, const std::string& name, int channels, int ctx_dim, Rng& rng, bool zero_out = false)
      : norm(ps, name + ".norm", channels),
        q(ps, name + ".q", channels, channels, 1, rng),
        k(ps, name + ".k", ctx_dim, channels, 1, rng),
        v(ps, name + ".v", ctx_dim, channels, 1, rng),
        o(ps, name + ".o", channels, channels, 1, rng, 1, zero_out) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& ctx) const {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int d = ctx.dim(1), l = ctx.dim(2);
    Var<T> ctx4 = reshape(ctx, {n, d, l, 1});
    Var<T> qs = reshape(q(norm(x)), {n, c, h * w});
    Var<T> ks = reshape(k(ctx4), {n, c, l});
    Var<T> vs = reshape(v(ctx4), {n, c, l});
    Var<T> a = reshape(attention(qs, ks, vs), {n, c, h, w});
    return add(x, o(a));
  }
};

}  // namespace refgen::nn
