#pragma once

// Differentiable tensor ops. Feature maps are (N, C, H, W) with H the time
// axis and W the frequency axis; token sequences are channel-major (N, C, L).

#include <algorithm>
#include <array>
#include <memory>
#include <cmath>
#include <vector>

#include "refgen/nn/autograd.hpp"

namespace refgen::nn {

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = parent_grad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

/// Multiplies example b of a batch (leading axis) by coeffs[b].
template <class T>
Var<T> scale_examples(const Var<T>& a, const std::vector<double>& coeffs) {
  const int n = a.dim(0);
  REFGEN_CHECK(static_cast<int>(coeffs.size()) == n, "scale_examples: one coefficient per example required");
  const std::size_t per = a.size() / n;
  Tensor<T> out = a.value();
  for (int b = 0; b < n; ++b)
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = static_cast<T>(out[i] * coeffs[b]);
  return make_result<T>(std::move(out), {a}, [coeffs, n, per](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int b = 0; b < n; ++b)
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) (*g)[i] += static_cast<T>(self.grad[i] * coeffs[b]);
  });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Tensor<T> out(a.shape());
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::Map<const Arr> x(a.value().ptr(), n);
  Eigen::Map<Arr>(out.ptr(), n) = x / (T(1) + (-x).exp());
  return make_result<T>(std::move(out), {a}, [n](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      Eigen::Map<const Arr> xv(parent_value(self, 0).ptr(), n), gy(self.grad.ptr(), n);
      Arr sig = (T(1) + (-xv).exp()).inverse();
      Eigen::Map<Arr>(g->ptr(), n) += gy * sig * (T(1) + xv * (T(1) - sig));
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::max(v, T(0));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& x = parent_value(self, 0);
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > T(0)) (*g)[i] += self.grad[i];
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out({1});
  out[0] = static_cast<T>(a.value().sum());
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (auto& v : g->data) v += self.grad[0];
  });
}

/// Mean squared error against a constant target.
template <class T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape, "mse");
  const std::size_t n = target.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = static_cast<double>(pred.value()[i]) - target[i];
    acc += d * d;
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  return make_result<T>(std::move(out), {pred}, [target](Node<T>& self) {
    const auto& p = parent_value(self, 0);
    if (auto* g = parent_grad(self, 0)) {
      const T k = self.grad[0] * T(2) / static_cast<T>(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] += k * (p[i] - target[i]);
    }
  });
}

/// Per-example squared error, summed over all but the batch axis: (N, ...) -> (N).
template <class T>
Var<T> per_example_sse(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape, "per_example_sse");
  const int n = pred.dim(0);
  const std::size_t per = pred.size() / n;
  Tensor<T> out({n});
  for (int b = 0; b < n; ++b) {
    double acc = 0;
    for (std::size_t i = 0; i < per; ++i) {
      double d = static_cast<double>(pred.value()[b * per + i]) - target[b * per + i];
      acc += d * d;
    }
    out[b] = static_cast<T>(acc);
  }
  return make_result<T>(std::move(out), {pred}, [target, n, per](Node<T>& self) {
    const auto& p = parent_value(self, 0);
    if (auto* g = parent_grad(self, 0))
      for (int b = 0; b < n; ++b)
        for (std::size_t i = 0; i < per; ++i)
          (*g)[b * per + i] += self.grad[b] * T(2) * (p[b * per + i] - target[b * per + i]);
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------- dense layers

/// x (N, in) * w (in, out) + b (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int n = x.dim(0), in = x.dim(1), outd = w.dim(1);
  REFGEN_CHECK(w.dim(0) == in, "linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  Tensor<T> out({n, outd});
  auto O = as_mat(out.ptr(), n, outd);
  // Row by row, so an example's output does not depend on the batch size.
  const auto W = as_mat(w.value().ptr(), in, outd);
  const auto X = as_mat(x.value().ptr(), n, in);
  for (int r = 0; r < n; ++r) O.row(r).noalias() = X.row(r) * W;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < outd; ++c) O(r, c) += b.value()[c];
  return make_result<T>(std::move(out), {x, w, b}, [n, in, outd](Node<T>& self) {
    auto G = as_mat(static_cast<const T*>(self.grad.ptr()), n, outd);
    if (auto* gx = parent_grad(self, 0))
      as_mat(gx->ptr(), n, in).noalias() += G * as_mat(parent_value(self, 1).ptr(), in, outd).transpose();
    if (auto* gw = parent_grad(self, 1))
      as_mat(gw->ptr(), in, outd).noalias() += as_mat(parent_value(self, 0).ptr(), n, in).transpose() * G;
    if (auto* gb = parent_grad(self, 2))
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < outd; ++c) (*gb)[c] += G(r, c);
  });
}

/// Adds v (N, C) to every spatial position of x (N, C, H, W).
template <class T>
Var<T> channel_bias(const Var<T>& x, const Var<T>& v) {
  const int n = x.dim(0), c = x.dim(1);
  REFGEN_CHECK(v.dim(0) == n && v.dim(1) == c, "channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t hw = x.size() / (static_cast<std::size_t>(n) * c);
  Tensor<T> out = x.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      T add = v.value()[b * c + ch];
      T* p = out.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += add;
    }
  return make_result<T>(std::move(out), {x, v}, [n, c, hw](Node<T>& self) {
    if (auto* gx = parent_grad(self, 0))
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
    if (auto* gv = parent_grad(self, 1))
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          const T* p = self.grad.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
          T s = 0;
          for (std::size_t i = 0; i < hw; ++i) s += p[i];
          (*gv)[b * c + ch] += s;
        }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

template <class T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + ((static_cast<std::size_t>(ch) * k + ki) * k + kj) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kj), hi = std::min(wo, w + pad - kj);
            std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::copy(src + lo - pad + kj, src + hi - pad + kj, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + wo, T(0));
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + ((static_cast<std::size_t>(ch) * k + ki) * k + kj) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const T* srcrow = row + static_cast<std::size_t>(oy) * wo;
          T* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kj), hi = std::min(wo, w + pad - kj);
            T* d = dst - pad + kj;
            for (int ox = lo; ox < hi; ++ox) d[ox] += srcrow[ox];
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += srcrow[ox];
          }
        }
      }
}

// Grow-only per-thread buffers; avoids page-faulting multi-megabyte columns on every call.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local AlignedVector<T> bufs[2];
  if (bufs[slot].size() < n) bufs[slot].resize(n);
  return bufs[slot].data();
}

}  // namespace detail

namespace detail {

// Frequency-only unfolding for 3x3 stride-1 convolutions: row (ch*3 + kj) of
// `x3` holds channel ch shifted by kj - 1 along W, with one zero time row on
// each side, so the three time taps become column offsets of 0, W and 2W.
template <class T>
void unfold_freq3(const T* x, int c, int h, int w, T* x3) {
  const std::size_t row_len = static_cast<std::size_t>(h + 2) * w;
  for (int ch = 0; ch < c; ++ch)
    for (int kj = 0; kj < 3; ++kj) {
      T* row = x3 + (static_cast<std::size_t>(ch) * 3 + kj) * row_len;
      std::fill(row, row + w, T(0));
      std::fill(row + static_cast<std::size_t>(h + 1) * w, row + row_len, T(0));
      const int lo = std::max(0, 1 - kj), hi = std::min(w, w + 1 - kj);
      for (int y = 0; y < h; ++y) {
        const T* src = x + (static_cast<std::size_t>(ch) * h + y) * w;
        T* d = row + static_cast<std::size_t>(y + 1) * w;
        for (int xx = 0; xx < lo; ++xx) d[xx] = T(0);
        for (int xx = lo; xx < hi; ++xx) d[xx] = src[xx + kj - 1];
        for (int xx = hi; xx < w; ++xx) d[xx] = T(0);
      }
    }
}

// Adjoint of unfold_freq3, accumulated into dx.
template <class T>
void fold_freq3(const T* x3, int c, int h, int w, T* dx) {
  const std::size_t row_len = static_cast<std::size_t>(h + 2) * w;
  for (int ch = 0; ch < c; ++ch)
    for (int kj = 0; kj < 3; ++kj) {
      const T* row = x3 + (static_cast<std::size_t>(ch) * 3 + kj) * row_len;
      const int lo = std::max(0, 1 - kj), hi = std::min(w, w + 1 - kj);
      for (int y = 0; y < h; ++y) {
        const T* src = row + static_cast<std::size_t>(y + 1) * w;
        T* d = dx + (static_cast<std::size_t>(ch) * h + y) * w;
        for (int xx = lo; xx < hi; ++xx) d[xx + kj - 1] += src[xx];
      }
    }
}

// Weight (Co, C, 3, 3) split into the three time taps, each (Co, 3C) with column ch*3 + kj.
template <class T>
std::array<MatRM<T>, 3> time_taps(const Tensor<T>& w) {
  const int co = w.dim(0), c = w.dim(1);
  std::array<MatRM<T>, 3> taps;
  for (int ki = 0; ki < 3; ++ki) {
    taps[ki].resize(co, 3 * c);
    for (int o = 0; o < co; ++o)
      for (int ch = 0; ch < c; ++ch)
        for (int kj = 0; kj < 3; ++kj) taps[ki](o, ch * 3 + kj) = w[((static_cast<std::size_t>(o) * c + ch) * 3 + ki) * 3 + kj];
  }
  return taps;
}

template <class T>
using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

}  // namespace detail

/// 3x3, stride 1, padding 1 convolution through three time-shifted GEMMs.
template <class T>
Var<T> conv3x3_same(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  const int hw = h * wd;
  const Eigen::Index row_len = static_cast<Eigen::Index>(h + 2) * wd;
  const std::size_t per = static_cast<std::size_t>(3 * c) * row_len;
  const bool keep = grad_enabled() && w.requires_grad();
  std::shared_ptr<T[]> cols(keep ? new T[per * n] : nullptr);
  T* scratch_x3 = keep ? nullptr : detail::scratch<T>(0, per);
  const auto taps = detail::time_taps(w.value());
  Tensor<T> out({n, co, h, wd});
  for (int bi = 0; bi < n; ++bi) {
    T* x3 = keep ? cols.get() + bi * per : scratch_x3;
    detail::unfold_freq3(x.value().ptr() + static_cast<std::size_t>(bi) * c * hw, c, h, wd, x3);
    auto O = as_mat(out.ptr() + static_cast<std::size_t>(bi) * co * hw, co, hw);
    for (int ki = 0; ki < 3; ++ki) {
      detail::CStridedMap<T> B(x3 + ki * wd, 3 * c, hw, Eigen::OuterStride<>(row_len));
      if (ki == 0)
        O.noalias() = taps[0] * B;
      else
        O.noalias() += taps[ki] * B;
    }
    for (int oc = 0; oc < co; ++oc) O.row(oc).array() += b.value()[oc];
  }
  return make_result<T>(std::move(out), {x, w, b}, [=](Node<T>& self) {
    auto* gx = parent_grad(self, 0);
    auto* gw = parent_grad(self, 1);
    auto* gb = parent_grad(self, 2);
    const auto& xv = parent_value(self, 0);
    const auto wtaps = gx ? detail::time_taps(parent_value(self, 1)) : std::array<MatRM<T>, 3>{};
    std::array<MatRM<T>, 3> dtaps;
    if (gw)
      for (auto& d : dtaps) d = MatRM<T>::Zero(co, 3 * c);
    T* x3s = cols ? nullptr : detail::scratch<T>(0, per);
    T* dx3 = gx ? detail::scratch<T>(1, per) : nullptr;
    for (int bi = 0; bi < n; ++bi) {
      auto G = as_mat(static_cast<const T*>(self.grad.ptr()) + static_cast<std::size_t>(bi) * co * hw, co, hw);
      if (gb)
        for (int oc = 0; oc < co; ++oc) (*gb)[oc] += G.row(oc).sum();
      if (gw) {
        const T* x3 = cols ? cols.get() + bi * per : x3s;
        if (!cols) detail::unfold_freq3(xv.ptr() + static_cast<std::size_t>(bi) * c * hw, c, h, wd, x3s);
        for (int ki = 0; ki < 3; ++ki) {
          detail::CStridedMap<T> B(x3 + ki * wd, 3 * c, hw, Eigen::OuterStride<>(row_len));
          dtaps[ki].noalias() += G * B.transpose();
        }
      }
      if (gx) {
        std::fill(dx3, dx3 + per, T(0));
        for (int ki = 0; ki < 3; ++ki) {
          detail::StridedMap<T> D(dx3 + ki * wd, 3 * c, hw, Eigen::OuterStride<>(row_len));
          D.noalias() += wtaps[ki].transpose() * G;
        }
        detail::fold_freq3(dx3, c, h, wd, gx->ptr() + static_cast<std::size_t>(bi) * c * hw);
      }
    }
    if (gw)
      for (int o = 0; o < co; ++o)
        for (int ch = 0; ch < c; ++ch)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj)
              (*gw)[((static_cast<std::size_t>(o) * c + ch) * 3 + ki) * 3 + kj] += dtaps[ki](o, ch * 3 + kj);
  });
}

/// 2-D convolution. x (N, C, H, W), w (Co, C, k, k), b (Co).
/// When the weight needs a gradient the im2col columns are kept for the backward pass.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = -1) {
  REFGEN_CHECK(x.value().rank() == 4 && w.value().rank() == 4, "conv2d expects rank-4 input and weight");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  REFGEN_CHECK(w.dim(1) == c, "conv2d: input has " + std::to_string(c) + " channels, weight " + shape_str(w.shape()));
  if (pad < 0) pad = k / 2;
  if (k == 3 && stride == 1 && pad == 1) return conv3x3_same(x, w, b);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const int ckk = c * k * k, hwo = ho * wo;
  const std::size_t per_col = static_cast<std::size_t>(ckk) * hwo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const bool keep_cols = !pointwise && grad_enabled() && w.requires_grad();
  std::shared_ptr<T[]> cols(keep_cols ? new T[per_col * n] : nullptr);
  Tensor<T> out({n, co, ho, wo});
  T* scratch_col = pointwise || keep_cols ? nullptr : detail::scratch<T>(0, per_col);
  auto W = as_mat(w.value().ptr(), co, ckk);
  for (int bi = 0; bi < n; ++bi) {
    const T* xb = x.value().ptr() + static_cast<std::size_t>(bi) * c * h * wd;
    const T* colp = xb;
    if (!pointwise) {
      T* col = keep_cols ? cols.get() + bi * per_col : scratch_col;
      detail::im2col(xb, c, h, wd, k, stride, pad, ho, wo, col);
      colp = col;
    }
    auto O = as_mat(out.ptr() + static_cast<std::size_t>(bi) * co * hwo, co, hwo);
    O.noalias() = W * as_mat(colp, ckk, hwo);
    for (int oc = 0; oc < co; ++oc) O.row(oc).array() += b.value()[oc];
  }
  return make_result<T>(std::move(out), {x, w, b}, [=](Node<T>& self) {
    const auto& xv = parent_value(self, 0);
    const auto& wv = parent_value(self, 1);
    auto* gx = parent_grad(self, 0);
    auto* gw = parent_grad(self, 1);
    auto* gb = parent_grad(self, 2);
    T* colb = pointwise || cols ? nullptr : detail::scratch<T>(0, per_col);
    T* dcol = pointwise || !gx ? nullptr : detail::scratch<T>(1, per_col);
    auto Wm = as_mat(wv.ptr(), co, ckk);
    for (int bi = 0; bi < n; ++bi) {
      auto G = as_mat(static_cast<const T*>(self.grad.ptr()) + static_cast<std::size_t>(bi) * co * hwo, co, hwo);
      const T* xb = xv.ptr() + static_cast<std::size_t>(bi) * c * h * wd;
      if (gw) {
        const T* colp = xb;
        if (cols) {
          colp = cols.get() + bi * per_col;
        } else if (!pointwise) {
          detail::im2col(xb, c, h, wd, k, stride, pad, ho, wo, colb);
          colp = colb;
        }
        as_mat(gw->ptr(), co, ckk).noalias() += G * as_mat(colp, ckk, hwo).transpose();
      }
      if (gb)
        for (int oc = 0; oc < co; ++oc) (*gb)[oc] += G.row(oc).sum();
      if (gx) {
        T* gxb = gx->ptr() + static_cast<std::size_t>(bi) * c * h * wd;
        if (pointwise) {
          as_mat(gxb, ckk, hwo).noalias() += Wm.transpose() * G;
        } else {
          as_mat(dcol, ckk, hwo).noalias() = Wm.transpose() * G;
          detail::col2im(dcol, c, h, wd, k, stride, pad, ho, wo, gxb);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

/// Group normalization over (C/G, H, W) per example; gamma/beta (C).
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Arr>;
  using CMap = Eigen::Map<const Arr>;
  const int n = x.dim(0), c = x.dim(1);
  REFGEN_CHECK(c % groups == 0, "group_norm: channels not divisible by groups");
  const auto hw = static_cast<Eigen::Index>(x.size() / (static_cast<std::size_t>(n) * c));
  const int cpg = c / groups;
  const Eigen::Index m = hw * cpg;
  Tensor<T> out(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(n) * groups), rstd(mean.size());
  for (int bi = 0; bi < n; ++bi)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(bi) * c + g * cpg) * hw;
      CMap p(x.value().ptr() + off, m);
      const T mu = p.mean();
      const T r = T(1) / std::sqrt((p - mu).square().mean() + eps);
      mean[bi * groups + g] = mu;
      rstd[bi * groups + g] = r;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const T a = r * gamma.value()[ch];
        Map(out.ptr() + off + cc * hw, hw) = (CMap(x.value().ptr() + off + cc * hw, hw) - mu) * a + beta.value()[ch];
      }
    }
  return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const auto& xv = parent_value(self, 0);
    const auto& gv = parent_value(self, 1);
    auto* gx = parent_grad(self, 0);
    auto* gg = parent_grad(self, 1);
    auto* gbeta = parent_grad(self, 2);
    for (int bi = 0; bi < n; ++bi)
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = (static_cast<std::size_t>(bi) * c + g * cpg) * hw;
        const T mu = mean[bi * groups + g], r = rstd[bi * groups + g];
        T sum_dxh = 0, sum_dxh_xh = 0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          CMap p(xv.ptr() + off + cc * hw, hw), dy(self.grad.ptr() + off + cc * hw, hw);
          const T sg = (dy * (p - mu)).sum() * r;
          const T sb = dy.sum();
          if (gg) (*gg)[ch] += sg;
          if (gbeta) (*gbeta)[ch] += sb;
          sum_dxh += gv[ch] * sb;
          sum_dxh_xh += gv[ch] * sg;
        }
        if (!gx) continue;
        const T md = sum_dxh / static_cast<T>(m), mdx = sum_dxh_xh / static_cast<T>(m);
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          CMap p(xv.ptr() + off + cc * hw, hw), dy(self.grad.ptr() + off + cc * hw, hw);
          Map(gx->ptr() + off + cc * hw, hw) += r * (dy * gv[ch] - md - (p - mu) * (r * mdx));
        }
      }
  });
}

// ---------------------------------------------------------------- attention

/// Scaled dot-product attention in channel-major layout:
/// q (N, d, S), k (N, d, L), v (N, dv, L) -> (N, dv, S).
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const int n = q.dim(0), d = q.dim(1), s = q.dim(2), l = k.dim(2), dv = v.dim(1);
  REFGEN_CHECK(k.dim(1) == d && v.dim(2) == l && k.dim(0) == n && v.dim(0) == n,
               "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " + shape_str(v.shape()));
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> out({n, dv, s});
  // Per-example blocks start on a packet boundary so every example sees the same rounding.
  const std::size_t stride = (static_cast<std::size_t>(s) * l + 15) / 16 * 16;
  AlignedVector<T> probs(static_cast<std::size_t>(n) * stride);
  for (int bi = 0; bi < n; ++bi) {
    auto Q = as_mat(q.value().ptr() + static_cast<std::size_t>(bi) * d * s, d, s);
    auto K = as_mat(k.value().ptr() + static_cast<std::size_t>(bi) * d * l, d, l);
    auto V = as_mat(v.value().ptr() + static_cast<std::size_t>(bi) * dv * l, dv, l);
    auto A = as_mat(probs.data() + bi * stride, s, l);
    A.noalias() = (Q.transpose() * K) * sc;
    for (int r = 0; r < s; ++r) A.row(r).array() -= A.row(r).maxCoeff();
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> flat(A.data(), static_cast<Eigen::Index>(s) * l);
    flat = flat.exp();
    for (int r = 0; r < s; ++r) A.row(r) *= T(1) / A.row(r).sum();
    as_mat(out.ptr() + static_cast<std::size_t>(bi) * dv * s, dv, s).noalias() = V * A.transpose();
  }
  return make_result<T>(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node<T>& self) {
    auto* gq = parent_grad(self, 0);
    auto* gk = parent_grad(self, 1);
    auto* gv = parent_grad(self, 2);
    MatRM<T> dA(s, l);
    for (int bi = 0; bi < n; ++bi) {
      auto Q = as_mat(parent_value(self, 0).ptr() + static_cast<std::size_t>(bi) * d * s, d, s);
      auto K = as_mat(parent_value(self, 1).ptr() + static_cast<std::size_t>(bi) * d * l, d, l);
      auto V = as_mat(parent_value(self, 2).ptr() + static_cast<std::size_t>(bi) * dv * l, dv, l);
      auto A = as_mat(probs.data() + bi * stride, s, l);
      auto G = as_mat(static_cast<const T*>(self.grad.ptr()) + static_cast<std::size_t>(bi) * dv * s, dv, s);
      if (gv) as_mat(gv->ptr() + static_cast<std::size_t>(bi) * dv * l, dv, l).noalias() += G * A;
      if (!gq && !gk) continue;
      dA.noalias() = G.transpose() * V;
      for (int r = 0; r < s; ++r) {
        T dot = (dA.row(r).array() * A.row(r).array()).sum();
        dA.row(r) = A.row(r).array() * (dA.row(r).array() - dot);
      }
      if (gq) as_mat(gq->ptr() + static_cast<std::size_t>(bi) * d * s, d, s).noalias() += (K * dA.transpose()) * sc;
      if (gk) as_mat(gk->ptr() + static_cast<std::size_t>(bi) * d * l, d, l).noalias() += (Q * dA) * sc;
    }
  });
}

// ---------------------------------------------------------------- layout ops

/// Concatenate along the channel axis (rank-4).
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  REFGEN_CHECK(b.dim(0) == n && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
               "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int bi = 0; bi < n; ++bi) {
    std::copy_n(a.value().ptr() + bi * ca * hw, ca * hw, out.ptr() + bi * (ca + cb) * hw);
    std::copy_n(b.value().ptr() + bi * cb * hw, cb * hw, out.ptr() + (bi * (ca + cb) + ca) * hw);
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (int bi = 0; bi < n; ++bi) {
      const T* g = self.grad.ptr() + bi * (ca + cb) * hw;
      if (ga)
        for (std::size_t i = 0; i < ca * hw; ++i) (*ga)[bi * ca * hw + i] += g[i];
      if (gb)
        for (std::size_t i = 0; i < cb * hw; ++i) (*gb)[bi * cb * hw + i] += g[ca * hw + i];
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int bc = 0; bc < n * c; ++bc)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(bc) * 2 * h + y) * 2 * w + xx] =
            x.value()[(static_cast<std::size_t>(bc) * h + y / 2) * w + xx / 2];
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int bc = 0; bc < n * c; ++bc)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            (*g)[(static_cast<std::size_t>(bc) * h + y / 2) * w + xx / 2] +=
                self.grad[(static_cast<std::size_t>(bc) * 2 * h + y) * 2 * w + xx];
  });
}

/// Non-overlapping average pooling with kernel = stride = (kh, kw).
template <class T>
Var<T> avg_pool(const Var<T>& x, int kh, int kw) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  REFGEN_CHECK(h % kh == 0 && w % kw == 0, "avg_pool: " + shape_str(x.shape()) + " not divisible by kernel");
  const int ho = h / kh, wo = w / kw;
  const T inv = T(1) / static_cast<T>(kh * kw);
  Tensor<T> out({n, c, ho, wo});
  for (int bc = 0; bc < n * c; ++bc)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::size_t>(bc) * ho + y / kh) * wo + xx / kw] +=
            x.value()[(static_cast<std::size_t>(bc) * h + y) * w + xx] * inv;
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int bc = 0; bc < n * c; ++bc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            (*g)[(static_cast<std::size_t>(bc) * h + y) * w + xx] +=
                self.grad[(static_cast<std::size_t>(bc) * ho + y / kh) * wo + xx / kw] * inv;
  });
}

/// Mean over the time axis: (N, C, H, W) -> (N, C * W).
template <class T>
Var<T> time_mean(const Var<T>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c * w});
  const T inv = T(1) / static_cast<T>(h);
  for (int bc = 0; bc < n * c; ++bc)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[static_cast<std::size_t>(bc) * w + xx] += x.value()[(static_cast<std::size_t>(bc) * h + y) * w + xx] * inv;
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int bc = 0; bc < n * c; ++bc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            (*g)[(static_cast<std::size_t>(bc) * h + y) * w + xx] += self.grad[static_cast<std::size_t>(bc) * w + xx] * inv;
  });
}

/// Splits the time axis into K slots and stacks them on channels:
/// (N, C, K*T, F) -> (N, K*C, T, F), slot-major channel order.
template <class T>
Var<T> fold_slots(const Var<T>& x, int slots) {
  const int n = x.dim(0), c = x.dim(1), kt = x.dim(2), f = x.dim(3);
  REFGEN_CHECK(kt % slots == 0, "fold_slots: time " + std::to_string(kt) + " not divisible by " + std::to_string(slots));
  const int t = kt / slots;
  Tensor<T> out({n, slots * c, t, f});
  auto src_index = [=](int b, int ch, int s, int y, int xx) {
    return ((static_cast<std::size_t>(b) * c + ch) * kt + s * t + y) * f + xx;
  };
  auto dst_index = [=](int b, int ch, int s, int y, int xx) {
    return ((static_cast<std::size_t>(b) * slots * c + s * c + ch) * t + y) * f + xx;
  };
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < slots; ++s)
        std::copy_n(x.value().ptr() + src_index(b, ch, s, 0, 0), static_cast<std::size_t>(t) * f,
                    out.ptr() + dst_index(b, ch, s, 0, 0));
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
          for (int s = 0; s < slots; ++s) {
            const T* src = self.grad.ptr() + dst_index(b, ch, s, 0, 0);
            T* dst = g->ptr() + src_index(b, ch, s, 0, 0);
            for (std::size_t i = 0; i < static_cast<std::size_t>(t) * f; ++i) dst[i] += src[i];
          }
  });
}

/// Time-mean of each folded slot, broadcast back over time: (N, C, T, F) -> same shape.
template <class T>
Var<T> time_mean_broadcast(const Var<T>& x) {
  const int n = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
  Tensor<T> out(x.shape());
  const T inv = T(1) / static_cast<T>(t);
  std::vector<T> m(f);
  for (int bc = 0; bc < n * c; ++bc) {
    std::fill(m.begin(), m.end(), T(0));
    const T* p = x.value().ptr() + static_cast<std::size_t>(bc) * t * f;
    for (int y = 0; y < t; ++y)
      for (int xx = 0; xx < f; ++xx) m[xx] += p[y * f + xx] * inv;
    T* o = out.ptr() + static_cast<std::size_t>(bc) * t * f;
    for (int y = 0; y < t; ++y) std::copy(m.begin(), m.end(), o + y * f);
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      std::vector<T> s(f);
      for (int bc = 0; bc < n * c; ++bc) {
        std::fill(s.begin(), s.end(), T(0));
        const T* gp = self.grad.ptr() + static_cast<std::size_t>(bc) * t * f;
        for (int y = 0; y < t; ++y)
          for (int xx = 0; xx < f; ++xx) s[xx] += gp[y * f + xx];
        T* d = g->ptr() + static_cast<std::size_t>(bc) * t * f;
        for (int y = 0; y < t; ++y)
          for (int xx = 0; xx < f; ++xx) d[y * f + xx] += s[xx] * inv;
      }
    }
  });
}

namespace detail {

// Pooling bins for adaptive average pooling: [floor(i*in/out), ceil((i+1)*in/out)).
inline std::pair<int, int> adaptive_bin(int i, int in, int out) {
  int lo = (i * in) / out;
  int hi = ((i + 1) * in + out - 1) / out;
  return {lo, hi};
}

// Linear interpolation taps for half-pixel-centred resizing.
inline void linear_taps(int o, int in, int out, int& i0, int& i1, double& w1) {
  double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
  src = std::max(0.0, src);
  i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
  i1 = std::min(i0 + 1, in - 1);
  w1 = src - i0;
}

}  // namespace detail

template <class T>
Var<T> adaptive_avg_pool(const Var<T>& x, int oh, int ow) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, oh, ow});
  for (int bc = 0; bc < n * c; ++bc)
    for (int y = 0; y < oh; ++y) {
      auto [y0, y1] = detail::adaptive_bin(y, h, oh);
      for (int xx = 0; xx < ow; ++xx) {
        auto [x0, x1] = detail::adaptive_bin(xx, w, ow);
        T s = 0;
        for (int i = y0; i < y1; ++i)
          for (int j = x0; j < x1; ++j) s += x.value()[(static_cast<std::size_t>(bc) * h + i) * w + j];
        out[(static_cast<std::size_t>(bc) * oh + y) * ow + xx] = s / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int bc = 0; bc < n * c; ++bc)
        for (int y = 0; y < oh; ++y) {
          auto [y0, y1] = detail::adaptive_bin(y, h, oh);
          for (int xx = 0; xx < ow; ++xx) {
            auto [x0, x1] = detail::adaptive_bin(xx, w, ow);
            T gv = self.grad[(static_cast<std::size_t>(bc) * oh + y) * ow + xx] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (int i = y0; i < y1; ++i)
              for (int j = x0; j < x1; ++j) (*g)[(static_cast<std::size_t>(bc) * h + i) * w + j] += gv;
          }
        }
  });
}

template <class T>
Var<T> bilinear_resize(const Var<T>& x, int oh, int ow) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, oh, ow});
  auto visit = [=](auto&& fn) {
    for (int y = 0; y < oh; ++y) {
      int y0, y1;
      double wy;
      detail::linear_taps(y, h, oh, y0, y1, wy);
      for (int xx = 0; xx < ow; ++xx) {
        int x0, x1;
        double wx;
        detail::linear_taps(xx, w, ow, x0, x1, wx);
        fn(y, xx, y0, y1, x0, x1, static_cast<T>(wy), static_cast<T>(wx));
      }
    }
  };
  for (int bc = 0; bc < n * c; ++bc) {
    const T* p = x.value().ptr() + static_cast<std::size_t>(bc) * h * w;
    T* o = out.ptr() + static_cast<std::size_t>(bc) * oh * ow;
    visit([&](int y, int xx, int y0, int y1, int x0, int x1, T wy, T wx) {
      o[y * ow + xx] = (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
                       wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
    });
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int bc = 0; bc < n * c; ++bc) {
        const T* go = self.grad.ptr() + static_cast<std::size_t>(bc) * oh * ow;
        T* d = g->ptr() + static_cast<std::size_t>(bc) * h * w;
        visit([&](int y, int xx, int y0, int y1, int x0, int x1, T wy, T wx) {
          T gv = go[y * ow + xx];
          d[y0 * w + x0] += gv * (1 - wy) * (1 - wx);
          d[y0 * w + x1] += gv * (1 - wy) * wx;
          d[y1 * w + x0] += gv * wy * (1 - wx);
          d[y1 * w + x1] += gv * wy * wx;
        });
      }
  });
}

/// Row lookup: table (V, D), ids (L) -> (L, D).
template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  const int d = table.dim(1), l = static_cast<int>(ids.size());
  Tensor<T> out({l, d});
  for (int i = 0; i < l; ++i) {
    REFGEN_CHECK(ids[i] >= 0 && ids[i] < table.dim(0), "gather_rows: id out of range");
    std::copy_n(table.value().ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + static_cast<std::size_t>(i) * d);
  }
  return make_result<T>(std::move(out), {table}, [ids, d](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j) (*g)[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

/// Softmax cross-entropy averaged over the batch. logits (N, K).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), k = logits.dim(1);
  REFGEN_CHECK(static_cast<int>(labels.size()) == n, "softmax_cross_entropy: label count mismatch");
  Tensor<T> probs({n, k});
  double loss = 0;
  for (int b = 0; b < n; ++b) {
    const T* z = logits.value().ptr() + b * k;
    T mx = *std::max_element(z, z + k);
    double s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - mx));
    for (int j = 0; j < k; ++j) probs[b * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - mx)) / s);
    loss -= (z[labels[b]] - mx) - std::log(s);
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(loss / n);
  return make_result<T>(std::move(out), {logits}, [probs, labels, n, k](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < k; ++j)
          (*g)[b * k + j] += self.grad[0] * (probs[b * k + j] - (j == labels[b] ? T(1) : T(0))) / static_cast<T>(n);
  });
}

/// z = mu + exp(logvar / 2) * eps, eps a constant draw.
template <class T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Tensor<T>& eps) {
  require_same_shape(mu.shape(), logvar.shape(), "reparameterize");
  Tensor<T> out = mu.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(logvar.value()[i] / 2) * eps[i];
  return make_result<T>(std::move(out), {mu, logvar}, [eps](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1)) {
      const auto& lv = parent_value(self, 1);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * eps[i] * std::exp(lv[i] / 2) / 2;
    }
  });
}

/// Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
template <class T>
Var<T> gaussian_kl(const Var<T>& mu, const Var<T>& logvar) {
  require_same_shape(mu.shape(), logvar.shape(), "gaussian_kl");
  const std::size_t n = mu.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = mu.value()[i], lv = logvar.value()[i];
    acc += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(acc / n);
  return make_result<T>(std::move(out), {mu, logvar}, [n](Node<T>& self) {
    const T k = self.grad[0] / static_cast<T>(n);
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * parent_value(self, 0)[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * T(0.5) * (std::exp(parent_value(self, 1)[i]) - T(1));
  });
}

}  // namespace refgen::nn
