#pragma once

// Differentiable operations on bsnet::Tensor. NCHW layout throughout.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "bsnet/tensor.hpp"

namespace bsnet {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

enum class Bc { same, scalar, channel };

inline Bc broadcast_kind(const Shape& in, const Shape& out) {
  if (in == out) return Bc::same;
  if (shape_numel(in) == 1) return Bc::scalar;
  if (in.size() == 4 && out.size() == 4 && in[1] == 1 && in[0] == out[0] &&
      in[2] == out[2] && in[3] == out[3])
    return Bc::channel;
  throw std::invalid_argument("incompatible shapes for broadcast: " + shape_str(in) +
                              " vs " + shape_str(out));
}

// Maps an output linear index to the input linear index under broadcasting.
struct BcIndex {
  Bc kind;
  int64_t chw = 0, hw = 0;  // strides of the *output* for channel broadcast
  int64_t operator()(int64_t i) const {
    switch (kind) {
      case Bc::same: return i;
      case Bc::scalar: return 0;
      case Bc::channel: {
        int64_t n = i / chw;
        int64_t rem = i % chw;
        return n * hw + rem % hw;
      }
    }
    return 0;
  }
};

inline BcIndex make_bc(const Shape& in, const Shape& out) {
  BcIndex b;
  b.kind = broadcast_kind(in, out);
  if (b.kind == Bc::channel) {
    b.chw = out[1] * out[2] * out[3];
    b.hw = out[2] * out[3];
  }
  return b;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (shape_numel(a) == 1) return b;
  if (shape_numel(b) == 1) return a;
  if (a.size() == 4 && b.size() == 4) {
    if (a[1] == 1) { broadcast_kind(a, b); return b; }
    if (b[1] == 1) { broadcast_kind(b, a); return a; }
  }
  throw std::invalid_argument("incompatible shapes: " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class FwdFn, class DaFn, class DbFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn f, DaFn da, DbFn db) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  auto ia = detail::make_bc(a.shape(), out_shape);
  auto ib = detail::make_bc(b.shape(), out_shape);
  int64_t n = shape_numel(out_shape);
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(pa[ia(i)], pb[ib(i)]);
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(out_shape, std::move(out), {a, b},
                     [ai, bi, ia, ib, da, db, n](TensorImpl& self) {
                       const double* pa = ai->data.data();
                       const double* pb = bi->data.data();
                       const double* g = self.grad.data();
                       if (ai->requires_grad) {
                         ai->ensure_grad();
                         for (int64_t i = 0; i < n; ++i)
                           ai->grad[static_cast<size_t>(ia(i))] += g[i] * da(pa[ia(i)], pb[ib(i)]);
                       }
                       if (bi->requires_grad) {
                         bi->ensure_grad();
                         for (int64_t i = 0; i < n; ++i)
                           bi->grad[static_cast<size_t>(ib(i))] += g[i] * db(pa[ia(i)], pb[ib(i)]);
                       }
                     });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; },
                   [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x / y; },
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); });
}

template <class FwdFn, class GradFn>
Tensor unary_op(const Tensor& a, FwdFn f, GradFn g) {
  int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(pa[i]);
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, g, n](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const double* pa = ai->data.data();
    const double* py = self.data.data();
    for (int64_t i = 0; i < n; ++i) ai->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * g(pa[i], py[i]);
  });
}

inline Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Tensor sigmoid(const Tensor& a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}
inline Tensor log_op(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                  [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}
inline Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------- reductions

inline Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  const double* p = a.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) acc += p[i];
  auto ai = a.impl();
  return make_result({1}, {acc}, {a}, [ai, n](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    double g = self.grad[0];
    for (int64_t i = 0; i < n; ++i) ai->grad[static_cast<size_t>(i)] += g;
  });
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Per-sample reduction: NCHW -> (N,1,1,1).
inline Tensor sum_per_image(const Tensor& a) {
  const Shape& s = a.shape();
  int64_t N = s[0], CHW = s[1] * s[2] * s[3];
  std::vector<double> out(static_cast<size_t>(N), 0.0);
  const double* p = a.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < CHW; ++i) out[static_cast<size_t>(n)] += p[n * CHW + i];
  auto ai = a.impl();
  return make_result({N, 1, 1, 1}, std::move(out), {a}, [ai, N, CHW](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t n = 0; n < N; ++n) {
      double g = self.grad[static_cast<size_t>(n)];
      for (int64_t i = 0; i < CHW; ++i) ai->grad[static_cast<size_t>(n * CHW + i)] += g;
    }
  });
}

// Per-pixel reductions across the channel axis: NCHW -> N1HW.
inline Tensor channel_mean(const Tensor& a) {
  const Shape& s = a.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  std::vector<double> out(static_cast<size_t>(N * HW), 0.0);
  const double* p = a.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < HW; ++i)
        out[static_cast<size_t>(n * HW + i)] += p[(n * C + c) * HW + i];
  double inv = 1.0 / static_cast<double>(C);
  for (auto& v : out) v *= inv;
  auto ai = a.impl();
  return make_result({N, 1, H, W}, std::move(out), {a}, [ai, N, C, HW, inv](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i)
          ai->grad[static_cast<size_t>((n * C + c) * HW + i)] += self.grad[static_cast<size_t>(n * HW + i)] * inv;
  });
}

inline Tensor channel_max(const Tensor& a) {
  const Shape& s = a.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  std::vector<double> out(static_cast<size_t>(N * HW));
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * HW));
  const double* p = a.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t bc = 0;
      for (int64_t c = 0; c < C; ++c) {
        double v = p[(n * C + c) * HW + i];
        if (v > best) { best = v; bc = c; }
      }
      out[static_cast<size_t>(n * HW + i)] = best;
      (*argmax)[static_cast<size_t>(n * HW + i)] = (n * C + bc) * HW + i;
    }
  auto ai = a.impl();
  return make_result({N, 1, H, W}, std::move(out), {a}, [ai, argmax](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t i = 0; i < argmax->size(); ++i)
      ai->grad[static_cast<size_t>((*argmax)[i])] += self.grad[i];
  });
}

// ---------------------------------------------------------------- shape ops

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty input");
  const Shape& s0 = parts[0].shape();
  int64_t N = s0[0], H = s0[2], W = s0[3], HW = H * W;
  int64_t Cout = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    if (s[0] != N || s[2] != H || s[3] != W)
      throw std::invalid_argument("concat_channels: mismatched shapes");
    Cout += s[1];
  }
  std::vector<double> out(static_cast<size_t>(N * Cout * HW));
  int64_t coff = 0;
  std::vector<int64_t> offsets;
  for (const auto& t : parts) {
    int64_t C = t.shape()[1];
    const double* p = t.data();
    for (int64_t n = 0; n < N; ++n)
      std::copy(p + n * C * HW, p + (n + 1) * C * HW,
                out.begin() + static_cast<size_t>((n * Cout + coff) * HW));
    offsets.push_back(coff);
    coff += C;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> chans;
  for (const auto& t : parts) { impls.push_back(t.impl()); chans.push_back(t.shape()[1]); }
  return make_result({N, Cout, H, W}, std::move(out), parts,
                     [impls, chans, offsets, N, Cout, HW](TensorImpl& self) {
                       for (size_t k = 0; k < impls.size(); ++k) {
                         auto& pi = impls[k];
                         if (!pi->requires_grad) continue;
                         pi->ensure_grad();
                         int64_t C = chans[k], off = offsets[k];
                         for (int64_t n = 0; n < N; ++n)
                           for (int64_t i = 0; i < C * HW; ++i)
                             pi->grad[static_cast<size_t>(n * C * HW + i)] +=
                                 self.grad[static_cast<size_t>((n * Cout + off) * HW + i)];
                       }
                     });
}

inline Tensor slice_channels(const Tensor& a, int64_t c0, int64_t c1) {
  const Shape& s = a.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  int64_t Cs = c1 - c0;
  std::vector<double> out(static_cast<size_t>(N * Cs * HW));
  const double* p = a.data();
  for (int64_t n = 0; n < N; ++n)
    std::copy(p + (n * C + c0) * HW, p + (n * C + c1) * HW,
              out.begin() + static_cast<size_t>(n * Cs * HW));
  auto ai = a.impl();
  return make_result({N, Cs, H, W}, std::move(out), {a}, [ai, N, C, c0, Cs, HW](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < Cs * HW; ++i)
        ai->grad[static_cast<size_t>((n * C + c0) * HW + i)] += self.grad[static_cast<size_t>(n * Cs * HW + i)];
  });
}

// ---------------------------------------------------------------- convolution

struct Conv2dSpec {
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
  int64_t dil_h = 1, dil_w = 1;
};

namespace detail {

inline void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   const Conv2dSpec& sp, int64_t Ho, int64_t Wo, double* col) {
  int64_t M = Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * M;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * sp.stride_h - sp.pad_h + i * sp.dil_h;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * sp.stride_w - sp.pad_w + j * sp.dil_w;
            row[oh * Wo + ow] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    ? x[(c * H + ih) * W + iw]
                                    : 0.0;
          }
        }
      }
}

inline void col2im_acc(const double* col, int64_t C, int64_t H, int64_t W, int64_t kh,
                       int64_t kw, const Conv2dSpec& sp, int64_t Ho, int64_t Wo, double* dx) {
  int64_t M = Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * M;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * sp.stride_h - sp.pad_h + i * sp.dil_h;
          if (ih < 0 || ih >= H) continue;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * sp.stride_w - sp.pad_w + j * sp.dil_w;
            if (iw < 0 || iw >= W) continue;
            dx[(c * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
}

}  // namespace detail

// x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), bias: (Cout) or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     const Conv2dSpec& sp = {}) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv2d: expects 4-D tensors");
  int64_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  int64_t Cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != Cin)
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(xs) +
                                " weight " + shape_str(ws));
  int64_t Ho = (H + 2 * sp.pad_h - sp.dil_h * (kh - 1) - 1) / sp.stride_h + 1;
  int64_t Wo = (W + 2 * sp.pad_w - sp.dil_w * (kw - 1) - 1) / sp.stride_w + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  int64_t K = Cin * kh * kw, M = Ho * Wo;

  bool record = grad_mode() && (x.requires_grad() || w.requires_grad() ||
                                (bias.defined() && bias.requires_grad()));
  auto cols = std::make_shared<std::vector<double>>();
  std::vector<double> colbuf;
  if (record)
    cols->resize(static_cast<size_t>(N * K * M));
  else
    colbuf.resize(static_cast<size_t>(K * M));

  std::vector<double> out(static_cast<size_t>(N * Cout * M));
  CMapRM Wm(w.data(), Cout, K);
  for (int64_t n = 0; n < N; ++n) {
    double* col = record ? cols->data() + n * K * M : colbuf.data();
    detail::im2col(x.data() + n * Cin * H * W, Cin, H, W, kh, kw, sp, Ho, Wo, col);
    MapRM Ym(out.data() + n * Cout * M, Cout, M);
    CMapRM Cm(col, K, M);
    Ym.noalias() = Wm * Cm;
    if (bias.defined()) {
      const double* b = bias.data();
      for (int64_t c = 0; c < Cout; ++c) Ym.row(c).array() += b[c];
    }
  }

  std::vector<Tensor> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  auto xi = x.impl();
  auto wi = w.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return make_result(
      {N, Cout, Ho, Wo}, std::move(out), inputs,
      [xi, wi, bi, cols, sp, N, Cin, H, W, Cout, kh, kw, Ho, Wo, K, M](TensorImpl& self) {
        CMapRM Wm(wi->data.data(), Cout, K);
        bool need_dx = xi->requires_grad;
        bool need_dw = wi->requires_grad;
        bool need_db = bi && bi->requires_grad;
        if (need_dx) xi->ensure_grad();
        if (need_dw) wi->ensure_grad();
        if (need_db) bi->ensure_grad();
        std::vector<double> dcol;
        if (need_dx) dcol.resize(static_cast<size_t>(K * M));
        for (int64_t n = 0; n < N; ++n) {
          CMapRM dY(self.grad.data() + n * Cout * M, Cout, M);
          const double* col = cols->data() + n * K * M;
          if (need_dw) {
            MapRM dW(wi->grad.data(), Cout, K);
            CMapRM Cm(col, K, M);
            dW.noalias() += dY * Cm.transpose();
          }
          if (need_db) {
            for (int64_t c = 0; c < Cout; ++c) bi->grad[static_cast<size_t>(c)] += dY.row(c).sum();
          }
          if (need_dx) {
            MapRM dC(dcol.data(), K, M);
            dC.noalias() = Wm.transpose() * dY;
            detail::col2im_acc(dcol.data(), Cin, H, W, kh, kw, sp, Ho, Wo,
                               xi->grad.data() + n * Cin * H * W);
          }
        }
      });
}

// ---------------------------------------------------------------- pooling

inline Tensor max_pool2d(const Tensor& x, int64_t k, int64_t stride, int64_t pad) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(N * C * Ho * Wo));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const double* p = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* plane = p + nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t bidx = -1;
        for (int64_t i = 0; i < k; ++i) {
          int64_t ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) continue;
          for (int64_t j = 0; j < k; ++j) {
            int64_t iw = ow * stride - pad + j;
            if (iw < 0 || iw >= W) continue;
            double v = plane[ih * W + iw];
            if (v > best) { best = v; bidx = nc * H * W + ih * W + iw; }
          }
        }
        int64_t o = nc * Ho * Wo + oh * Wo + ow;
        out[static_cast<size_t>(o)] = best;
        (*argmax)[static_cast<size_t>(o)] = bidx;
      }
  }
  auto xi = x.impl();
  return make_result({N, C, Ho, Wo}, std::move(out), {x}, [xi, argmax](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < argmax->size(); ++i) {
      int64_t src = (*argmax)[i];
      if (src >= 0) xi->grad[static_cast<size_t>(src)] += self.grad[i];
    }
  });
}

// count_include_pad semantics (divides by k*k regardless of borders).
inline Tensor avg_pool2d(const Tensor& x, int64_t k, int64_t stride, int64_t pad) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(N * C * Ho * Wo), 0.0);
  const double* p = x.data();
  double inv = 1.0 / static_cast<double>(k * k);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* plane = p + nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          int64_t ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) continue;
          for (int64_t j = 0; j < k; ++j) {
            int64_t iw = ow * stride - pad + j;
            if (iw < 0 || iw >= W) continue;
            acc += plane[ih * W + iw];
          }
        }
        out[static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow)] = acc * inv;
      }
  }
  auto xi = x.impl();
  return make_result({N, C, Ho, Wo}, std::move(out), {x},
                     [xi, N, C, H, W, Ho, Wo, k, stride, pad, inv](TensorImpl& self) {
                       if (!xi->requires_grad) return;
                       xi->ensure_grad();
                       for (int64_t nc = 0; nc < N * C; ++nc) {
                         double* dplane = xi->grad.data() + nc * H * W;
                         for (int64_t oh = 0; oh < Ho; ++oh)
                           for (int64_t ow = 0; ow < Wo; ++ow) {
                             double g = self.grad[static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow)] * inv;
                             for (int64_t i = 0; i < k; ++i) {
                               int64_t ih = oh * stride - pad + i;
                               if (ih < 0 || ih >= H) continue;
                               for (int64_t j = 0; j < k; ++j) {
                                 int64_t iw = ow * stride - pad + j;
                                 if (iw < 0 || iw >= W) continue;
                                 dplane[ih * W + iw] += g;
                               }
                             }
                           }
                       }
                     });
}

// ---------------------------------------------------------------- upsampling

// Bilinear interpolation, non-aligned corners (pixel-center convention).
inline Tensor upsample_bilinear(const Tensor& x, int64_t Ho, int64_t Wo) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (Ho == H && Wo == W) {
    // identity still records the tape through a pass-through op
    return unary_op(x, [](double v) { return v; }, [](double, double) { return 1.0; });
  }
  double sh = static_cast<double>(H) / static_cast<double>(Ho);
  double sw = static_cast<double>(W) / static_cast<double>(Wo);
  struct Lerp { int64_t i0, i1; double w0, w1; };
  auto make_axis = [](int64_t out_n, int64_t in_n, double scale) {
    std::vector<Lerp> v(static_cast<size_t>(out_n));
    for (int64_t o = 0; o < out_n; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::max(0.0, src);
      int64_t i0 = std::min(static_cast<int64_t>(src), in_n - 1);
      int64_t i1 = std::min(i0 + 1, in_n - 1);
      double f = src - static_cast<double>(i0);
      if (i1 == i0) f = 0.0;
      v[static_cast<size_t>(o)] = {i0, i1, 1.0 - f, f};
    }
    return v;
  };
  auto ay = std::make_shared<std::vector<Lerp>>(make_axis(Ho, H, sh));
  auto ax = std::make_shared<std::vector<Lerp>>(make_axis(Wo, W, sw));
  std::vector<double> out(static_cast<size_t>(N * C * Ho * Wo));
  const double* p = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* plane = p + nc * H * W;
    double* oplane = out.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      const Lerp& ly = (*ay)[static_cast<size_t>(oh)];
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const Lerp& lx = (*ax)[static_cast<size_t>(ow)];
        oplane[oh * Wo + ow] = ly.w0 * (lx.w0 * plane[ly.i0 * W + lx.i0] + lx.w1 * plane[ly.i0 * W + lx.i1]) +
                               ly.w1 * (lx.w0 * plane[ly.i1 * W + lx.i0] + lx.w1 * plane[ly.i1 * W + lx.i1]);
      }
    }
  }
  auto xi = x.impl();
  return make_result({N, C, Ho, Wo}, std::move(out), {x},
                     [xi, ay, ax, N, C, H, W, Ho, Wo](TensorImpl& self) {
                       if (!xi->requires_grad) return;
                       xi->ensure_grad();
                       for (int64_t nc = 0; nc < N * C; ++nc) {
                         double* dplane = xi->grad.data() + nc * H * W;
                         const double* g = self.grad.data() + nc * Ho * Wo;
                         for (int64_t oh = 0; oh < Ho; ++oh) {
                           const auto& ly = (*ay)[static_cast<size_t>(oh)];
                           for (int64_t ow = 0; ow < Wo; ++ow) {
                             const auto& lx = (*ax)[static_cast<size_t>(ow)];
                             double gv = g[oh * Wo + ow];
                             dplane[ly.i0 * W + lx.i0] += gv * ly.w0 * lx.w0;
                             dplane[ly.i0 * W + lx.i1] += gv * ly.w0 * lx.w1;
                             dplane[ly.i1 * W + lx.i0] += gv * ly.w1 * lx.w0;
                             dplane[ly.i1 * W + lx.i1] += gv * ly.w1 * lx.w1;
                           }
                         }
                       }
                     });
}

inline Tensor upsample_by(const Tensor& x, int64_t factor) {
  return upsample_bilinear(x, x.shape()[2] * factor, x.shape()[3] * factor);
}

// ---------------------------------------------------------------- batch norm

// Training-mode batch norm over (N,H,W) per channel. Updates running stats
// in place (they are plain value tensors, not part of the tape).
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               Tensor& running_mean, Tensor& running_var, double momentum,
                               double eps) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  int64_t cnt = N * HW;
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  const double* p = x.data();
  for (int64_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) m += p[(n * C + c) * HW + i];
    m /= static_cast<double>(cnt);
    double v = 0.0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        double d = p[(n * C + c) * HW + i] - m;
        v += d * d;
      }
    v /= static_cast<double>(cnt);  // biased, used for normalization
    (*mean)[static_cast<size_t>(c)] = m;
    (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(v + eps);
    double unbiased = cnt > 1 ? v * static_cast<double>(cnt) / static_cast<double>(cnt - 1) : v;
    running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
    running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
  }
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* g = gamma.data();
  const double* b = beta.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < HW; ++i) {
        int64_t idx = (n * C + c) * HW + i;
        double xh = (p[idx] - (*mean)[static_cast<size_t>(c)]) * (*invstd)[static_cast<size_t>(c)];
        (*xhat)[static_cast<size_t>(idx)] = xh;
        out[static_cast<size_t>(idx)] = g[c] * xh + b[c];
      }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  return make_result(s, std::move(out), {x, gamma, beta},
                     [xi, gi, bi, xhat, invstd, N, C, HW, cnt](TensorImpl& self) {
                       for (int64_t c = 0; c < C; ++c) {
                         double dg = 0.0, db = 0.0;
                         for (int64_t n = 0; n < N; ++n)
                           for (int64_t i = 0; i < HW; ++i) {
                             int64_t idx = (n * C + c) * HW + i;
                             dg += self.grad[static_cast<size_t>(idx)] * (*xhat)[static_cast<size_t>(idx)];
                             db += self.grad[static_cast<size_t>(idx)];
                           }
                         if (gi->requires_grad) { gi->ensure_grad(); gi->grad[static_cast<size_t>(c)] += dg; }
                         if (bi->requires_grad) { bi->ensure_grad(); bi->grad[static_cast<size_t>(c)] += db; }
                         if (xi->requires_grad) {
                           xi->ensure_grad();
                           double gam = gi->data[static_cast<size_t>(c)];
                           double is = (*invstd)[static_cast<size_t>(c)];
                           double inv_cnt = 1.0 / static_cast<double>(cnt);
                           for (int64_t n = 0; n < N; ++n)
                             for (int64_t i = 0; i < HW; ++i) {
                               int64_t idx = (n * C + c) * HW + i;
                               double go = self.grad[static_cast<size_t>(idx)];
                               xi->grad[static_cast<size_t>(idx)] +=
                                   gam * is * (go - inv_cnt * db - (*xhat)[static_cast<size_t>(idx)] * inv_cnt * dg);
                             }
                         }
                       }
                     });
}

// Eval-mode batch norm: per-channel affine with frozen statistics.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const Tensor& running_mean, const Tensor& running_var,
                              double eps) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  auto scale = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  const double* p = x.data();
  const double* g = gamma.data();
  const double* b = beta.data();
  const double* rm = running_mean.data();
  const double* rv = running_var.data();
  for (int64_t c = 0; c < C; ++c)
    (*scale)[static_cast<size_t>(c)] = g[c] / std::sqrt(rv[c] + eps);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < HW; ++i) {
        int64_t idx = (n * C + c) * HW + i;
        out[static_cast<size_t>(idx)] = (*scale)[static_cast<size_t>(c)] * (p[idx] - rm[c]) + b[c];
      }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  auto rmv = std::make_shared<std::vector<double>>(running_mean.vec());
  auto rvv = std::make_shared<std::vector<double>>(running_var.vec());
  double eps_ = eps;
  return make_result(s, std::move(out), {x, gamma, beta},
                     [xi, gi, bi, scale, rmv, rvv, eps_, N, C, HW](TensorImpl& self) {
                       for (int64_t c = 0; c < C; ++c) {
                         double is = 1.0 / std::sqrt((*rvv)[static_cast<size_t>(c)] + eps_);
                         double dg = 0.0, db = 0.0;
                         for (int64_t n = 0; n < N; ++n)
                           for (int64_t i = 0; i < HW; ++i) {
                             int64_t idx = (n * C + c) * HW + i;
                             double go = self.grad[static_cast<size_t>(idx)];
                             db += go;
                             dg += go * (xi->data[static_cast<size_t>(idx)] - (*rmv)[static_cast<size_t>(c)]) * is;
                             if (xi->requires_grad) {
                               xi->ensure_grad();
                               xi->grad[static_cast<size_t>(idx)] += go * (*scale)[static_cast<size_t>(c)];
                             }
                           }
                         if (gi->requires_grad) { gi->ensure_grad(); gi->grad[static_cast<size_t>(c)] += dg; }
                         if (bi->requires_grad) { bi->ensure_grad(); bi->grad[static_cast<size_t>(c)] += db; }
                       }
                     });
}

// ---------------------------------------------------------------- losses

// Numerically stable mean BCE on raw logits.
inline Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape())
    throw std::invalid_argument("bce_with_logits_mean: shape mismatch " +
                                shape_str(logits.shape()) + " vs " + shape_str(target.shape()));
  int64_t n = logits.numel();
  const double* x = logits.data();
  const double* z = target.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double v = x[i];
    acc += std::max(v, 0.0) - v * z[i] + std::log1p(std::exp(-std::abs(v)));
  }
  acc /= static_cast<double>(n);
  auto li = logits.impl();
  auto ti = target.impl();
  return make_result({1}, {acc}, {logits, target}, [li, ti, n](TensorImpl& self) {
    double g = self.grad[0] / static_cast<double>(n);
    if (li->requires_grad) {
      li->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double s = 1.0 / (1.0 + std::exp(-li->data[static_cast<size_t>(i)]));
        li->grad[static_cast<size_t>(i)] += g * (s - ti->data[static_cast<size_t>(i)]);
      }
    }
  });
}

}  // namespace bsnet
