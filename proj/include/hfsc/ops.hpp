#pragma once

// Differentiable tensor operations. Every op writes its forward result into a
// fresh node and, when grad mode is on and an input requires grad, attaches a
// backward closure that accumulates into the parents' grads.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "hfsc/tensor.hpp"

namespace hfsc {
namespace ops {

namespace detail {

// Plan for NumPy-style broadcasting over shapes padded to rank 4 with
// leading 1s. Strides are zeroed along broadcast extents.
struct BcPlan {
  int64_t oe[4];          // output extents
  int64_t as[4], bs[4];   // input strides (0 where broadcast)
  Shape out_shape;
  bool same = false;      // fast path: identical shapes
};

inline void pad4(const Shape& s, int64_t e[4]) {
  for (int i = 0; i < 4; ++i) e[i] = 1;
  for (int i = 0; i < s.nd; ++i) e[4 - s.nd + i] = s.d[i];
}

inline BcPlan make_plan(const Shape& a, const Shape& b, const char* opname) {
  BcPlan p;
  p.same = (a == b);
  int64_t ae[4], be[4];
  pad4(a, ae);
  pad4(b, be);
  for (int i = 0; i < 4; ++i) {
    if (ae[i] != be[i] && ae[i] != 1 && be[i] != 1)
      throw std::invalid_argument(std::string(opname) + ": shapes " + a.str() + " and " + b.str() +
                                  " are not broadcastable");
    p.oe[i] = std::max(ae[i], be[i]);
  }
  int64_t asr = 1, bsr = 1;
  for (int i = 3; i >= 0; --i) {
    p.as[i] = (ae[i] == 1) ? 0 : asr;
    p.bs[i] = (be[i] == 1) ? 0 : bsr;
    asr *= ae[i];
    bsr *= be[i];
  }
  int out_nd = std::max(a.nd, b.nd);
  Shape os;
  os.nd = out_nd;
  for (int i = 0; i < out_nd; ++i) os.d[i] = p.oe[4 - out_nd + i];
  p.out_shape = os;
  return p;
}

// Applies f(ia, ib, io) over the broadcast iteration space.
template <class F>
inline void bc_loop(const BcPlan& p, F&& f) {
  int64_t io = 0;
  for (int64_t i0 = 0; i0 < p.oe[0]; ++i0)
    for (int64_t i1 = 0; i1 < p.oe[1]; ++i1)
      for (int64_t i2 = 0; i2 < p.oe[2]; ++i2) {
        int64_t ia = i0 * p.as[0] + i1 * p.as[1] + i2 * p.as[2];
        int64_t ib = i0 * p.bs[0] + i1 * p.bs[1] + i2 * p.bs[2];
        for (int64_t i3 = 0; i3 < p.oe[3]; ++i3, ++io)
          f(ia + i3 * p.as[3], ib + i3 * p.bs[3], io);
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::make_plan(a.shape(), b.shape(), "add");
  Tensor<T> out(plan.out_shape);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (plan.same) {
    for (int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] + bv[i];
  } else {
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) { ov[io] = av[ia] + bv[ib]; });
  }
  attach(out, {a, b}, [an = a.raw(), bn = b.raw(), on = out.raw(), plan]() {
    const T* go = on->grad.data();
    if (plan.same) {
      int64_t n = static_cast<int64_t>(on->value.size());
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += go[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->grad[i] += go[i];
      }
      return;
    }
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) {
      if (an->requires_grad) an->grad[ia] += go[io];
      if (bn->requires_grad) bn->grad[ib] += go[io];
    });
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::make_plan(a.shape(), b.shape(), "sub");
  Tensor<T> out(plan.out_shape);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (plan.same) {
    for (int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] - bv[i];
  } else {
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) { ov[io] = av[ia] - bv[ib]; });
  }
  attach(out, {a, b}, [an = a.raw(), bn = b.raw(), on = out.raw(), plan]() {
    const T* go = on->grad.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) {
      if (an->requires_grad) an->grad[ia] += go[io];
      if (bn->requires_grad) bn->grad[ib] -= go[io];
    });
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::make_plan(a.shape(), b.shape(), "mul");
  Tensor<T> out(plan.out_shape);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (plan.same) {
    for (int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] * bv[i];
  } else {
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) { ov[io] = av[ia] * bv[ib]; });
  }
  attach(out, {a, b}, [an = a.raw(), bn = b.raw(), on = out.raw(), plan]() {
    const T* go = on->grad.data();
    const T* av = an->value.data();
    const T* bv = bn->value.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) {
      if (an->requires_grad) an->grad[ia] += go[io] * bv[ib];
      if (bn->requires_grad) bn->grad[ib] += go[io] * av[ia];
    });
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::make_plan(a.shape(), b.shape(), "div");
  Tensor<T> out(plan.out_shape);
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  if (plan.same) {
    for (int64_t i = 0, n = out.numel(); i < n; ++i) ov[i] = av[i] / bv[i];
  } else {
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) { ov[io] = av[ia] / bv[ib]; });
  }
  attach(out, {a, b}, [an = a.raw(), bn = b.raw(), on = out.raw(), plan]() {
    const T* go = on->grad.data();
    const T* av = an->value.data();
    const T* bv = bn->value.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    detail::bc_loop(plan, [&](int64_t ia, int64_t ib, int64_t io) {
      if (an->requires_grad) an->grad[ia] += go[io] / bv[ib];
      if (bn->requires_grad) bn->grad[ib] -= go[io] * av[ia] / (bv[ib] * bv[ib]);
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Scalar and unary ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = xv[i] * c;
  attach(out, {x}, [xn = x.raw(), on = out.raw(), c]() {
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * c;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = xv[i] + c;
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

// c - x, used for complement masks (1 - M).
template <typename T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = c - xv[i];
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] -= on->grad[i];
  });
  return out;
}

// Subgradient at 0 is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    const T* xv = xn->value.data();
    for (size_t i = 0; i < on->grad.size(); ++i)
      if (xv[i] > T(0)) xn->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    const T* o = on->value.data();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * o[i] * (T(1) - o[i]);
  });
  return out;
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) ov[i] = std::sqrt(xv[i]);
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    const T* o = on->value.data();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * T(0.5) / o[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  double acc = 0;
  for (const T& v : x.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
    xn->ensure_grad();
    const T g = on->grad[0];
    for (auto& gx : xn->grad) gx += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const int64_t n = x.numel();
  double acc = 0;
  for (const T& v : x.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  attach(out, {x}, [xn = x.raw(), on = out.raw(), n]() {
    xn->ensure_grad();
    const T g = on->grad[0] / static_cast<T>(n);
    for (auto& gx : xn->grad) gx += g;
  });
  return out;
}

// (N,C,H,W) -> (N,1,1,1): mean over everything but the batch extent.
template <typename T>
Tensor<T> mean_per_sample(const Tensor<T>& x) {
  if (x.shape().nd != 4) throw std::invalid_argument("mean_per_sample: want 4D, got " + x.shape().str());
  const int64_t n = x.shape()[0], m = x.numel() / n;
  Tensor<T> out(Shape{n, 1, 1, 1});
  const T* xv = x.data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < m; ++j) acc += static_cast<double>(xv[i * m + j]);
    out.data()[i] = static_cast<T>(acc / static_cast<double>(m));
  }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), n, m]() {
    xn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const T g = on->grad[i] / static_cast<T>(m);
      for (int64_t j = 0; j < m; ++j) xn->grad[i * m + j] += g;
    }
  });
  return out;
}

// (N,C,H,W) -> (N,C,1,1): global spatial average pool.
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& x) {
  if (x.shape().nd != 4) throw std::invalid_argument("spatial_mean: want 4D, got " + x.shape().str());
  const int64_t nc = x.shape()[0] * x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], 1, 1});
  const T* xv = x.data();
  for (int64_t i = 0; i < nc; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < hw; ++j) acc += static_cast<double>(xv[i * hw + j]);
    out.data()[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), nc, hw]() {
    xn->ensure_grad();
    for (int64_t i = 0; i < nc; ++i) {
      const T g = on->grad[i] / static_cast<T>(hw);
      for (int64_t j = 0; j < hw; ++j) xn->grad[i * hw + j] += g;
    }
  });
  return out;
}

// (N,C,H,W) -> (N,1,H,W): mean over channels.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  if (x.shape().nd != 4) throw std::invalid_argument("channel_mean: want 4D, got " + x.shape().str());
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{n, 1, x.shape()[2], x.shape()[3]});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t j = 0; j < hw; ++j) {
      double acc = 0;
      for (int64_t ch = 0; ch < c; ++ch) acc += static_cast<double>(xv[(b * c + ch) * hw + j]);
      ov[b * hw + j] = static_cast<T>(acc / static_cast<double>(c));
    }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), n, c, hw]() {
    xn->ensure_grad();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t j = 0; j < hw; ++j)
          xn->grad[(b * c + ch) * hw + j] += on->grad[b * hw + j] / static_cast<T>(c);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along one axis of the tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= s.nd) throw std::invalid_argument("softmax: bad axis for " + s.str());
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s.d[i];
  const int64_t len = s.d[axis];
  for (int i = axis + 1; i < s.nd; ++i) inner *= s.d[i];

  Tensor<T> out(s);
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      T mx = xv[base];
      for (int64_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T denom = T(0);
      for (int64_t k = 0; k < len; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        ov[base + k * inner] = e;
        denom += e;
      }
      for (int64_t k = 0; k < len; ++k) ov[base + k * inner] /= denom;
    }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), outer, len, inner]() {
    xn->ensure_grad();
    const T* o = on->value.data();
    const T* go = on->grad.data();
    for (int64_t ou = 0; ou < outer; ++ou)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = ou * len * inner + in;
        T dot = T(0);
        for (int64_t k = 0; k < len; ++k) dot += go[base + k * inner] * o[base + k * inner];
        for (int64_t k = 0; k < len; ++k)
          xn->grad[base + k * inner] += o[base + k * inner] * (go[base + k * inner] - dot);
      }
  });
  return out;
}

// Channel softmax for NCHW feature maps.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.shape().nd != 4) throw std::invalid_argument("softmax_channels: want 4D, got " + x.shape().str());
  return softmax(x, 1);
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.nd != 4 || ws.nd != 4)
    throw std::invalid_argument("conv2d: input " + is.str() + " weight " + ws.str() + " must be 4D");
  const int64_t N = is[0], Cin = is[1], H = is[2], W = is[3];
  const int64_t Cout = ws[0], k = ws[2];
  if (ws[1] != Cin)
    throw std::invalid_argument("conv2d: input channels " + is.str() + " do not match weight " + ws.str());
  if (ws[3] != k) throw std::invalid_argument("conv2d: non-square kernel " + ws.str());
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel size must be 1 or 3");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (padding != static_cast<int>(k) / 2)
    throw std::invalid_argument("conv2d: padding must be floor(k/2)");
  if (bias.shape().nd != 1 || bias.shape()[0] != Cout)
    throw std::invalid_argument("conv2d: bias " + bias.shape().str() + " does not match weight " + ws.str());

  const int64_t Ho = (H + 2 * padding - k) / stride + 1;
  const int64_t Wo = (W + 2 * padding - k) / stride + 1;
  Tensor<T> out(Shape{N, Cout, Ho, Wo});

  const T* x = input.data();
  const T* w = weight.data();
  const T* b = bias.data();
  T* y = out.data();

  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      T* yp = y + (n * Cout + co) * Ho * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) yp[i] = b[co];
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* xp = x + (n * Cin + ci) * H * W;
        for (int64_t p = 0; p < k; ++p)
          for (int64_t q = 0; q < k; ++q) {
            const T wv = w[((co * Cin + ci) * k + p) * k + q];
            if (wv == T(0)) continue;
            // valid output range so the inner loops stay branch-free
            const int64_t oy0 = std::max<int64_t>(0, (padding - p + stride - 1) / stride);
            const int64_t oy1 = std::min(Ho - 1, (H - 1 + padding - p) / stride);
            const int64_t ox0 = std::max<int64_t>(0, (padding - q + stride - 1) / stride);
            const int64_t ox1 = std::min(Wo - 1, (W - 1 + padding - q) / stride);
            for (int64_t oy = oy0; oy <= oy1; ++oy) {
              const int64_t iy = oy * stride - padding + p;
              const T* xr = xp + iy * W - padding + q;
              T* yr = yp + oy * Wo;
              for (int64_t ox = ox0; ox <= ox1; ++ox) yr[ox] += wv * xr[ox * stride];
            }
          }
      }
    }

  attach(out, {input, weight, bias},
         [xn = input.raw(), wn = weight.raw(), bn = bias.raw(), on = out.raw(), N, Cin, Cout, H, W,
          Ho, Wo, k, stride, padding]() {
           const T* go = on->grad.data();
           const T* x = xn->value.data();
           const T* w = wn->value.data();
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t n = 0; n < N; ++n)
               for (int64_t co = 0; co < Cout; ++co) {
                 const T* gp = go + (n * Cout + co) * Ho * Wo;
                 T acc = T(0);
                 for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
                 bn->grad[co] += acc;
               }
           }
           if (xn->requires_grad) xn->ensure_grad();
           if (wn->requires_grad) wn->ensure_grad();
           if (!xn->requires_grad && !wn->requires_grad) return;
           for (int64_t n = 0; n < N; ++n)
             for (int64_t co = 0; co < Cout; ++co) {
               const T* gp = go + (n * Cout + co) * Ho * Wo;
               for (int64_t ci = 0; ci < Cin; ++ci) {
                 const T* xp = x + (n * Cin + ci) * H * W;
                 T* gxp = xn->requires_grad ? xn->grad.data() + (n * Cin + ci) * H * W : nullptr;
                 for (int64_t p = 0; p < k; ++p)
                   for (int64_t q = 0; q < k; ++q) {
                     const int64_t widx = ((co * Cin + ci) * k + p) * k + q;
                     const T wv = w[widx];
                     const int64_t oy0 = std::max<int64_t>(0, (padding - p + stride - 1) / stride);
                     const int64_t oy1 = std::min(Ho - 1, (H - 1 + padding - p) / stride);
                     const int64_t ox0 = std::max<int64_t>(0, (padding - q + stride - 1) / stride);
                     const int64_t ox1 = std::min(Wo - 1, (W - 1 + padding - q) / stride);
                     T wacc = T(0);
                     for (int64_t oy = oy0; oy <= oy1; ++oy) {
                       const int64_t off = (oy * stride - padding + p) * W - padding + q;
                       const T* gr = gp + oy * Wo;
                       if (gxp) {
                         T* gxr = gxp + off;
                         for (int64_t ox = ox0; ox <= ox1; ++ox) gxr[ox * stride] += wv * gr[ox];
                       }
                       if (wn->requires_grad) {
                         const T* xr = xp + off;
                         for (int64_t ox = ox0; ox <= ox1; ++ox) wacc += gr[ox] * xr[ox * stride];
                       }
                     }
                     if (wn->requires_grad) wn->grad[widx] += wacc;
                   }
               }
             }
         });
  return out;
}

// Transpose convolution; weight layout is (in_channels, out_channels, k, k),
// so conv_transpose2d(y; W) with conv2d's (out,in,k,k) buffer is its adjoint.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.nd != 4 || ws.nd != 4)
    throw std::invalid_argument("conv_transpose2d: input " + is.str() + " weight " + ws.str() +
                                " must be 4D");
  const int64_t N = is[0], Cin = is[1], H = is[2], W = is[3];
  const int64_t Cout = ws[1], k = ws[2];
  if (ws[0] != Cin)
    throw std::invalid_argument("conv_transpose2d: input channels " + is.str() +
                                " do not match weight " + ws.str());
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv_transpose2d: stride must be 1 or 2");
  const int64_t Ho = (H - 1) * stride - 2 * padding + k + output_padding;
  const int64_t Wo = (W - 1) * stride - 2 * padding + k + output_padding;
  if (stride == 2 && (Ho != 2 * H || Wo != 2 * W))
    throw std::invalid_argument("conv_transpose2d: output_padding " + std::to_string(output_padding) +
                                " does not double " + is.str() + " spatial extents");
  if (stride == 1 && output_padding != 0)
    throw std::invalid_argument("conv_transpose2d: output_padding must be 0 for stride 1");
  if (bias.shape().nd != 1 || bias.shape()[0] != Cout)
    throw std::invalid_argument("conv_transpose2d: bias " + bias.shape().str() +
                                " does not match weight " + ws.str());

  Tensor<T> out(Shape{N, Cout, Ho, Wo});
  const T* x = input.data();
  const T* w = weight.data();
  const T* b = bias.data();
  T* y = out.data();

  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      T* yp = y + (n * Cout + co) * Ho * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) yp[i] = b[co];
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* xp = x + (n * Cin + ci) * H * W;
        for (int64_t p = 0; p < k; ++p)
          for (int64_t q = 0; q < k; ++q) {
            const T wv = w[((ci * Cout + co) * k + p) * k + q];
            if (wv == T(0)) continue;
            // iy contributes to oy = iy*stride - padding + p, need 0 <= oy < Ho
            const int64_t iy0 = std::max<int64_t>(0, (padding - p + stride - 1) / stride);
            const int64_t iy1 = std::min(H - 1, (Ho - 1 + padding - p) / stride);
            const int64_t ix0 = std::max<int64_t>(0, (padding - q + stride - 1) / stride);
            const int64_t ix1 = std::min(W - 1, (Wo - 1 + padding - q) / stride);
            for (int64_t iy = iy0; iy <= iy1; ++iy) {
              const T* xr = xp + iy * W;
              T* yr = yp + (iy * stride - padding + p) * Wo - padding + q;
              for (int64_t ix = ix0; ix <= ix1; ++ix) yr[ix * stride] += wv * xr[ix];
            }
          }
      }
    }

  attach(out, {input, weight, bias},
         [xn = input.raw(), wn = weight.raw(), bn = bias.raw(), on = out.raw(), N, Cin, Cout, H, W,
          Ho, Wo, k, stride, padding]() {
           const T* go = on->grad.data();
           const T* x = xn->value.data();
           const T* w = wn->value.data();
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t n = 0; n < N; ++n)
               for (int64_t co = 0; co < Cout; ++co) {
                 const T* gp = go + (n * Cout + co) * Ho * Wo;
                 T acc = T(0);
                 for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
                 bn->grad[co] += acc;
               }
           }
           if (xn->requires_grad) xn->ensure_grad();
           if (wn->requires_grad) wn->ensure_grad();
           if (!xn->requires_grad && !wn->requires_grad) return;
           for (int64_t n = 0; n < N; ++n)
             for (int64_t co = 0; co < Cout; ++co) {
               const T* gp = go + (n * Cout + co) * Ho * Wo;
               for (int64_t ci = 0; ci < Cin; ++ci) {
                 const T* xp = x + (n * Cin + ci) * H * W;
                 T* gxp = xn->requires_grad ? xn->grad.data() + (n * Cin + ci) * H * W : nullptr;
                 for (int64_t p = 0; p < k; ++p)
                   for (int64_t q = 0; q < k; ++q) {
                     const int64_t widx = ((ci * Cout + co) * k + p) * k + q;
                     const T wv = w[widx];
                     const int64_t iy0 = std::max<int64_t>(0, (padding - p + stride - 1) / stride);
                     const int64_t iy1 = std::min(H - 1, (Ho - 1 + padding - p) / stride);
                     const int64_t ix0 = std::max<int64_t>(0, (padding - q + stride - 1) / stride);
                     const int64_t ix1 = std::min(W - 1, (Wo - 1 + padding - q) / stride);
                     T wacc = T(0);
                     for (int64_t iy = iy0; iy <= iy1; ++iy) {
                       const T* gr = gp + (iy * stride - padding + p) * Wo - padding + q;
                       if (gxp) {
                         T* gxr = gxp + iy * W;
                         for (int64_t ix = ix0; ix <= ix1; ++ix) gxr[ix] += wv * gr[ix * stride];
                       }
                       if (wn->requires_grad) {
                         const T* xr = xp + iy * W;
                         for (int64_t ix = ix0; ix <= ix1; ++ix) wacc += xr[ix] * gr[ix * stride];
                       }
                     }
                     if (wn->requires_grad) wn->grad[widx] += wacc;
                   }
               }
             }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Token ops (linear, attention, reshapes)
// ---------------------------------------------------------------------------

// x: (N,T,din), weight: (dout,din), bias: (dout) -> (N,T,dout)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.nd != 3 || ws.nd != 2)
    throw std::invalid_argument("linear: tokens " + xs.str() + " weight " + ws.str());
  const int64_t rows = xs[0] * xs[1], din = xs[2], dout = ws[0];
  if (ws[1] != din)
    throw std::invalid_argument("linear: tokens " + xs.str() + " do not match weight " + ws.str());
  if (bias.shape().nd != 1 || bias.shape()[0] != dout)
    throw std::invalid_argument("linear: bias " + bias.shape().str() + " does not match weight " + ws.str());

  Tensor<T> out(Shape{xs[0], xs[1], dout});
  const T* xv = x.data();
  const T* wv = weight.data();
  const T* bv = bias.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * din;
    T* orow = ov + r * dout;
    for (int64_t o = 0; o < dout; ++o) {
      const T* wr = wv + o * din;
      T acc = bv[o];
      for (int64_t i = 0; i < din; ++i) acc += wr[i] * xr[i];
      orow[o] = acc;
    }
  }
  attach(out, {x, weight, bias},
         [xn = x.raw(), wn = weight.raw(), bn = bias.raw(), on = out.raw(), rows, din, dout]() {
           const T* go = on->grad.data();
           const T* xv = xn->value.data();
           const T* wv = wn->value.data();
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r)
               for (int64_t o = 0; o < dout; ++o) bn->grad[o] += go[r * dout + o];
           }
           if (xn->requires_grad) {
             xn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r) {
               T* gxr = xn->grad.data() + r * din;
               const T* gr = go + r * dout;
               for (int64_t o = 0; o < dout; ++o) {
                 const T g = gr[o];
                 const T* wr = wv + o * din;
                 for (int64_t i = 0; i < din; ++i) gxr[i] += g * wr[i];
               }
             }
           }
           if (wn->requires_grad) {
             wn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r) {
               const T* xr = xv + r * din;
               const T* gr = go + r * dout;
               for (int64_t o = 0; o < dout; ++o) {
                 const T g = gr[o];
                 T* gwr = wn->grad.data() + o * din;
                 for (int64_t i = 0; i < din; ++i) gwr[i] += g * xr[i];
               }
             }
           }
         });
  return out;
}

// Multi-head scaled dot-product attention on token tensors. No projections:
// callers provide already-projected query/key/value. Weights are row-stochastic
// per head.
template <typename T>
Tensor<T> attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value, int heads) {
  const Shape& qs = query.shape();
  const Shape& ks = key.shape();
  const Shape& vs = value.shape();
  if (qs.nd != 3 || ks.nd != 3 || vs.nd != 3)
    throw std::invalid_argument("attention: tokens must be (N,T,d)");
  const int64_t N = qs[0], Tq = qs[1], d = qs[2], Tk = ks[1];
  if (ks[0] != N || vs[0] != N || ks[2] != d || vs[2] != d || vs[1] != Tk)
    throw std::invalid_argument("attention: query " + qs.str() + " key " + ks.str() + " value " +
                                vs.str() + " mismatch");
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("attention: token dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  const int64_t dh = d / heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<T> out(Shape{N, Tq, d});
  std::vector<T> attn(static_cast<size_t>(N * heads * Tq * Tk));
  const T* q = query.data();
  const T* k = key.data();
  const T* v = value.data();
  T* o = out.data();

  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t hoff = h * dh;
      T* a = attn.data() + (n * heads + h) * Tq * Tk;
      for (int64_t i = 0; i < Tq; ++i) {
        const T* qi = q + (n * Tq + i) * d + hoff;
        T* ai = a + i * Tk;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < Tk; ++j) {
          const T* kj = k + (n * Tk + j) * d + hoff;
          T s = T(0);
          for (int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          ai[j] = s * inv_scale;
          mx = std::max(mx, ai[j]);
        }
        T denom = T(0);
        for (int64_t j = 0; j < Tk; ++j) {
          ai[j] = std::exp(ai[j] - mx);
          denom += ai[j];
        }
        T* oi = o + (n * Tq + i) * d + hoff;
        for (int64_t c = 0; c < dh; ++c) oi[c] = T(0);
        for (int64_t j = 0; j < Tk; ++j) {
          ai[j] /= denom;
          const T* vj = v + (n * Tk + j) * d + hoff;
          const T w = ai[j];
          for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }

  attach(out, {query, key, value},
         [qn = query.raw(), kn = key.raw(), vn = value.raw(), on = out.raw(),
          attn = std::move(attn), N, Tq, Tk, d, dh, heads, inv_scale]() {
           const T* go = on->grad.data();
           const T* q = qn->value.data();
           const T* k = kn->value.data();
           const T* v = vn->value.data();
           if (qn->requires_grad) qn->ensure_grad();
           if (kn->requires_grad) kn->ensure_grad();
           if (vn->requires_grad) vn->ensure_grad();
           std::vector<T> da(static_cast<size_t>(Tk));
           for (int64_t n = 0; n < N; ++n)
             for (int64_t h = 0; h < heads; ++h) {
               const int64_t hoff = h * dh;
               const T* a = attn.data() + (n * heads + h) * Tq * Tk;
               for (int64_t i = 0; i < Tq; ++i) {
                 const T* ai = a + i * Tk;
                 const T* goi = go + (n * Tq + i) * d + hoff;
                 // dV and dA
                 T dot = T(0);
                 for (int64_t j = 0; j < Tk; ++j) {
                   const T* vj = v + (n * Tk + j) * d + hoff;
                   T s = T(0);
                   for (int64_t c = 0; c < dh; ++c) s += goi[c] * vj[c];
                   da[j] = s;
                   dot += s * ai[j];
                   if (vn->requires_grad) {
                     T* gvj = vn->grad.data() + (n * Tk + j) * d + hoff;
                     const T w = ai[j];
                     for (int64_t c = 0; c < dh; ++c) gvj[c] += w * goi[c];
                   }
                 }
                 if (!qn->requires_grad && !kn->requires_grad) continue;
                 // dScores = A .* (dA - rowdot), then into Q and K
                 const T* qi = q + (n * Tq + i) * d + hoff;
                 T* gqi = qn->requires_grad ? qn->grad.data() + (n * Tq + i) * d + hoff : nullptr;
                 for (int64_t j = 0; j < Tk; ++j) {
                   const T ds = ai[j] * (da[j] - dot) * inv_scale;
                   if (ds == T(0)) continue;
                   const T* kj = k + (n * Tk + j) * d + hoff;
                   if (gqi)
                     for (int64_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                   if (kn->requires_grad) {
                     T* gkj = kn->grad.data() + (n * Tk + j) * d + hoff;
                     for (int64_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                   }
                 }
               }
             }
         });
  return out;
}

// (N,C,H,W) -> (N, H*W, C): spatial positions become tokens.
template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.nd != 4) throw std::invalid_argument("nchw_to_tokens: want 4D, got " + s.str());
  const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out(Shape{N, HW, C});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* xp = xv + (n * C + c) * HW;
      T* op = ov + n * HW * C + c;
      for (int64_t t = 0; t < HW; ++t) op[t * C] = xp[t];
    }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), N, C, HW]() {
    xn->ensure_grad();
    const T* go = on->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        T* gx = xn->grad.data() + (n * C + c) * HW;
        const T* gp = go + n * HW * C + c;
        for (int64_t t = 0; t < HW; ++t) gx[t] += gp[t * C];
      }
  });
  return out;
}

// (N, H*W, C) -> (N,C,H,W)
template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& x, int64_t h, int64_t w) {
  const Shape& s = x.shape();
  if (s.nd != 3 || s[1] != h * w)
    throw std::invalid_argument("tokens_to_nchw: tokens " + s.str() + " do not cover " +
                                std::to_string(h) + "x" + std::to_string(w));
  const int64_t N = s[0], C = s[2], HW = h * w;
  Tensor<T> out(Shape{N, C, h, w});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T* op = ov + (n * C + c) * HW;
      const T* xp = xv + n * HW * C + c;
      for (int64_t t = 0; t < HW; ++t) op[t] = xp[t * C];
    }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), N, C, HW]() {
    xn->ensure_grad();
    const T* go = on->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T* gp = go + (n * C + c) * HW;
        T* gx = xn->grad.data() + n * HW * C + c;
        for (int64_t t = 0; t < HW; ++t) gx[t * C] += gp[t];
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Channel-axis structure ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.nd != 4) throw std::invalid_argument("concat_channels: want 4D, got " + s0.str());
  int64_t ctotal = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.nd != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw std::invalid_argument("concat_channels: " + s.str() + " does not align with " + s0.str());
    ctotal += s[1];
  }
  const int64_t N = s0[0], HW = s0[2] * s0[3];
  Tensor<T> out(Shape{N, ctotal, s0[2], s0[3]});
  T* ov = out.data();
  int64_t coff = 0;
  for (const auto& p : parts) {
    const int64_t C = p.shape()[1];
    const T* pv = p.data();
    for (int64_t n = 0; n < N; ++n)
      std::memcpy(ov + (n * ctotal + coff) * HW, pv + n * C * HW, sizeof(T) * C * HW);
    coff += C;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    std::vector<Node<T>*> raws;
    for (const auto& p : parts) {
      out.raw()->parents.push_back(p.node());
      raws.push_back(p.raw());
    }
    out.raw()->requires_grad = true;
    out.raw()->backward = [raws, on = out.raw(), N, HW, ctotal]() {
      const T* go = on->grad.data();
      int64_t coff = 0;
      for (Node<T>* pn : raws) {
        const int64_t C = pn->shape[1];
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int64_t n = 0; n < N; ++n) {
            const T* gp = go + (n * ctotal + coff) * HW;
            T* gx = pn->grad.data() + n * C * HW;
            for (int64_t i = 0; i < C * HW; ++i) gx[i] += gp[i];
          }
        }
        coff += C;
      }
    };
  }
  return out;
}

// Running sum along the channel axis (the cumulative mask of the fusion).
template <typename T>
Tensor<T> cumsum_channels(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.nd != 4) throw std::invalid_argument("cumsum_channels: want 4D, got " + s.str());
  const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out(s);
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t j = 0; j < HW; ++j) {
      T run = T(0);
      for (int64_t c = 0; c < C; ++c) {
        run += xv[(n * C + c) * HW + j];
        ov[(n * C + c) * HW + j] = run;
      }
    }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), N, C, HW]() {
    xn->ensure_grad();
    const T* go = on->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t j = 0; j < HW; ++j) {
        T run = T(0);
        for (int64_t c = C - 1; c >= 0; --c) {
          run += go[(n * C + c) * HW + j];
          xn->grad[(n * C + c) * HW + j] += run;
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Bicubic upsampling (Keys kernel, a = -0.5, edge clamped)
// ---------------------------------------------------------------------------

namespace detail {

inline double keys_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
  if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
  return 0.0;
}

struct BicubicTaps {
  std::vector<int64_t> index;   // 4 per output position, edge clamped
  std::vector<double> weight;   // 4 per output position
};

inline BicubicTaps bicubic_taps(int64_t in_len, int factor) {
  const int64_t out_len = in_len * factor;
  BicubicTaps taps;
  taps.index.resize(out_len * 4);
  taps.weight.resize(out_len * 4);
  for (int64_t o = 0; o < out_len; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    const int64_t base = static_cast<int64_t>(std::floor(src));
    const double frac = src - base;
    for (int t = 0; t < 4; ++t) {
      const int64_t k = base - 1 + t;
      taps.index[o * 4 + t] = std::clamp<int64_t>(k, 0, in_len - 1);
      taps.weight[o * 4 + t] = keys_weight(frac - (t - 1));
    }
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bicubic(const Tensor<T>& x, int factor) {
  const Shape& s = x.shape();
  if (s.nd != 4) throw std::invalid_argument("upsample_bicubic: want 4D, got " + s.str());
  if (factor < 1) throw std::invalid_argument("upsample_bicubic: factor must be >= 1");
  if (factor == 1) {
    Tensor<T> out = Tensor<T>::from(s, x.values());
    attach(out, {x}, [xn = x.raw(), on = out.raw()]() {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
    return out;
  }
  const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = H * factor, Wo = W * factor;
  const auto ty = detail::bicubic_taps(H, factor);
  const auto tx = detail::bicubic_taps(W, factor);

  Tensor<T> out(Shape{N, C, Ho, Wo});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xp = xv + nc * H * W;
    T* op = ov + nc * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double acc = 0;
        for (int a = 0; a < 4; ++a) {
          const double wy = ty.weight[oy * 4 + a];
          const int64_t iy = ty.index[oy * 4 + a];
          for (int b = 0; b < 4; ++b)
            acc += wy * tx.weight[ox * 4 + b] * static_cast<double>(xp[iy * W + tx.index[ox * 4 + b]]);
        }
        op[oy * Wo + ox] = static_cast<T>(acc);
      }
  }
  attach(out, {x}, [xn = x.raw(), on = out.raw(), ty, tx, N, C, H, W, Ho, Wo]() {
    xn->ensure_grad();
    const T* go = on->grad.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* gx = xn->grad.data() + nc * H * W;
      const T* gp = go + nc * Ho * Wo;
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const double g = static_cast<double>(gp[oy * Wo + ox]);
          for (int a = 0; a < 4; ++a) {
            const double wy = ty.weight[oy * 4 + a] * g;
            const int64_t iy = ty.index[oy * 4 + a];
            for (int b = 0; b < 4; ++b)
              gx[iy * W + tx.index[ox * 4 + b]] += static_cast<T>(wy * tx.weight[ox * 4 + b]);
          }
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mse: shapes " + a.shape().str() + " and " + b.shape().str() +
                                " differ");
  Tensor<T> d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace ops
}  // namespace hfsc
