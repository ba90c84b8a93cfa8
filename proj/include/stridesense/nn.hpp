#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stridesense/rng.hpp"
#include "stridesense/tensor.hpp"

namespace stridesense::nn {

// ---------------------------------------------------------------------------
// Vector kernels. Plain loops with fixed accumulation order so results are
// bitwise reproducible at any thread count; the lane-split dot still
// vectorizes without -ffast-math.

template <class T>
inline void axpy(T a, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
inline T dot(const T* a, const T* b, int n) {
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// C-row update for two output rows and up to eight lowered taps per pass:
// c0/c1 accumulate sum_k w[k] * rows[k]. Streams every operand once, so the
// conv GEMM is FMA-bound instead of rewriting the output row per tap.
template <class T>
inline void fused_taps_2x8(const T* w0, const T* w1, const T* const* rows, int kk, T* c0_, T* c1_,
                           int n) {
  T v0[8] = {}, v1[8] = {};
  for (int k = 0; k < kk; ++k) {
    v0[k] = w0[k];
    if (w1) v1[k] = w1[k];
  }
  // Unused taps alias row 0 with weight 0.
  const T* __restrict__ r0 = rows[0];
  const T* __restrict__ r1 = kk > 1 ? rows[1] : rows[0];
  const T* __restrict__ r2 = kk > 2 ? rows[2] : rows[0];
  const T* __restrict__ r3 = kk > 3 ? rows[3] : rows[0];
  const T* __restrict__ r4 = kk > 4 ? rows[4] : rows[0];
  const T* __restrict__ r5 = kk > 5 ? rows[5] : rows[0];
  const T* __restrict__ r6 = kk > 6 ? rows[6] : rows[0];
  const T* __restrict__ r7 = kk > 7 ? rows[7] : rows[0];
  if (w1) {
    T* __restrict__ c0 = c0_;
    T* __restrict__ c1 = c1_;
    for (int i = 0; i < n; ++i) {
      T a0 = c0[i], a1 = c1[i];
      a0 += v0[0] * r0[i] + v0[1] * r1[i] + v0[2] * r2[i] + v0[3] * r3[i];
      a0 += v0[4] * r4[i] + v0[5] * r5[i] + v0[6] * r6[i] + v0[7] * r7[i];
      a1 += v1[0] * r0[i] + v1[1] * r1[i] + v1[2] * r2[i] + v1[3] * r3[i];
      a1 += v1[4] * r4[i] + v1[5] * r5[i] + v1[6] * r6[i] + v1[7] * r7[i];
      c0[i] = a0;
      c1[i] = a1;
    }
  } else {
    T* __restrict__ c0 = c0_;
    for (int i = 0; i < n; ++i) {
      T a0 = c0[i];
      a0 += v0[0] * r0[i] + v0[1] * r1[i] + v0[2] * r2[i] + v0[3] * r3[i];
      a0 += v0[4] * r4[i] + v0[5] * r5[i] + v0[6] * r6[i] + v0[7] * r7[i];
      c0[i] = a0;
    }
  }
}

// C (rows_out x n) += W (rows_out x k_dim) * B (k_dim x n), B given as row
// pointers with stride `plane`.
template <class T>
inline void taps_gemm(const T* weights, int rows_out, int k_dim, const T* b, std::size_t plane,
                      T* c, int n) {
  const T* rows[8];
  for (int o = 0; o < rows_out; o += 2) {
    const bool pair = o + 1 < rows_out;
    T* c0 = c + static_cast<std::size_t>(o) * plane;
    T* c1 = pair ? c0 + plane : nullptr;
    const T* w0 = weights + static_cast<std::size_t>(o) * k_dim;
    const T* w1 = pair ? w0 + k_dim : nullptr;
    for (int k0 = 0; k0 < k_dim; k0 += 8) {
      const int kk = std::min(8, k_dim - k0);
      for (int k = 0; k < kk; ++k) {
        rows[k] = b + static_cast<std::size_t>(k0 + k) * plane;
      }
      fused_taps_2x8(w0 + k0, w1 ? w1 + k0 : nullptr, rows, kk, c0, c1, n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops accept equal shapes or a scalar
// (1-element) operand on either side; the gradient to a scalar operand is the
// reduced sum.

namespace detail {

template <class T>
void accumulate_scalar_grad(Node<T>& parent, const std::vector<T>& contribution) {
  double acc = 0.0;
  for (const T& v : contribution) acc += static_cast<double>(v);
  parent.ensure_grad();
  parent.grad[0] += static_cast<T>(acc);
}

template <class T>
void add_into(Node<T>& parent, const std::vector<T>& contribution) {
  parent.ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) parent.grad[i] += contribution[i];
}

}  // namespace detail

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db,
                    const char* what) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar) check_same_shape(a.shape(), b.shape(), what);
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(shape_numel(out_shape));

  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
  }

  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(
      out_shape, std::move(out), {an, bn},
      [an, bn, a_scalar, b_scalar, da, db](Node<T>& self) {
        const std::size_t n = self.data.size();
        if (wants_grad(an)) {
          std::vector<T> contrib(n);
          for (std::size_t i = 0; i < n; ++i) {
            contrib[i] = da(self.grad[i], an->data[a_scalar ? 0 : i], bn->data[b_scalar ? 0 : i]);
          }
          if (a_scalar && n > 1) detail::accumulate_scalar_grad(*an, contrib);
          else detail::add_into(*an, contrib);
        }
        if (wants_grad(bn)) {
          std::vector<T> contrib(n);
          for (std::size_t i = 0; i < n; ++i) {
            contrib[i] = db(self.grad[i], an->data[a_scalar ? 0 : i], bn->data[b_scalar ? 0 : i]);
          }
          if (b_scalar && n > 1) detail::accumulate_scalar_grad(*bn, contrib);
          else detail::add_into(*bn, contrib);
        }
      },
      what);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; }, "mul");
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); }, "div");
}

template <class T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  const auto& ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + c;
  auto an = a.node();
  return make_op<T>(
      a.shape(), std::move(out), {an},
      [an](Node<T>& self) {
        if (wants_grad(an)) detail::add_into(*an, self.grad);
      },
      "add_const");
}

template <class T>
Tensor<T> mul_const(const Tensor<T>& a, T c) {
  const auto& ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * c;
  auto an = a.node();
  return make_op<T>(
      a.shape(), std::move(out), {an},
      [an, c](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
      },
      "mul_const");
}

// c - a
template <class T>
Tensor<T> rsub_const(T c, const Tensor<T>& a) {
  const auto& ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = c - ad[i];
  auto an = a.node();
  return make_op<T>(
      a.shape(), std::move(out), {an},
      [an](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] -= self.grad[i];
      },
      "rsub_const");
}

// ---------------------------------------------------------------------------
// Reductions. Accumulation runs in 64-bit regardless of T.

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  double acc = 0.0;
  for (const T& v : a.data()) acc += static_cast<double>(v);
  auto an = a.node();
  return make_op<T>(
      {1}, {static_cast<T>(acc)}, {an},
      [an](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        const T g = self.grad[0];
        for (auto& v : an->grad) v += g;
      },
      "sum_all");
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  const std::size_t n = a.data().size();
  if (n == 0) throw EmptyInput("mean over empty tensor");
  double acc = 0.0;
  for (const T& v : a.data()) acc += static_cast<double>(v);
  auto an = a.node();
  return make_op<T>(
      {1}, {static_cast<T>(acc / static_cast<double>(n))}, {an},
      [an, n](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (auto& v : an->grad) v += g;
      },
      "mean_all");
}

namespace detail {

struct AxisView {
  std::size_t outer = 1, axis = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeMismatch("reduction axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape));
  }
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(shape[i]);
  v.axis = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= static_cast<std::size_t>(shape[i]);
  return v;
}

inline Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  const auto view = detail::axis_view(a.shape(), axis);
  const auto& ad = a.data();
  std::vector<T> out(view.outer * view.inner);
  std::vector<double> acc(view.inner);
  for (std::size_t o = 0; o < view.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < view.axis; ++k) {
      const T* row = ad.data() + (o * view.axis + k) * view.inner;
      for (std::size_t i = 0; i < view.inner; ++i) acc[i] += static_cast<double>(row[i]);
    }
    T* dst = out.data() + o * view.inner;
    for (std::size_t i = 0; i < view.inner; ++i) {
      dst[i] = static_cast<T>(acc[i] / static_cast<double>(view.axis));
    }
  }
  auto an = a.node();
  return make_op<T>(
      detail::drop_axis(a.shape(), axis), std::move(out), {an},
      [an, view](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        const T scale = T(1) / static_cast<T>(view.axis);
        for (std::size_t o = 0; o < view.outer; ++o) {
          const T* g = self.grad.data() + o * view.inner;
          for (std::size_t k = 0; k < view.axis; ++k) {
            T* dst = an->grad.data() + (o * view.axis + k) * view.inner;
            for (std::size_t i = 0; i < view.inner; ++i) dst[i] += g[i] * scale;
          }
        }
      },
      "mean_axis");
}

template <class T>
Tensor<T> max_axis(const Tensor<T>& a, int axis) {
  const auto view = detail::axis_view(a.shape(), axis);
  if (view.axis == 0) throw EmptyInput("max over empty axis");
  const auto& ad = a.data();
  std::vector<T> out(view.outer * view.inner);
  std::vector<std::uint32_t> argmax(view.outer * view.inner, 0);
  for (std::size_t o = 0; o < view.outer; ++o) {
    const T* base = ad.data() + o * view.axis * view.inner;
    T* dst = out.data() + o * view.inner;
    std::uint32_t* arg = argmax.data() + o * view.inner;
    for (std::size_t i = 0; i < view.inner; ++i) dst[i] = base[i];
    for (std::size_t k = 1; k < view.axis; ++k) {
      const T* row = base + k * view.inner;
      for (std::size_t i = 0; i < view.inner; ++i) {
        if (row[i] > dst[i]) {  // strict: first occurrence wins ties
          dst[i] = row[i];
          arg[i] = static_cast<std::uint32_t>(k);
        }
      }
    }
  }
  auto an = a.node();
  return make_op<T>(
      detail::drop_axis(a.shape(), axis), std::move(out), {an},
      [an, view, argmax = std::move(argmax)](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        for (std::size_t o = 0; o < view.outer; ++o) {
          const T* g = self.grad.data() + o * view.inner;
          const std::uint32_t* arg = argmax.data() + o * view.inner;
          T* base = an->grad.data() + o * view.axis * view.inner;
          for (std::size_t i = 0; i < view.inner; ++i) {
            base[static_cast<std::size_t>(arg[i]) * view.inner + i] += g[i];
          }
        }
      },
      "max_axis");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
  }
  auto an = a.node();
  std::vector<T> out = a.data();
  return make_op<T>(
      std::move(new_shape), std::move(out), {an},
      [an](Node<T>& self) {
        if (wants_grad(an)) detail::add_into(*an, self.grad);
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Activations and regularizers.

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  const auto& ad = a.data();
  std::vector<T> out(ad.size());
  const std::int64_t total = static_cast<std::int64_t>(ad.size());
#pragma omp parallel for schedule(static) if (total > 65536)
  for (std::int64_t i = 0; i < total; ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  auto an = a.node();
  return make_op<T>(
      a.shape(), std::move(out), {an},
      [an](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        const std::int64_t total = static_cast<std::int64_t>(self.grad.size());
#pragma omp parallel for schedule(static) if (total > 65536)
        for (std::int64_t i = 0; i < total; ++i) {
          if (self.data[i] > T(0)) an->grad[i] += self.grad[i];
        }
      },
      "relu");
}

// Inverted dropout: each element is zeroed with probability p in train mode
// and survivors are scaled by 1/(1-p); eval mode is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidConfig("dropout p must be in [0, 1)");
  if (!training || p == 0.0) return reshape(a, a.shape());
  if (rng == nullptr) throw InvalidConfig("dropout in train mode needs an rng");

  const auto& ad = a.data();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<std::uint8_t> keep(ad.size());
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    keep[i] = rng->uniform() >= p ? 1 : 0;
    out[i] = keep[i] ? ad[i] * scale : T(0);
  }
  auto an = a.node();
  return make_op<T>(
      a.shape(), std::move(out), {an},
      [an, scale, keep = std::move(keep)](Node<T>& self) {
        if (!wants_grad(an)) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (keep[i]) an->grad[i] += self.grad[i] * scale;
        }
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Linear: x (N,F) * w (O,F)^T + b (O) -> (N,O).

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1) {
    throw ShapeMismatch("linear expects x (N,F), w (O,F), b (O)");
  }
  const int n = x.shape()[0], f = x.shape()[1];
  const int o = w.shape()[0];
  if (w.shape()[1] != f || b.shape()[0] != o) {
    throw ShapeMismatch("linear: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                        ", b " + shape_str(b.shape()));
  }
  const auto& xd = x.data();
  const auto& wd = w.data();
  const auto& bd = b.data();
  std::vector<T> out(static_cast<std::size_t>(n) * o);
  for (int i = 0; i < n; ++i) {
    const T* xrow = xd.data() + static_cast<std::size_t>(i) * f;
    T* yrow = out.data() + static_cast<std::size_t>(i) * o;
    for (int j = 0; j < o; ++j) {
      yrow[j] = bd[j] + dot(xrow, wd.data() + static_cast<std::size_t>(j) * f, f);
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op<T>(
      {n, o}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, n, f, o](Node<T>& self) {
        const T* g = self.grad.data();
        if (wants_grad(xn)) {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) {
            T* gx = xn->grad.data() + static_cast<std::size_t>(i) * f;
            const T* grow = g + static_cast<std::size_t>(i) * o;
            for (int j = 0; j < o; ++j) {
              axpy(grow[j], wn->data.data() + static_cast<std::size_t>(j) * f, gx, f);
            }
          }
        }
        if (wants_grad(wn)) {
          wn->ensure_grad();
          for (int j = 0; j < o; ++j) {
            T* gw = wn->grad.data() + static_cast<std::size_t>(j) * f;
            for (int i = 0; i < n; ++i) {
              axpy(g[static_cast<std::size_t>(i) * o + j],
                   xn->data.data() + static_cast<std::size_t>(i) * f, gw, f);
            }
          }
        }
        if (wants_grad(bn)) {
          bn->ensure_grad();
          for (int j = 0; j < o; ++j) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += static_cast<double>(g[static_cast<std::size_t>(i) * o + j]);
            bn->grad[j] += static_cast<T>(acc);
          }
        }
      },
      "linear");
}

// ---------------------------------------------------------------------------
// conv2d: NCHW input, (O,C,3,3) weight, stride 1, zero padding 1 on both
// axes, so output spatial size equals input spatial size. Internally each
// item is lowered to a (C*9) x (H*W) column matrix so every hot loop runs
// over a whole plane; weight layout (O,C,3,3) is already row-contiguous in
// the lowered K = C*9 dimension.

namespace detail {

// Writes the shifted plane for tap (dy,dx) into dst (length H*W), zero edges.
template <class T>
void shifted_plane(const T* src, T* dst, int h, int w, int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  std::fill(dst, dst + static_cast<std::size_t>(h) * w, T(0));
  for (int iy = y0; iy < y1; ++iy) {
    const T* s = src + static_cast<std::size_t>(iy + dy) * w + (x0 + dx);
    T* d = dst + static_cast<std::size_t>(iy) * w + x0;
    std::copy(s, s + (x1 - x0), d);
  }
}

// Accumulates the tap row back into the plane (transpose of shifted_plane).
template <class T>
void add_shifted_plane(const T* src, T* dst, int h, int w, int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  for (int iy = y0; iy < y1; ++iy) {
    const T* s = src + static_cast<std::size_t>(iy) * w + x0;
    T* d = dst + static_cast<std::size_t>(iy + dy) * w + (x0 + dx);
    for (int i = 0; i < x1 - x0; ++i) d[i] += s[i];
  }
}

template <class T>
void im2col_item(const T* x_item, T* col, int c, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t k = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        shifted_plane(x_item + ci * plane, col + k * plane, h, w, ky - 1, kx - 1);
        ++k;
      }
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || b.shape().size() != 1) {
    throw ShapeMismatch("conv2d expects x (N,C,H,W), w (O,C,3,3), b (O)");
  }
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd_ = x.shape()[3];
  const int o = w.shape()[0];
  if (w.shape()[1] != c || w.shape()[2] != 3 || w.shape()[3] != 3 || b.shape()[0] != o) {
    throw ShapeMismatch("conv2d: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                        ", b " + shape_str(b.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * wd_;
  const int k_dim = c * 9;
  const auto& xd = x.data();
  const auto& wv = w.data();
  const auto& bd = b.data();
  std::vector<T> out(static_cast<std::size_t>(n) * o * plane);

#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(k_dim) * plane);
#pragma omp for schedule(static)
    for (int ni = 0; ni < n; ++ni) {
      detail::im2col_item(xd.data() + static_cast<std::size_t>(ni) * c * plane, col.data(), c, h,
                          wd_);
      T* y_item = out.data() + static_cast<std::size_t>(ni) * o * plane;
      for (int oi = 0; oi < o; ++oi) {
        std::fill(y_item + static_cast<std::size_t>(oi) * plane,
                  y_item + static_cast<std::size_t>(oi + 1) * plane, bd[oi]);
      }
      taps_gemm(wv.data(), o, k_dim, col.data(), plane, y_item, static_cast<int>(plane));
    }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op<T>(
      {n, o, h, wd_}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, n, c, h, wd_, o, plane, k_dim](Node<T>& self) {
        const T* g = self.grad.data();
        const bool need_x = wants_grad(xn);
        const bool need_w = wants_grad(wn);
        if (need_x) xn->ensure_grad();
        if (need_w) wn->ensure_grad();

        std::vector<T> wt;  // W^T so gcol = W^T * G is a row GEMM too
        if (need_x) {
          wt.resize(static_cast<std::size_t>(k_dim) * o);
          for (int oi = 0; oi < o; ++oi) {
            for (int k = 0; k < k_dim; ++k) {
              wt[static_cast<std::size_t>(k) * o + oi] =
                  wn->data[static_cast<std::size_t>(oi) * k_dim + k];
            }
          }
        }
        // Per-item weight-gradient partials, reduced in item order afterwards
        // so the result does not depend on the thread count.
        std::vector<double> partials;
        if (need_w) {
          partials.assign(static_cast<std::size_t>(n) * o * k_dim, 0.0);
        }
        if (need_x || need_w) {
#pragma omp parallel
          {
            std::vector<T> col(static_cast<std::size_t>(k_dim) * plane);
            std::vector<T> gcol;
            if (need_x) gcol.resize(static_cast<std::size_t>(k_dim) * plane);
#pragma omp for schedule(static)
            for (int ni = 0; ni < n; ++ni) {
              const T* g_item = g + static_cast<std::size_t>(ni) * o * plane;
              if (need_w) {
                detail::im2col_item(xn->data.data() + static_cast<std::size_t>(ni) * c * plane,
                                    col.data(), c, h, wd_);
                double* part = partials.data() + static_cast<std::size_t>(ni) * o * k_dim;
                for (int oi = 0; oi < o; ++oi) {
                  const T* grow = g_item + static_cast<std::size_t>(oi) * plane;
                  for (int k = 0; k < k_dim; ++k) {
                    part[static_cast<std::size_t>(oi) * k_dim + k] = static_cast<double>(
                        dot(grow, col.data() + static_cast<std::size_t>(k) * plane,
                            static_cast<int>(plane)));
                  }
                }
              }
              if (need_x) {
                std::fill(gcol.begin(), gcol.end(), T(0));
                taps_gemm(wt.data(), k_dim, o, g_item, plane, gcol.data(),
                          static_cast<int>(plane));
                T* gx_item = xn->grad.data() + static_cast<std::size_t>(ni) * c * plane;
                std::size_t k = 0;
                for (int ci = 0; ci < c; ++ci) {
                  for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                      detail::add_shifted_plane(gcol.data() + k * plane, gx_item + ci * plane, h,
                                                wd_, ky - 1, kx - 1);
                      ++k;
                    }
                  }
                }
              }
            }
          }
        }
        if (need_w) {
          const std::size_t wk = static_cast<std::size_t>(o) * k_dim;
          std::vector<double> acc(wk, 0.0);
          for (int ni = 0; ni < n; ++ni) {
            const double* part = partials.data() + static_cast<std::size_t>(ni) * wk;
            for (std::size_t i = 0; i < wk; ++i) acc[i] += part[i];
          }
          for (std::size_t i = 0; i < wk; ++i) wn->grad[i] += static_cast<T>(acc[i]);
        }
        if (wants_grad(bn)) {
          bn->ensure_grad();
          for (int oi = 0; oi < o; ++oi) {
            double acc = 0.0;
            for (int ni = 0; ni < n; ++ni) {
              const T* gplane = g + (static_cast<std::size_t>(ni) * o + oi) * plane;
              for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(gplane[i]);
            }
            bn->grad[oi] += static_cast<T>(acc);
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (floor halving) or stride 1 (extent minus one).
// Backward routes each gradient to the first-found maximum of its window.

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int stride) {
  if (x.shape().size() != 4) throw ShapeMismatch("maxpool2d expects NCHW");
  if (stride != 1 && stride != 2) throw InvalidConfig("maxpool2d stride must be 1 or 2");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h < 2 || w < 2) {
    throw InputTooSmall("maxpool2d needs spatial extents >= 2, got " + shape_str(x.shape()));
  }
  const int oh = stride == 2 ? h / 2 : h - 1;
  const int ow = stride == 2 ? w / 2 : w - 1;
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t planes = static_cast<std::size_t>(n) * c;

  const auto& xd = x.data();
  std::vector<T> out(planes * out_plane);
  std::vector<std::uint32_t> argmax(planes * out_plane);

#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(planes); ++p) {
    const T* xp = xd.data() + static_cast<std::size_t>(p) * in_plane;
    T* yp = out.data() + static_cast<std::size_t>(p) * out_plane;
    std::uint32_t* ap = argmax.data() + static_cast<std::size_t>(p) * out_plane;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = oy * stride;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix = ox * stride;
        // row-major window order fixes the tie rule
        std::uint32_t best = static_cast<std::uint32_t>(iy * w + ix);
        T bv = xp[best];
        const std::uint32_t cand[3] = {static_cast<std::uint32_t>(iy * w + ix + 1),
                                       static_cast<std::uint32_t>((iy + 1) * w + ix),
                                       static_cast<std::uint32_t>((iy + 1) * w + ix + 1)};
        for (std::uint32_t idx : cand) {
          if (xp[idx] > bv) {
            bv = xp[idx];
            best = idx;
          }
        }
        yp[oy * ow + ox] = bv;
        ap[oy * ow + ox] = best;
      }
    }
  }

  auto xn = x.node();
  return make_op<T>(
      {n, c, oh, ow}, std::move(out), {xn},
      [xn, planes, in_plane, out_plane, argmax = std::move(argmax)](Node<T>& self) {
        if (!wants_grad(xn)) return;
        xn->ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          const T* g = self.grad.data() + p * out_plane;
          const std::uint32_t* ap = argmax.data() + p * out_plane;
          T* gx = xn->grad.data() + p * in_plane;
          for (std::size_t i = 0; i < out_plane; ++i) gx[ap[i]] += g[i];
        }
      },
      "maxpool2d");
}

// ---------------------------------------------------------------------------
// Batch normalization over (N,H,W) per channel. Train mode uses population
// statistics of the batch (eps 1e-5) and updates running stats with momentum
// 0.1, storing the unbiased variance the way the CNN14 lineage does. Eval
// mode normalizes with the running stats.

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                      double eps = 1e-5, double momentum = 0.1) {
  if (x.shape().size() != 4) throw ShapeMismatch("batchnorm2d expects NCHW");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
      running_mean.size() != static_cast<std::size_t>(c) ||
      running_var.size() != static_cast<std::size_t>(c)) {
    throw ShapeMismatch("batchnorm2d parameter shapes must be (C)");
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t reduce_n = static_cast<std::size_t>(n) * plane;
  if (training && reduce_n <= 1) {
    throw DegenerateBatch("batchnorm2d train mode needs batch*height*width > 1");
  }

  const auto& xd = x.data();
  std::vector<T> mean(c), invstd(c);
  if (training) {
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < c; ++ci) {
      double sum = 0.0, sumsq = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* xp = xd.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = static_cast<double>(xp[i]);
          sum += v;
          sumsq += v * v;
        }
      }
      const double m = sum / static_cast<double>(reduce_n);
      const double var = std::max(0.0, sumsq / static_cast<double>(reduce_n) - m * m);
      mean[ci] = static_cast<T>(m);
      invstd[ci] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased =
          var * static_cast<double>(reduce_n) / static_cast<double>(reduce_n - 1);
      running_mean[ci] =
          static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[ci]) + momentum * m);
      running_var[ci] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[ci]) +
                                       momentum * unbiased);
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[ci] = running_mean[ci];
      invstd[ci] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ci]) + eps));
    }
  }

  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  std::vector<T> out(xd.size());
#pragma omp parallel for collapse(2) schedule(static)
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const T* xp = xd.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      T* yp = out.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      const T a = gd[ci] * invstd[ci];
      const T b = bd[ci] - a * mean[ci];
      for (std::size_t i = 0; i < plane; ++i) yp[i] = a * xp[i] + b;
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op<T>(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, n, c, plane, reduce_n, training, mean = std::move(mean),
       invstd = std::move(invstd)](Node<T>& self) {
        const T* g = self.grad.data();
        // Per-channel sums of g and g*xhat, in 64-bit.
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        const bool need_sums = training || wants_grad(gn) || wants_grad(bn);
        if (need_sums) {
#pragma omp parallel for schedule(static)
          for (int ci = 0; ci < c; ++ci) {
            double sg = 0.0, sgx = 0.0;
            for (int ni = 0; ni < n; ++ni) {
              const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
              const T* gp = g + off;
              const T* xp = xn->data.data() + off;
              for (std::size_t i = 0; i < plane; ++i) {
                const double gv = static_cast<double>(gp[i]);
                sg += gv;
                sgx += gv * (static_cast<double>(xp[i]) - static_cast<double>(mean[ci])) *
                       static_cast<double>(invstd[ci]);
              }
            }
            sum_g[ci] = sg;
            sum_gx[ci] = sgx;
          }
        }
        if (wants_grad(gn)) {
          gn->ensure_grad();
          for (int ci = 0; ci < c; ++ci) gn->grad[ci] += static_cast<T>(sum_gx[ci]);
        }
        if (wants_grad(bn)) {
          bn->ensure_grad();
          for (int ci = 0; ci < c; ++ci) bn->grad[ci] += static_cast<T>(sum_g[ci]);
        }
        if (wants_grad(xn)) {
          xn->ensure_grad();
          const double inv_n = 1.0 / static_cast<double>(reduce_n);
#pragma omp parallel for collapse(2) schedule(static)
          for (int ni = 0; ni < n; ++ni) {
            for (int ci = 0; ci < c; ++ci) {
              const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
              const T* gp = g + off;
              const T* xp = xn->data.data() + off;
              T* gx = xn->grad.data() + off;
              const double a = static_cast<double>(gn->data[ci]) * static_cast<double>(invstd[ci]);
              if (training) {
                const double mg = sum_g[ci] * inv_n;
                const double mgx = sum_gx[ci] * inv_n;
                for (std::size_t i = 0; i < plane; ++i) {
                  const double xhat = (static_cast<double>(xp[i]) - static_cast<double>(mean[ci])) *
                                      static_cast<double>(invstd[ci]);
                  gx[i] += static_cast<T>(a * (static_cast<double>(gp[i]) - mg - xhat * mgx));
                }
              } else {
                for (std::size_t i = 0; i < plane; ++i) {
                  gx[i] += static_cast<T>(a * static_cast<double>(gp[i]));
                }
              }
            }
          }
        }
      },
      "batchnorm2d");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker. `loss_fn` must be deterministic; it is
// re-evaluated twice per probed coordinate. When `max_coords_per_param` is
// positive, coordinates are subsampled with the given seed, otherwise every
// coordinate is probed. All comparisons run in 64-bit.

template <class T>
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

template <class T>
GradCheckResult<T> grad_check(const std::function<Tensor<T>()>& loss_fn,
                              std::vector<Tensor<T>> params, double eps,
                              std::int64_t max_coords_per_param = -1,
                              std::uint64_t sample_seed = 0x5eed) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = loss_fn();
  if (loss.numel() != 1) {
    throw NonScalarLoss("grad_check loss has shape " + shape_str(loss.shape()));
  }
  if (!std::isfinite(static_cast<double>(loss.value()))) {
    throw Error("NonFiniteValue", "grad_check loss is not finite at the given parameters");
  }
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    std::vector<double> g(p.data().size(), 0.0);
    if (!p.grad().empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(p.grad()[i]);
    }
    analytic.push_back(std::move(g));
  }

  Rng rng(sample_seed);
  GradCheckResult<T> result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].data();
    std::vector<std::size_t> coords;
    if (max_coords_per_param > 0 &&
        static_cast<std::size_t>(max_coords_per_param) < data.size()) {
      for (std::int64_t k = 0; k < max_coords_per_param; ++k) {
        coords.push_back(static_cast<std::size_t>(rng.below(data.size())));
      }
    } else {
      coords.resize(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) coords[i] = i;
    }
    for (std::size_t i : coords) {
      const T saved = data[i];
      data[i] = saved + static_cast<T>(eps);
      const double lp = static_cast<double>(loss_fn().value());
      data[i] = saved - static_cast<T>(eps);
      const double lm = static_cast<double>(loss_fn().value());
      data[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = analytic[pi][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(fd - an) / denom);
      ++result.coords_checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace stridesense::nn
