#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <cblas.h>

#include "kpal/tensor.hpp"

namespace kpal {

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad || b.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (out.requires_grad) {
    out.node_id = tp->record([a, b, out]() {
      const T* og = out.grad->data();
      const std::size_t n = out.numel();
      if (a.grad)
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += og[i];
      if (b.grad)
        for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] += og[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad || b.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (out.requires_grad) {
    out.node_id = tp->record([a, b, out]() {
      const T* og = out.grad->data();
      const std::size_t n = out.numel();
      if (a.grad)
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += og[i] * b[i];
      if (b.grad)
        for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] += og[i] * a[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tp, const Tensor<T>& a, T c) {
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
  if (out.requires_grad) {
    out.node_id = tp->record([a, out, c]() {
      const T* og = out.grad->data();
      const std::size_t n = out.numel();
      if (a.grad)
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += og[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>* tp, const Tensor<T>& a) {
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  if (out.requires_grad) {
    out.node_id = tp->record([a, out]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i)
        if (a[i] > T(0)) (*a.grad)[i] += og[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tp, const Tensor<T>& a) {
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
  if (out.requires_grad) {
    out.node_id = tp->record([a, out]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i)
        (*a.grad)[i] += og[i] * out[i] * (T(1) - out[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out =
      make_output(tp, {m, n}, a.requires_grad || b.requires_grad);
  gemm(false, false, m, n, k, T(1), a.ptr(), k, b.ptr(), n, T(0), out.ptr(), n);
  if (out.requires_grad) {
    out.node_id = tp->record([a, b, out, m, n, k]() {
      const T* og = out.grad->data();
      if (a.grad)
        gemm(false, true, m, k, n, T(1), og, n, b.ptr(), n, T(1),
             a.grad->data(), k);
      if (b.grad)
        gemm(true, false, k, n, m, T(1), a.ptr(), k, og, n, T(1),
             b.grad->data(), n);
    });
  }
  return out;
}

// y = x W + b, with b broadcast across rows.
template <typename T>
Tensor<T> linear(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0) ||
      b.numel() != static_cast<std::size_t>(w.dim(1)))
    throw ShapeError("linear: x" + shape_str(x.shape) + " W" +
                     shape_str(w.shape) + " b" + shape_str(b.shape));
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  const bool rg = x.requires_grad || w.requires_grad || b.requires_grad;
  Tensor<T> out = make_output(tp, {m, n}, rg);
  for (int i = 0; i < m; ++i)
    std::copy(b.ptr(), b.ptr() + n, out.ptr() + static_cast<std::size_t>(i) * n);
  gemm(false, false, m, n, k, T(1), x.ptr(), k, w.ptr(), n, T(1), out.ptr(), n);
  if (out.requires_grad) {
    out.node_id = tp->record([x, w, b, out, m, n, k]() {
      const T* og = out.grad->data();
      if (x.grad)
        gemm(false, true, m, k, n, T(1), og, n, w.ptr(), n, T(1),
             x.grad->data(), k);
      if (w.grad)
        gemm(true, false, k, n, m, T(1), x.ptr(), k, og, n, T(1),
             w.grad->data(), n);
      if (b.grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            (*b.grad)[static_cast<std::size_t>(j)] +=
                og[static_cast<std::size_t>(i) * n + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(Tape<T>* tp, const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: " + shape_str(a.shape));
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out = make_output(tp, {n, m}, a.requires_grad);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] =
          a[static_cast<std::size_t>(i) * n + j];
  if (out.requires_grad) {
    out.node_id = tp->record([a, out, m, n]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + j] +=
              og[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

// Column slice [c0, c1) of a 2D tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>* tp, const Tensor<T>& a, int c0, int c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw ShapeError("slice_cols [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") of " + shape_str(a.shape));
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  Tensor<T> out = make_output(tp, {m, w}, a.requires_grad);
  for (int i = 0; i < m; ++i)
    std::copy(a.ptr() + static_cast<std::size_t>(i) * n + c0,
              a.ptr() + static_cast<std::size_t>(i) * n + c1,
              out.ptr() + static_cast<std::size_t>(i) * w);
  if (out.requires_grad) {
    out.node_id = tp->record([a, out, m, n, w, c0]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + c0 + j] +=
              og[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tp, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input list");
  const int m = parts[0].dim(0);
  int n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape));
    n += p.dim(1);
    rg = rg || p.requires_grad;
  }
  Tensor<T> out = make_output(tp, {m, n}, rg);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::copy(p.ptr() + static_cast<std::size_t>(i) * w,
                p.ptr() + static_cast<std::size_t>(i) * w + w,
                out.ptr() + static_cast<std::size_t>(i) * n + off);
    off += w;
  }
  if (out.requires_grad) {
    out.node_id = tp->record([parts, out, m, n]() {
      const T* og = out.grad->data();
      int off = 0;
      for (const auto& p : parts) {
        const int w = p.dim(1);
        if (p.grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              (*p.grad)[static_cast<std::size_t>(i) * w + j] +=
                  og[static_cast<std::size_t>(i) * n + off + j];
        off += w;
      }
    });
  }
  return out;
}

// Concatenate flattened tensors; callers reshape the result.
template <typename T>
Tensor<T> concat_flat(Tape<T>* tp, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_flat: empty input list");
  std::size_t n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    n += p.numel();
    rg = rg || p.requires_grad;
  }
  Tensor<T> out = make_output(tp, {static_cast<int>(n)}, rg);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.ptr(), p.ptr() + p.numel(), out.ptr() + off);
    off += p.numel();
  }
  if (out.requires_grad) {
    out.node_id = tp->record([parts, out]() {
      const T* og = out.grad->data();
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (p.grad)
          for (std::size_t i = 0; i < p.numel(); ++i)
            (*p.grad)[i] += og[off + i];
        off += p.numel();
      }
    });
  }
  return out;
}

// Concatenate along the channel axis of NCHW tensors.
template <typename T>
Tensor<T> concat_channels(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2),
            w = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out = make_output(tp, {n, ca + cb, h, w},
                              a.requires_grad || b.requires_grad);
  for (int i = 0; i < n; ++i) {
    std::copy(a.ptr() + static_cast<std::size_t>(i) * ca * plane,
              a.ptr() + static_cast<std::size_t>(i + 1) * ca * plane,
              out.ptr() + static_cast<std::size_t>(i) * (ca + cb) * plane);
    std::copy(b.ptr() + static_cast<std::size_t>(i) * cb * plane,
              b.ptr() + static_cast<std::size_t>(i + 1) * cb * plane,
              out.ptr() + static_cast<std::size_t>(i) * (ca + cb) * plane +
                  ca * plane);
  }
  if (out.requires_grad) {
    out.node_id = tp->record([a, b, out, n, ca, cb, plane]() {
      const T* og = out.grad->data();
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * (ca + cb) * plane;
        if (a.grad)
          for (std::size_t j = 0; j < ca * plane; ++j)
            (*a.grad)[static_cast<std::size_t>(i) * ca * plane + j] +=
                og[base + j];
        if (b.grad)
          for (std::size_t j = 0; j < cb * plane; ++j)
            (*b.grad)[static_cast<std::size_t>(i) * cb * plane + j] +=
                og[base + ca * plane + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tp, const Tensor<T>& a) {
  Tensor<T> out = make_output(tp, {1}, a.requires_grad);
  T s = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
  out[0] = s;
  if (out.requires_grad) {
    out.node_id = tp->record([a, out]() {
      if (!a.grad) return;
      const T g = (*out.grad)[0];
      for (std::size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>* tp, const Tensor<T>& a) {
  return scale(tp, sum_all(tp, a), T(1) / static_cast<T>(a.numel()));
}

// Row-wise softmax of a 2D tensor.
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tp, const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("softmax_rows: " + shape_str(a.shape));
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out = make_output(tp, a.shape, a.requires_grad);
  for (int i = 0; i < m; ++i) {
    const T* row = a.ptr() + static_cast<std::size_t>(i) * n;
    T* orow = out.ptr() + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= s;
  }
  if (out.requires_grad) {
    out.node_id = tp->record([a, out, m, n]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      for (int i = 0; i < m; ++i) {
        const T* y = out.ptr() + static_cast<std::size_t>(i) * n;
        const T* gy = og + static_cast<std::size_t>(i) * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += y[j] * gy[j];
        for (int j = 0; j < n; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + j] +=
              y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// Per-row layer normalization with learned gain/bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.ndim() != 2 || gamma.numel() != static_cast<std::size_t>(x.dim(1)) ||
      beta.numel() != gamma.numel())
    throw ShapeError("layer_norm: x" + shape_str(x.shape) + " gamma" +
                     shape_str(gamma.shape));
  const int m = x.dim(0), n = x.dim(1);
  const bool rg = x.requires_grad || gamma.requires_grad || beta.requires_grad;
  Tensor<T> out = make_output(tp, x.shape, rg);
  std::vector<T> mean(m), inv_std(m);
  for (int i = 0; i < m; ++i) {
    const T* row = x.ptr() + static_cast<std::size_t>(i) * n;
    T mu = T(0);
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    mean[i] = mu;
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          (row[j] - mu) * inv_std[i] * gamma[j] + beta[j];
  }
  if (out.requires_grad) {
    out.node_id = tp->record([x, gamma, beta, out, mean, inv_std, m, n]() {
      const T* og = out.grad->data();
      for (int i = 0; i < m; ++i) {
        const T* row = x.ptr() + static_cast<std::size_t>(i) * n;
        const T* gy = og + static_cast<std::size_t>(i) * n;
        const T is = inv_std[i];
        if (beta.grad)
          for (int j = 0; j < n; ++j) (*beta.grad)[j] += gy[j];
        if (gamma.grad)
          for (int j = 0; j < n; ++j)
            (*gamma.grad)[j] += gy[j] * (row[j] - mean[i]) * is;
        if (x.grad) {
          // d/dx of (x - mu) * inv_std * gamma
          T sum_g = T(0), sum_gx = T(0);
          for (int j = 0; j < n; ++j) {
            const T gh = gy[j] * gamma[j];
            sum_g += gh;
            sum_gx += gh * (row[j] - mean[i]);
          }
          for (int j = 0; j < n; ++j) {
            const T gh = gy[j] * gamma[j];
            (*x.grad)[static_cast<std::size_t>(i) * n + j] +=
                is * (gh - sum_g / static_cast<T>(n) -
                      (row[j] - mean[i]) * is * is * sum_gx /
                          static_cast<T>(n));
          }
        }
      }
    });
  }
  return out;
}

// Gather scalar entries at flat indices; backward scatter-adds.
template <typename T>
Tensor<T> gather(Tape<T>* tp, const Tensor<T>& a,
                 const std::vector<std::size_t>& idx) {
  for (std::size_t j : idx)
    if (j >= a.numel())
      throw ShapeError("gather: index " + std::to_string(j) +
                       " out of range for " + shape_str(a.shape));
  Tensor<T> out =
      make_output(tp, {static_cast<int>(idx.size())}, a.requires_grad);
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = a[idx[i]];
  if (out.requires_grad) {
    out.node_id = tp->record([a, out, idx]() {
      if (!a.grad) return;
      const T* og = out.grad->data();
      for (std::size_t i = 0; i < idx.size(); ++i) (*a.grad)[idx[i]] += og[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution family (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

// x: [C, H, W] -> cols: [C*kh*kw, oh*ow]
template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* cols) {
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x + static_cast<std::size_t>(ch) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = cols + (static_cast<std::size_t>(ch) * kh * kw +
                         static_cast<std::size_t>(ky) * kw + kx) *
                            oh * ow;
        if (stride == 1) {
          // contiguous rows: copy the in-bounds span, zero-fill the borders
          const int x0 = std::clamp(pad - kx, 0, ow);
          const int x1 = std::clamp(w + pad - kx, x0, ow);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy - pad + ky;
            T* row = dst + static_cast<std::size_t>(oy) * ow;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + ow, T(0));
              continue;
            }
            std::fill(row, row + x0, T(0));
            const T* src = xc + static_cast<std::size_t>(iy) * w + x0 - pad +
                           kx;
            std::copy(src, src + (x1 - x0), row + x0);
            std::fill(row + x1, row + ow, T(0));
          }
          continue;
        }
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[static_cast<std::size_t>(oy) * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? xc[static_cast<std::size_t>(iy) * w + ix]
                    : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add cols back into x.
template <typename T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* x) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = cols + (static_cast<std::size_t>(ch) * kh * kw +
                               static_cast<std::size_t>(ky) * kw + kx) *
                                  oh * ow;
        if (stride == 1) {
          const int x0 = std::clamp(pad - kx, 0, ow);
          const int x1 = std::clamp(w + pad - kx, x0, ow);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy - pad + ky;
            if (iy < 0 || iy >= h) continue;
            T* xrow = x + (static_cast<std::size_t>(ch) * h + iy) * w - pad +
                      kx;
            const T* srow = src + static_cast<std::size_t>(oy) * ow;
            for (int ox = x0; ox < x1; ++ox) xrow[ox] += srow[ox];
          }
          continue;
        }
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<std::size_t>(ch) * h + iy) * w + ix] +=
                src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

// Reusable per-thread im2col buffers; contents are fully overwritten by the
// caller before use.
template <typename T>
std::vector<T>& col_scratch(int slot, std::size_t n) {
  thread_local std::vector<T> bufs[2];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

}  // namespace detail

// Cross-correlation with groups; kernel [Cout, Cin/groups, kh, kw].
template <typename T>
Tensor<T> conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int pad, int groups = 1) {
  if (x.ndim() != 4 || kernel.ndim() != 4)
    throw ShapeError("conv2d: input " + shape_str(x.shape) + " kernel " +
                     shape_str(kernel.shape));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (cin % groups != 0)
    throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                     " not divisible by groups " + std::to_string(groups));
  if (cout % groups != 0)
    throw ShapeError("conv2d: output channels " + std::to_string(cout) +
                     " not divisible by groups " + std::to_string(groups));
  if (kernel.dim(1) != cin / groups)
    throw ShapeError("conv2d: kernel channel dim " +
                     std::to_string(kernel.dim(1)) + " != Cin/groups " +
                     std::to_string(cin / groups));
  if (bias.numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d: bias size " + std::to_string(bias.numel()) +
                     " != Cout " + std::to_string(cout));
  if (h + 2 * pad - kh < 0 || w + 2 * pad - kw < 0)
    throw ShapeError("conv2d: spatial dims H=" + std::to_string(h) +
                     " W=" + std::to_string(w) + " incompatible with kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw) +
                     " stride " + std::to_string(stride) + " pad " +
                     std::to_string(pad));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  const int cg_in = cin / groups, cg_out = cout / groups;
  const bool rg =
      x.requires_grad || kernel.requires_grad || bias.requires_grad;
  Tensor<T> out = make_output(tp, {n, cout, oh, ow}, rg);

  const std::size_t col_sz =
      static_cast<std::size_t>(cg_in) * kh * kw * oh * ow;
  auto& cols = detail::col_scratch<T>(0, col_sz);
  for (int s = 0; s < n; ++s) {
    for (int g = 0; g < groups; ++g) {
      const T* xg = x.ptr() + (static_cast<std::size_t>(s) * cin +
                               static_cast<std::size_t>(g) * cg_in) *
                                  h * w;
      detail::im2col(xg, cg_in, h, w, kh, kw, stride, pad, oh, ow, cols.data());
      T* og = out.ptr() + (static_cast<std::size_t>(s) * cout +
                           static_cast<std::size_t>(g) * cg_out) *
                              oh * ow;
      gemm(false, false, cg_out, oh * ow, cg_in * kh * kw, T(1),
           kernel.ptr() + static_cast<std::size_t>(g) * cg_out * cg_in * kh *
                              kw,
           cg_in * kh * kw, cols.data(), oh * ow, T(0), og, oh * ow);
      for (int c = 0; c < cg_out; ++c) {
        const T b = bias[static_cast<std::size_t>(g) * cg_out + c];
        for (int i = 0; i < oh * ow; ++i)
          og[static_cast<std::size_t>(c) * oh * ow + i] += b;
      }
    }
  }

  if (out.requires_grad) {
    out.node_id = tp->record([x, kernel, bias, out, n, cin, cout, h, w, kh, kw,
                              stride, pad, groups, oh, ow, cg_in, cg_out]() {
      const std::size_t col_sz =
          static_cast<std::size_t>(cg_in) * kh * kw * oh * ow;
      auto& cols = detail::col_scratch<T>(0, col_sz);
      auto& dcols = detail::col_scratch<T>(1, col_sz);
      for (int s = 0; s < n; ++s) {
        for (int g = 0; g < groups; ++g) {
          const T* gout = out.grad->data() +
                          (static_cast<std::size_t>(s) * cout +
                           static_cast<std::size_t>(g) * cg_out) *
                              oh * ow;
          const T* kg = kernel.ptr() + static_cast<std::size_t>(g) * cg_out *
                                           cg_in * kh * kw;
          if (kernel.grad) {
            const T* xg = x.ptr() + (static_cast<std::size_t>(s) * cin +
                                     static_cast<std::size_t>(g) * cg_in) *
                                        h * w;
            detail::im2col(xg, cg_in, h, w, kh, kw, stride, pad, oh, ow,
                           cols.data());
            gemm(false, true, cg_out, cg_in * kh * kw, oh * ow, T(1), gout,
                 oh * ow, cols.data(), oh * ow, T(1),
                 kernel.grad->data() +
                     static_cast<std::size_t>(g) * cg_out * cg_in * kh * kw,
                 cg_in * kh * kw);
          }
          if (bias.grad) {
            for (int c = 0; c < cg_out; ++c) {
              T s2 = T(0);
              for (int i = 0; i < oh * ow; ++i)
                s2 += gout[static_cast<std::size_t>(c) * oh * ow + i];
              (*bias.grad)[static_cast<std::size_t>(g) * cg_out + c] += s2;
            }
          }
          if (x.grad) {
            gemm(true, false, cg_in * kh * kw, oh * ow, cg_out, T(1), kg,
                 cg_in * kh * kw, gout, oh * ow, T(0), dcols.data(), oh * ow);
            detail::col2im(dcols.data(), cg_in, h, w, kh, kw, stride, pad, oh,
                           ow,
                           x.grad->data() +
                               (static_cast<std::size_t>(s) * cin +
                                static_cast<std::size_t>(g) * cg_in) *
                                   h * w);
          }
        }
      }
    });
  }
  return out;
}

// Transposed convolution; kernel [Cin, Cout/groups, kh, kw].
// Output spatial size (H-1)*stride + kh.
template <typename T>
Tensor<T> conv_transpose2d(Tape<T>* tp, const Tensor<T>& x,
                           const Tensor<T>& kernel, const Tensor<T>& bias,
                           int stride, int groups = 1) {
  if (x.ndim() != 4 || kernel.ndim() != 4)
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape) +
                     " kernel " + shape_str(kernel.shape));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int kh = kernel.dim(2), kw = kernel.dim(3);
  if (cin % groups != 0)
    throw ShapeError("conv_transpose2d: input channels " +
                     std::to_string(cin) + " not divisible by groups " +
                     std::to_string(groups));
  if (kernel.dim(0) != cin)
    throw ShapeError("conv_transpose2d: kernel dim0 " +
                     std::to_string(kernel.dim(0)) + " != Cin " +
                     std::to_string(cin));
  const int cg_in = cin / groups, cg_out = kernel.dim(1);
  const int cout = cg_out * groups;
  if (bias.numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv_transpose2d: bias size " +
                     std::to_string(bias.numel()) + " != Cout " +
                     std::to_string(cout));
  const int oh = (h - 1) * stride + kh;
  const int ow = (w - 1) * stride + kw;
  const bool rg =
      x.requires_grad || kernel.requires_grad || bias.requires_grad;
  Tensor<T> out = make_output(tp, {n, cout, oh, ow}, rg);

  // cols[Cout_g*kh*kw, h*w] = K_g^T x_g, then scattered by col2im.
  const std::size_t col_sz = static_cast<std::size_t>(cg_out) * kh * kw * h * w;
  auto& cols = detail::col_scratch<T>(0, col_sz);
  for (int s = 0; s < n; ++s) {
    for (int g = 0; g < groups; ++g) {
      const T* xg = x.ptr() + (static_cast<std::size_t>(s) * cin +
                               static_cast<std::size_t>(g) * cg_in) *
                                  h * w;
      const T* kg = kernel.ptr() +
                    static_cast<std::size_t>(g) * cg_in * cg_out * kh * kw;
      gemm(true, false, cg_out * kh * kw, h * w, cg_in, T(1), kg,
           cg_out * kh * kw, xg, h * w, T(0), cols.data(), h * w);
      T* og = out.ptr() + (static_cast<std::size_t>(s) * cout +
                           static_cast<std::size_t>(g) * cg_out) *
                              oh * ow;
      detail::col2im(cols.data(), cg_out, oh, ow, kh, kw, stride, 0, h, w, og);
      for (int c = 0; c < cg_out; ++c) {
        const T b = bias[static_cast<std::size_t>(g) * cg_out + c];
        for (int i = 0; i < oh * ow; ++i)
          og[static_cast<std::size_t>(c) * oh * ow + i] += b;
      }
    }
  }

  if (out.requires_grad) {
    out.node_id = tp->record([x, kernel, bias, out, n, cin, cout, h, w, kh, kw,
                              stride, groups, oh, ow, cg_in, cg_out]() {
      const std::size_t col_sz =
          static_cast<std::size_t>(cg_out) * kh * kw * h * w;
      auto& dcols = detail::col_scratch<T>(1, col_sz);
      for (int s = 0; s < n; ++s) {
        for (int g = 0; g < groups; ++g) {
          const T* gout = out.grad->data() +
                          (static_cast<std::size_t>(s) * cout +
                           static_cast<std::size_t>(g) * cg_out) *
                              oh * ow;
          // dcols = im2col(dOut) with the forward's scatter geometry
          detail::im2col(gout, cg_out, oh, ow, kh, kw, stride, 0, h, w,
                         dcols.data());
          const T* kg = kernel.ptr() +
                        static_cast<std::size_t>(g) * cg_in * cg_out * kh * kw;
          if (x.grad) {
            gemm(false, false, cg_in, h * w, cg_out * kh * kw, T(1), kg,
                 cg_out * kh * kw, dcols.data(), h * w, T(1),
                 x.grad->data() + (static_cast<std::size_t>(s) * cin +
                                   static_cast<std::size_t>(g) * cg_in) *
                                      h * w,
                 h * w);
          }
          if (kernel.grad) {
            const T* xg = x.ptr() + (static_cast<std::size_t>(s) * cin +
                                     static_cast<std::size_t>(g) * cg_in) *
                                        h * w;
            gemm(false, true, cg_in, cg_out * kh * kw, h * w, T(1), xg, h * w,
                 dcols.data(), h * w, T(1),
                 kernel.grad->data() +
                     static_cast<std::size_t>(g) * cg_in * cg_out * kh * kw,
                 cg_out * kh * kw);
          }
          if (bias.grad) {
            for (int c = 0; c < cg_out; ++c) {
              T s2 = T(0);
              for (int i = 0; i < oh * ow; ++i)
                s2 += gout[static_cast<std::size_t>(c) * oh * ow + i];
              (*bias.grad)[static_cast<std::size_t>(g) * cg_out + c] += s2;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear interpolation (corner-aligned throughout)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_upsample(Tape<T>* tp, const Tensor<T>& x, int oh, int ow) {
  if (x.ndim() != 4)
    throw ShapeError("bilinear_upsample: " + shape_str(x.shape));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (oh < h || ow < w)
    throw ValueError("bilinear_upsample: downsampling " + std::to_string(h) +
                     "x" + std::to_string(w) + " -> " + std::to_string(oh) +
                     "x" + std::to_string(ow) + " rejected");
  const double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
  const double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;
  Tensor<T> out = make_output(tp, {n, c, oh, ow}, x.requires_grad);
  // sample coordinates depend only on the output column/row; precompute
  std::vector<int> xi0(ow), xi1(ow);
  std::vector<double> wxs(ow);
  for (int ox = 0; ox < ow; ++ox) {
    const double fx = ox * sx;
    xi0[ox] = std::min(static_cast<int>(fx), w - 1);
    xi1[ox] = std::min(xi0[ox] + 1, w - 1);
    wxs[ox] = fx - xi0[ox];
  }
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = x.ptr() + (static_cast<std::size_t>(s) * c + ch) * h * w;
      T* op = out.ptr() + (static_cast<std::size_t>(s) * c + ch) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const double fy = oy * sy;
        const int y0 = std::min(static_cast<int>(fy), h - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        const T* r0 = xp + static_cast<std::size_t>(y0) * w;
        const T* r1 = xp + static_cast<std::size_t>(y1) * w;
        for (int ox = 0; ox < ow; ++ox) {
          const double wx = wxs[ox];
          const double v =
              (1 - wy) * ((1 - wx) * r0[xi0[ox]] + wx * r0[xi1[ox]]) +
              wy * ((1 - wx) * r1[xi0[ox]] + wx * r1[xi1[ox]]);
          op[static_cast<std::size_t>(oy) * ow + ox] = static_cast<T>(v);
        }
      }
    }
  }
  if (out.requires_grad) {
    out.node_id = tp->record([x, out, n, c, h, w, oh, ow, sy, xi0, xi1,
                              wxs]() {
      if (!x.grad) return;
      for (int s = 0; s < n; ++s) {
        for (int ch = 0; ch < c; ++ch) {
          T* gx = x.grad->data() +
                  (static_cast<std::size_t>(s) * c + ch) * h * w;
          const T* go = out.grad->data() +
                        (static_cast<std::size_t>(s) * c + ch) * oh * ow;
          for (int oy = 0; oy < oh; ++oy) {
            const double fy = oy * sy;
            const int y0 = std::min(static_cast<int>(fy), h - 1);
            const int y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - y0;
            T* g0 = gx + static_cast<std::size_t>(y0) * w;
            T* g1 = gx + static_cast<std::size_t>(y1) * w;
            for (int ox = 0; ox < ow; ++ox) {
              const double wx = wxs[ox];
              const T g = go[static_cast<std::size_t>(oy) * ow + ox];
              g0[xi0[ox]] += static_cast<T>((1 - wy) * (1 - wx)) * g;
              g0[xi1[ox]] += static_cast<T>((1 - wy) * wx) * g;
              g1[xi0[ox]] += static_cast<T>(wy * (1 - wx)) * g;
              g1[xi1[ox]] += static_cast<T>(wy * wx) * g;
            }
          }
        }
      }
    });
  }
  return out;
}

// Sample a [C,H,W] map at continuous (y,x) points; out [C, P].
// Out-of-range points are clamped into [0,H-1]x[0,W-1].
template <typename T>
Tensor<T> bilinear_sample(Tape<T>* tp, const Tensor<T>& x,
                          const std::vector<std::pair<double, double>>& pts) {
  if (x.ndim() != 3) throw ShapeError("bilinear_sample: " + shape_str(x.shape));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int p = static_cast<int>(pts.size());
  Tensor<T> out = make_output(tp, {c, std::max(p, 1)}, x.requires_grad);
  struct Corner {
    int i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  std::vector<Corner> corners(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) {
    double fy = std::clamp(pts[static_cast<std::size_t>(j)].first, 0.0,
                           static_cast<double>(h - 1));
    double fx = std::clamp(pts[static_cast<std::size_t>(j)].second, 0.0,
                           static_cast<double>(w - 1));
    const int y0 = std::min(static_cast<int>(fy), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const int x0 = std::min(static_cast<int>(fx), w - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const double wy = fy - y0, wx = fx - x0;
    corners[static_cast<std::size_t>(j)] = {
        y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1,
        (1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};
  }
  for (int ch = 0; ch < c; ++ch) {
    const T* xp = x.ptr() + static_cast<std::size_t>(ch) * h * w;
    for (int j = 0; j < p; ++j) {
      const Corner& co = corners[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(ch) * p + j] = static_cast<T>(
          co.w00 * xp[co.i00] + co.w01 * xp[co.i01] + co.w10 * xp[co.i10] +
          co.w11 * xp[co.i11]);
    }
  }
  if (out.requires_grad && p > 0) {
    out.node_id = tp->record([x, out, corners, c, h, w, p]() {
      if (!x.grad) return;
      for (int ch = 0; ch < c; ++ch) {
        T* gx = x.grad->data() + static_cast<std::size_t>(ch) * h * w;
        for (int j = 0; j < p; ++j) {
          const Corner& co = corners[static_cast<std::size_t>(j)];
          const T g = (*out.grad)[static_cast<std::size_t>(ch) * p + j];
          gx[co.i00] += static_cast<T>(co.w00) * g;
          gx[co.i01] += static_cast<T>(co.w01) * g;
          gx[co.i10] += static_cast<T>(co.w10) * g;
          gx[co.i11] += static_cast<T>(co.w11) * g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over present targets of -log softmax(logits[k])[cell]; absent targets
// (cell < 0) are skipped. Returns a zero scalar when no target is present;
// callers needing the empty-set flag count targets themselves.
template <typename T>
Tensor<T> spatial_softmax_ce(Tape<T>* tp, const Tensor<T>& logits,
                             const std::vector<int>& target_cells) {
  if (logits.ndim() != 2 ||
      target_cells.size() != static_cast<std::size_t>(logits.dim(0)))
    throw ShapeError("spatial_softmax_ce: logits " + shape_str(logits.shape) +
                     " targets " + std::to_string(target_cells.size()));
  const int k = logits.dim(0), hw = logits.dim(1);
  int present = 0;
  for (int cell : target_cells) {
    if (cell >= hw)
      throw ValueError("spatial_softmax_ce: target cell " +
                       std::to_string(cell) + " out of range " +
                       std::to_string(hw));
    if (cell >= 0) ++present;
  }
  Tensor<T> out = make_output(tp, {1}, logits.requires_grad);
  if (present == 0) return out;
  T loss = T(0);
  for (int i = 0; i < k; ++i) {
    const int cell = target_cells[static_cast<std::size_t>(i)];
    if (cell < 0) continue;
    const T* row = logits.ptr() + static_cast<std::size_t>(i) * hw;
    T mx = row[0];
    for (int j = 1; j < hw; ++j) mx = std::max(mx, row[j]);
    T lse = T(0);
    for (int j = 0; j < hw; ++j) lse += std::exp(row[j] - mx);
    loss += std::log(lse) + mx - row[cell];
  }
  out[0] = loss / static_cast<T>(present);
  if (out.requires_grad) {
    out.node_id = tp->record([logits, out, target_cells, k, hw, present]() {
      if (!logits.grad) return;
      const T g = (*out.grad)[0] / static_cast<T>(present);
      for (int i = 0; i < k; ++i) {
        const int cell = target_cells[static_cast<std::size_t>(i)];
        if (cell < 0) continue;
        const T* row = logits.ptr() + static_cast<std::size_t>(i) * hw;
        T mx = row[0];
        for (int j = 1; j < hw; ++j) mx = std::max(mx, row[j]);
        T lse = T(0);
        for (int j = 0; j < hw; ++j) lse += std::exp(row[j] - mx);
        T* grow = logits.grad->data() + static_cast<std::size_t>(i) * hw;
        for (int j = 0; j < hw; ++j)
          grow[j] += g * std::exp(row[j] - mx) / lse;
        grow[cell] -= g;
      }
    });
  }
  return out;
}

// Mean binary cross-entropy with logits against {0,1} targets.
template <typename T>
Tensor<T> bce_with_logits_mean(Tape<T>* tp, const Tensor<T>& logits,
                               const std::vector<T>& targets) {
  if (logits.numel() != targets.size())
    throw ShapeError("bce_with_logits_mean: " + shape_str(logits.shape) +
                     " vs " + std::to_string(targets.size()) + " targets");
  const std::size_t n = logits.numel();
  Tensor<T> out = make_output(tp, {1}, logits.requires_grad);
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i], t = targets[i];
    loss += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  out[0] = loss / static_cast<T>(n);
  if (out.requires_grad) {
    out.node_id = tp->record([logits, out, targets, n]() {
      if (!logits.grad) return;
      const T g = (*out.grad)[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T p = T(1) / (T(1) + std::exp(-logits[i]));
        (*logits.grad)[i] += g * (p - targets[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // all [D,D] / [D]
};

template <typename T>
struct AttentionOutput {
  Tensor<T> output;      // [Q, D]
  Tensor<T> attn;        // [heads, Q, T], rows softmax-normalized
  Tensor<T> value_proj;  // [T, D] post-projection value tokens
};

template <typename T>
AttentionOutput<T> multi_head_attention(Tape<T>* tp, const Tensor<T>& queries,
                                        const Tensor<T>& keys,
                                        const Tensor<T>& values, int heads,
                                        const AttentionParams<T>& p) {
  if (queries.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2)
    throw ShapeError("multi_head_attention: inputs must be 2D");
  const int d = queries.dim(1);
  if (keys.dim(1) != d || values.dim(1) != d || keys.dim(0) != values.dim(0))
    throw ShapeError("multi_head_attention: dim mismatch q" +
                     shape_str(queries.shape) + " k" + shape_str(keys.shape) +
                     " v" + shape_str(values.shape));
  if (d % heads != 0)
    throw ShapeError("multi_head_attention: width " + std::to_string(d) +
                     " not divisible by heads " + std::to_string(heads));
  const int q = queries.dim(0), t = keys.dim(0), dh = d / heads;

  Tensor<T> qp = linear(tp, queries, p.wq, p.bq);
  Tensor<T> kp = linear(tp, keys, p.wk, p.bk);
  Tensor<T> vp = linear(tp, values, p.wv, p.bv);

  std::vector<Tensor<T>> head_outs, head_attn;
  head_outs.reserve(static_cast<std::size_t>(heads));
  head_attn.reserve(static_cast<std::size_t>(heads));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  for (int h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(tp, qp, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_cols(tp, kp, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_cols(tp, vp, h * dh, (h + 1) * dh);
    Tensor<T> scores =
        scale(tp, matmul(tp, qh, transpose2d(tp, kh)), inv_sqrt);
    Tensor<T> a = softmax_rows(tp, scores);
    head_attn.push_back(a);
    head_outs.push_back(matmul(tp, a, vh));
  }
  Tensor<T> merged = concat_cols(tp, head_outs);
  AttentionOutput<T> res;
  res.output = linear(tp, merged, p.wo, p.bo);
  res.attn = concat_flat(tp, head_attn).reshaped({heads, q, t});
  res.value_proj = vp;
  return res;
}

}  // namespace kpal
