#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "tcsa/tensor.hpp"

namespace tcsa::ops {

template <class T>
bool track(const TapeT<T>* tape, const TensorT<T>& a) {
  return tape != nullptr && a.requires_grad;
}

template <class T>
bool track(const TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return tape != nullptr && (a.requires_grad || b.requires_grad);
}

template <class T>
bool track(const TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& c) {
  return tape != nullptr && (a.requires_grad || b.requires_grad || c.requires_grad);
}

// ---------------------------------------------------------------------------
// matmul: c[i,j] = sum_k a[i,k] b[k,j]
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw TensorError("matmul: shape mismatch");
  const std::size_t N = a.shape[0], K = a.shape[1], M = b.shape[1];
  TensorT<T> c({N, M});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a.at(i, k);
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < M; ++j) c.at(i, j) += av * b.at(k, j);
    }
  }
  check_finite(c, "matmul");
  if (track(tape, a, b)) {
    c.set_requires_grad();
    ensure_grad(a);
    ensure_grad(b);
    tape->record([a, b, c]() {
      const std::size_t N2 = a.shape[0], K2 = a.shape[1], M2 = b.shape[1];
      if (a.requires_grad) {
        for (std::size_t i = 0; i < N2; ++i)
          for (std::size_t k = 0; k < K2; ++k) {
            T s = T(0);
            for (std::size_t j = 0; j < M2; ++j) s += (*c.grad)[i * M2 + j] * b.at(k, j);
            (*a.grad)[i * K2 + k] += s;
          }
      }
      if (b.requires_grad) {
        for (std::size_t k = 0; k < K2; ++k)
          for (std::size_t j = 0; j < M2; ++j) {
            T s = T(0);
            for (std::size_t i = 0; i < N2; ++i) s += a.at(i, k) * (*c.grad)[i * M2 + j];
            (*b.grad)[k * M2 + j] += s;
          }
      }
    });
  }
  return c;
}

template <class T>
TensorT<T> transpose2d(TapeT<T>* tape, const TensorT<T>& a) {
  if (a.rank() != 2) throw TensorError("transpose: rank != 2");
  const std::size_t N = a.shape[0], K = a.shape[1];
  TensorT<T> out({K, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < K; ++j) out.at(j, i) = a.at(i, j);
  if (track(tape, a)) {
    out.set_requires_grad();
    ensure_grad(a);
    tape->record([a, out]() {
      const std::size_t N2 = a.shape[0], K2 = a.shape[1];
      for (std::size_t i = 0; i < N2; ++i)
        for (std::size_t j = 0; j < K2; ++j) (*a.grad)[i * K2 + j] += (*out.grad)[j * N2 + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape) throw TensorError("add: shape mismatch");
  TensorT<T> out(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  check_finite(out, "add");
  if (track(tape, a, b)) {
    out.set_requires_grad();
    ensure_grad(a);
    ensure_grad(b);
    tape->record([a, b, out]() {
      const std::size_t n2 = out.numel();
      if (a.requires_grad)
        for (std::size_t i = 0; i < n2; ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < n2; ++i) (*b.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& a, T s) {
  TensorT<T> out(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  check_finite(out, "scale");
  if (track(tape, a)) {
    out.set_requires_grad();
    ensure_grad(a);
    tape->record([a, out, s]() {
      const std::size_t n2 = out.numel();
      for (std::size_t i = 0; i < n2; ++i) (*a.grad)[i] += (*out.grad)[i] * s;
    });
  }
  return out;
}

template <class T>
TensorT<T> sum_all(TapeT<T>* tape, const TensorT<T>& a) {
  TensorT<T> out({1});
  T s = T(0);
  for (T v : *a.data) s += v;
  (*out.data)[0] = s;
  check_finite(out, "sum");
  if (track(tape, a)) {
    out.set_requires_grad();
    ensure_grad(a);
    tape->record([a, out]() {
      const T g = (*out.grad)[0];
      for (auto& gv : *a.grad) gv += g;
    });
  }
  return out;
}

// GELU, tanh approximation.
template <class T>
TensorT<T> gelu(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape);
  const double c = std::sqrt(2.0 / M_PI);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (*x.data)[i];
    const double u = c * (v + 0.044715 * v * v * v);
    (*out.data)[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  check_finite(out, "gelu");
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, c]() {
      const std::size_t n2 = out.numel();
      for (std::size_t i = 0; i < n2; ++i) {
        const double v = (*x.data)[i];
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        (*x.grad)[i] += (*out.grad)[i] * static_cast<T>(d);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the last axis of a 2-D tensor, row-max stabilized
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> softmax_rows(TapeT<T>* tape, const TensorT<T>& a) {
  if (a.rank() != 2 || a.shape[1] == 0) throw TensorError("softmax_rows: empty row extent");
  const std::size_t N = a.shape[0], K = a.shape[1];
  TensorT<T> out({N, K});
  for (std::size_t i = 0; i < N; ++i) {
    T mx = a.at(i, 0);
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, a.at(i, j));
    T denom = T(0);
    for (std::size_t j = 0; j < K; ++j) {
      const T e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < K; ++j) out.at(i, j) /= denom;
  }
  check_finite(out, "softmax_rows");
  if (track(tape, a)) {
    out.set_requires_grad();
    ensure_grad(a);
    tape->record([a, out]() {
      const std::size_t N2 = a.shape[0], K2 = a.shape[1];
      for (std::size_t i = 0; i < N2; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < K2; ++j) dot += out.at(i, j) * (*out.grad)[i * K2 + j];
        for (std::size_t j = 0; j < K2; ++j)
          (*a.grad)[i * K2 + j] += out.at(i, j) * ((*out.grad)[i * K2 + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// per-row top-k, descending, ties resolved to the lower column index
// ---------------------------------------------------------------------------
template <class T>
std::pair<TensorT<T>, IndexMatrix> topk_rows(TapeT<T>* tape, const TensorT<T>& a, std::size_t k) {
  if (a.rank() != 2) throw TensorError("topk_rows: rank != 2");
  const std::size_t N = a.shape[0], K = a.shape[1];
  if (k < 1 || k > K) throw TensorError("topk_rows: k out of range");
  TensorT<T> values({N, k});
  IndexMatrix indices{N, k, std::vector<long>(N * k)};
  std::vector<long> order(K);
  for (std::size_t i = 0; i < N; ++i) {
    std::iota(order.begin(), order.end(), 0L);
    std::stable_sort(order.begin(), order.end(), [&](long x, long y) {
      return a.at(i, static_cast<std::size_t>(x)) > a.at(i, static_cast<std::size_t>(y));
    });
    for (std::size_t j = 0; j < k; ++j) {
      indices.at(i, j) = order[j];
      values.at(i, j) = a.at(i, static_cast<std::size_t>(order[j]));
    }
  }
  if (track(tape, a)) {
    values.set_requires_grad();
    ensure_grad(a);
    tape->record([a, values, indices]() {
      const std::size_t K2 = a.shape[1];
      for (std::size_t i = 0; i < indices.rows; ++i)
        for (std::size_t j = 0; j < indices.cols; ++j)
          (*a.grad)[i * K2 + static_cast<std::size_t>(indices.at(i, j))] +=
              (*values.grad)[i * indices.cols + j];
    });
  }
  return {values, indices};
}

// values from v at the given row indices: out[i,j,:] = v[idx[i,j],:]
template <class T>
TensorT<T> gather_rows(TapeT<T>* tape, const TensorT<T>& v, const IndexMatrix& idx) {
  if (v.rank() != 2) throw TensorError("gather_rows: rank != 2");
  const std::size_t K = v.shape[0], C = v.shape[1];
  for (long x : idx.idx)
    if (x < 0 || static_cast<std::size_t>(x) >= K) throw TensorError("gather_rows: index out of range");
  TensorT<T> out({idx.rows, idx.cols, C});
  for (std::size_t i = 0; i < idx.rows; ++i)
    for (std::size_t j = 0; j < idx.cols; ++j) {
      const std::size_t r = static_cast<std::size_t>(idx.at(i, j));
      for (std::size_t c = 0; c < C; ++c) out.at(i, j, c) = v.at(r, c);
    }
  if (track(tape, v)) {
    out.set_requires_grad();
    ensure_grad(v);
    tape->record([v, out, idx]() {
      const std::size_t C2 = v.shape[1];
      for (std::size_t i = 0; i < idx.rows; ++i)
        for (std::size_t j = 0; j < idx.cols; ++j) {
          const std::size_t r = static_cast<std::size_t>(idx.at(i, j));
          for (std::size_t c = 0; c < C2; ++c)
            (*v.grad)[r * C2 + c] += (*out.grad)[(i * idx.cols + j) * C2 + c];
        }
    });
  }
  return out;
}

// out[i,:] = x[indices[i],:]; duplicates allowed, backward scatter-adds
template <class T>
TensorT<T> take_rows(TapeT<T>* tape, const TensorT<T>& x, const std::vector<long>& indices) {
  if (x.rank() != 2) throw TensorError("take_rows: rank != 2");
  const std::size_t N = x.shape[0], C = x.shape[1];
  for (long i : indices)
    if (i < 0 || static_cast<std::size_t>(i) >= N) throw TensorError("take_rows: index out of range");
  TensorT<T> out({indices.size(), C});
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) out.at(i, c) = x.at(static_cast<std::size_t>(indices[i]), c);
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, indices]() {
      const std::size_t C2 = x.shape[1];
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t c = 0; c < C2; ++c)
          (*x.grad)[static_cast<std::size_t>(indices[i]) * C2 + c] += (*out.grad)[i * C2 + c];
    });
  }
  return out;
}

// Strictly-increasing positions; zero everywhere else. Exact inverse of the
// gather on those rows.
template <class T>
TensorT<T> scatter_rows(TapeT<T>* tape, const TensorT<T>& src, const std::vector<long>& positions,
                        std::size_t length) {
  if (src.rank() != 2) throw TensorError("scatter_rows: rank != 2");
  if (positions.size() != src.shape[0]) throw TensorError("scatter_rows: position count mismatch");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || static_cast<std::size_t>(positions[i]) >= length)
      throw TensorError("scatter_rows: position out of range");
    if (i > 0 && positions[i] <= positions[i - 1])
      throw TensorError("scatter_rows: positions must be strictly increasing");
  }
  const std::size_t C = src.shape[1];
  TensorT<T> out({length, C});
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t c = 0; c < C; ++c)
      out.at(static_cast<std::size_t>(positions[i]), c) = src.at(i, c);
  if (track(tape, src)) {
    out.set_requires_grad();
    ensure_grad(src);
    tape->record([src, out, positions]() {
      const std::size_t C2 = src.shape[1];
      for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t c = 0; c < C2; ++c)
          (*src.grad)[i * C2 + c] += (*out.grad)[static_cast<std::size_t>(positions[i]) * C2 + c];
    });
  }
  return out;
}

// As scatter_rows but duplicate positions accumulate (used by token fusion).
template <class T>
TensorT<T> scatter_add_rows(TapeT<T>* tape, const TensorT<T>& src, const std::vector<long>& positions,
                            std::size_t length) {
  if (src.rank() != 2) throw TensorError("scatter_add_rows: rank != 2");
  if (positions.size() != src.shape[0]) throw TensorError("scatter_add_rows: position count mismatch");
  for (long p : positions)
    if (p < 0 || static_cast<std::size_t>(p) >= length)
      throw TensorError("scatter_add_rows: position out of range");
  const std::size_t C = src.shape[1];
  TensorT<T> out({length, C});
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t c = 0; c < C; ++c)
      out.at(static_cast<std::size_t>(positions[i]), c) += src.at(i, c);
  if (track(tape, src)) {
    out.set_requires_grad();
    ensure_grad(src);
    tape->record([src, out, positions]() {
      const std::size_t C2 = src.shape[1];
      for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t c = 0; c < C2; ++c)
          (*src.grad)[i * C2 + c] += (*out.grad)[static_cast<std::size_t>(positions[i]) * C2 + c];
    });
  }
  return out;
}

// Per-row constant scaling (constants carry no grad).
template <class T>
TensorT<T> row_scale(TapeT<T>* tape, const TensorT<T>& x, const std::vector<T>& factors) {
  if (x.rank() != 2 || factors.size() != x.shape[0]) throw TensorError("row_scale: shape mismatch");
  const std::size_t N = x.shape[0], C = x.shape[1];
  TensorT<T> out({N, C});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) out.at(i, c) = x.at(i, c) * factors[i];
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, factors]() {
      const std::size_t N2 = x.shape[0], C2 = x.shape[1];
      for (std::size_t i = 0; i < N2; ++i)
        for (std::size_t c = 0; c < C2; ++c)
          (*x.grad)[i * C2 + c] += (*out.grad)[i * C2 + c] * factors[i];
    });
  }
  return out;
}

// out[i,:] = sum_j w[i,j] * g[i,j,:]  (the Softmax(A) . Gather(V,I) fusion)
template <class T>
TensorT<T> weighted_sum_rows(TapeT<T>* tape, const TensorT<T>& w, const TensorT<T>& g) {
  if (w.rank() != 2 || g.rank() != 3 || w.shape[0] != g.shape[0] || w.shape[1] != g.shape[1])
    throw TensorError("weighted_sum_rows: shape mismatch");
  const std::size_t N = w.shape[0], K = w.shape[1], C = g.shape[2];
  TensorT<T> out({N, C});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      const T wv = w.at(i, j);
      for (std::size_t c = 0; c < C; ++c) out.at(i, c) += wv * g.at(i, j, c);
    }
  check_finite(out, "weighted_sum_rows");
  if (track(tape, w, g)) {
    out.set_requires_grad();
    ensure_grad(w);
    ensure_grad(g);
    tape->record([w, g, out]() {
      const std::size_t N2 = w.shape[0], K2 = w.shape[1], C2 = g.shape[2];
      for (std::size_t i = 0; i < N2; ++i)
        for (std::size_t j = 0; j < K2; ++j) {
          if (w.requires_grad) {
            T s = T(0);
            for (std::size_t c = 0; c < C2; ++c)
              s += (*out.grad)[i * C2 + c] * g.at(i, j, c);
            (*w.grad)[i * K2 + j] += s;
          }
          if (g.requires_grad) {
            const T wv = w.at(i, j);
            for (std::size_t c = 0; c < C2; ++c)
              (*g.grad)[(i * K2 + j) * C2 + c] += wv * (*out.grad)[i * C2 + c];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape utilities
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> concat_rows(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw TensorError("concat_rows: shape mismatch");
  const std::size_t C = a.shape[1];
  TensorT<T> out({a.shape[0] + b.shape[0], C});
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  std::copy(b.data->begin(), b.data->end(), out.data->begin() + static_cast<long>(a.numel()));
  if (track(tape, a, b)) {
    out.set_requires_grad();
    ensure_grad(a);
    ensure_grad(b);
    tape->record([a, b, out]() {
      const std::size_t na = a.numel();
      if (a.requires_grad)
        for (std::size_t i = 0; i < na; ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < b.numel(); ++i) (*b.grad)[i] += (*out.grad)[na + i];
    });
  }
  return out;
}

// Concatenate along the last axis; leading extents must agree.
template <class T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 2) throw TensorError("concat_channels: rank mismatch");
  for (std::size_t d = 0; d + 1 < a.rank(); ++d)
    if (a.shape[d] != b.shape[d]) throw TensorError("concat_channels: leading extents differ");
  const std::size_t Ca = a.shape.back(), Cb = b.shape.back();
  const std::size_t outer = a.numel() / Ca;
  std::vector<std::size_t> s = a.shape;
  s.back() = Ca + Cb;
  TensorT<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < Ca; ++c)
      (*out.data)[o * (Ca + Cb) + c] = (*a.data)[o * Ca + c];
    for (std::size_t c = 0; c < Cb; ++c)
      (*out.data)[o * (Ca + Cb) + Ca + c] = (*b.data)[o * Cb + c];
  }
  if (track(tape, a, b)) {
    out.set_requires_grad();
    ensure_grad(a);
    ensure_grad(b);
    tape->record([a, b, out, Ca, Cb, outer]() {
      for (std::size_t o = 0; o < outer; ++o) {
        if (a.requires_grad)
          for (std::size_t c = 0; c < Ca; ++c)
            (*a.grad)[o * Ca + c] += (*out.grad)[o * (Ca + Cb) + c];
        if (b.requires_grad)
          for (std::size_t c = 0; c < Cb; ++c)
            (*b.grad)[o * Cb + c] += (*out.grad)[o * (Ca + Cb) + Ca + c];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_channels(TapeT<T>* tape, const TensorT<T>& x, std::size_t offset, std::size_t width) {
  if (x.rank() < 2) throw TensorError("slice_channels: rank < 2");
  const std::size_t C = x.shape.back();
  if (offset + width > C || width == 0) throw TensorError("slice_channels: out of range");
  const std::size_t outer = x.numel() / C;
  std::vector<std::size_t> s = x.shape;
  s.back() = width;
  TensorT<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < width; ++c)
      (*out.data)[o * width + c] = (*x.data)[o * C + offset + c];
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, offset, width, outer, C]() {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < width; ++c)
          (*x.grad)[o * C + offset + c] += (*out.grad)[o * width + c];
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_rows(TapeT<T>* tape, const TensorT<T>& x, std::size_t offset, std::size_t count) {
  if (x.rank() != 2) throw TensorError("slice_rows: rank != 2");
  if (offset + count > x.shape[0]) throw TensorError("slice_rows: out of range");
  const std::size_t C = x.shape[1];
  TensorT<T> out({count, C});
  std::copy(x.data->begin() + static_cast<long>(offset * C),
            x.data->begin() + static_cast<long>((offset + count) * C), out.data->begin());
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, offset, C, count]() {
      for (std::size_t i = 0; i < count * C; ++i) (*x.grad)[offset * C + i] += (*out.grad)[i];
    });
  }
  return out;
}

template <class T>
std::pair<TensorT<T>, TensorT<T>> split_rows(TapeT<T>* tape, const TensorT<T>& x, std::size_t n1) {
  return {slice_rows(tape, x, 0, n1), slice_rows(tape, x, n1, x.shape[0] - n1)};
}

// Mean over the token (row) axis: [N,C] -> [1,C]
template <class T>
TensorT<T> gap_tokens(TapeT<T>* tape, const TensorT<T>& x) {
  if (x.rank() != 2 || x.shape[0] == 0) throw TensorError("gap_tokens: empty input");
  const std::size_t N = x.shape[0], C = x.shape[1];
  TensorT<T> out({1, C});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) out.at(0, c) += x.at(i, c);
  for (std::size_t c = 0; c < C; ++c) out.at(0, c) /= static_cast<T>(N);
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out]() {
      const std::size_t N2 = x.shape[0], C2 = x.shape[1];
      for (std::size_t i = 0; i < N2; ++i)
        for (std::size_t c = 0; c < C2; ++c)
          (*x.grad)[i * C2 + c] += (*out.grad)[c] / static_cast<T>(N2);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear / convolutions
// ---------------------------------------------------------------------------
// x[N,Cin] @ w[Cin,Cout] + bias[Cout]
template <class T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0] || bias.numel() != w.shape[1])
    throw TensorError("linear: shape mismatch");
  const std::size_t N = x.shape[0], K = x.shape[1], M = w.shape[1];
  TensorT<T> out({N, M});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < M; ++j) out.at(i, j) = (*bias.data)[j];
    for (std::size_t k = 0; k < K; ++k) {
      const T xv = x.at(i, k);
      if (xv == T(0)) continue;
      for (std::size_t j = 0; j < M; ++j) out.at(i, j) += xv * w.at(k, j);
    }
  }
  check_finite(out, "linear");
  if (track(tape, x, w, bias)) {
    out.set_requires_grad();
    ensure_grad(x);
    ensure_grad(w);
    ensure_grad(bias);
    tape->record([x, w, bias, out]() {
      const std::size_t N2 = x.shape[0], K2 = x.shape[1], M2 = w.shape[1];
      if (x.requires_grad)
        for (std::size_t i = 0; i < N2; ++i)
          for (std::size_t k = 0; k < K2; ++k) {
            T s = T(0);
            for (std::size_t j = 0; j < M2; ++j) s += (*out.grad)[i * M2 + j] * w.at(k, j);
            (*x.grad)[i * K2 + k] += s;
          }
      if (w.requires_grad)
        for (std::size_t k = 0; k < K2; ++k)
          for (std::size_t j = 0; j < M2; ++j) {
            T s = T(0);
            for (std::size_t i = 0; i < N2; ++i) s += x.at(i, k) * (*out.grad)[i * M2 + j];
            (*w.grad)[k * M2 + j] += s;
          }
      if (bias.requires_grad)
        for (std::size_t j = 0; j < M2; ++j) {
          T s = T(0);
          for (std::size_t i = 0; i < N2; ++i) s += (*out.grad)[i * M2 + j];
          (*bias.grad)[j] += s;
        }
    });
  }
  return out;
}

// Pointwise channel mixing on a [B,H,W,Cin] map.
template <class T>
TensorT<T> conv1x1(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  if (x.rank() != 4) throw TensorError("conv1x1: rank != 4");
  const std::size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
  if (w.rank() != 2 || w.shape[0] != Cin) throw TensorError("conv1x1: channel mismatch");
  TensorT<T> flat = x.reshaped({B * H * W, Cin});
  TensorT<T> out = linear(tape, flat, w, bias);
  return out.reshaped({B, H, W, w.shape[1]});
}

// General conv: x[B,H,W,Cin], w[kh,kw,Cin,Cout], zero padding, stride.
template <class T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw TensorError("conv2d: rank mismatch");
  const std::size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
  const std::size_t kh = w.shape[0], kw = w.shape[1];
  if (w.shape[2] != Cin || bias.numel() != w.shape[3]) throw TensorError("conv2d: channel mismatch");
  const std::size_t Cout = w.shape[3];
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw TensorError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  TensorT<T> out({B, Ho, Wo, Cout});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* op = &out.at(b, oy, ox, 0);
        for (std::size_t c = 0; c < Cout; ++c) op[c] = (*bias.data)[c];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const T* xp =
                &(*x.data)[((b * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * Cin];
            const T* wp = &(*w.data)[((ky * kw + kx) * Cin) * Cout];
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const T xv = xp[ci];
              if (xv == T(0)) continue;
              const T* wrow = wp + ci * Cout;
              for (std::size_t c = 0; c < Cout; ++c) op[c] += xv * wrow[c];
            }
          }
        }
      }
  check_finite(out, "conv2d");
  if (track(tape, x, w, bias)) {
    out.set_requires_grad();
    ensure_grad(x);
    ensure_grad(w);
    ensure_grad(bias);
    tape->record([x, w, bias, out, stride, pad]() {
      const std::size_t B2 = x.shape[0], H2 = x.shape[1], W2 = x.shape[2], Cin2 = x.shape[3];
      const std::size_t kh2 = w.shape[0], kw2 = w.shape[1], Cout2 = w.shape[3];
      const std::size_t Ho2 = out.shape[1], Wo2 = out.shape[2];
      for (std::size_t b = 0; b < B2; ++b)
        for (std::size_t oy = 0; oy < Ho2; ++oy)
          for (std::size_t ox = 0; ox < Wo2; ++ox) {
            const T* gp = &(*out.grad)[((b * Ho2 + oy) * Wo2 + ox) * Cout2];
            if (bias.requires_grad)
              for (std::size_t c = 0; c < Cout2; ++c) (*bias.grad)[c] += gp[c];
            for (std::size_t ky = 0; ky < kh2; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(H2)) continue;
              for (std::size_t kx = 0; kx < kw2; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(W2)) continue;
                const std::size_t xoff =
                    ((b * H2 + static_cast<std::size_t>(iy)) * W2 + static_cast<std::size_t>(ix)) * Cin2;
                const std::size_t woff = (ky * kw2 + kx) * Cin2 * Cout2;
                for (std::size_t ci = 0; ci < Cin2; ++ci) {
                  T gx = T(0);
                  for (std::size_t c = 0; c < Cout2; ++c) {
                    const T g = gp[c];
                    if (w.requires_grad) (*w.grad)[woff + ci * Cout2 + c] += (*x.data)[xoff + ci] * g;
                    gx += (*w.data)[woff + ci * Cout2 + c] * g;
                  }
                  if (x.requires_grad) (*x.grad)[xoff + ci] += gx;
                }
              }
            }
          }
    });
  }
  return out;
}

// Depthwise conv, stride 1, zero padding (k-1)/2, shape preserved.
// w is [C,kh,kw], bias [C], kernel extents odd.
template <class T>
TensorT<T> dwconv(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  if (x.rank() != 4 || w.rank() != 3) throw TensorError("dwconv: rank mismatch");
  const std::size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
  const std::size_t kh = w.shape[1], kw = w.shape[2];
  if (w.shape[0] != C || bias.numel() != C) throw TensorError("dwconv: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw TensorError("dwconv: kernel must be odd");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  TensorT<T> out({B, H, W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < H; ++oy)
      for (std::size_t ox = 0; ox < W; ++ox)
        for (std::size_t c = 0; c < C; ++c) {
          T acc = (*bias.data)[c];
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy) + static_cast<long>(ky) - ph;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox) + static_cast<long>(kx) - pw;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              acc += x.at(b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c) *
                     (*w.data)[(c * kh + ky) * kw + kx];
            }
          }
          out.at(b, oy, ox, c) = acc;
        }
  check_finite(out, "dwconv");
  if (track(tape, x, w, bias)) {
    out.set_requires_grad();
    ensure_grad(x);
    ensure_grad(w);
    ensure_grad(bias);
    tape->record([x, w, bias, out, ph, pw]() {
      const std::size_t B2 = x.shape[0], H2 = x.shape[1], W2 = x.shape[2], C2 = x.shape[3];
      const std::size_t kh2 = w.shape[1], kw2 = w.shape[2];
      for (std::size_t b = 0; b < B2; ++b)
        for (std::size_t oy = 0; oy < H2; ++oy)
          for (std::size_t ox = 0; ox < W2; ++ox)
            for (std::size_t c = 0; c < C2; ++c) {
              const T g = (*out.grad)[((b * H2 + oy) * W2 + ox) * C2 + c];
              if (bias.requires_grad) (*bias.grad)[c] += g;
              for (std::size_t ky = 0; ky < kh2; ++ky) {
                const long iy = static_cast<long>(oy) + static_cast<long>(ky) - ph;
                if (iy < 0 || iy >= static_cast<long>(H2)) continue;
                for (std::size_t kx = 0; kx < kw2; ++kx) {
                  const long ix = static_cast<long>(ox) + static_cast<long>(kx) - pw;
                  if (ix < 0 || ix >= static_cast<long>(W2)) continue;
                  const std::size_t xoff =
                      ((b * H2 + static_cast<std::size_t>(iy)) * W2 + static_cast<std::size_t>(ix)) * C2 + c;
                  if (w.requires_grad) (*w.grad)[(c * kh2 + ky) * kw2 + kx] += (*x.data)[xoff] * g;
                  if (x.requires_grad) (*x.grad)[xoff] += (*w.data)[(c * kh2 + ky) * kw2 + kx] * g;
                }
              }
            }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------
template <class T>
struct BatchNormStateT {
  TensorT<T> running_mean;
  TensorT<T> running_var;
};

// Normalizes per channel over every other axis. Training mode uses batch
// statistics and updates running stats in place; inference uses running stats.
template <class T>
TensorT<T> batchnorm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gamma,
                     const TensorT<T>& beta, BatchNormStateT<T>& state, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  const std::size_t C = x.shape.back();
  if (gamma.numel() != C || beta.numel() != C) throw TensorError("batchnorm: param mismatch");
  const std::size_t rowsN = x.numel() / C;
  TensorT<T> out(x.shape);
  std::vector<T> mean(C, T(0)), var(C, T(0));
  if (training) {
    for (std::size_t r = 0; r < rowsN; ++r)
      for (std::size_t c = 0; c < C; ++c) mean[c] += (*x.data)[r * C + c];
    for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<T>(rowsN);
    for (std::size_t r = 0; r < rowsN; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const T d = (*x.data)[r * C + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<T>(rowsN);
    for (std::size_t c = 0; c < C; ++c) {
      (*state.running_mean.data)[c] = (T(1) - momentum) * (*state.running_mean.data)[c] + momentum * mean[c];
      (*state.running_var.data)[c] = (T(1) - momentum) * (*state.running_var.data)[c] + momentum * var[c];
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*state.running_mean.data)[c];
      var[c] = (*state.running_var.data)[c];
    }
  }
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  // keep xhat for backward
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (std::size_t r = 0; r < rowsN; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const T h = ((*x.data)[r * C + c] - mean[c]) * inv_std[c];
      (*xhat)[r * C + c] = h;
      (*out.data)[r * C + c] = (*gamma.data)[c] * h + (*beta.data)[c];
    }
  check_finite(out, "batchnorm");
  if (track(tape, x, gamma, beta)) {
    out.set_requires_grad();
    ensure_grad(x);
    ensure_grad(gamma);
    ensure_grad(beta);
    tape->record([x, gamma, beta, out, xhat, inv_std, training, rowsN, C]() {
      std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
      for (std::size_t r = 0; r < rowsN; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          const T dy = (*out.grad)[r * C + c];
          sum_dy[c] += dy;
          sum_dy_xhat[c] += dy * (*xhat)[r * C + c];
        }
      if (gamma.requires_grad)
        for (std::size_t c = 0; c < C; ++c) (*gamma.grad)[c] += sum_dy_xhat[c];
      if (beta.requires_grad)
        for (std::size_t c = 0; c < C; ++c) (*beta.grad)[c] += sum_dy[c];
      if (x.requires_grad) {
        const T n = static_cast<T>(rowsN);
        for (std::size_t r = 0; r < rowsN; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            const T dy = (*out.grad)[r * C + c];
            T dx;
            if (training) {
              dx = (*gamma.data)[c] * inv_std[c] *
                   (dy - sum_dy[c] / n - (*xhat)[r * C + c] * sum_dy_xhat[c] / n);
            } else {
              dx = (*gamma.data)[c] * inv_std[c] * dy;
            }
            (*x.grad)[r * C + c] += dx;
          }
      }
    });
  }
  return out;
}

// Layernorm over the channel (last) axis per token.
template <class T>
TensorT<T> layernorm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gamma,
                     const TensorT<T>& beta, T eps = T(1e-5)) {
  const std::size_t C = x.shape.back();
  if (gamma.numel() != C || beta.numel() != C) throw TensorError("layernorm: param mismatch");
  const std::size_t rowsN = x.numel() / C;
  TensorT<T> out(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rowsN);
  for (std::size_t r = 0; r < rowsN; ++r) {
    T mu = T(0);
    for (std::size_t c = 0; c < C; ++c) mu += (*x.data)[r * C + c];
    mu /= static_cast<T>(C);
    T var = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      const T d = (*x.data)[r * C + c] - mu;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = ((*x.data)[r * C + c] - mu) * is;
      (*xhat)[r * C + c] = h;
      (*out.data)[r * C + c] = (*gamma.data)[c] * h + (*beta.data)[c];
    }
  }
  check_finite(out, "layernorm");
  if (track(tape, x, gamma, beta)) {
    out.set_requires_grad();
    ensure_grad(x);
    ensure_grad(gamma);
    ensure_grad(beta);
    tape->record([x, gamma, beta, out, xhat, inv_std, rowsN, C]() {
      for (std::size_t r = 0; r < rowsN; ++r) {
        T sum_dyg = T(0), sum_dyg_xhat = T(0);
        for (std::size_t c = 0; c < C; ++c) {
          const T dyg = (*out.grad)[r * C + c] * (*gamma.data)[c];
          sum_dyg += dyg;
          sum_dyg_xhat += dyg * (*xhat)[r * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) {
          const T dy = (*out.grad)[r * C + c];
          if (gamma.requires_grad) (*gamma.grad)[c] += dy * (*xhat)[r * C + c];
          if (beta.requires_grad) (*beta.grad)[c] += dy;
          if (x.requires_grad) {
            const T n = static_cast<T>(C);
            const T dyg = dy * (*gamma.data)[c];
            (*x.grad)[r * C + c] +=
                (*inv_std)[r] * (dyg - sum_dyg / n - (*xhat)[r * C + c] * sum_dyg_xhat / n);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// depth-to-space: [B,H,W,C*r*r] -> [B,H*r,W*r,C]
// channel index c*r*r + dy*r + dx maps to spatial offset (dy,dx)
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> pixel_shuffle(TapeT<T>* tape, const TensorT<T>& x, std::size_t r) {
  if (x.rank() != 4) throw TensorError("pixel_shuffle: rank != 4");
  const std::size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
  if (r == 0 || Cin % (r * r) != 0) throw TensorError("pixel_shuffle: channels not divisible by r^2");
  if (r == 1) return x;
  const std::size_t C = Cin / (r * r);
  TensorT<T> out({B, H * r, W * r, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xw = 0; xw < W; ++xw)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < r; ++dy)
            for (std::size_t dx = 0; dx < r; ++dx)
              out.at(b, y * r + dy, xw * r + dx, c) = x.at(b, y, xw, c * r * r + dy * r + dx);
  if (track(tape, x)) {
    out.set_requires_grad();
    ensure_grad(x);
    tape->record([x, out, r]() {
      const std::size_t B2 = x.shape[0], H2 = x.shape[1], W2 = x.shape[2];
      const std::size_t C2 = x.shape[3] / (r * r);
      const std::size_t Wo = W2 * r, Co = C2;
      for (std::size_t b = 0; b < B2; ++b)
        for (std::size_t y = 0; y < H2; ++y)
          for (std::size_t xw = 0; xw < W2; ++xw)
            for (std::size_t c = 0; c < C2; ++c)
              for (std::size_t dy = 0; dy < r; ++dy)
                for (std::size_t dx = 0; dx < r; ++dx)
                  (*x.grad)[((b * H2 + y) * W2 + xw) * x.shape[3] + c * r * r + dy * r + dx] +=
                      (*out.grad)[((b * H2 * r + y * r + dy) * Wo + xw * r + dx) * Co + c];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// segmentation loss: w_ce * cross-entropy + w_dice * soft Dice
// logits [..., K] flattened to P pixels, targets length P
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> ce_dice_loss(TapeT<T>* tape, const TensorT<T>& logits, const std::vector<int>& targets,
                        T w_ce = T(0.5), T w_dice = T(0.5), T smooth = T(1e-5)) {
  const std::size_t K = logits.shape.back();
  const std::size_t P = logits.numel() / K;
  if (targets.size() != P) throw TensorError("loss: target size mismatch");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= K) throw TensorError("loss: target class out of range");
  auto prob = std::make_shared<std::vector<T>>(logits.numel());
  double ce = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    T mx = (*logits.data)[p * K];
    for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, (*logits.data)[p * K + c]);
    T denom = T(0);
    for (std::size_t c = 0; c < K; ++c) {
      const T e = std::exp((*logits.data)[p * K + c] - mx);
      (*prob)[p * K + c] = e;
      denom += e;
    }
    for (std::size_t c = 0; c < K; ++c) (*prob)[p * K + c] /= denom;
    ce -= std::log(std::max(static_cast<double>((*prob)[p * K + targets[p]]), 1e-30));
  }
  ce /= static_cast<double>(P);
  // soft Dice over classes
  std::vector<double> num(K, 0.0), den(K, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < K; ++c) {
      const double pc = (*prob)[p * K + c];
      const double g = (targets[p] == static_cast<int>(c)) ? 1.0 : 0.0;
      num[c] += pc * g;
      den[c] += pc + g;
    }
  double dice_mean = 0.0;
  for (std::size_t c = 0; c < K; ++c)
    dice_mean += (2.0 * num[c] + static_cast<double>(smooth)) / (den[c] + static_cast<double>(smooth));
  dice_mean /= static_cast<double>(K);
  TensorT<T> out({1});
  (*out.data)[0] = static_cast<T>(static_cast<double>(w_ce) * ce +
                                  static_cast<double>(w_dice) * (1.0 - dice_mean));
  check_finite(out, "ce_dice_loss");
  if (track(tape, logits)) {
    out.set_requires_grad();
    ensure_grad(logits);
    tape->record([logits, out, prob, targets, num, den, w_ce, w_dice, smooth, P, K]() {
      const T g = (*out.grad)[0];
      for (std::size_t p = 0; p < P; ++p) {
        // dL/dp_c at this pixel
        std::vector<double> dLdp(K, 0.0);
        for (std::size_t c = 0; c < K; ++c) {
          const double gpc = (targets[p] == static_cast<int>(c)) ? 1.0 : 0.0;
          const double ds = static_cast<double>(smooth);
          const double dd =
              (2.0 * gpc * (den[c] + ds) - (2.0 * num[c] + ds)) / ((den[c] + ds) * (den[c] + ds));
          dLdp[c] += -static_cast<double>(w_dice) * dd / static_cast<double>(K);
          if (targets[p] == static_cast<int>(c))
            dLdp[c] += -static_cast<double>(w_ce) /
                       (static_cast<double>(P) *
                        std::max(static_cast<double>((*prob)[p * K + c]), 1e-30));
        }
        // chain through per-pixel softmax: dL/dz_k = p_k (dL/dp_k - sum_c dL/dp_c p_c)
        double dot = 0.0;
        for (std::size_t c = 0; c < K; ++c) dot += dLdp[c] * (*prob)[p * K + c];
        for (std::size_t c = 0; c < K; ++c)
          (*logits.grad)[p * K + c] +=
              g * static_cast<T>((*prob)[p * K + c] * (dLdp[c] - dot));
      }
    });
  }
  return out;
}

}  // namespace tcsa::ops
