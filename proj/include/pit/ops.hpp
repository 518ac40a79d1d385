#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "pit/tensor.hpp"

namespace pit {

namespace detail {

template <typename T>
inline void axpy(T* dst, const T* src, std::size_t n, T alpha = T(1)) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

// o += a[m,k] . b[k,n]
template <typename T>
inline void mm_acc(const T* a, const T* b, T* o, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* orow = o + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// o[m,k] += g[m,n] . b[k,n]^T
template <typename T>
inline void mm_gbt(const T* g, const T* b, T* o, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* orow = o + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      orow[kk] += acc;
    }
  }
}

// o[k,n] += a[m,k]^T . g[m,n]
template <typename T>
inline void mm_atg(const T* a, const T* g, T* o, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      T* orow = o + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

template <typename T>
inline void maybe_record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                         typename Tape<T>::BackwardFn fn) {
  Tape<T>* tp = tape_of<T>(inputs);
  if (!tp) return;
  std::vector<int> parents;
  for (const Tensor<T>* t : inputs) parents.push_back(tp->node_of(*t));
  tp->bind(out, tp->record(std::move(parents), std::move(fn)));
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

// floor((in + 2*pad - k) / stride) + 1
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (in + 2 * pad < k)
    throw ShapeError("convolution: input extent " + std::to_string(in) + " with padding " +
                     std::to_string(pad) + " is smaller than kernel " + std::to_string(k));
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
  detail::maybe_record(out, {&a, &b}, [a, b](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(a); n >= 0) detail::axpy(tp.acc_grad(n, a.size()).data(), g.data(), g.size());
    if (int n = tp.node_of(b); n >= 0) detail::axpy(tp.acc_grad(n, b.size()).data(), g.data(), g.size());
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
  detail::maybe_record(out, {&a, &b}, [a, b](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(a); n >= 0) {
      T* ga = tp.acc_grad(n, a.size()).data();
      const T* bv2 = b.values().data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (int n = tp.node_of(b); n >= 0) {
      T* gb = tp.acc_grad(n, b.size()).data();
      const T* av2 = a.values().data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  const T cc = static_cast<T>(c);
  for (std::size_t i = 0; i < x.size(); ++i) ov[i] = xv[i] * cc;
  detail::maybe_record(out, {&x}, [x, cc](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(x); n >= 0) detail::axpy(tp.acc_grad(n, x.size()).data(), g.data(), g.size(), cc);
  });
  return out;
}

// x[..., C] + bias[C]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.dim(x.rank() - 1))
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                     shape_str(x.shape()));
  const std::size_t c = bias.dim(0);
  const std::size_t rows = x.size() / c;
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  const T* bv = bias.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + bv[j];
  detail::maybe_record(out, {&x, &bias}, [x, bias, rows, c](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(x); n >= 0) detail::axpy(tp.acc_grad(n, x.size()).data(), g.data(), g.size());
    if (int n = tp.node_of(bias); n >= 0) {
      T* gb = tp.acc_grad(n, c).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
  return out;
}

// x[B, ...] + m[...] broadcast over the leading dim
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& m) {
  if (x.rank() < 2 || m.size() * x.dim(0) != x.size())
    throw ShapeError("add_rows: " + shape_str(m.shape()) + " does not match trailing dims of " +
                     shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t q = m.size();
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  const T* mv = m.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < q; ++j) ov[b * q + j] = xv[b * q + j] + mv[j];
  detail::maybe_record(out, {&x, &m}, [x, m, batch, q](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(x); n >= 0) detail::axpy(tp.acc_grad(n, x.size()).data(), g.data(), g.size());
    if (int n = tp.node_of(m); n >= 0) {
      T* gm = tp.acc_grad(n, q).data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < q; ++j) gm[j] += g[b * q + j];
    }
  });
  return out;
}

// Tile x[1, ...] to [batch, ...].
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t batch) {
  if (x.rank() < 1 || x.dim(0) != 1)
    throw ShapeError("repeat_batch: leading dim must be 1, got " + shape_str(x.shape()));
  Shape os = x.shape();
  os[0] = batch;
  Tensor<T> out(os);
  const std::size_t q = x.size();
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < q; ++j) ov[b * q + j] = xv[j];
  detail::maybe_record(out, {&x}, [x, batch, q](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(x); n >= 0) {
      T* gx = tp.acc_grad(n, q).data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < q; ++j) gx[j] += g[b * q + j];
    }
  });
  return out;
}

// x[B,C,H,W] + bias[C]
template <typename T>
Tensor<T> add_bias_nchw(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError("add_bias_nchw: bias " + shape_str(bias.shape()) + " vs input " +
                     shape_str(x.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  const T* bv = bias.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      const T bb = bv[ch];
      for (std::size_t i = 0; i < hw; ++i) ov[base + i] = xv[base + i] + bb;
    }
  detail::maybe_record(out, {&x, &bias}, [x, bias, batch, c, hw](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(x); n >= 0) detail::axpy(tp.acc_grad(n, x.size()).data(), g.data(), g.size());
    if (int n = tp.node_of(bias); n >= 0) {
      T* gb = tp.acc_grad(n, c).data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (b * c + ch) * hw;
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += g[base + i];
          gb[ch] += acc;
        }
    }
  });
  return out;
}

// Batched matrix product a[..,m,k] . b[..,k,n]. Leading dims must match
// exactly or be absent on one side (that operand is then shared).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Shape la(a.shape().begin(), a.shape().end() - 2);
  Shape lb(b.shape().begin(), b.shape().end() - 2);
  const bool ab = !la.empty(), bb = !lb.empty();
  if (ab && bb && la != lb)
    throw ShapeError("matmul: batch dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Shape lead = ab ? la : lb;
  const std::size_t groups = shape_numel(lead);
  Shape os = lead;
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(os);
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  T* op = out.values_mut().data();
  for (std::size_t g = 0; g < groups; ++g)
    detail::mm_acc(ap + (ab ? g * m * k : 0), bp + (bb ? g * k * n : 0), op + g * m * n, m, k, n);
  detail::maybe_record(out, {&a, &b}, [a, b, m, k, n, groups, ab, bb](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int na = tp.node_of(a); na >= 0) {
      T* ga = tp.acc_grad(na, a.size()).data();
      const T* bp2 = b.values().data();
      for (std::size_t gi = 0; gi < groups; ++gi)
        detail::mm_gbt(g.data() + gi * m * n, bp2 + (bb ? gi * k * n : 0),
                       ga + (ab ? gi * m * k : 0), m, k, n);
    }
    if (int nb = tp.node_of(b); nb >= 0) {
      T* gb = tp.acc_grad(nb, b.size()).data();
      const T* ap2 = a.values().data();
      for (std::size_t gi = 0; gi < groups; ++gi)
        detail::mm_atg(ap2 + (ab ? gi * m * k : 0), g.data() + gi * m * n,
                       gb + (bb ? gi * k * n : 0), m, k, n);
    }
  });
  return out;
}

// Max-subtracted exponential normalization along one axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      T sum = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        T e = std::exp(xv[base + l * inner] - mx);
        ov[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) ov[base + l * inner] /= sum;
    }
  Tensor<T> y = out.detached();
  detail::maybe_record(out, {&x}, [x, y, len, inner, outer](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      T* gx = tp.acc_grad(n, x.size()).data();
      const T* yv = y.values().data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * yv[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t i = base + l * inner;
            gx[i] += yv[i] * (g[i] - dot);
          }
        }
    }
  });
  return out;
}

// Per-row (last dim) standardization followed by affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::size_t c = x.dim(x.rank() - 1);
  if (gamma.size() != c || beta.size() != c)
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match channel dim of " +
                     shape_str(x.shape()));
  const std::size_t rows = x.size() / c;
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  T* ov = out.values_mut().data();
  const T te = static_cast<T>(eps);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * c;
    T mean = T(0);
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + te);
    for (std::size_t j = 0; j < c; ++j) ov[r * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
  }
  detail::maybe_record(out, {&x, &gamma, &beta}, [x, gamma, rows, c, te](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    const T* xv2 = x.values().data();
    const T* gv2 = gamma.values().data();
    const int nx = tp.node_of(x);
    const int ng = tp.node_of(gamma);
    const int nb = tp.node_of(tp.parents_of(self).size() ? x : x);  // placeholder, replaced below
    (void)nb;
    T* gx = nx >= 0 ? tp.acc_grad(nx, x.size()).data() : nullptr;
    T* gg = ng >= 0 ? tp.acc_grad(ng, c).data() : nullptr;
    // beta is parents_of(self)[2]
    const int nbeta = tp.parents_of(self)[2];
    T* gb = nbeta >= 0 ? tp.acc_grad(nbeta, c).data() : nullptr;
    std::vector<T> xhat(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv2 + r * c;
      const T* grow = g.data() + r * c;
      T mean = T(0);
      for (std::size_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<T>(c);
      T var = T(0);
      for (std::size_t j = 0; j < c; ++j) {
        T d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T inv = T(1) / std::sqrt(var + te);
      T mean_dg = T(0), mean_dgx = T(0);
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (row[j] - mean) * inv;
        T dg = grow[j] * gv2[j];
        mean_dg += dg;
        mean_dgx += dg * xhat[j];
      }
      mean_dg /= static_cast<T>(c);
      mean_dgx /= static_cast<T>(c);
      for (std::size_t j = 0; j < c; ++j) {
        if (gx) gx[r * c + j] += inv * (grow[j] * gv2[j] - mean_dg - xhat[j] * mean_dgx);
        if (gg) gg[j] += grow[j] * xhat[j];
        if (gb) gb[j] += grow[j];
      }
    }
  });
  return out;
}

inline constexpr double kGeluCoef = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

// tanh-approximation GELU; the same constants drive forward and backward.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  const T c0 = static_cast<T>(kGeluCoef), c1 = static_cast<T>(kGeluCubic);
  for (std::size_t i = 0; i < x.size(); ++i) {
    T v = xv[i];
    T t = std::tanh(c0 * (v + c1 * v * v * v));
    ov[i] = T(0.5) * v * (T(1) + t);
  }
  detail::maybe_record(out, {&x}, [x, c0, c1](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      T* gx = tp.acc_grad(n, x.size()).data();
      const T* xv2 = x.values().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        T v = xv2[i];
        T t = std::tanh(c0 * (v + c1 * v * v * v));
        T du = c0 * (T(1) + T(3) * c1 * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    }
  });
  return out;
}

// Size-preserving relabelling of the row-major buffer.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.values()));
  detail::maybe_record(out, {&x}, [x](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      detail::axpy(tp.acc_grad(n, x.size()).data(), g.data(), g.size());
    }
  });
  return out;
}

// General axis permutation; out dim i takes x dim perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: order has wrong length for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid axis order");
    seen[p] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(perm[i]);
  Tensor<T> out(os);
  const auto xst = detail::row_major_strides(x.shape());
  std::vector<std::size_t> sst(r);  // source stride per out axis
  for (std::size_t i = 0; i < r; ++i) sst[i] = xst[perm[i]];
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < out.size(); ++lin) {
    ov[lin] = xv[src];
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < os[a]) {
        src += sst[a];
        break;
      }
      idx[a] = 0;
      src -= sst[a] * (os[a] - 1);
    }
  }
  detail::maybe_record(out, {&x}, [x, os, sst](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      T* gx = tp.acc_grad(n, x.size()).data();
      const std::size_t r2 = os.size();
      std::vector<std::size_t> idx2(r2, 0);
      std::size_t src2 = 0;
      for (std::size_t lin = 0; lin < g.size(); ++lin) {
        gx[src2] += g[lin];
        for (std::size_t a = r2; a-- > 0;) {
          if (++idx2[a] < os[a]) {
            src2 += sst[a];
            break;
          }
          idx2[a] = 0;
          src2 -= sst[a] * (os[a] - 1);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank())
    throw ShapeError("concat: rank/axis mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ShapeError("concat: shapes disagree outside axis: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  Shape os = a.shape();
  os[axis] += b.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t ablk = a.dim(axis) * inner, bblk = b.dim(axis) * inner;
  const std::size_t outer = a.size() / ablk;
  Tensor<T> out(os);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(av + o * ablk, av + (o + 1) * ablk, ov + o * (ablk + bblk));
    std::copy(bv + o * bblk, bv + (o + 1) * bblk, ov + o * (ablk + bblk) + ablk);
  }
  detail::maybe_record(out, {&a, &b}, [a, b, outer, ablk, bblk](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (int n = tp.node_of(a); n >= 0) {
      T* ga = tp.acc_grad(n, a.size()).data();
      for (std::size_t o = 0; o < outer; ++o)
        detail::axpy(ga + o * ablk, g.data() + o * (ablk + bblk), ablk);
    }
    if (int n = tp.node_of(b); n >= 0) {
      T* gb = tp.acc_grad(n, b.size()).data();
      for (std::size_t o = 0; o < outer; ++o)
        detail::axpy(gb + o * bblk, g.data() + o * (ablk + bblk) + ablk, bblk);
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis))
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range on axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  Shape os = x.shape();
  os[axis] = len;
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t xblk = x.dim(axis) * inner, oblk = len * inner;
  const std::size_t outer = x.size() / xblk;
  Tensor<T> out(os);
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(xv + o * xblk + start * inner, xv + o * xblk + start * inner + oblk, ov + o * oblk);
  detail::maybe_record(out, {&x}, [x, outer, xblk, oblk, start, inner](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      T* gx = tp.acc_grad(n, x.size()).data();
      for (std::size_t o = 0; o < outer; ++o)
        detail::axpy(gx + o * xblk + start * inner, g.data() + o * oblk, oblk);
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  detail::maybe_record(out, {&x}, [x](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const T g = tp.out_grad(self)[0];
      T* gx = tp.acc_grad(n, x.size()).data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    }
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  const T inv = T(1) / static_cast<T>(x.size());
  Tensor<T> out = Tensor<T>::scalar(s * inv);
  detail::maybe_record(out, {&x}, [x, inv](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const T g = tp.out_grad(self)[0] * inv;
      T* gx = tp.acc_grad(n, x.size()).data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    }
  });
  return out;
}

// Depth-wise convolution: output channel c*M + j reads only input channel c.
// x[B,C,H,W], kernel[C*M,1,kh,kw] -> [B,C*M,H',W'].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                           std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("depthwise_conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(1) != 1)
    throw ShapeError("depthwise_conv2d: kernel must be [C*M,1,kh,kw], got " + shape_str(kernel.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (oc % c != 0)
    throw ConfigError("depthwise_conv2d: kernel channels " + std::to_string(oc) +
                      " not a multiple of input channels " + std::to_string(c));
  const std::size_t mult = oc / c;
  const std::size_t oh = conv_out_extent(h, kh, stride, padding);
  const std::size_t ow = conv_out_extent(w, kw, stride, padding);
  Tensor<T> out(Shape{batch, oc, oh, ow});
  const T* xv = x.values().data();
  const T* kv = kernel.values().data();
  T* ov = out.values_mut().data();
  const long long p = static_cast<long long>(padding);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < mult; ++j) {
        const std::size_t o = ch * mult + j;
        const T* kbase = kv + o * kh * kw;
        const T* xbase = xv + (b * c + ch) * h * w;
        T* obase = ov + (b * oc + o) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            T acc = T(0);
            for (std::size_t u = 0; u < kh; ++u) {
              const long long iy = static_cast<long long>(oy * stride + u) - p;
              if (iy < 0 || iy >= static_cast<long long>(h)) continue;
              for (std::size_t v = 0; v < kw; ++v) {
                const long long ix = static_cast<long long>(ox * stride + v) - p;
                if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                acc += xbase[iy * w + ix] * kbase[u * kw + v];
              }
            }
            obase[oy * ow + ox] = acc;
          }
      }
  detail::maybe_record(out, {&x, &kernel},
                       [x, kernel, batch, c, h, w, oc, kh, kw, mult, oh, ow, stride,
                        p](Tape<T>& tp, int self) {
    const auto& g = tp.out_grad(self);
    const int nx = tp.node_of(x);
    const int nk = tp.node_of(kernel);
    T* gx = nx >= 0 ? tp.acc_grad(nx, x.size()).data() : nullptr;
    T* gk = nk >= 0 ? tp.acc_grad(nk, kernel.size()).data() : nullptr;
    if (!gx && !gk) return;
    const T* xv2 = x.values().data();
    const T* kv2 = kernel.values().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < mult; ++j) {
          const std::size_t o = ch * mult + j;
          const T* kbase = kv2 + o * kh * kw;
          const T* xbase = xv2 + (b * c + ch) * h * w;
          T* gxbase = gx ? gx + (b * c + ch) * h * w : nullptr;
          T* gkbase = gk ? gk + o * kh * kw : nullptr;
          const T* gbase = g.data() + (b * oc + o) * oh * ow;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const T go = gbase[oy * ow + ox];
              for (std::size_t u = 0; u < kh; ++u) {
                const long long iy = static_cast<long long>(oy * stride + u) - p;
                if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const long long ix = static_cast<long long>(ox * stride + v) - p;
                  if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                  if (gxbase) gxbase[iy * w + ix] += go * kbase[u * kw + v];
                  if (gkbase) gkbase[u * kw + v] += go * xbase[iy * w + ix];
                }
              }
            }
        }
  });
  return out;
}

// Unfold sliding windows: x[B,C,H,W] -> [B, H'*W', C*kh*kw] (zero padded).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("im2col: input must be [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_out_extent(h, kh, stride, padding);
  const std::size_t ow = conv_out_extent(w, kw, stride, padding);
  const std::size_t patch = c * kh * kw;
  Tensor<T> out(Shape{batch, oh * ow, patch});
  const T* xv = x.values().data();
  T* ov = out.values_mut().data();
  const long long p = static_cast<long long>(padding);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* row = ov + (b * oh * ow + oy * ow + ox) * patch;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* xbase = xv + (b * c + ch) * h * w;
          for (std::size_t u = 0; u < kh; ++u) {
            const long long iy = static_cast<long long>(oy * stride + u) - p;
            for (std::size_t v = 0; v < kw; ++v) {
              const long long ix = static_cast<long long>(ox * stride + v) - p;
              const bool in = iy >= 0 && iy < static_cast<long long>(h) && ix >= 0 &&
                              ix < static_cast<long long>(w);
              row[ch * kh * kw + u * kw + v] = in ? xbase[iy * w + ix] : T(0);
            }
          }
        }
      }
  detail::maybe_record(out, {&x},
                       [x, batch, c, h, w, kh, kw, oh, ow, stride, p](Tape<T>& tp, int self) {
    if (int n = tp.node_of(x); n >= 0) {
      const auto& g = tp.out_grad(self);
      T* gx = tp.acc_grad(n, x.size()).data();
      const std::size_t patch = c * kh * kw;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T* row = g.data() + (b * oh * ow + oy * ow + ox) * patch;
            for (std::size_t ch = 0; ch < c; ++ch) {
              T* gxbase = gx + (b * c + ch) * h * w;
              for (std::size_t u = 0; u < kh; ++u) {
                const long long iy = static_cast<long long>(oy * stride + u) - p;
                if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const long long ix = static_cast<long long>(ox * stride + v) - p;
                  if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                  gxbase[iy * w + ix] += row[ch * kh * kw + u * kw + v];
                }
              }
            }
          }
    }
  });
  return out;
}

}  // namespace pit
