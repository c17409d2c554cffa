#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/rng.hpp"
#include "tfs/tensor.hpp"

// Differentiable tensor operations. Reductions accumulate in double.
namespace tfs::ops {

namespace detail {

template <typename T>
inline void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

template <typename T>
inline void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Kernels accumulate in T in a fixed order (row-wise axpy), which keeps them
// vectorizable and bit-reproducible.

// out[n×m] (+)= a[n×k] · b[k×m]
template <typename T>
inline void gemm_nn(std::span<const T> a, std::span<const T> b,
                    std::span<T> out, std::size_t n, std::size_t k,
                    std::size_t m, bool accumulate) {
  std::vector<T> row(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(row.begin(), row.end(), T{0});
    const T* ai = a.data() + i * k;
    T* r = row.data();
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) r[j] += av * bp[j];
    }
    T* oi = out.data() + i * m;
    if (accumulate) {
      for (std::size_t j = 0; j < m; ++j) oi[j] += r[j];
    } else {
      std::copy(row.begin(), row.end(), oi);
    }
  }
}

// out[n×k] += g[n×m] · b[k×m]ᵀ
template <typename T>
inline void gemm_nt_acc(std::span<const T> g, std::span<const T> b,
                        std::span<T> out, std::size_t n, std::size_t k,
                        std::size_t m) {
  std::vector<T> bt(m * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  }
  gemm_nn<T>(g, bt, out, n, m, k, true);
}

// out[k×m] += a[n×k]ᵀ · g[n×m]
template <typename T>
inline void gemm_tn_acc(std::span<const T> a, std::span<const T> g,
                        std::span<T> out, std::size_t n, std::size_t k,
                        std::size_t m) {
  std::vector<T> acc(k * m, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a.data() + i * k;
    const T* gi = g.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      T* ap = acc.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) ap[j] += av * gi[j];
    }
  }
  for (std::size_t q = 0; q < k * m; ++q) out[q] += acc[q];
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  if (s.n == 0) throw DimensionError(std::string(op) + ": empty axis");
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

inline double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

// [n×k] · [k×m] -> [n×m]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(n * m);
  detail::gemm_nn<T>(a.data(), b.data(), out, n, k, m, false);
  return make_op_result<T>(
      {n, m}, std::move(out), {a, b},
      [n, k, m](tfs::detail::Node<T>& self) {
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        if (auto ga = tfs::detail::parent_grad(self, 0); !ga.empty()) {
          detail::gemm_nt_acc<T>(self.grad, B, ga, n, k, m);
        }
        if (auto gb = tfs::detail::parent_grad(self, 1); !gb.empty()) {
          detail::gemm_tn_acc<T>(A, self.grad, gb, n, k, m);
        }
      },
      "matmul");
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_op_result<T>(
      {c, r}, std::move(out), {a},
      [r, c](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
      },
      "transpose");
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_op_result<T>(
      std::move(shape), std::move(out), {a},
      [](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op_result<T>(
      a.shape(), std::move(out), {a, b},
      [](tfs::detail::Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
          auto g = tfs::detail::parent_grad(self, p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op_result<T>(
      a.shape(), std::move(out), {a, b},
      [](tfs::detail::Node<T>& self) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        if (auto g = tfs::detail::parent_grad(self, 0); !g.empty())
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
        if (auto g = tfs::detail::parent_grad(self, 1); !g.empty())
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
      },
      "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, float s) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_op_result<T>(
      a.shape(), std::move(out), {a},
      [s](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
      },
      "scale");
}

// x[..., m] + b[m], broadcast over leading dimensions.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  detail::require_rank(b, 1, "add_bias");
  const std::size_t m = b.dim(0);
  if (x.shape().back() != m) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(x.numel());
  const auto xv = x.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % m];
  return make_op_result<T>(
      x.shape(), std::move(out), {x, b},
      [m](tfs::detail::Node<T>& self) {
        if (auto g = tfs::detail::parent_grad(self, 0); !g.empty())
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        if (auto g = tfs::detail::parent_grad(self, 1); !g.empty()) {
          std::vector<double> acc(m, 0.0);
          for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i % m] += self.grad[i];
          for (std::size_t j = 0; j < m; ++j) g[j] += static_cast<T>(acc[j]);
        }
      },
      "add_bias");
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0 ? x[i] : T{0};
  return make_op_result<T>(
      a.shape(), std::move(out), {a},
      [](tfs::detail::Node<T>& self) {
        const auto& x = self.parents[0]->data;
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0) g[i] += self.grad[i];
      },
      "relu");
}

// tanh approximation of GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr double kC = 0.79788456080286535588;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  return make_op_result<T>(
      a.shape(), std::move(out), {a},
      [](tfs::detail::Node<T>& self) {
        const auto& x = self.parents[0]->data;
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = x[i];
          const double t = std::tanh(kC * (v + kA * v * v * v));
          const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
          g[i] += static_cast<T>(self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt));
        }
      },
      "gelu");
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(detail::sigmoid(x[i]));
  return make_op_result<T>(
      a.shape(), std::move(out), {a},
      [](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = self.data[i];
          g[i] += self.grad[i] * s * (T{1} - s);
        }
      },
      "sigmoid");
}

// Normalizes over the last dimension, then applies gain and bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, float eps = 1e-5f) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias must have shape [" +
                         std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = static_cast<T>(h);
      out[r * d + j] = static_cast<T>(h * gv[j] + bv[j]);
    }
  }
  return make_op_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          tfs::detail::Node<T>& self) {
        const auto& gv = self.parents[1]->data;
        const auto& dy = self.grad;
        if (auto gx = tfs::detail::parent_grad(self, 0); !gx.empty()) {
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = static_cast<double>(dy[r * d + j]) * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = static_cast<double>(dy[r * d + j]) * gv[j];
              gx[r * d + j] += static_cast<T>(
                  inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h));
            }
          }
        }
        auto gg = tfs::detail::parent_grad(self, 1);
        auto gb = tfs::detail::parent_grad(self, 2);
        if (!gg.empty() || !gb.empty()) {
          std::vector<double> sg(d, 0.0), sb(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              sg[j] += static_cast<double>(dy[r * d + j]) * xhat[r * d + j];
              sb[j] += dy[r * d + j];
            }
          }
          for (std::size_t j = 0; j < d; ++j) {
            if (!gg.empty()) gg[j] += static_cast<T>(sg[j]);
            if (!gb.empty()) gb[j] += static_cast<T>(sb[j]);
          }
        }
      },
      "layer_norm");
}

// Numerically stable softmax along `axis` (negative counts from the end).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1) {
  const auto s = detail::split_axis(x.shape(), axis, "softmax");
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max<double>(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[base + j * s.inner] - mx);
      for (std::size_t j = 0; j < s.n; ++j)
        out[base + j * s.inner] = static_cast<T>(std::exp(xv[base + j * s.inner] - mx) / z);
    }
  }
  return make_op_result<T>(
      x.shape(), std::move(out), {x},
      [s](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const auto& y = self.data;
        const auto& dy = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
              const std::size_t q = base + j * s.inner;
              dot += static_cast<double>(y[q]) * dy[q];
            }
            for (std::size_t j = 0; j < s.n; ++j) {
              const std::size_t q = base + j * s.inner;
              g[q] += static_cast<T>(y[q] * (dy[q] - dot));
            }
          }
        }
      },
      "softmax");
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, int axis = -1) {
  const auto s = detail::split_axis(x.shape(), axis, "log_softmax");
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max<double>(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[base + j * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < s.n; ++j)
        out[base + j * s.inner] = static_cast<T>(xv[base + j * s.inner] - lse);
    }
  }
  return make_op_result<T>(
      x.shape(), std::move(out), {x},
      [s](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const auto& y = self.data;
        const auto& dy = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) total += dy[base + j * s.inner];
            for (std::size_t j = 0; j < s.n; ++j) {
              const std::size_t q = base + j * s.inner;
              g[q] += static_cast<T>(dy[q] - std::exp(static_cast<double>(y[q])) * total);
            }
          }
        }
      },
      "log_softmax");
}

// Row lookup: weight[V×d], ids -> [ids.size()×d].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& weight, std::span<const std::int32_t> ids) {
  detail::require_rank(weight, 2, "embedding");
  const std::size_t v = weight.dim(0), d = weight.dim(1);
  if (ids.empty()) throw DimensionError("embedding: no ids");
  std::vector<T> out(ids.size() * d);
  const auto w = weight.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) +
                           " outside table of " + std::to_string(v));
    }
    std::copy_n(w.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_op_result<T>(
      {ids.size(), d}, std::move(out), {weight},
      [d, saved = std::move(saved)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < saved.size(); ++i) {
          T* gr = g.data() + static_cast<std::size_t>(saved[i]) * d;
          for (std::size_t j = 0; j < d; ++j) gr[j] += self.grad[i * d + j];
        }
      },
      "embedding");
}

// Selects rows of a rank-2 tensor (rows may repeat).
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: no rows selected");
  std::vector<T> out(rows.size() * d);
  const auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("gather_rows: row out of range");
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return make_op_result<T>(
      {rows.size(), d}, std::move(out), {x},
      [d, saved = std::move(saved)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < saved.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += self.grad[i * d + j];
      },
      "gather_rows");
}

// Multi-head scaled dot-product self-attention.
//   qkv:      [batch*seq × 3*hidden], columns laid out as [Q | K | V]
//   key_mask: batch*seq flags, nonzero = attendable position
// Returns [batch*seq × hidden]. Masked keys receive exactly zero weight.
// When `probs_out` is given it receives the weights, laid out
// [batch][head][query][key].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& qkv, std::span<const std::uint8_t> key_mask,
                        std::size_t batch, std::size_t seq, std::size_t heads,
                        std::vector<T>* probs_out = nullptr) {
  detail::require_rank(qkv, 2, "attention");
  if (qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0 || heads == 0 ||
      (qkv.dim(1) / 3) % heads != 0 || key_mask.size() != batch * seq) {
    throw DimensionError("attention: inconsistent shapes " + shape_str(qkv.shape()));
  }
  const std::size_t hidden = qkv.dim(1) / 3;
  const std::size_t dh = hidden / heads;
  const std::size_t stride = 3 * hidden;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto x = qkv.data();
  std::vector<T> probs(batch * heads * seq * seq, T{0});
  std::vector<T> out(batch * seq * hidden, T{0});
  std::vector<double> scores(seq);
  std::vector<double> acc(dh);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* mask = key_mask.data() + b * seq;
    bool any = false;
    for (std::size_t s = 0; s < seq; ++s) any = any || mask[s] != 0;
    if (!any) throw DimensionError("attention: sequence with no attendable keys");
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < seq; ++t) {
        const T* q = x.data() + (b * seq + t) * stride + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < seq; ++s) {
          if (!mask[s]) continue;
          const T* k = x.data() + (b * seq + s) * stride + hidden + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += static_cast<double>(q[j]) * k[j];
          scores[s] = dot * inv_sqrt;
          mx = std::max(mx, scores[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < seq; ++s) {
          if (!mask[s]) continue;
          scores[s] = std::exp(scores[s] - mx);
          z += scores[s];
        }
        T* p = probs.data() + ((b * heads + h) * seq + t) * seq;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t s = 0; s < seq; ++s) {
          if (!mask[s]) continue;
          p[s] = static_cast<T>(scores[s] / z);
          const T* v = x.data() + (b * seq + s) * stride + 2 * hidden + h * dh;
          for (std::size_t j = 0; j < dh; ++j) acc[j] += static_cast<double>(p[s]) * v[j];
        }
        T* o = out.data() + (b * seq + t) * hidden + h * dh;
        for (std::size_t j = 0; j < dh; ++j) o[j] = static_cast<T>(acc[j]);
      }
    }
  }
  if (probs_out != nullptr) *probs_out = probs;
  return make_op_result<T>(
      {batch * seq, hidden}, std::move(out), {qkv},
      [batch, seq, heads, hidden, dh, stride, inv_sqrt,
       probs = std::move(probs)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const auto& x = self.parents[0]->data;
        const auto& dout = self.grad;
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < seq; ++t) {
              const T* p = probs.data() + ((b * heads + h) * seq + t) * seq;
              const T* dot_ = dout.data() + (b * seq + t) * hidden + h * dh;
              const T* q = x.data() + (b * seq + t) * stride + h * dh;
              T* dq = g.data() + (b * seq + t) * stride + h * dh;
              double weighted = 0.0;
              for (std::size_t s = 0; s < seq; ++s) {
                if (p[s] == T{0}) {
                  dp[s] = 0.0;
                  continue;
                }
                const std::size_t row = (b * seq + s) * stride;
                const T* v = x.data() + row + 2 * hidden + h * dh;
                T* dv = g.data() + row + 2 * hidden + h * dh;
                double d = 0.0;
                for (std::size_t j = 0; j < dh; ++j) {
                  d += static_cast<double>(dot_[j]) * v[j];
                  dv[j] += p[s] * dot_[j];
                }
                dp[s] = d;
                weighted += p[s] * d;
              }
              for (std::size_t s = 0; s < seq; ++s) {
                if (p[s] == T{0}) continue;
                const double ds = p[s] * (dp[s] - weighted) * inv_sqrt;
                const std::size_t row = (b * seq + s) * stride;
                const T* k = x.data() + row + hidden + h * dh;
                T* dk = g.data() + row + hidden + h * dh;
                for (std::size_t j = 0; j < dh; ++j) {
                  dq[j] += static_cast<T>(ds * k[j]);
                  dk[j] += static_cast<T>(ds * q[j]);
                }
              }
            }
          }
        }
      },
      "attention");
}

// Inverted dropout: kept entries are scaled by 1/(1-p).
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, float p, Rng& rng) {
  if (p < T{0} || p >= 1.0f) throw DimensionError("dropout: rate must be in [0,1)");
  if (p == T{0}) return x;
  const T keep_scale = T{1} / (T{1} - static_cast<T>(p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? T{0} : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return make_op_result<T>(
      x.shape(), std::move(out), {x},
      [mask = std::move(mask)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double total = 0.0;
  for (const T v : x.data()) total += v;
  return make_op_result<T>(
      {1}, {static_cast<T>(total)}, {x},
      [](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        for (T& v : g) v += self.grad[0];
      },
      "sum");
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double total = 0.0;
  for (const T v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  return make_op_result<T>(
      {1}, {static_cast<T>(total / n)}, {x},
      [n](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const T share = static_cast<T>(self.grad[0] / n);
        for (T& v : g) v += share;
      },
      "mean");
}

// Mean over rows of -log_probs[r, target[r]].
template <typename T>
BasicTensor<T> nll_loss(const BasicTensor<T>& log_probs, std::span<const int> targets) {
  detail::require_rank(log_probs, 2, "nll_loss");
  const std::size_t rows = log_probs.dim(0), k = log_probs.dim(1);
  if (targets.size() != rows) throw DimensionError("nll_loss: target count mismatch");
  const auto lp = log_probs.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw DataError("nll_loss: target " + std::to_string(targets[r]) +
                      " outside [0," + std::to_string(k) + ")");
    }
    total -= lp[r * k + static_cast<std::size_t>(targets[r])];
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return make_op_result<T>(
      {1}, {static_cast<T>(total / static_cast<double>(rows))}, {log_probs},
      [rows, k, saved = std::move(saved)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const T share = self.grad[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          g[r * k + static_cast<std::size_t>(saved[r])] -= share;
      },
      "nll_loss");
}

// Mean over rows of KL(p_r || q_r) = Σ p (log p − log q). `p` is treated as
// a constant: no gradient flows into it. Zero-probability terms contribute 0.
// Both rows are renormalized in double (p by its sum, log_q by its
// log-sum-exp) so float rounding in either argument cancels to first order.
template <typename T>
BasicTensor<T> kl_divergence(const BasicTensor<T>& p, const BasicTensor<T>& log_q) {
  detail::require_same_shape(p, log_q, "kl_divergence");
  const std::size_t k = p.shape().back();
  const std::size_t rows = p.numel() / k;
  const auto pv = p.data(), lq = log_q.data();
  std::vector<double> p_norm(p.numel());
  std::vector<double> q_norm(p.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double row_sum = 0.0;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = pv[r * k + j];
      if (!(pj >= 0.0)) throw DistributionError("kl_divergence: negative probability");
      row_sum += pj;
      mx = std::max<double>(mx, lq[r * k + j]);
    }
    if (std::abs(row_sum - 1.0) > 1e-5) {
      throw DistributionError("kl_divergence: row " + std::to_string(r) +
                              " sums to " + std::to_string(row_sum));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lq[r * k + j] - mx);
    const double lse = mx + std::log(z);
    double row_kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t q = r * k + j;
      p_norm[q] = pv[q] / row_sum;
      q_norm[q] = std::exp(lq[q] - lse);
      if (p_norm[q] > 0.0) row_kl += p_norm[q] * (std::log(p_norm[q]) - (lq[q] - lse));
    }
    total += row_kl;
  }
  return make_op_result<T>(
      {1}, {static_cast<T>(total / static_cast<double>(rows))}, {log_q},
      [rows, p_norm = std::move(p_norm), q_norm = std::move(q_norm)](
          tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const double share = self.grad[0] / static_cast<double>(rows);
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += static_cast<T>(share * (q_norm[i] - p_norm[i]));
      },
      "kl_divergence");
}

// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, std::span<const float> targets) {
  if (targets.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: target count mismatch");
  }
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    total += detail::softplus(z[i]) - static_cast<double>(targets[i]) * z[i];
  }
  const double n = static_cast<double>(targets.size());
  std::vector<T> saved(targets.begin(), targets.end());
  return make_op_result<T>(
      {1}, {static_cast<T>(total / n)}, {logits},
      [n, saved = std::move(saved)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const auto& z = self.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += static_cast<T>(self.grad[0] * (detail::sigmoid(z[i]) - saved[i]) / n);
        }
      },
      "bce_with_logits");
}

// Mean over entries of KL(Bernoulli(p) || Bernoulli(sigmoid(logit))). `p` is
// a constant target.
template <typename T>
BasicTensor<T> bernoulli_kl_with_logits(std::span<const float> p, const BasicTensor<T>& logits) {
  if (p.size() != logits.numel()) {
    throw DimensionError("bernoulli_kl_with_logits: size mismatch");
  }
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    if (pi < 0.0 || pi > 1.0) {
      throw DistributionError("bernoulli_kl_with_logits: probability outside [0,1]");
    }
    // log σ(z) = −softplus(−z), log(1−σ(z)) = −softplus(z)
    double term = 0.0;
    if (pi > 0.0) term += pi * (std::log(pi) + detail::softplus(-z[i]));
    if (pi < 1.0) term += (1.0 - pi) * (std::log1p(-pi) + detail::softplus(z[i]));
    total += term;
  }
  const double n = static_cast<double>(p.size());
  std::vector<T> saved(p.begin(), p.end());
  return make_op_result<T>(
      {1}, {static_cast<T>(total / n)}, {logits},
      [n, saved = std::move(saved)](tfs::detail::Node<T>& self) {
        auto g = tfs::detail::parent_grad(self, 0);
        const auto& z = self.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += static_cast<T>(self.grad[0] * (detail::sigmoid(z[i]) - saved[i]) / n);
        }
      },
      "bernoulli_kl_with_logits");
}

}  // namespace tfs::ops
