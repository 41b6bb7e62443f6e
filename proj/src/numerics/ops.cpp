#include "ctdet/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace ctdet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
MapC<T> cmap(const T* p, std::size_t r, std::size_t c) {
  return MapC<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MapM<T> mmap(T* p, std::size_t r, std::size_t c) {
  return MapM<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
using NodeT = detail::Node<T>;

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  mmap(out.data(), m, n).noalias() =
      cmap(a.data().data(), m, k) * cmap(b.data().data(), k, n);
  return make_op_result<T>(
      {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto dc = cmap(self.grad.data(), m, n);
        if (pa.requires_grad) {
          pa.ensure_grad();
          mmap(pa.grad.data(), m, k).noalias() +=
              dc * cmap(pb.value.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          mmap(pb.grad.data(), k, n).noalias() +=
              cmap(pa.value.data(), m, k).transpose() * dc;
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  mmap(out.data(), n, m) = cmap(a.data().data(), m, n).transpose();
  return make_op_result<T>({n, m}, std::move(out), {a.node()},
                           [m, n](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             mmap(p.grad.data(), m, n) +=
                                 cmap(self.grad.data(), n, m).transpose();
                           });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                           [](NodeT<T>& self) {
                             for (auto& p : self.parents) {
                               if (!p->requires_grad) continue;
                               p->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p->grad[i] += self.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                           [](NodeT<T>& self) {
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (pa.requires_grad) {
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 pa.grad[i] += self.grad[i];
                             }
                             if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 pb.grad[i] -= self.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                           [](NodeT<T>& self) {
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (pa.requires_grad) {
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 pa.grad[i] += self.grad[i] * pb.value[i];
                             }
                             if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 pb.grad[i] += self.grad[i] * pa.value[i];
                             }
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_op_result<T>(a.shape(), std::move(out), {a.node()},
                           [s](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               p.grad[i] += self.grad[i] * s;
                           });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = x.shape().back();
  if (bias.numel() != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % c];
  return make_op_result<T>(x.shape(), std::move(out), {x.node(), bias.node()},
                           [c](NodeT<T>& self) {
                             auto& px = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (px.requires_grad) {
                               px.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 px.grad[i] += self.grad[i];
                             }
                             if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 pb.grad[i % c] += self.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_op_result<T>(x.shape(), std::move(out), {x.node()},
                           [](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  return make_op_result<T>(std::move(shape), x.values(), {x.node()},
                           [](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               p.grad[i] += self.grad[i];
                           });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T* o = out.data() + i * n;
    T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_op_result<T>(x.shape(), std::move(out), {x.node()},
                           [m, n](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               const T* y = self.value.data() + i * n;
                               const T* g = self.grad.data() + i * n;
                               T dot = 0;
                               for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
                               T* d = p.grad.data() + i * n;
                               for (std::size_t j = 0; j < n; ++j)
                                 d[j] += y[j] * (g[j] - dot);
                             }
                           });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  std::vector<T> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j) * x.at(i, j);
    norms[i] = std::sqrt(s);
    T inv = norms[i] > T(0) ? T(1) / norms[i] : T(1);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) * inv;
  }
  return make_op_result<T>(
      x.shape(), std::move(out), {x.node()},
      [m, n, norms = std::move(norms)](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const T* y = self.value.data() + i * n;
          const T* g = self.grad.data() + i * n;
          T* d = p.grad.data() + i * n;
          if (norms[i] <= T(0)) {
            for (std::size_t j = 0; j < n; ++j) d[j] += g[j];
            continue;
          }
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
          for (std::size_t j = 0; j < n; ++j) d[j] += (g[j] - y[j] * dot) / norms[i];
        }
      });
}

template <typename T>
Tensor<T> neg_sq_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "neg_sq_distance");
  require_rank(b, 2, "neg_sq_distance");
  const std::size_t m = a.dim(0), n = b.dim(0), c = a.dim(1);
  if (b.dim(1) != c) {
    throw DimensionError("neg_sq_distance: column mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < c; ++k) {
        T d = a.at(i, k) - b.at(j, k);
        s += d * d;
      }
      out[i * n + j] = -s;
    }
  }
  return make_op_result<T>({m, n}, std::move(out), {a.node(), b.node()},
                           [m, n, c](NodeT<T>& self) {
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (pa.requires_grad) pa.ensure_grad();
                             if (pb.requires_grad) pb.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 T g = self.grad[i * n + j];
                                 if (g == T(0)) continue;
                                 for (std::size_t k = 0; k < c; ++k) {
                                   T d = pa.value[i * c + k] - pb.value[j * c + k];
                                   if (pa.requires_grad) pa.grad[i * c + k] -= T(2) * d * g;
                                   if (pb.requires_grad) pb.grad[j * c + k] += T(2) * d * g;
                                 }
                               }
                             }
                           });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  std::vector<typename Tensor<T>::NodePtr> parents;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
    parents.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op_result<T>({rows, c}, std::move(out), std::move(parents),
                           [](NodeT<T>& self) {
                             std::size_t off = 0;
                             for (auto& p : self.parents) {
                               const std::size_t len = p->value.size();
                               if (p->requires_grad) {
                                 p->ensure_grad();
                                 for (std::size_t i = 0; i < len; ++i)
                                   p->grad[i] += self.grad[off + i];
                               }
                               off += len;
                             }
                           });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), ca = a.dim(1), cb = b.dim(1), n = ca + cb;
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * n);
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * n + ca);
  }
  return make_op_result<T>({m, n}, std::move(out), {a.node(), b.node()},
                           [m, ca, cb, n](NodeT<T>& self) {
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (pa.requires_grad) {
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < ca; ++j)
                                   pa.grad[i * ca + j] += self.grad[i * n + j];
                             }
                             if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < cb; ++j)
                                   pb.grad[i * cb + j] += self.grad[i * n + ca + j];
                             }
                           });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: invalid range [" + std::to_string(begin) +
                         ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * c, x.data().begin() + end * c);
  return make_op_result<T>({end - begin, c}, std::move(out), {x.node()},
                           [begin, c](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               p.grad[begin * c + i] += self.grad[i];
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_op_result<T>({1}, std::vector<T>{s}, {x.node()},
                           [](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (auto& g : p.grad) g += self.grad[0];
                           });
}

std::size_t pooled_extent(std::size_t in, int kernel, int stride, bool ceil_mode) {
  if (kernel <= 0 || stride <= 0) {
    throw ParameterError("pooling kernel and stride must be positive (kernel=" +
                         std::to_string(kernel) + ", stride=" +
                         std::to_string(stride) + ")");
  }
  const long n = static_cast<long>(in), k = kernel, s = stride;
  if (!ceil_mode) {
    if (k > n) {
      throw ParameterError("pooling kernel " + std::to_string(kernel) +
                           " exceeds input extent " + std::to_string(in) +
                           " with ceil_mode off");
    }
    return static_cast<std::size_t>((n - k) / s + 1);
  }
  // ceil((n - k) / s) + 1, never starting a window outside the input.
  long span = n - k;
  long out = span <= 0 ? 1 : (span + s - 1) / s + 1;
  if ((out - 1) * s >= n) --out;
  return static_cast<std::size_t>(std::max(out, 1L));
}

namespace {

// Output-to-input window bookkeeping shared by max and avg pooling.
struct PoolGeometry {
  std::size_t h, w, c, u, v;
  int kernel, stride;
  std::size_t row_begin(std::size_t i) const { return i * stride; }
  std::size_t row_end(std::size_t i) const {
    return std::min(h, i * stride + static_cast<std::size_t>(kernel));
  }
  std::size_t col_begin(std::size_t j) const { return j * stride; }
  std::size_t col_end(std::size_t j) const {
    return std::min(w, j * stride + static_cast<std::size_t>(kernel));
  }
};

template <typename T>
PoolGeometry pool_geometry(const Tensor<T>& x, int kernel, int stride, bool ceil_mode) {
  require_rank(x, 3, "spatial_pool");
  PoolGeometry g{x.dim(0), x.dim(1), x.dim(2), 0, 0, kernel, stride};
  g.u = pooled_extent(g.h, kernel, stride, ceil_mode);
  g.v = pooled_extent(g.w, kernel, stride, ceil_mode);
  return g;
}

}  // namespace

template <typename T>
Tensor<T> spatial_max_pool(const Tensor<T>& x, int kernel, int stride, bool ceil_mode) {
  const PoolGeometry g = pool_geometry(x, kernel, stride, ceil_mode);
  std::vector<T> out(g.u * g.v * g.c);
  std::vector<std::size_t> argmax(out.size());
  const T* in = x.data().data();
  for (std::size_t i = 0; i < g.u; ++i) {
    for (std::size_t j = 0; j < g.v; ++j) {
      for (std::size_t ch = 0; ch < g.c; ++ch) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        // Row-major scan with strict '>' keeps the first maximum.
        for (std::size_t r = g.row_begin(i); r < g.row_end(i); ++r) {
          for (std::size_t s = g.col_begin(j); s < g.col_end(j); ++s) {
            const std::size_t idx = (r * g.w + s) * g.c + ch;
            if (in[idx] > best) {
              best = in[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (i * g.v + j) * g.c + ch;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return make_op_result<T>({g.u, g.v, g.c}, std::move(out), {x.node()},
                           [argmax = std::move(argmax)](NodeT<T>& self) {
                             auto& p = *self.parents[0];
                             p.ensure_grad();
                             for (std::size_t o = 0; o < argmax.size(); ++o)
                               p.grad[argmax[o]] += self.grad[o];
                           });
}

template <typename T>
Tensor<T> spatial_avg_pool(const Tensor<T>& x, int kernel, int stride, bool ceil_mode) {
  const PoolGeometry g = pool_geometry(x, kernel, stride, ceil_mode);
  std::vector<T> out(g.u * g.v * g.c, T(0));
  const T* in = x.data().data();
  for (std::size_t i = 0; i < g.u; ++i) {
    for (std::size_t j = 0; j < g.v; ++j) {
      const T count = static_cast<T>((g.row_end(i) - g.row_begin(i)) *
                                     (g.col_end(j) - g.col_begin(j)));
      T* o = out.data() + (i * g.v + j) * g.c;
      for (std::size_t r = g.row_begin(i); r < g.row_end(i); ++r)
        for (std::size_t s = g.col_begin(j); s < g.col_end(j); ++s)
          for (std::size_t ch = 0; ch < g.c; ++ch) o[ch] += in[(r * g.w + s) * g.c + ch];
      for (std::size_t ch = 0; ch < g.c; ++ch) o[ch] /= count;
    }
  }
  return make_op_result<T>(
      {g.u, g.v, g.c}, std::move(out), {x.node()}, [g](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < g.u; ++i) {
          for (std::size_t j = 0; j < g.v; ++j) {
            const T count = static_cast<T>((g.row_end(i) - g.row_begin(i)) *
                                           (g.col_end(j) - g.col_begin(j)));
            const T* go = self.grad.data() + (i * g.v + j) * g.c;
            for (std::size_t r = g.row_begin(i); r < g.row_end(i); ++r)
              for (std::size_t s = g.col_begin(j); s < g.col_end(j); ++s)
                for (std::size_t ch = 0; ch < g.c; ++ch)
                  p.grad[(r * g.w + s) * g.c + ch] += go[ch] / count;
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::size_t k = w.dim(0), cout = w.dim(3);
  if (w.dim(1) != k) throw DimensionError("conv2d: kernel must be square, got " + shape_str(w.shape()));
  if (k % 2 == 0) throw ParameterError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (w.dim(2) != cin) {
    throw DimensionError("conv2d: channel mismatch between input " +
                         shape_str(x.shape()) + " and weights " +
                         shape_str(w.shape()));
  }
  if (stride <= 0 || padding < 0) {
    throw ParameterError("conv2d: stride must be positive and padding nonnegative");
  }
  const long ph = static_cast<long>(h) + 2 * padding - static_cast<long>(k);
  const long pw = static_cast<long>(wd) + 2 * padding - static_cast<long>(k);
  if (ph < 0 || pw < 0) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t ho = static_cast<std::size_t>(ph / stride + 1);
  const std::size_t wo = static_cast<std::size_t>(pw / stride + 1);
  const std::size_t patch = k * k * cin;

  // im2col: one row per output location, columns ordered (ky, kx, cin) to
  // match the weight layout viewed as [k*k*cin x cout].
  std::vector<T> cols(ho * wo * patch, T(0));
  const T* in = x.data().data();
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* row = cols.data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - padding;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - padding;
          if (ix < 0 || ix >= static_cast<long>(wd)) continue;
          std::copy_n(in + (iy * wd + ix) * cin, cin, row + (ky * k + kx) * cin);
        }
      }
    }
  }
  std::vector<T> out(ho * wo * cout);
  mmap(out.data(), ho * wo, cout).noalias() =
      cmap(cols.data(), ho * wo, patch) * cmap(w.data().data(), patch, cout);

  return make_op_result<T>(
      {ho, wo, cout}, std::move(out), {x.node(), w.node()},
      [=, cols = std::move(cols)](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pw_ = *self.parents[1];
        auto dout = cmap(self.grad.data(), ho * wo, cout);
        if (pw_.requires_grad) {
          pw_.ensure_grad();
          mmap(pw_.grad.data(), patch, cout).noalias() +=
              cmap(cols.data(), ho * wo, patch).transpose() * dout;
        }
        if (px.requires_grad) {
          px.ensure_grad();
          std::vector<T> dcols(ho * wo * patch);
          mmap(dcols.data(), ho * wo, patch).noalias() =
              dout * cmap(pw_.value.data(), patch, cout).transpose();
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T* row = dcols.data() + (oy * wo + ox) * patch;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - padding;
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - padding;
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  T* dst = px.grad.data() + (iy * wd + ix) * cin;
                  const T* src = row + (ky * k + kx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<T> probs(m * n, T(0));
  T loss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] < 0) continue;
    if (static_cast<std::size_t>(tgt[i]) >= n) {
      throw DimensionError("softmax_cross_entropy: target " + std::to_string(tgt[i]) +
                           " out of range for " + std::to_string(n) + " classes");
    }
    const T* row = logits.data().data() + i * n;
    T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    loss += -(row[tgt[i]] - mx - std::log(z));
  }
  return make_op_result<T>(
      {1}, std::vector<T>{loss}, {logits.node()},
      [m, n, tgt = std::move(tgt), probs = std::move(probs)](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < m; ++i) {
          if (tgt[i] < 0) continue;
          for (std::size_t j = 0; j < n; ++j) {
            T d = probs[i * n + j] - (static_cast<int>(j) == tgt[i] ? T(1) : T(0));
            p.grad[i * n + j] += g * d;
          }
        }
      });
}

template <typename T>
T sigmoid_bce_value(T logit, T target) {
  // log(1 + exp(-|x|)) + max(x, 0) - x * t
  return std::log1p(std::exp(-std::abs(logit))) + std::max(logit, T(0)) - logit * target;
}

template <typename T>
Tensor<T> sigmoid_bce(const Tensor<T>& logits, std::span<const T> targets,
                      std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.numel();
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("sigmoid_bce: targets/mask length mismatch with " +
                         shape_str(logits.shape()));
  }
  std::vector<T> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (msk[i]) loss += sigmoid_bce_value(logits[i], tgt[i]);
  return make_op_result<T>(
      {1}, std::vector<T>{loss}, {logits.node()},
      [tgt = std::move(tgt), msk = std::move(msk)](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < msk.size(); ++i) {
          if (!msk[i]) continue;
          const T s = T(1) / (T(1) + std::exp(-p.value[i]));
          p.grad[i] += g * (s - tgt[i]);
        }
      });
}

template <typename T>
T smooth_l1_value(T diff) {
  const T a = std::abs(diff);
  return a < T(1) ? T(0.5) * a * a : a - T(0.5);
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, std::span<const T> target,
                    std::span<const std::uint8_t> mask) {
  require_rank(pred, 2, "smooth_l1");
  const std::size_t m = pred.dim(0), n = pred.dim(1);
  if (target.size() != m * n || mask.size() != m) {
    throw DimensionError("smooth_l1: target/mask size mismatch with " +
                         shape_str(pred.shape()));
  }
  std::vector<T> diff(m * n, T(0));
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  T loss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!msk[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      diff[i * n + j] = pred[i * n + j] - target[i * n + j];
      loss += smooth_l1_value(diff[i * n + j]);
    }
  }
  return make_op_result<T>(
      {1}, std::vector<T>{loss}, {pred.node()},
      [n, diff = std::move(diff), msk = std::move(msk)](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < msk.size(); ++i) {
          if (!msk[i]) continue;
          for (std::size_t j = 0; j < n; ++j) {
            const T d = diff[i * n + j];
            const T dd = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
            p.grad[i * n + j] += g * dd;
          }
        }
      });
}

#define CTDET_INSTANTIATE_OPS(T)                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> transpose(const Tensor<T>&);                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                     \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> relu(const Tensor<T>&);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                 \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                            \
  template Tensor<T> neg_sq_distance(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                     \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);         \
  template Tensor<T> sum(const Tensor<T>&);                                          \
  template Tensor<T> spatial_max_pool(const Tensor<T>&, int, int, bool);             \
  template Tensor<T> spatial_avg_pool(const Tensor<T>&, int, int, bool);             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);           \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);  \
  template Tensor<T> sigmoid_bce(const Tensor<T>&, std::span<const T>,               \
                                 std::span<const std::uint8_t>);                     \
  template Tensor<T> smooth_l1(const Tensor<T>&, std::span<const T>,                 \
                               std::span<const std::uint8_t>);                       \
  template T smooth_l1_value(T);                                                     \
  template T sigmoid_bce_value(T, T);

CTDET_INSTANTIATE_OPS(float)
CTDET_INSTANTIATE_OPS(double)

#undef CTDET_INSTANTIATE_OPS

}  // namespace ctdet::ops
