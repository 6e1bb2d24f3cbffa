#pragma once

// Differentiable operations over Tape-recorded tensors. Every op computes its
// forward value eagerly and registers a closure that accumulates into the
// gradient buffers of its inputs.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "mossl/autodiff.hpp"

namespace mossl {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMatrix>;
using MapConstMat = Eigen::Map<const RowMatrix>;

inline MapConstMat cmat(const double* p, std::size_t rows, std::size_t cols) {
  return MapConstMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MapMat mat(double* p, std::size_t rows, std::size_t cols) {
  return MapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ConfigError("operands recorded on different tapes");
}

// Visits `shape` in row-major order; `f(flat_index, src_offset)` where the
// source offset advances by `src_strides` per axis (0 means broadcast).
template <class F>
void for_each_strided(const Shape& shape, const std::vector<std::size_t>& src_strides, F&& f) {
  const std::size_t n = numel(shape);
  const std::size_t rank = shape.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, off);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      off += src_strides[ax];
      if (idx[ax] < shape[ax]) break;
      off -= src_strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(y), {a}, [ia, self, df](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var broadcast_to(Var a, const Shape& shape) {
  const Shape& in = a.shape();
  if (in == shape) return a;
  if (in.size() > shape.size()) {
    throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(shape));
  }
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> src(shape.size(), 0);
  const std::size_t lead = shape.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == shape[lead + i]) {
      src[lead + i] = in_strides[i];
    } else if (in[i] != 1) {
      throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(shape));
    }
  }
  const Tensor& x = a.value();
  Tensor y(shape);
  detail::for_each_strided(shape, src, [&](std::size_t i, std::size_t off) { y[i] = x[off]; });
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {a}, [ia, shape, src](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    detail::for_each_strided(shape, src, [&](std::size_t i, std::size_t off) { ga[off] += g[i]; });
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {a}, [ia](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var permute(Var a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw DimensionError("permutation rank mismatch for " + to_string(in));
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("invalid permutation for " + to_string(in));
    seen[p] = true;
  }
  const auto in_strides = strides_of(in);
  Shape out(in.size());
  std::vector<std::size_t> src(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out[i] = in[perm[i]];
    src[i] = in_strides[perm[i]];
  }
  const Tensor& x = a.value();
  Tensor y(out);
  detail::for_each_strided(out, src, [&](std::size_t i, std::size_t off) { y[i] = x[off]; });
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {a}, [ia, out, src](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    detail::for_each_strided(out, src, [&](std::size_t i, std::size_t off) { ga[off] += g[i]; });
  });
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_at(a.shape(), axis);
  if (begin >= end || end > s.len) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         to_string(a.shape()));
  }
  Shape out = a.shape();
  out[axis] = end - begin;
  const std::size_t len = end - begin;
  const Tensor& x = a.value();
  Tensor y(out);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().begin() + (o * s.len + begin) * s.inner, len * s.inner,
                y.data().begin() + o * len * s.inner);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {a}, [ia, s, begin, len](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < len * s.inner; ++j) ga[(o * s.len + begin) * s.inner + j] += g[o * len * s.inner + j];
    }
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + to_string(first));
  Shape out = first;
  out[axis] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat shape mismatch: " + to_string(first) + " vs " + to_string(s));
    lens.push_back(s[axis]);
    out[axis] += s[axis];
  }
  const auto so = detail::split_at(out, axis);
  Tensor y(out);
  std::size_t start = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(x.data().begin() + o * lens[k] * so.inner, lens[k] * so.inner,
                  y.data().begin() + (o * so.len + start) * so.inner);
    }
    start += lens[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(std::move(y), parts, [ids, lens, so](Tape& t, std::span<const double> g) {
    std::size_t start = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto gk = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < so.outer; ++o) {
          for (std::size_t j = 0; j < lens[k] * so.inner; ++j) {
            gk[o * lens[k] * so.inner + j] += g[(o * so.len + start) * so.inner + j];
          }
        }
      }
      start += lens[k];
    }
  });
}

/// Same value, cut from the graph.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

// ---------------------------------------------------------------------------
// Elementwise arithmetic (operands broadcast to a common shape)

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    return add(broadcast_to(a, s), broadcast_to(b, s));
  }
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::span<const double> g) {
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    return sub(broadcast_to(a, s), broadcast_to(b, s));
  }
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::span<const double> g) {
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    return mul(broadcast_to(a, s), broadcast_to(b, s));
  }
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& z = t.value(ib);
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * z[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var shift(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// relu'(0) is taken as 0.
inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

/// log(sigmoid(x)) without overflow for large |x|.
inline double log_sigmoid(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

inline Var log_sigmoid(Var a) {
  return detail::unary(a, [](double x) { return log_sigmoid(x); }, [](double x, double) { return sigmoid(-x); });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Clamps into [lo, hi]; gradient passes through inside the bounds and is zero outside.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (double& v : ga) v += g[0];
  });
}

/// Sums over `axes` and removes them.
inline Var sum_axes(Var a, std::vector<std::size_t> axes) {
  const Shape& in = a.shape();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes) {
    if (ax >= in.size()) throw DimensionError("reduce axis out of range for " + to_string(in));
  }
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!std::binary_search(axes.begin(), axes.end(), i)) out.push_back(in[i]);
  }
  const auto out_strides = strides_of(out);
  std::vector<std::size_t> dst(in.size(), 0);
  for (std::size_t i = 0, k = 0; i < in.size(); ++i) {
    if (!std::binary_search(axes.begin(), axes.end(), i)) dst[i] = out_strides[k++];
  }
  const Tensor& x = a.value();
  Tensor y(out, 0.0);
  detail::for_each_strided(in, dst, [&](std::size_t i, std::size_t off) { y[off] += x[i]; });
  const std::size_t ia = a.id;
  Shape in_shape = in;
  return a.tape->record(std::move(y), {a}, [ia, in_shape, dst](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    detail::for_each_strided(in_shape, dst, [&](std::size_t i, std::size_t off) { ga[i] += g[off]; });
  });
}

inline Var mean_reduce(Var a, const std::vector<std::size_t>& axes) {
  std::size_t count = 1;
  for (std::size_t ax : axes) count *= a.shape().at(ax);
  return scale(sum_axes(a, axes), 1.0 / static_cast<double>(count));
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted)

inline Var softmax(Var a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] /= z;
    }
  }
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(y), {a}, [ia, self, s](Tape& t, std::span<const double> g) {
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t k = base + j * s.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

inline Var log_softmax(Var a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) z += std::exp(x[base + j * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] = x[base + j * s.inner] - lse;
    }
  }
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(y), {a}, [ia, self, s](Tape& t, std::span<const double> g) {
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double gs = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) gs += g[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t k = base + j * s.inner;
          ga[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
    }
  });
}

/// log(sum(exp(a))) along `axis`, which is removed.
inline Var logsumexp(Var a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  const Tensor& x = a.value();
  Tensor y(out);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) z += std::exp(x[base + j * s.inner] - mx);
      y[o * s.inner + in] = mx + std::log(z);
    }
  }
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(y), {a}, [ia, self, s](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t r = o * s.inner + in;
        const std::size_t base = o * s.len * s.inner + in;
        for (std::size_t j = 0; j < s.len; ++j) {
          ga[base + j * s.inner] += g[r] * std::exp(x[base + j * s.inner] - y[r]);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Contractions

/// a[..., p, q] · b[q, r] -> [..., p, r]
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    throw DimensionError("matmul shape mismatch: " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t q = sb[0], r = sb[1], rows = a.value().size() / q;
  Shape out = sa;
  out.back() = r;
  Tensor y(out);
  detail::mat(y.data().data(), rows, r).noalias() =
      detail::cmat(a.value().data().data(), rows, q) * detail::cmat(b.value().data().data(), q, r);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib, rows, q, r](Tape& t, std::span<const double> g) {
    const auto G = detail::cmat(g.data(), rows, r);
    if (t.requires_grad(ia)) {
      detail::mat(t.grad_buffer(ia).data(), rows, q).noalias() += G * detail::cmat(t.value(ib).data().data(), q, r).transpose();
    }
    if (t.requires_grad(ib)) {
      detail::mat(t.grad_buffer(ib).data(), q, r).noalias() += detail::cmat(t.value(ia).data().data(), rows, q).transpose() * G;
    }
  });
}

/// a[..., q] · b[r, q]ᵀ -> [..., r]
inline Var matmul_bt(Var a, Var b) {
  detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[1]) {
    throw DimensionError("matmul_bt shape mismatch: " + to_string(sa) + " x " + to_string(sb) + "^T");
  }
  const std::size_t q = sb[1], r = sb[0], rows = a.value().size() / q;
  Shape out = sa;
  out.back() = r;
  Tensor y(out);
  detail::mat(y.data().data(), rows, r).noalias() =
      detail::cmat(a.value().data().data(), rows, q) * detail::cmat(b.value().data().data(), r, q).transpose();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib, rows, q, r](Tape& t, std::span<const double> g) {
    const auto G = detail::cmat(g.data(), rows, r);
    if (t.requires_grad(ia)) {
      detail::mat(t.grad_buffer(ia).data(), rows, q).noalias() += G * detail::cmat(t.value(ib).data().data(), r, q);
    }
    if (t.requires_grad(ib)) {
      detail::mat(t.grad_buffer(ib).data(), r, q).noalias() += G.transpose() * detail::cmat(t.value(ia).data().data(), rows, q);
    }
  });
}

namespace detail {

inline std::size_t batch_count(const Shape& sa, const Shape& sb, std::size_t& p, std::size_t& q, std::size_t& rq,
                               bool transpose_b, const char* name) {
  bool ok = sa.size() >= 2 && sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin());
  if (ok) {
    p = sa[sa.size() - 2];
    q = sa.back();
    const std::size_t inner = transpose_b ? sb.back() : sb[sb.size() - 2];
    rq = transpose_b ? sb[sb.size() - 2] : sb.back();
    ok = inner == q;
  }
  if (!ok) throw DimensionError(std::string(name) + " shape mismatch: " + to_string(sa) + " x " + to_string(sb));
  return numel(sa) / (p * q);
}

}  // namespace detail

/// Batched a[..., p, q] · b[..., q, r] with identical leading extents.
inline Var bmm(Var a, Var b) {
  detail::same_tape(a, b);
  std::size_t p, q, r;
  const std::size_t nb = detail::batch_count(a.shape(), b.shape(), p, q, r, false, "bmm");
  Shape out = a.shape();
  out.back() = r;
  Tensor y(out);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    detail::mat(y.data().data() + i * p * r, p, r).noalias() = detail::cmat(A + i * p * q, p, q) * detail::cmat(B + i * q * r, q, r);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib, nb, p, q, r](Tape& t, std::span<const double> g) {
    const double* A = t.value(ia).data().data();
    const double* B = t.value(ib).data().data();
    const bool da = t.requires_grad(ia), db = t.requires_grad(ib);
    double* GA = da ? t.grad_buffer(ia).data() : nullptr;
    double* GB = db ? t.grad_buffer(ib).data() : nullptr;
    for (std::size_t i = 0; i < nb; ++i) {
      const auto G = detail::cmat(g.data() + i * p * r, p, r);
      if (da) detail::mat(GA + i * p * q, p, q).noalias() += G * detail::cmat(B + i * q * r, q, r).transpose();
      if (db) detail::mat(GB + i * q * r, q, r).noalias() += detail::cmat(A + i * p * q, p, q).transpose() * G;
    }
  });
}

/// Batched a[..., p, q] · b[..., r, q]ᵀ.
inline Var bmm_bt(Var a, Var b) {
  detail::same_tape(a, b);
  std::size_t p, q, r;
  const std::size_t nb = detail::batch_count(a.shape(), b.shape(), p, q, r, true, "bmm_bt");
  Shape out = a.shape();
  out.back() = r;
  Tensor y(out);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    detail::mat(y.data().data() + i * p * r, p, r).noalias() =
        detail::cmat(A + i * p * q, p, q) * detail::cmat(B + i * r * q, r, q).transpose();
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {a, b}, [ia, ib, nb, p, q, r](Tape& t, std::span<const double> g) {
    const double* A = t.value(ia).data().data();
    const double* B = t.value(ib).data().data();
    const bool da = t.requires_grad(ia), db = t.requires_grad(ib);
    double* GA = da ? t.grad_buffer(ia).data() : nullptr;
    double* GB = db ? t.grad_buffer(ib).data() : nullptr;
    for (std::size_t i = 0; i < nb; ++i) {
      const auto G = detail::cmat(g.data() + i * p * r, p, r);
      if (da) detail::mat(GA + i * p * q, p, q).noalias() += G * detail::cmat(B + i * r * q, r, q);
      if (db) detail::mat(GB + i * r * q, r, q).noalias() += G.transpose() * detail::cmat(A + i * p * q, p, q);
    }
  });
}

/// Valid dilated causal convolution along `time_axis`.
///
/// x: [outer..., T, inner..., C_in], kernel: [k, C_in, C_out]. Output step t
/// sees input steps t, t+d, ..., t+(k-1)d and is aligned with input step
/// t+(k-1)d, so the time extent shrinks by (k-1)d and no output reads the future.
inline Var dilated_causal_conv(Var x, Var kernel, std::size_t dilation, std::size_t time_axis = 0) {
  detail::same_tape(x, kernel);
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  if (sx.size() < 2 || time_axis + 1 >= sx.size() || sk.size() != 3 || sk[1] != sx.back()) {
    throw DimensionError("dilated_causal_conv shape mismatch: input " + to_string(sx) + ", kernel " + to_string(sk));
  }
  if (dilation == 0) throw ConfigError("dilation must be positive");
  const std::size_t k = sk[0], cin = sk[1], cout = sk[2];
  const std::size_t T = sx[time_axis];
  const std::size_t reach = (k - 1) * dilation;
  if (T <= reach) {
    throw ConfigError("convolution window (kernel " + std::to_string(k) + ", dilation " + std::to_string(dilation) +
                      ") is longer than the series of length " + std::to_string(T));
  }
  const std::size_t tout = T - reach;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < time_axis; ++i) outer *= sx[i];
  for (std::size_t i = time_axis + 1; i + 1 < sx.size(); ++i) inner *= sx[i];
  Shape out = sx;
  out[time_axis] = tout;
  out.back() = cout;
  Tensor y(out, 0.0);
  const double* X = x.value().data().data();
  const double* K = kernel.value().data().data();
  const std::size_t rows = tout * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    auto Y = detail::mat(y.data().data() + o * rows * cout, rows, cout);
    for (std::size_t j = 0; j < k; ++j) {
      const double* xb = X + (o * T + j * dilation) * inner * cin;
      Y.noalias() += detail::cmat(xb, rows, cin) * detail::cmat(K + j * cin * cout, cin, cout);
    }
  }
  const std::size_t ix = x.id, ik = kernel.id;
  return x.tape->record(std::move(y), {x, kernel},
                        [ix, ik, outer, T, inner, cin, cout, k, dilation, rows](Tape& t, std::span<const double> g) {
                          const double* X = t.value(ix).data().data();
                          const double* K = t.value(ik).data().data();
                          const bool dx = t.requires_grad(ix), dk = t.requires_grad(ik);
                          double* GX = dx ? t.grad_buffer(ix).data() : nullptr;
                          double* GK = dk ? t.grad_buffer(ik).data() : nullptr;
                          for (std::size_t o = 0; o < outer; ++o) {
                            const auto G = detail::cmat(g.data() + o * rows * cout, rows, cout);
                            for (std::size_t j = 0; j < k; ++j) {
                              const std::size_t xoff = (o * T + j * dilation) * inner * cin;
                              if (dx) {
                                detail::mat(GX + xoff, rows, cin).noalias() +=
                                    G * detail::cmat(K + j * cin * cout, cin, cout).transpose();
                              }
                              if (dk) {
                                detail::mat(GK + j * cin * cout, cin, cout).noalias() +=
                                    detail::cmat(X + xoff, rows, cin).transpose() * G;
                              }
                            }
                          }
                        });
}

/// Per-component diagonal Gaussian log-density.
///
/// h: [B, G, D], mu/var: [B, K, D] -> [B, G, K] with
/// out[b,g,k] = sum_d -0.5 log(2 pi var) - (h - mu)^2 / (2 var).
inline Var diag_gaussian_log_prob(Var h, Var mu, Var var) {
  detail::same_tape(h, mu);
  detail::same_tape(h, var);
  const Shape& sh = h.shape();
  const Shape& sm = mu.shape();
  if (sh.size() != 3 || sm.size() != 3 || var.shape() != sm || sh[0] != sm[0] || sh[2] != sm[2]) {
    throw DimensionError("diag_gaussian_log_prob shape mismatch: h " + to_string(sh) + ", mu " + to_string(sm) +
                         ", var " + to_string(var.shape()));
  }
  const std::size_t B = sh[0], G = sh[1], D = sh[2], K = sm[1];
  const Tensor& H = h.value();
  const Tensor& M = mu.value();
  const Tensor& V = var.value();
  for (double v : V.data()) {
    if (!(v > 0.0)) throw DomainError("Gaussian variance must be positive, got " + std::to_string(v));
  }
  const double log2pi = std::log(2.0 * std::numbers::pi);
  Tensor y({B, G, K});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      double norm = 0.0;
      for (std::size_t d = 0; d < D; ++d) norm += -0.5 * (log2pi + std::log(V[(b * K + k) * D + d]));
      for (std::size_t gi = 0; gi < G; ++gi) {
        double acc = norm;
        for (std::size_t d = 0; d < D; ++d) {
          const double diff = H[(b * G + gi) * D + d] - M[(b * K + k) * D + d];
          acc -= diff * diff / (2.0 * V[(b * K + k) * D + d]);
        }
        y[(b * G + gi) * K + k] = acc;
      }
    }
  }
  const std::size_t ih = h.id, im = mu.id, iv = var.id;
  return h.tape->record(std::move(y), {h, mu, var}, [ih, im, iv, B, G, D, K](Tape& t, std::span<const double> g) {
    const Tensor& H = t.value(ih);
    const Tensor& M = t.value(im);
    const Tensor& V = t.value(iv);
    const bool dh = t.requires_grad(ih), dm = t.requires_grad(im), dv = t.requires_grad(iv);
    double* GH = dh ? t.grad_buffer(ih).data() : nullptr;
    double* GM = dm ? t.grad_buffer(im).data() : nullptr;
    double* GV = dv ? t.grad_buffer(iv).data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t gi = 0; gi < G; ++gi) {
        for (std::size_t k = 0; k < K; ++k) {
          const double go = g[(b * G + gi) * K + k];
          if (go == 0.0) continue;
          for (std::size_t d = 0; d < D; ++d) {
            const std::size_t pk = (b * K + k) * D + d;
            const double v = V[pk];
            const double diff = H[(b * G + gi) * D + d] - M[pk];
            if (dh) GH[(b * G + gi) * D + d] -= go * diff / v;
            if (dm) GM[pk] += go * diff / v;
            if (dv) GV[pk] += go * (-0.5 / v + diff * diff / (2.0 * v * v));
          }
        }
      }
    }
  });
}

}  // namespace mossl
