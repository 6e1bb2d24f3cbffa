#pragma once

// Direct loop implementations over raw tensors. Nothing here touches the tape
// or the library's contraction kernels.

#include <cmath>
#include <numbers>
#include <vector>

#include "mossl/random.hpp"
#include "mossl/tensor.hpp"

namespace oracle {

using mossl::Shape;
using mossl::Tensor;

inline Tensor random_tensor(Shape shape, mossl::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = mossl::uniform(rng, lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// relu(v·w + b) for one vector v[c_in], w[c_in, c_out].
inline std::vector<double> project(const std::vector<double>& v, const Tensor& w, const Tensor& b) {
  const std::size_t cin = w.dim(0), cout = w.dim(1);
  std::vector<double> out(cout);
  for (std::size_t j = 0; j < cout; ++j) {
    double acc = b[j];
    for (std::size_t i = 0; i < cin; ++i) acc += v[i] * w[i * cout + j];
    out[j] = relu(acc);
  }
  return out;
}

struct Proj {
  Tensor w, b;
};

/// Attention over `axis` (1 = nodes, 2 = modalities) of h[T, N, M, d].
inline Tensor attention(const Tensor& h, std::size_t axis, const Proj& f1, const Proj& f2, const Proj& f3) {
  const std::size_t T = h.dim(0), N = h.dim(1), M = h.dim(2), d = h.dim(3);
  auto vec = [&](std::size_t t, std::size_t n, std::size_t m) {
    std::vector<double> v(d);
    for (std::size_t c = 0; c < d; ++c) v[c] = h.at({t, n, m, c});
    return v;
  };
  Tensor out(h.shape());
  const std::size_t A = axis == 1 ? N : M;
  const std::size_t other = axis == 1 ? M : N;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < other; ++o) {
      auto at = [&](std::size_t a) { return axis == 1 ? vec(t, a, o) : vec(t, o, a); };
      for (std::size_t a = 0; a < A; ++a) {
        const auto q = project(at(a), f1.w, f1.b);
        std::vector<double> u(A);
        double mx = -INFINITY;
        for (std::size_t a2 = 0; a2 < A; ++a2) {
          const auto k = project(at(a2), f2.w, f2.b);
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += q[c] * k[c];
          u[a2] = s / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, u[a2]);
        }
        double z = 0.0;
        for (double& x : u) z += (x = std::exp(x - mx));
        std::vector<double> acc(d, 0.0);
        for (std::size_t a2 = 0; a2 < A; ++a2) {
          const auto v = project(at(a2), f3.w, f3.b);
          for (std::size_t c = 0; c < d; ++c) acc[c] += u[a2] / z * v[c];
        }
        for (std::size_t c = 0; c < d; ++c) {
          if (axis == 1) out.at({t, a, o, c}) = acc[c];
          else out.at({t, o, a, c}) = acc[c];
        }
      }
    }
  }
  return out;
}

/// Valid dilated convolution of x[T, C_in] with kernel[k, C_in, C_out].
inline Tensor conv(const Tensor& x, const Tensor& kernel, std::size_t dilation) {
  const std::size_t T = x.dim(0), cin = x.dim(1), k = kernel.dim(0), cout = kernel.dim(2);
  const std::size_t tout = T - (k - 1) * dilation;
  Tensor y({tout, cout}, 0.0);
  for (std::size_t t = 0; t < tout; ++t)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < cin; ++i) y.at({t, o}) += x.at({t + j * dilation, i}) * kernel.at({j, i, o});
  return y;
}

/// mix(tanh(conv(ĥ, filter) + bf) ⊙ σ(conv(ĥ, gate) + bg)) for ĥ[T, N, M, C].
inline Tensor temporal_conv_layer(const Tensor& hhat, const Tensor& filter, const Tensor& bf, const Tensor& gate,
                                  const Tensor& bg, const Tensor& mix, std::size_t dilation) {
  const std::size_t T = hhat.dim(0), N = hhat.dim(1), M = hhat.dim(2), C = hhat.dim(3);
  const std::size_t k = filter.dim(0), d = filter.dim(2), tout = T - (k - 1) * dilation;
  Tensor out({tout, N, M, d}, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t m = 0; m < M; ++m) {
      Tensor series({T, C});
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) series.at({t, c}) = hhat.at({t, n, m, c});
      const Tensor f = conv(series, filter, dilation);
      const Tensor g = conv(series, gate, dilation);
      for (std::size_t t = 0; t < tout; ++t) {
        std::vector<double> z(d);
        for (std::size_t c = 0; c < d; ++c) z[c] = std::tanh(f.at({t, c}) + bf[c]) * sigmoid(g.at({t, c}) + bg[c]);
        for (std::size_t o = 0; o < d; ++o) {
          double acc = 0.0;
          for (std::size_t c = 0; c < d; ++c) acc += z[c] * mix.at({c, o});
          out.at({t, n, m, o}) = acc;
        }
      }
    }
  }
  return out;
}

/// -Σ_cells log Σ_k γ_k Π_d N(h_d | μ_kd, σ²_kd), evaluated in the probability domain.
/// h: [G, D], gamma: [K], mu/var: [K, D].
inline double mixture_nll(const Tensor& h, const Tensor& gamma, const Tensor& mu, const Tensor& var) {
  const std::size_t G = h.dim(0), D = h.dim(1), K = gamma.size();
  double total = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    double p = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double dens = 1.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double v = var.at({k, d});
        const double diff = h.at({g, d}) - mu.at({k, d});
        dens *= std::exp(-diff * diff / (2.0 * v)) / std::sqrt(2.0 * std::numbers::pi * v);
      }
      p += gamma[k] * dens;
    }
    total -= std::log(p);
  }
  return total;
}

/// Exhaustive positive/negative BCE over r[G, M, D] (G grid positions per modality)
/// with contexts c[M, D] and coupling w3[D, D].
inline double mssl_loss(const Tensor& r, const Tensor& c, const Tensor& w3, bool average_negatives = false) {
  const std::size_t G = r.dim(0), M = r.dim(1), D = r.dim(2);
  auto score = [&](std::size_t g, std::size_t m_rep, std::size_t m_ctx) {
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t j = 0; j < D; ++j) s += r.at({g, m_rep, i}) * w3.at({i, j}) * c.at({m_ctx, j});
    return s;
  };
  double total = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t m = 0; m < M; ++m) {
      total -= std::log(sigmoid(score(g, m, m)));
      double neg = 0.0;
      for (std::size_t m2 = 0; m2 < M; ++m2) {
        if (m2 != m) neg -= std::log(1.0 - sigmoid(score(g, m2, m)));
      }
      total += (average_negatives && M > 1) ? neg / static_cast<double>(M - 1) : neg;
    }
  }
  return total;
}

/// Two-layer predictor for one cell: relu(relu(h)·W1 + b1)·W2 + b2 -> [O].
inline std::vector<double> predictor(const std::vector<double>& h, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                                     const Tensor& b2) {
  const std::size_t d = w1.dim(0), O = w2.dim(1);
  std::vector<double> z(d);
  for (std::size_t j = 0; j < d; ++j) {
    double acc = b1[j];
    for (std::size_t i = 0; i < d; ++i) acc += relu(h[i]) * w1[i * d + j];
    z[j] = relu(acc);
  }
  std::vector<double> y(O);
  for (std::size_t o = 0; o < O; ++o) {
    double acc = b2[o];
    for (std::size_t j = 0; j < d; ++j) acc += z[j] * w2[j * O + o];
    y[o] = acc;
  }
  return y;
}

}  // namespace oracle
