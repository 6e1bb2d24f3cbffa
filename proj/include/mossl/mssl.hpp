#pragma once

#include <cmath>

#include "mossl/autodiff.hpp"
#include "mossl/errors.hpp"
#include "mossl/ops.hpp"

namespace mossl::mssl {

/// R = H ⊙ w1 + H̃ ⊙ w2, channel-wise.
inline Var fuse(Var h, Var h_aug, Var w1, Var w2) {
  if (h.shape() != h_aug.shape()) {
    throw DimensionError("fuse shape mismatch: " + to_string(h.shape()) + " vs " + to_string(h_aug.shape()));
  }
  return add(mul(h, w1), mul(h_aug, w2));
}

/// c = σ(mean over time and nodes); R: [B, T, N, M, d] -> [B, M, d].
inline Var modality_context(Var r) {
  if (r.shape().size() != 5) throw DimensionError("modality_context expects [B,T,N,M,d], got " + to_string(r.shape()));
  return sigmoid(mean_reduce(r, {1, 2}));
}

/// Contrastive BCE, batch-averaged.
///
/// Every (t, n, m) is an anchor. Its positive score pairs r[t,n,m] with c_m;
/// its negatives pair r[t,n,m'] with the same c_m for every m' != m. With
/// `average_negatives` the negative sum is divided by M - 1.
inline Var mssl_loss(Var r, Var c, Var w3, bool average_negatives = false) {
  const Shape& s = r.shape();
  if (s.size() != 5 || c.shape() != Shape{s[0], s[3], s[4]} || w3.shape() != Shape{s[4], s[4]}) {
    throw DimensionError("mssl_loss shape mismatch: R " + to_string(s) + ", C " + to_string(c.shape()) + ", w3 " +
                         to_string(w3.shape()));
  }
  const std::size_t B = s[0], P = s[1] * s[2], M = s[3], d = s[4];
  if (M == 1) {
    static bool warned = false;
    if (!warned) {
      logging::warn("single modality: contrastive loss has no negative pairs");
      warned = true;
    }
  }
  // scores[b, p, m', m] = r[b,p,m'] · (w3 c[b,m])
  Var cw = matmul_bt(c, w3);
  Var scores = bmm_bt(reshape(r, {B, P * M, d}), cw);
  Tensor sign({P * M, M});
  Tensor weight({P * M, M});
  const double neg_weight = average_negatives && M > 1 ? 1.0 / static_cast<double>(M - 1) : 1.0;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t rep = 0; rep < M; ++rep) {
      for (std::size_t ctx = 0; ctx < M; ++ctx) {
        const std::size_t i = (p * M + rep) * M + ctx;
        sign[i] = rep == ctx ? 1.0 : -1.0;
        weight[i] = rep == ctx ? 1.0 : neg_weight;
      }
    }
  }
  Tape& tape = *r.tape;
  Var terms = log_sigmoid(mul(scores, tape.constant(std::move(sign))));
  return scale(sum(mul(terms, tape.constant(std::move(weight)))), -1.0 / static_cast<double>(B));
}

}  // namespace mossl::mssl
