#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mossl/autodiff.hpp"
#include "mossl/ops.hpp"

namespace mossl::gssl {

inline constexpr double kVarianceMin = 1e-6;
inline constexpr double kVarianceMax = 1e6;

/// Per-window mixture: gamma/log_gamma [B, K], mu/sigma2 [B, K, d].
struct MixtureState {
  Var log_gamma;
  Var gamma;
  Var mu;
  Var sigma2;
};

struct MixtureHeads {
  Var w_gamma;  // [K, G·d]
  Var w_mu;     // [K, d, G]
  Var b_mu;     // [K, d]
  Var w_sigma;  // [K, d, G]
  Var b_sigma;  // [K, d]
};

inline MixtureHeads heads(const BoundParams& p, const std::string& prefix = "gssl") {
  return {p[prefix + ".w_gamma"], p[prefix + ".w_mu"], p[prefix + ".b_mu"], p[prefix + ".w_sigma"],
          p[prefix + ".b_sigma"]};
}

/// [B, T_out, N, M, d] -> [B, G, d] with G = T_out·N·M.
inline Var grid(Var h) {
  const Shape& s = h.shape();
  if (s.size() != 5) throw DimensionError("expected [B,T,N,M,d], got " + to_string(s));
  return reshape(h, {s[0], s[1] * s[2] * s[3], s[4]});
}

/// log γ = log_softmax_k(W_gamma · vec(H̃)), one vector per window.
inline Var membership_log_weights(Var h_aug, Var w_gamma) {
  const Shape& s = h_aug.shape();
  if (s.size() != 5) throw DimensionError("memberships expects [B,T,N,M,d], got " + to_string(s));
  const std::size_t flat = s[1] * s[2] * s[3] * s[4];
  if (w_gamma.shape().size() != 2 || w_gamma.shape()[1] != flat) {
    throw DimensionError("W_gamma " + to_string(w_gamma.shape()) + " does not match representation " + to_string(s));
  }
  return log_softmax(matmul_bt(reshape(h_aug, {s[0], flat}), w_gamma), 1);
}

inline Var memberships(Var h_aug, Var w_gamma) { return exp(membership_log_weights(h_aug, w_gamma)); }

/// out[b,k,d] = Σ_g W[k,d,g]·h[b,g,d] + bias[k,d].
inline Var per_channel_map(Var h_grid, Var w, Var bias) {
  const Shape& sh = h_grid.shape();
  const Shape& sw = w.shape();
  if (sw.size() != 3 || sw[1] != sh[2] || sw[2] != sh[1] || bias.shape() != Shape{sw[0], sw[1]}) {
    throw DimensionError("mixture head " + to_string(sw) + " does not match grid " + to_string(sh));
  }
  Var hd = permute(h_grid, {2, 0, 1});  // [d, B, G]
  Var wd = permute(w, {1, 2, 0});       // [d, G, K]
  return add(permute(bmm(hd, wd), {1, 2, 0}), bias);
}

inline MixtureState component_params(Var h_aug, const MixtureHeads& p) {
  Var g = grid(h_aug);
  MixtureState st;
  st.mu = per_channel_map(g, p.w_mu, p.b_mu);
  st.sigma2 = clamp(exp(per_channel_map(g, p.w_sigma, p.b_sigma)), kVarianceMin, kVarianceMax);
  return st;
}

inline MixtureState mixture(Var h_aug, const MixtureHeads& p) {
  MixtureState st = component_params(h_aug, p);
  st.log_gamma = membership_log_weights(h_aug, p.w_gamma);
  st.gamma = exp(st.log_gamma);
  return st;
}

/// Per-window NLL [B]: -Σ_cells logsumexp_k(log γ_k + log N(h | μ_k, σ²_k)).
inline Var window_nll(Var h, const MixtureState& st) {
  Var g = grid(h);
  const Shape& sg = g.shape();
  const std::size_t B = sg[0], K = st.log_gamma.shape().at(1);
  Var joint = add(diag_gaussian_log_prob(g, st.mu, st.sigma2), reshape(st.log_gamma, {B, 1, K}));
  return scale(sum_axes(logsumexp(joint, 2), {1}), -1.0);
}

/// Batch mean of the per-window NLL. `window_ids` label windows in diagnostics.
inline Var gssl_loss(Var h, const MixtureState& st, const std::vector<std::size_t>& window_ids = {}) {
  Var per_window = window_nll(h, st);
  const Tensor& v = per_window.value();
  for (std::size_t b = 0; b < v.size(); ++b) {
    if (!std::isfinite(v[b])) {
      const std::size_t id = b < window_ids.size() ? window_ids[b] : b;
      throw NumericalError("global self-supervised loss is non-finite (" + std::to_string(v[b]) + ") for window " +
                           std::to_string(id));
    }
  }
  return mean(per_window);
}

}  // namespace mossl::gssl
