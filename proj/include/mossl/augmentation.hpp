#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "mossl/autodiff.hpp"
#include "mossl/ops.hpp"
#include "mossl/random.hpp"

namespace mossl::augmentation {

/// φ = softmax over modalities of h·w0, computed on a detached copy of h.
/// h: [..., M, d], w0: [d] -> [..., M].
inline Var modality_relevance(Var h, Var w0) {
  const Shape& sh = h.shape();
  if (sh.size() < 2 || w0.shape() != Shape{sh.back()}) {
    throw DimensionError("modality_relevance shape mismatch: h " + to_string(sh) + ", w0 " + to_string(w0.shape()));
  }
  Shape scores_shape(sh.begin(), sh.end() - 1);
  Var v = reshape(matmul(detach(h), reshape(w0, {sh.back(), 1})), scores_shape);
  return softmax(v, scores_shape.size() - 1);
}

/// Maps φ from the encoder grid [(B,) T_out, N, M] onto the input grid of
/// `steps` steps. Outputs are aligned with their last input step, so input
/// step t takes output step max(0, t - (steps - T_out)).
inline Var align_to_input(Var phi, std::size_t steps) {
  const Shape& s = phi.shape();
  if (s.size() < 3) throw DimensionError("align_to_input expects [T,N,M], got " + to_string(s));
  const std::size_t axis = s.size() - 3;
  const std::size_t tout = s[axis];
  if (tout > steps) throw DimensionError("cannot align " + to_string(s) + " to " + std::to_string(steps) + " steps");
  Shape head = s;
  head[axis] = steps - tout + 1;
  Var first = broadcast_to(slice(phi, axis, 0, 1), head);
  if (tout == 1) return first;
  return concat({first, slice(phi, axis, 1, tout)}, axis);
}

struct MaskDraw {
  Tensor mask;  // 1 where the cell is masked
  Tensor phi;
  std::uint64_t seed = 0;
};

inline std::uint64_t window_mask_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t window) {
  return derive_seed(seed, "augmentation.mask", epoch, window);
}

/// Independent Bernoulli(min(1, rate_scale·(1 - φ))) per entry, in row-major order.
inline MaskDraw sample_mask(const Tensor& phi, std::uint64_t seed, double rate_scale = 1.0) {
  Rng rng(seed);
  MaskDraw draw{Tensor(phi.shape(), 0.0), phi, seed};
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double p = std::min(1.0, rate_scale * (1.0 - phi[i]));
    draw.mask[i] = uniform01(rng) < p ? 1.0 : 0.0;
  }
  return draw;
}

/// Stacks per-window draws; phi: [B, ...], one seed per window.
inline Tensor sample_batch_mask(const Tensor& phi, const std::vector<std::uint64_t>& seeds, double rate_scale = 1.0) {
  if (phi.rank() < 1 || phi.dim(0) != seeds.size()) {
    throw DimensionError("sample_batch_mask needs one seed per window of " + to_string(phi.shape()));
  }
  const std::size_t per = phi.size() / seeds.size();
  Shape window(phi.shape().begin() + 1, phi.shape().end());
  Tensor out(phi.shape(), 0.0);
  for (std::size_t b = 0; b < seeds.size(); ++b) {
    Tensor slice(window, std::vector<double>(phi.data().begin() + b * per, phi.data().begin() + (b + 1) * per));
    const MaskDraw d = sample_mask(slice, seeds[b], rate_scale);
    std::copy(d.mask.data().begin(), d.mask.data().end(), out.data().begin() + b * per);
  }
  return out;
}

/// Multiplier applied to x: 1 - mask. With `straight_through`, the value is
/// unchanged but d(keep)/d(φ) = 1, which lets gradients reach w0.
inline Var keep_factor(Tape& tape, const Tensor& mask, Var phi_aligned, bool straight_through) {
  Tensor keep(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = 1.0 - mask[i];
  Var k = tape.constant(std::move(keep));
  if (!straight_through) return k;
  if (phi_aligned.shape() != mask.shape()) {
    throw DimensionError("mask " + to_string(mask.shape()) + " does not match phi " + to_string(phi_aligned.shape()));
  }
  // The difference is exactly zero, so the forward value stays binary.
  return add(k, sub(phi_aligned, detach(phi_aligned)));
}

/// E[t,n,m] = e_t[t] + e_n[n] + e_m[m]; returns [T, N, M, d].
inline Var most_embedding(Var e_t, Var e_n, Var e_m) {
  const std::size_t T = e_t.shape()[0], N = e_n.shape()[0], M = e_m.shape()[0], d = e_t.shape()[1];
  if (e_n.shape()[1] != d || e_m.shape()[1] != d) throw DimensionError("embedding widths differ");
  return add(add(reshape(e_t, {T, 1, 1, d}), reshape(e_n, {1, N, 1, d})), reshape(e_m, {1, 1, M, d}));
}

/// x, keep: [(B,) T, N, M]; E: [T, N, M, d] -> [(B,) T, N, M, 1 + d].
inline Var build_augmented_input(Var x, Var keep, Var E) {
  const Shape& sx = x.shape();
  const Shape& se = E.shape();
  if (keep.shape() != sx || sx.size() < 3 || se.size() != 4 || !std::equal(se.begin(), se.begin() + 3, sx.end() - 3)) {
    throw DimensionError("build_augmented_input shape mismatch: x " + to_string(sx) + ", mask " +
                         to_string(keep.shape()) + ", E " + to_string(se));
  }
  Shape with_channel = sx;
  with_channel.push_back(1);
  Shape embed_shape = sx;
  embed_shape.push_back(se.back());
  Var masked = reshape(mul(x, keep), with_channel);
  return concat({masked, broadcast_to(E, embed_shape)}, with_channel.size() - 1);
}

inline Var build_augmented_input(Tape& tape, Var x, const Tensor& mask, Var E) {
  Tensor keep(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = 1.0 - mask[i];
  return build_augmented_input(x, tape.constant(std::move(keep)), E);
}

}  // namespace mossl::augmentation
