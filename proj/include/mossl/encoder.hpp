#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mossl/autodiff.hpp"
#include "mossl/config.hpp"
#include "mossl/init.hpp"
#include "mossl/ops.hpp"

namespace mossl::encoder {

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t kernel = 2;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  std::size_t hidden = 48;
  std::size_t input_channels = 1;
  bool residual = false;

  static EncoderConfig from(const ModelConfig& m, std::size_t input_channels) {
    return {m.layers, m.kernel, m.dilations, m.hidden, input_channels, m.residual};
  }

  /// Steps surviving all layers; throws when the schedule exhausts `steps`.
  std::size_t output_steps(std::size_t steps) const {
    ModelConfig m;
    m.input_steps = steps;
    m.layers = layers;
    m.kernel = kernel;
    m.dilations = dilations;
    if (dilations.size() != layers) {
      throw ConfigError("dilation schedule has " + std::to_string(dilations.size()) + " entries for " +
                        std::to_string(layers) + " layers");
    }
    return m.encoded_steps();
  }
};

/// f(x) = relu(x·w + b) over the trailing channel axis.
struct Projection {
  Var w;
  Var b;
  Var operator()(Var x) const { return relu(add(matmul(x, w), b)); }
};

inline Projection projection(const BoundParams& p, const std::string& prefix) {
  return {p[prefix + ".w"], p[prefix + ".b"]};
}

/// x: [..., c_in] -> [..., d_z].
inline Var input_project(Var x, Var w, Var b) {
  if (x.shape().back() != w.shape()[0]) {
    throw DimensionError("input_project expects " + std::to_string(w.shape()[0]) + " channels, got input " +
                         to_string(x.shape()));
  }
  return Projection{w, b}(x);
}

struct Attention {
  Var out;      // same shape as the input
  Var weights;  // [..., A, A] over the attended axis A
};

/// Single-head scaled dot-product attention along `axis` of h[..., d].
/// Every other leading axis indexes an independent attention problem.
inline Attention attend(Var h, std::size_t axis, const Projection& f1, const Projection& f2, const Projection& f3) {
  const std::size_t rank = h.shape().size();
  if (rank < 2 || axis + 1 >= rank) throw DimensionError("attention axis out of range for " + to_string(h.shape()));
  const std::size_t pivot = rank - 2;
  std::vector<std::size_t> perm(rank);
  for (std::size_t i = 0; i < rank; ++i) perm[i] = i;
  std::swap(perm[axis], perm[pivot]);
  const bool moved = axis != pivot;
  Var x = moved ? permute(h, perm) : h;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.shape().back()));
  Var scores = scale(bmm_bt(f1(x), f2(x)), inv_sqrt_d);
  Var alpha = softmax(scores, rank - 1);
  Var out = bmm(alpha, f3(x));
  return {moved ? permute(out, perm) : out, alpha};
}

/// h: [(B,) T, N, M, d]; attends over modalities at each (t, n).
inline Attention modality_attention(Var h, const Projection& f1, const Projection& f2, const Projection& f3) {
  if (h.shape().size() < 4) throw DimensionError("modality_attention expects [T,N,M,d], got " + to_string(h.shape()));
  return attend(h, h.shape().size() - 2, f1, f2, f3);
}

/// h: [(B,) T, N, M, d]; attends over nodes at each (t, m).
inline Attention spatial_attention(Var h, const Projection& f1, const Projection& f2, const Projection& f3) {
  if (h.shape().size() < 4) throw DimensionError("spatial_attention expects [T,N,M,d], got " + to_string(h.shape()));
  return attend(h, h.shape().size() - 3, f1, f2, f3);
}

struct TemporalConv {
  Var filter;       // [k, 3d, d]
  Var filter_bias;  // [d]
  Var gate;         // [k, 3d, d]
  Var gate_bias;    // [d]
  Var mix;          // [d, d], 1x1 convolution without bias
};

/// ĥ: [(B,) T_l, N, M, 3d] -> [(B,) T_l - (k-1)·dilation, N, M, d].
inline Var temporal_conv_layer(Var hhat, const TemporalConv& p, std::size_t dilation) {
  if (hhat.shape().size() < 4) throw DimensionError("temporal_conv_layer expects [T,N,M,C], got " + to_string(hhat.shape()));
  const std::size_t time_axis = hhat.shape().size() - 4;
  Var f = add(dilated_causal_conv(hhat, p.filter, dilation, time_axis), p.filter_bias);
  Var g = add(dilated_causal_conv(hhat, p.gate, dilation, time_axis), p.gate_bias);
  return matmul(mul(tanh(f), sigmoid(g)), p.mix);
}

inline std::string layer_prefix(const std::string& prefix, std::size_t l) {
  return prefix + ".layer" + std::to_string(l);
}

inline TemporalConv temporal_conv(const BoundParams& p, const std::string& lp) {
  return {p[lp + ".tc.filter"], p[lp + ".tc.filter_bias"], p[lp + ".tc.gate"], p[lp + ".tc.gate_bias"],
          p[lp + ".tc.mix"]};
}

/// Adds the shared layer stack under `prefix` (input projections are separate).
inline void add_layer_params(ParamSet& ps, const EncoderConfig& cfg, const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg.hidden, k = cfg.kernel;
  auto zeros = [](std::size_t n) { return Tensor({n}, 0.0); };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    for (const char* block : {".ma", ".sa"}) {
      for (const char* f : {".f1", ".f2", ".f3"}) {
        const std::string name = lp + block + f;
        ps.add(name + ".w", uniform_init({d, d}, d, seed, name + ".w"));
        ps.add(name + ".b", zeros(d));
      }
    }
    ps.add(lp + ".tc.filter", uniform_init({k, 3 * d, d}, k * 3 * d, seed, lp + ".tc.filter"));
    ps.add(lp + ".tc.filter_bias", zeros(d));
    ps.add(lp + ".tc.gate", uniform_init({k, 3 * d, d}, k * 3 * d, seed, lp + ".tc.gate"));
    ps.add(lp + ".tc.gate_bias", zeros(d));
    ps.add(lp + ".tc.mix", uniform_init({d, d}, d, seed, lp + ".tc.mix"));
  }
}

inline void add_projection_params(ParamSet& ps, std::size_t c_in, std::size_t d, const std::string& name,
                                  std::uint64_t seed) {
  ps.add(name + ".w", uniform_init({c_in, d}, c_in, seed, name + ".w"));
  ps.add(name + ".b", Tensor({d}, 0.0));
}

/// Runs the layer stack on an already projected input h_in: [(B,) T, N, M, d].
inline Var encode(Var h_in, const BoundParams& p, const EncoderConfig& cfg, const std::string& prefix) {
  if (h_in.shape().size() < 4 || h_in.shape().back() != cfg.hidden) {
    throw DimensionError("encode expects [T,N,M," + std::to_string(cfg.hidden) + "], got " + to_string(h_in.shape()));
  }
  const std::size_t time_axis = h_in.shape().size() - 4;
  const std::size_t channel_axis = h_in.shape().size() - 1;
  cfg.output_steps(h_in.shape()[time_axis]);
  Var h = h_in;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    Var ma = modality_attention(h, projection(p, lp + ".ma.f1"), projection(p, lp + ".ma.f2"),
                                projection(p, lp + ".ma.f3")).out;
    Var sa = spatial_attention(h, projection(p, lp + ".sa.f1"), projection(p, lp + ".sa.f2"),
                               projection(p, lp + ".sa.f3")).out;
    Var next = temporal_conv_layer(concat({h, ma, sa}, channel_axis), temporal_conv(p, lp), cfg.dilations[l]);
    if (cfg.residual) {
      const std::size_t steps = h.shape()[time_axis];
      const std::size_t kept = next.shape()[time_axis];
      next = add(next, slice(h, time_axis, steps - kept, steps));
    }
    h = next;
  }
  return h;
}

}  // namespace mossl::encoder
