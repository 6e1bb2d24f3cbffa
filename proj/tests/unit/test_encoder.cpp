#include <gtest/gtest.h>

#include <numeric>

#include "mossl/encoder.hpp"
#include "mossl/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace mossl;
using namespace mossl::encoder;
using oracle::random_tensor;

namespace {

struct Heads {
  oracle::Proj f1, f2, f3;
};

Heads random_heads(std::size_t d, Rng& rng) {
  auto one = [&] { return oracle::Proj{random_tensor({d, d}, rng), random_tensor({d}, rng, -0.2, 0.2)}; };
  Heads h{one(), one(), one()};
  return h;
}

Projection bind(Tape& tape, const oracle::Proj& p) { return {tape.leaf(p.w, true), tape.leaf(p.b, true)}; }

Tensor permute_axis(const Tensor& h, std::size_t axis, const std::vector<std::size_t>& perm) {
  Tensor out(h.shape());
  const std::size_t T = h.dim(0), N = h.dim(1), M = h.dim(2), d = h.dim(3);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t sn = axis == 1 ? perm[n] : n;
          const std::size_t sm = axis == 2 ? perm[m] : m;
          out.at({t, n, m, c}) = h.at({t, sn, sm, c});
        }
  return out;
}

ParamSet encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
  ParamSet ps;
  add_projection_params(ps, cfg.input_channels, cfg.hidden, "encoder.input", seed);
  add_layer_params(ps, cfg, "encoder", seed);
  return ps;
}

Var run_encoder(Tape& tape, const BoundParams& p, const EncoderConfig& cfg, const Tensor& x) {
  Var h_in = input_project(tape.constant(x), p["encoder.input.w"], p["encoder.input.b"]);
  return encode(h_in, p, cfg, "encoder");
}

}  // namespace

TEST(InputProject, IdentityWeightsPassNonNegativeInput) {
  Rng rng(1);
  Tape tape;
  Tensor x = random_tensor({2, 3, 2, 4}, rng, 0.0, 1.0);
  Tensor eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
  Var y = input_project(tape.constant(x), tape.constant(eye), tape.constant(Tensor({4}, 0.0)));
  EXPECT_EQ(y.value(), x);
}

TEST(InputProject, ZeroInputGivesReluOfBias) {
  Tape tape;
  Tensor b({3}, std::vector<double>{-1.0, 0.5, 2.0});
  Var y = input_project(tape.constant(Tensor({2, 1, 1, 2}, 0.0)), tape.constant(Tensor({2, 3}, 0.7)), tape.constant(b));
  for (std::size_t i = 0; i < y.value().size(); ++i) EXPECT_EQ(y.value()[i], oracle::relu(b[i % 3]));
}

TEST(InputProject, MatchesLoopOracleAndChecksChannels) {
  Rng rng(2);
  Tape tape;
  Tensor x = random_tensor({3, 2, 2, 5}, rng);
  Tensor w = random_tensor({5, 4}, rng);
  Tensor b = random_tensor({4}, rng);
  Var y = input_project(tape.constant(x), tape.constant(w), tape.constant(b));
  for (std::size_t r = 0; r < x.size() / 5; ++r) {
    std::vector<double> v(x.data().begin() + r * 5, x.data().begin() + r * 5 + 5);
    const auto expect = oracle::project(v, w, b);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.value()[r * 4 + c], expect[c], 1e-12);
  }
  EXPECT_THROW(input_project(tape.constant(Tensor({2, 3})), tape.constant(w), tape.constant(b)), DimensionError);
}

TEST(ModalityAttention, SingleModalityReturnsValueProjection) {
  Rng rng(3);
  Tape tape;
  const Heads hs = random_heads(3, rng);
  Tensor h = random_tensor({2, 3, 1, 3}, rng);
  Attention a = modality_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
  for (double v : a.weights.value().data()) EXPECT_EQ(v, 1.0);
  Var expect = bind(tape, hs.f3)(tape.constant(h));
  EXPECT_LT(oracle::max_abs_diff(a.out.value(), expect.value()), 1e-15);
}

TEST(ModalityAttention, ZeroQueryGivesUniformWeightsAndMeanValue) {
  Rng rng(4);
  Tape tape;
  Heads hs = random_heads(4, rng);
  hs.f1 = {Tensor({4, 4}, 0.0), Tensor({4}, 0.0)};
  Tensor h = random_tensor({1, 2, 3, 4}, rng);
  Attention a = modality_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
  for (double v : a.weights.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor v = bind(tape, hs.f3)(tape.constant(h)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c) {
      const double mean = (v.at({0, n, 0, c}) + v.at({0, n, 1, c}) + v.at({0, n, 2, c})) / 3.0;
      for (std::size_t m = 0; m < 3; ++m) EXPECT_NEAR(a.out.value().at({0, n, m, c}), mean, 1e-14);
    }
}

TEST(ModalityAttention, MatchesLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tape tape;
    const Heads hs = random_heads(4, rng);
    Tensor h = random_tensor({2, 3, 3, 4}, rng);
    Attention a = modality_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
    EXPECT_LT(oracle::max_abs_diff(a.out.value(), oracle::attention(h, 2, hs.f1, hs.f2, hs.f3)), 1e-10);
  }
}

TEST(SpatialAttention, SingleNodeReturnsValueProjection) {
  Rng rng(6);
  Tape tape;
  const Heads hs = random_heads(3, rng);
  Tensor h = random_tensor({2, 1, 3, 3}, rng);
  Attention a = spatial_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
  Var expect = bind(tape, hs.f3)(tape.constant(h));
  EXPECT_LT(oracle::max_abs_diff(a.out.value(), expect.value()), 1e-15);
}

TEST(SpatialAttention, ZeroKeyGivesUniformWeightsAndMeanValue) {
  Rng rng(7);
  Tape tape;
  Heads hs = random_heads(2, rng);
  hs.f2 = {Tensor({2, 2}, 0.0), Tensor({2}, 0.0)};
  Tensor h = random_tensor({1, 4, 2, 2}, rng);
  Attention a = spatial_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
  for (double v : a.weights.value().data()) EXPECT_NEAR(v, 0.25, 1e-15);
  const Tensor v = bind(tape, hs.f3)(tape.constant(h)).value();
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (std::size_t n = 0; n < 4; ++n) mean += v.at({0, n, m, c}) / 4.0;
      for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(a.out.value().at({0, n, m, c}), mean, 1e-14);
    }
}

TEST(SpatialAttention, MatchesLoopOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Tape tape;
    const Heads hs = random_heads(3, rng);
    Tensor h = random_tensor({2, 4, 2, 3}, rng);
    Attention a = spatial_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
    EXPECT_LT(oracle::max_abs_diff(a.out.value(), oracle::attention(h, 1, hs.f1, hs.f2, hs.f3)), 1e-10);
  }
}

TEST(Attention, BatchedInputMatchesPerWindowResults) {
  Rng rng(9);
  Tape tape;
  const Heads hs = random_heads(3, rng);
  Tensor a = random_tensor({2, 3, 2, 3}, rng);
  Tensor b = random_tensor({2, 3, 2, 3}, rng);
  Var batch = concat({reshape(tape.constant(a), {1, 2, 3, 2, 3}), reshape(tape.constant(b), {1, 2, 3, 2, 3})}, 0);
  const Tensor out = spatial_attention(batch, bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3)).out.value();
  const Tensor oa = oracle::attention(a, 1, hs.f1, hs.f2, hs.f3);
  const Tensor ob = oracle::attention(b, 1, hs.f1, hs.f2, hs.f3);
  for (std::size_t i = 0; i < oa.size(); ++i) {
    EXPECT_NEAR(out[i], oa[i], 1e-12);
    EXPECT_NEAR(out[oa.size() + i], ob[i], 1e-12);
  }
}

TEST(Attention, WeightsAreRowStochastic) {
  Rng rng(10);
  Tape tape;
  const Heads hs = random_heads(4, rng);
  Tensor h = random_tensor({3, 5, 4, 4}, rng, -3.0, 3.0);
  for (bool spatial : {false, true}) {
    Attention a = spatial ? spatial_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3))
                          : modality_attention(tape.constant(h), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3));
    const Tensor& w = a.weights.value();
    const std::size_t A = w.shape().back();
    for (std::size_t r = 0; r < w.size() / A; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < A; ++j) {
        EXPECT_GE(w[r * A + j], 0.0);
        s += w[r * A + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, PermutationEquivariance) {
  Rng rng(11);
  const Heads hs = random_heads(3, rng);
  Tensor h = random_tensor({2, 4, 3, 3}, rng);
  for (std::size_t axis : {1u, 2u}) {
    std::vector<std::size_t> perm(h.dim(axis));
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[1]);
    Tape tape;
    auto run = [&](const Tensor& x) {
      return axis == 2 ? modality_attention(tape.constant(x), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3)).out.value()
                       : spatial_attention(tape.constant(x), bind(tape, hs.f1), bind(tape, hs.f2), bind(tape, hs.f3)).out.value();
    };
    const Tensor direct = permute_axis(run(h), axis, perm);
    const Tensor permuted = run(permute_axis(h, axis, perm));
    EXPECT_LT(oracle::max_abs_diff(direct, permuted), 1e-13) << "axis " << axis;
  }
}

TEST(TemporalConv, SaturatedGateWithSelectorFilterGivesTanh) {
  Rng rng(12);
  const std::size_t d = 2, C = 3 * d;
  Tensor hhat = random_tensor({4, 2, 2, C}, rng);
  Tensor filter({2, C, d}, 0.0);
  for (std::size_t o = 0; o < d; ++o) filter.at({1, o, o}) = 1.0;  // current step, channel o
  Tensor mix({d, d}, 0.0);
  for (std::size_t o = 0; o < d; ++o) mix.at({o, o}) = 1.0;
  Tape tape;
  TemporalConv p{tape.constant(filter), tape.constant(Tensor({d}, 0.0)), tape.constant(Tensor({2, C, d}, 0.0)),
                 tape.constant(Tensor({d}, 60.0)), tape.constant(mix)};
  const Tensor y = temporal_conv_layer(tape.constant(hhat), p, 1).value();
  ASSERT_EQ(y.shape(), (Shape{3, 2, 2, d}));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t o = 0; o < d; ++o) EXPECT_NEAR(y.at({t, n, m, o}), std::tanh(hhat.at({t + 1, n, m, o})), 1e-14);
}

TEST(TemporalConv, ZeroFilterGivesZeroOutput) {
  Rng rng(13);
  Tape tape;
  TemporalConv p{tape.constant(Tensor({2, 6, 2}, 0.0)), tape.constant(Tensor({2}, 0.0)),
                 tape.constant(random_tensor({2, 6, 2}, rng)), tape.constant(random_tensor({2}, rng)),
                 tape.constant(random_tensor({2, 2}, rng))};
  const Tensor y = temporal_conv_layer(tape.constant(random_tensor({5, 1, 2, 6}, rng)), p, 2).value();
  ASSERT_EQ(y.shape(), (Shape{3, 1, 2, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TemporalConv, MatchesLoopOracle) {
  Rng rng(14);
  for (std::size_t dilation : {1u, 2u, 3u}) {
    Tensor hhat = random_tensor({7, 2, 3, 6}, rng);
    Tensor f = random_tensor({2, 6, 2}, rng), bf = random_tensor({2}, rng), g = random_tensor({2, 6, 2}, rng),
           bg = random_tensor({2}, rng), mix = random_tensor({2, 2}, rng);
    Tape tape;
    TemporalConv p{tape.constant(f), tape.constant(bf), tape.constant(g), tape.constant(bg), tape.constant(mix)};
    const Tensor y = temporal_conv_layer(tape.constant(hhat), p, dilation).value();
    EXPECT_LT(oracle::max_abs_diff(y, oracle::temporal_conv_layer(hhat, f, bf, g, bg, mix, dilation)), 1e-10);
  }
}

TEST(Encoder, ExhaustedScheduleIsAConfigErrorNamingTheSchedule) {
  EncoderConfig cfg{3, 2, {1, 2, 4}, 2, 1, false};
  try {
    cfg.output_steps(7);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dilation schedule {1,2,4}"), std::string::npos) << e.what();
  }
  EXPECT_EQ(cfg.output_steps(8), 1u);
  ParamSet ps = encoder_params(cfg, 1);
  Tape tape;
  BoundParams bp(tape, ps);
  EXPECT_THROW(run_encoder(tape, bp, cfg, Tensor({7, 1, 1, 1}, 0.5)), ConfigError);
}

TEST(Encoder, PointwiseKernelsPreserveShape) {
  EncoderConfig cfg{1, 1, {1}, 3, 1, false};
  ParamSet ps = encoder_params(cfg, 2);
  Tape tape;
  BoundParams bp(tape, ps);
  Var h = run_encoder(tape, bp, cfg, Tensor({5, 2, 3, 1}, 0.3));
  EXPECT_EQ(h.shape(), (Shape{5, 2, 3, 3}));
}

TEST(Encoder, DefaultScheduleCollapsesSixteenStepsToOne) {
  ModelConfig m;
  m.hidden = 4;
  EncoderConfig cfg = EncoderConfig::from(m, 1);
  EXPECT_EQ(cfg.output_steps(16), 1u);
  ParamSet ps = encoder_params(cfg, 3);
  Tape tape;
  BoundParams bp(tape, ps, false);
  Rng rng(15);
  Var h = run_encoder(tape, bp, cfg, random_tensor({16, 3, 2, 1}, rng));
  EXPECT_EQ(h.shape(), (Shape{1, 3, 2, 4}));
}

TEST(Encoder, PublishedWidthsGiveExpectedRepresentationShape) {
  ModelConfig m;
  EncoderConfig cfg = EncoderConfig::from(m, 1);
  ParamSet ps = encoder_params(cfg, 4);
  Tape tape;
  BoundParams bp(tape, ps, false);
  Rng rng(16);
  Var h = run_encoder(tape, bp, cfg, random_tensor({16, 98, 4, 1}, rng));
  EXPECT_EQ(h.shape(), (Shape{1, 98, 4, 48}));
}

TEST(Encoder, EndToEndCausality) {
  // Two layers, dilations 1 and 2: output step t reads input steps t..t+3.
  EncoderConfig cfg{2, 2, {1, 2}, 3, 1, false};
  ParamSet ps = encoder_params(cfg, 5);
  Rng rng(17);
  Tensor x = random_tensor({6, 3, 2, 1}, rng);
  auto run = [&](const Tensor& in) {
    Tape tape;
    BoundParams bp(tape, ps, false);
    return run_encoder(tape, bp, cfg, in).value();
  };
  const Tensor base = run(x);
  ASSERT_EQ(base.dim(0), 3u);
  const std::size_t per_step = base.size() / 3;
  for (std::size_t step : {0u, 5u}) {
    Tensor xp = x;
    for (std::size_t i = 0; i < 6; ++i) xp[step * 6 + i] += 0.8;
    const Tensor moved = run(xp);
    for (std::size_t t = 0; t < 3; ++t) {
      const bool inside = step >= t && step <= t + 3;
      double diff = 0.0;
      for (std::size_t i = 0; i < per_step; ++i) diff = std::max(diff, std::abs(moved[t * per_step + i] - base[t * per_step + i]));
      if (inside) EXPECT_GT(diff, 0.0) << "step " << step << " output " << t;
      else EXPECT_EQ(diff, 0.0) << "step " << step << " output " << t;
    }
  }
}

TEST(Encoder, ResidualFlagAddsAlignedLayerInput) {
  EncoderConfig plain{1, 2, {1}, 2, 1, false};
  EncoderConfig residual = plain;
  residual.residual = true;
  ParamSet ps = encoder_params(plain, 6);
  Rng rng(18);
  Tensor x = random_tensor({3, 2, 2, 1}, rng);
  Tape tape;
  BoundParams bp(tape, ps, false);
  Var h_in = input_project(tape.constant(x), bp["encoder.input.w"], bp["encoder.input.b"]);
  const Tensor a = encode(h_in, bp, plain, "encoder").value();
  const Tensor b = encode(h_in, bp, residual, "encoder").value();
  const std::size_t per_step = a.size() / 2;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i] - a[i], h_in.value()[per_step + i], 1e-15);
}

namespace {

GradCheckReport encoder_grad_check(std::uint64_t seed) {
  EncoderConfig cfg{2, 2, {1, 2}, 3, 1, false};
  ParamSet ps = encoder_params(cfg, seed);
  // Bias offsets keep relu arguments off the kink at exactly zero.
  Rng rng(derive_seed(seed, "offsets"));
  for (auto& [name, t] : ps) {
    if (name.ends_with(".b") || name.ends_with("_bias")) t = random_tensor(t.shape(), rng, -0.3, 0.3);
  }
  Tensor x = random_tensor({5, 3, 2, 1}, rng);
  return grad_check([&](Tape& tape, const BoundParams& bp) { return sum(run_encoder(tape, bp, cfg, x)); }, ps);
}

}  // namespace

// Attention query/key gradients of sum(H) reach 1e-9, where the two loss
// evaluations differ by a few ulp; those coordinates are judged on the
// rounding-aware figure.
TEST(Encoder, GradientOfSumMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const GradCheckReport r = encoder_grad_check(seed);
    ASSERT_TRUE(r.finite) << r.failure;
    EXPECT_LT(r.max_relative_error_above_rounding, 1e-4) << "seed " << seed;
  }
}
