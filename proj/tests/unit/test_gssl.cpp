#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mossl/gradcheck.hpp"
#include "mossl/gssl.hpp"
#include "support/oracles.hpp"

using namespace mossl;
using namespace mossl::gssl;
using oracle::random_tensor;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

MixtureState fixed_state(Tape& tape, const Tensor& gamma, const Tensor& mu, const Tensor& var) {
  Tensor lg(gamma.shape());
  for (std::size_t i = 0; i < gamma.size(); ++i) lg[i] = std::log(gamma[i]);
  return {tape.constant(lg), tape.constant(gamma), tape.constant(mu), tape.constant(var)};
}

MixtureHeads constant_heads(Tape& tape, const Tensor& wg, const Tensor& wm, const Tensor& bm, const Tensor& ws,
                            const Tensor& bs) {
  return {tape.constant(wg), tape.constant(wm), tape.constant(bm), tape.constant(ws), tape.constant(bs)};
}

}  // namespace

TEST(Memberships, SingleComponentHasUnitWeight) {
  Rng rng(1);
  Tape tape;
  Var g = memberships(tape.constant(random_tensor({2, 1, 2, 2, 3}, rng)), tape.constant(random_tensor({1, 12}, rng)));
  ASSERT_EQ(g.shape(), (Shape{2, 1}));
  for (double v : g.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(Memberships, ZeroWeightsGiveUniformMemberships) {
  Rng rng(2);
  Tape tape;
  Var g = memberships(tape.constant(random_tensor({1, 1, 3, 2, 2}, rng)), tape.constant(Tensor({4, 12}, 0.0)));
  for (double v : g.value().data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Memberships, MatchSoftmaxOfDotProducts) {
  Rng rng(3);
  Tape tape;
  Tensor h = random_tensor({2, 1, 2, 2, 2}, rng);
  Tensor w = random_tensor({3, 8}, rng, -2.0, 2.0);
  const Tensor g = memberships(tape.constant(h), tape.constant(w)).value();
  for (std::size_t b = 0; b < 2; ++b) {
    double u[3] = {0, 0, 0}, z = 0.0, total = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t i = 0; i < 8; ++i) u[k] += w[k * 8 + i] * h[b * 8 + i];
      z += std::exp(u[k]);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(g[b * 3 + k], std::exp(u[k]) / z, 1e-12);
      total += g[b * 3 + k];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_THROW(memberships(tape.constant(h), tape.constant(Tensor({3, 7}))), DimensionError);
}

TEST(ComponentParams, ZeroHeadsGiveStandardComponents) {
  Rng rng(4);
  Tape tape;
  const MixtureHeads p = constant_heads(tape, Tensor({2, 12}, 0.0), Tensor({2, 3, 4}, 0.0), Tensor({2, 3}, 0.0),
                                        Tensor({2, 3, 4}, 0.0), Tensor({2, 3}, 0.0));
  const MixtureState st = component_params(tape.constant(random_tensor({2, 1, 2, 2, 3}, rng)), p);
  ASSERT_EQ(st.mu.shape(), (Shape{2, 2, 3}));
  for (double v : st.mu.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : st.sigma2.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(ComponentParams, MatchDirectFormula) {
  Rng rng(5);
  Tape tape;
  const std::size_t B = 2, G = 3, D = 2, K = 2;
  Tensor h = random_tensor({B, 1, 3, 1, D}, rng);
  Tensor wm = random_tensor({K, D, G}, rng), bm = random_tensor({K, D}, rng);
  Tensor ws = random_tensor({K, D, G}, rng), bs = random_tensor({K, D}, rng);
  const MixtureState st = component_params(tape.constant(h), constant_heads(tape, Tensor({K, G * D}), wm, bm, ws, bs));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t d = 0; d < D; ++d) {
        double m = bm.at({k, d}), s = bs.at({k, d});
        for (std::size_t g = 0; g < G; ++g) {
          m += wm.at({k, d, g}) * h[(b * G + g) * D + d];
          s += ws.at({k, d, g}) * h[(b * G + g) * D + d];
        }
        EXPECT_NEAR(st.mu.value().at({b, k, d}), m, 1e-10);
        EXPECT_NEAR(st.sigma2.value().at({b, k, d}), std::exp(s), 1e-10);
      }
}

TEST(ComponentParams, VarianceStaysInsideTheClampForExtremeInputs) {
  Tape tape;
  Tensor h({2, 1, 1, 1, 1}, std::vector<double>{1e4, -1e4});
  const MixtureHeads p = constant_heads(tape, Tensor({1, 1}, 0.0), Tensor({1, 1, 1}, 0.0), Tensor({1, 1}, 0.0),
                                        Tensor({1, 1, 1}, 1.0), Tensor({1, 1}, 0.0));
  const Tensor var = component_params(tape.constant(h), p).sigma2.value();
  EXPECT_EQ(var[0], kVarianceMax);
  EXPECT_EQ(var[1], kVarianceMin);
}

TEST(GsslLoss, DensityAtTheMeanIsTheNormalizer) {
  Tape tape;
  const MixtureState st = fixed_state(tape, Tensor({1, 1}, 1.0), Tensor({1, 1, 1}, 0.3), Tensor({1, 1, 1}, 1.0));
  const double L = gssl_loss(tape.constant(Tensor({1, 1, 1, 1, 1}, 0.3)), st).value().item();
  EXPECT_NEAR(L, kHalfLog2Pi, 1e-12);
  EXPECT_NEAR(L, 0.918939, 1e-6);
}

TEST(GsslLoss, IdenticalComponentsCollapseToOne) {
  Rng rng(6);
  Tape tape;
  Tensor h = random_tensor({1, 1, 2, 2, 3}, rng);
  Tensor mu = random_tensor({1, 1, 3}, rng), var = random_tensor({1, 1, 3}, rng, 0.5, 2.0);
  Tensor mu2({1, 2, 3}), var2({1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    mu2[i] = mu2[3 + i] = mu[i];
    var2[i] = var2[3 + i] = var[i];
  }
  const double one = gssl_loss(tape.constant(h), fixed_state(tape, Tensor({1, 1}, 1.0), mu, var)).value().item();
  const double two = gssl_loss(tape.constant(h), fixed_state(tape, Tensor({1, 2}, 0.5), mu2, var2)).value().item();
  EXPECT_NEAR(one, two, 1e-12);
}

TEST(GsslLoss, MatchesProbabilityDomainOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tape tape;
    Tensor h = random_tensor({1, 1, 3, 2, 1}, rng, -2.0, 2.0);
    const double g0 = uniform(rng, 0.1, 0.9);
    Tensor gamma({1, 2}, std::vector<double>{g0, 1.0 - g0});
    Tensor mu = random_tensor({1, 2, 1}, rng, -1.0, 1.0), var = random_tensor({1, 2, 1}, rng, 0.3, 3.0);
    const double L = gssl_loss(tape.constant(h), fixed_state(tape, gamma, mu, var)).value().item();
    const double expect = oracle::mixture_nll(h.reshaped({6, 1}), gamma.reshaped({2}), mu.reshaped({2, 1}), var.reshaped({2, 1}));
    EXPECT_NEAR(L, expect, 1e-8);
  }
}

TEST(GsslLoss, BatchLossIsTheMeanOfWindowLosses) {
  Rng rng(8);
  Tape tape;
  Tensor h = random_tensor({2, 1, 2, 1, 2}, rng);
  Tensor gamma({2, 2}, std::vector<double>{0.3, 0.7, 0.6, 0.4});
  Tensor mu = random_tensor({2, 2, 2}, rng), var = random_tensor({2, 2, 2}, rng, 0.5, 2.0);
  const double L = gssl_loss(tape.constant(h), fixed_state(tape, gamma, mu, var)).value().item();
  double total = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor hb({2, 2}, std::vector<double>(h.data().begin() + b * 4, h.data().begin() + b * 4 + 4));
    Tensor gb({2}, std::vector<double>(gamma.data().begin() + b * 2, gamma.data().begin() + b * 2 + 2));
    Tensor mb({2, 2}, std::vector<double>(mu.data().begin() + b * 4, mu.data().begin() + b * 4 + 4));
    Tensor vb({2, 2}, std::vector<double>(var.data().begin() + b * 4, var.data().begin() + b * 4 + 4));
    total += oracle::mixture_nll(hb, gb, mb, vb);
  }
  EXPECT_NEAR(L, total / 2.0, 1e-10);
}

TEST(GsslLoss, MinimizedAtTheMeanOfScoredPoints) {
  const Tensor h({1, 1, 2, 1, 1}, std::vector<double>{-0.4, 1.6});
  auto loss_at = [&](double mu, Tensor* grad = nullptr) {
    Tape tape;
    Var m = tape.leaf(Tensor({1, 1, 1}, mu), true);
    MixtureState st{tape.constant(Tensor({1, 1}, 0.0)), tape.constant(Tensor({1, 1}, 1.0)), m,
                    tape.constant(Tensor({1, 1, 1}, 1.0))};
    Var L = gssl_loss(tape.constant(h), st);
    tape.backward(L);
    if (grad) *grad = tape.grad(m);
    return L.value().item();
  };
  Tensor g;
  const double at_mean = loss_at(0.6, &g);
  EXPECT_NEAR(g[0], 0.0, 1e-14);
  for (double delta : {-0.5, -1e-3, 1e-3, 0.5}) EXPECT_GT(loss_at(0.6 + delta), at_mean);
}

TEST(GsslLoss, NonFiniteLossNamesTheWindow) {
  Tape tape;
  Tensor h({2, 1, 1, 1, 1}, std::vector<double>{0.0, INFINITY});
  const MixtureState st = fixed_state(tape, Tensor({2, 1}, 1.0), Tensor({2, 1, 1}, 0.0), Tensor({2, 1, 1}, 1.0));
  try {
    gssl_loss(tape.constant(h), st, {40, 41});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("window 41"), std::string::npos) << e.what();
  }
}

TEST(GsslLoss, GradientsReachBothViews) {
  Rng rng(9);
  ParamSet ps;
  ps.add("h", random_tensor({2, 1, 2, 2, 2}, rng));
  ps.add("h_aug", random_tensor({2, 1, 2, 2, 2}, rng));
  ps.add("w_gamma", random_tensor({2, 8}, rng));
  ps.add("w_mu", random_tensor({2, 2, 4}, rng));
  ps.add("b_mu", random_tensor({2, 2}, rng));
  ps.add("w_sigma", random_tensor({2, 2, 4}, rng, -0.3, 0.3));
  ps.add("b_sigma", random_tensor({2, 2}, rng, -0.3, 0.3));
  auto loss = [](Tape&, const BoundParams& p) {
    const MixtureHeads heads{p["w_gamma"], p["w_mu"], p["b_mu"], p["w_sigma"], p["b_sigma"]};
    return gssl_loss(p["h"], mixture(p["h_aug"], heads));
  };
  Tape tape;
  BoundParams bp(tape, ps);
  Var L = loss(tape, bp);
  tape.backward(L);
  for (const char* name : {"h", "h_aug"}) {
    double norm = 0.0;
    const Tensor g = tape.grad(bp[name]);
    for (double v : g.data()) norm += std::abs(v);
    EXPECT_GT(norm, 0.0) << name;
  }
  const GradCheckReport r = grad_check(loss, ps);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}
