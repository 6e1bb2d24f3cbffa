#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mossl/augmentation.hpp"
#include "mossl/autodiff.hpp"
#include "mossl/config.hpp"
#include "mossl/data.hpp"
#include "mossl/encoder.hpp"
#include "mossl/gssl.hpp"
#include "mossl/init.hpp"
#include "mossl/mssl.hpp"
#include "mossl/ops.hpp"
#include "mossl/random.hpp"

namespace mossl::model {

// ---------------------------------------------------------------------------
// Parameters

/// Builds every learnable tensor the variant uses. Each tensor is seeded by
/// its own name, so variants share values for the tensors they have in common.
inline ParamSet init_params(const ModelConfig& m, const Ablation& a, std::uint64_t seed) {
  m.validate();
  const std::size_t d = m.hidden, K = m.components, G = m.grid_cells();
  const std::uint64_t s = derive_seed(seed, "init");
  ParamSet ps;
  const auto enc = encoder::EncoderConfig::from(m, 1);
  encoder::add_projection_params(ps, 1, d, "encoder.input", s);
  encoder::add_layer_params(ps, enc, "encoder", s);
  if (a.uses_augmented_view()) {
    encoder::add_projection_params(ps, 1 + d, d, "encoder.augment_input", s);
    ps.add("augment.w0", uniform_init({d}, d, s, "augment.w0"));
    ps.add("augment.e_t", uniform_init({m.input_steps, d}, d, s, "augment.e_t"));
    ps.add("augment.e_n", uniform_init({m.nodes, d}, d, s, "augment.e_n"));
    ps.add("augment.e_m", uniform_init({m.modalities, d}, d, s, "augment.e_m"));
  }
  if (a.uses_gssl()) {
    ps.add("gssl.w_gamma", uniform_init({K, G * d}, G * d, s, "gssl.w_gamma"));
    ps.add("gssl.w_mu", uniform_init({K, d, G}, G, s, "gssl.w_mu"));
    ps.add("gssl.b_mu", Tensor({K, d}, 0.0));
    ps.add("gssl.w_sigma", uniform_init({K, d, G}, G, s, "gssl.w_sigma"));
    ps.add("gssl.b_sigma", Tensor({K, d}, 0.0));
  }
  if (a.uses_mssl()) {
    ps.add("mssl.w1", uniform_init({d}, 1, s, "mssl.w1"));
    ps.add("mssl.w2", uniform_init({d}, 1, s, "mssl.w2"));
    ps.add("mssl.w3", uniform_init({d, d}, d, s, "mssl.w3"));
  }
  if (a.uses_aux_encoder()) {
    encoder::add_projection_params(ps, 1, d, "aux.input", s);
    encoder::add_layer_params(ps, enc, "aux.encoder", s);
  }
  ps.add("predictor.w_o1", uniform_init({d, d}, d, s, "predictor.w_o1"));
  ps.add("predictor.b_o1", Tensor({d}, 0.0));
  ps.add("predictor.w_o2",
         m.zero_init_output ? Tensor({d, m.output_steps}, 0.0) : uniform_init({d, m.output_steps}, d, s, "predictor.w_o2"));
  ps.add("predictor.b_o2", Tensor({m.output_steps}, 0.0));
  return ps;
}

/// Redraws every bias (zero at init) uniformly in ±scale. With zero biases an
/// all-zero input row puts a relu argument exactly on its kink, where the loss
/// is not differentiable; gradient checks use a point away from it.
inline void offset_biases(ParamSet& ps, std::uint64_t seed, double scale = 0.3) {
  Rng rng(derive_seed(seed, "bias_offsets"));
  for (auto& [name, t] : ps) {
    const bool bias = name.ends_with(".b") || name.ends_with("_bias") || name.find(".b_") != std::string::npos;
    if (!bias) continue;
    for (double& v : t.data()) v = uniform(rng, -scale, scale);
  }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Ŷ = relu(relu(H)·W_o1 + b_o1)·W_o2 + b_o2; H: [B, 1, N, M, d] -> [B, O, N, M].
inline Var predict(Var h, Var w_o1, Var b_o1, Var w_o2, Var b_o2) {
  const Shape& s = h.shape();
  if (s.size() != 5) throw DimensionError("predict expects [B,T_out,N,M,d], got " + to_string(s));
  if (s[1] != 1) {
    throw ConfigError("predictor needs the encoder to collapse time to one step; got T_out=" + std::to_string(s[1]));
  }
  Var z = relu(add(matmul(relu(h), w_o1), b_o1));
  Var y = add(matmul(z, w_o2), b_o2);  // [B, 1, N, M, O]
  return permute(reshape(y, {s[0], s[2], s[3], w_o2.shape()[1]}), {0, 3, 1, 2});
}

inline Var predict(Var h, const BoundParams& p) {
  return predict(h, p["predictor.w_o1"], p["predictor.b_o1"], p["predictor.w_o2"], p["predictor.b_o2"]);
}

/// Windows stacked along a leading batch axis.
struct Batch {
  Tensor x;  // [B, T, N, M]
  Tensor y;  // [B, O, N, M]
  std::vector<std::size_t> ids;
};

inline Batch make_batch(const std::vector<data::WindowSample>& windows, const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw ConfigError("empty batch");
  const Shape& sx = windows.at(ids[0]).x.shape();
  const Shape& sy = windows.at(ids[0]).y.shape();
  Batch b{Tensor({ids.size(), sx[0], sx[1], sx[2]}), Tensor({ids.size(), sy[0], sy[1], sy[2]}), ids};
  const std::size_t nx = numel(sx), ny = numel(sy);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& w = windows.at(ids[i]);
    std::copy(w.x.data().begin(), w.x.data().end(), b.x.data().begin() + i * nx);
    std::copy(w.y.data().begin(), w.y.data().end(), b.y.data().begin() + i * ny);
  }
  return b;
}

/// Where the augmentation mask comes from: a fixed tensor, or a draw per
/// window keyed by (seed, epoch, window id).
struct MaskPolicy {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::optional<Tensor> fixed;
};

struct LossParts {
  double recon = 0.0;
  std::optional<double> global;
  std::optional<double> modality;
};

struct Forward {
  Var x;
  Var h;
  Var prediction;
  std::optional<Var> phi;
  Tensor mask;
  std::optional<Var> x_aug;
  std::optional<Var> h_aug;
  std::optional<Var> h_second;
  std::optional<gssl::MixtureState> mixture;
  Var recon;
  std::optional<Var> global;
  std::optional<Var> modality;
  Var loss;

  LossParts parts() const {
    LossParts p;
    p.recon = recon.value().item();
    if (global) p.global = global->value().item();
    if (modality) p.modality = modality->value().item();
    return p;
  }
};

inline Var encode_original(Var x, const BoundParams& p, const ModelConfig& m) {
  Shape s = x.shape();
  s.push_back(1);
  Var h0 = encoder::input_project(reshape(x, s), p["encoder.input.w"], p["encoder.input.b"]);
  return encoder::encode(h0, p, encoder::EncoderConfig::from(m, 1), "encoder");
}

/// L_r = Σ (Y - Ŷ)², averaged over the batch.
inline Var reconstruction_loss(Var prediction, Var target) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("prediction " + to_string(prediction.shape()) + " vs target " + to_string(target.shape()));
  }
  return scale(sum(square(sub(prediction, target))), 1.0 / static_cast<double>(prediction.shape()[0]));
}

namespace detail {

inline void require_finite(Var v, const char* what) {
  const double x = v.value().item();
  if (!std::isfinite(x)) throw NumericalError(std::string(what) + " loss is non-finite (" + std::to_string(x) + ")");
}

}  // namespace detail

/// Training-mode forward pass with all enabled losses.
///
/// Disabled terms are never computed. L = w_r·L_r + w_g·L_g + w_c·L_c.
inline Forward forward(Tape& tape, const BoundParams& p, const ModelConfig& m, const TrainConfig& tc, const Batch& batch,
                       const MaskPolicy& masks) {
  const Ablation& a = tc.ablation;
  Forward f;
  f.x = tape.constant(batch.x);
  f.h = encode_original(f.x, p, m);
  f.prediction = predict(f.h, p);
  f.recon = reconstruction_loss(f.prediction, tape.constant(batch.y));
  detail::require_finite(f.recon, "reconstruction");

  if (a.uses_augmented_view()) {
    f.phi = augmentation::modality_relevance(f.h, p["augment.w0"]);
    Var phi_in = augmentation::align_to_input(*f.phi, m.input_steps);
    if (masks.fixed) {
      if (masks.fixed->shape() != phi_in.shape()) {
        throw DimensionError("fixed mask " + to_string(masks.fixed->shape()) + " does not match input " +
                             to_string(phi_in.shape()));
      }
      f.mask = *masks.fixed;
    } else {
      std::vector<std::uint64_t> seeds;
      for (std::size_t id : batch.ids) seeds.push_back(augmentation::window_mask_seed(masks.seed, masks.epoch, id));
      f.mask = augmentation::sample_batch_mask(phi_in.value(), seeds, m.mask_rate_scale);
    }
    Var keep = augmentation::keep_factor(tape, f.mask, phi_in, m.straight_through);
    Var E = augmentation::most_embedding(p["augment.e_t"], p["augment.e_n"], p["augment.e_m"]);
    f.x_aug = augmentation::build_augmented_input(f.x, keep, E);
    Var h0 = encoder::input_project(*f.x_aug, p["encoder.augment_input.w"], p["encoder.augment_input.b"]);
    f.h_aug = encoder::encode(h0, p, encoder::EncoderConfig::from(m, 1 + m.hidden), "encoder");
  }

  if (a.uses_gssl()) {
    f.mixture = gssl::mixture(*f.h_aug, gssl::heads(p));
    f.global = gssl::gssl_loss(f.h, *f.mixture, batch.ids);
  }

  if (a.uses_mssl()) {
    if (f.h_aug) {
      f.h_second = *f.h_aug;
    } else if (a.uses_aux_encoder()) {
      Shape s = f.x.shape();
      s.push_back(1);
      Var h0 = encoder::input_project(reshape(f.x, s), p["aux.input.w"], p["aux.input.b"]);
      f.h_second = encoder::encode(h0, p, encoder::EncoderConfig::from(m, 1), "aux.encoder");
    } else {
      f.h_second = f.h;
    }
    Var r = mssl::fuse(f.h, *f.h_second, p["mssl.w1"], p["mssl.w2"]);
    f.modality = mssl::mssl_loss(r, mssl::modality_context(r), p["mssl.w3"], m.average_negatives);
    detail::require_finite(*f.modality, "modality self-supervised");
  }

  f.loss = scale(f.recon, tc.weight_recon);
  if (f.global) f.loss = add(f.loss, scale(*f.global, tc.weight_global));
  if (f.modality) f.loss = add(f.loss, scale(*f.modality, tc.weight_modality));
  detail::require_finite(f.loss, "total");
  return f;
}

/// Evaluation runs the original view only. Returns normalized Ŷ: [B, O, N, M].
inline Tensor predict_batch(const ParamSet& params, const ModelConfig& m, const Tensor& x) {
  Tape tape;
  BoundParams p(tape, params, false);
  return predict(encode_original(tape.constant(x), p, m), p).value();
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::size_t step = 0;
};

/// Bias-corrected Adam; the state is zero-initialized on first use.
inline void adam_step(ParamSet& params, const ParamSet& grads, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (st.step == 0 && st.m.size() == 0) {
    for (const auto& [name, t] : params) {
      st.m.add(name, Tensor(t.shape(), 0.0));
      st.v.add(name, Tensor(t.shape(), 0.0));
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (auto& [name, theta] : params) {
    const Tensor& g = grads.get(name);
    if (g.shape() != theta.shape()) throw DimensionError("gradient shape mismatch for " + name);
    Tensor& m = st.m.get(name);
    Tensor& v = st.v.get(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

/// MAE and RMSE per modality and horizon, indexed [modality][horizon].
struct Metrics {
  std::vector<std::string> modalities;
  std::size_t horizons = 0;
  std::size_t windows = 0;
  std::vector<std::vector<double>> mae;
  std::vector<std::vector<double>> rmse;
  double overall_mae = 0.0;
  double overall_rmse = 0.0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// pred, truth: [W, O, N, M] in the same units.
inline Metrics compute_metrics(const Tensor& pred, const Tensor& truth, std::vector<std::string> names = {}) {
  if (pred.shape() != truth.shape() || pred.rank() != 4) {
    throw DimensionError("metrics need matching [W,O,N,M] tensors, got " + to_string(pred.shape()) + " and " +
                         to_string(truth.shape()));
  }
  const std::size_t W = pred.dim(0), O = pred.dim(1), N = pred.dim(2), M = pred.dim(3);
  if (W == 0) throw DataError("cannot compute metrics on an empty split");
  if (names.empty()) {
    for (std::size_t m = 0; m < M; ++m) names.push_back("modality" + std::to_string(m));
  }
  if (names.size() != M) throw DimensionError("modality names do not match tensor");
  Metrics r;
  r.modalities = std::move(names);
  r.horizons = O;
  r.windows = W;
  r.mae.assign(M, std::vector<double>(O, 0.0));
  r.rmse.assign(M, std::vector<double>(O, 0.0));
  double abs_all = 0.0, sq_all = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t o = 0; o < O; ++o) {
      double a = 0.0, s = 0.0;
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t i = ((w * O + o) * N + n) * M + m;
          const double e = pred[i] - truth[i];
          a += std::abs(e);
          s += e * e;
        }
      abs_all += a;
      sq_all += s;
      const double count = static_cast<double>(W * N);
      r.mae[m][o] = a / count;
      r.rmse[m][o] = std::sqrt(s / count);
    }
  }
  const double total = static_cast<double>(pred.size());
  r.overall_mae = abs_all / total;
  r.overall_rmse = std::sqrt(sq_all / total);
  return r;
}

/// Windows evaluated per forward pass; fixed so results do not depend on the caller.
inline constexpr std::size_t kEvalBatch = 16;

/// Normalized predictions for every window: [W, O, N, M].
inline Tensor predict_windows(const ParamSet& params, const ModelConfig& m,
                              const std::vector<data::WindowSample>& windows) {
  if (windows.empty()) throw DataError("no windows to predict");
  const Shape& sy = windows[0].y.shape();
  Tensor out({windows.size(), sy[0], sy[1], sy[2]});
  const std::size_t per = numel(sy);
  for (std::size_t start = 0; start < windows.size(); start += kEvalBatch) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(windows.size(), start + kEvalBatch); ++i) ids.push_back(i);
    const Tensor y = predict_batch(params, m, make_batch(windows, ids).x);
    std::copy(y.data().begin(), y.data().end(), out.data().begin() + start * per);
  }
  return out;
}

inline Tensor stacked_targets(const std::vector<data::WindowSample>& windows) {
  std::vector<std::size_t> ids(windows.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return make_batch(windows, ids).y;
}

/// Metrics in original units.
inline Metrics evaluate(const ParamSet& params, const ModelConfig& m, const std::vector<data::WindowSample>& windows,
                        const data::NormStats& stats, const std::vector<std::string>& names = {}) {
  return compute_metrics(data::zscore_invert(predict_windows(params, m, windows), stats),
                         data::zscore_invert(stacked_targets(windows), stats), names);
}

/// Repeats the last observed step for every horizon.
inline Metrics persistence_baseline(const std::vector<data::WindowSample>& windows, const data::NormStats& stats,
                                    const std::vector<std::string>& names = {}) {
  if (windows.empty()) throw DataError("no windows to evaluate");
  const Tensor truth = stacked_targets(windows);
  Tensor pred(truth.shape());
  const std::size_t O = truth.dim(1), cell = truth.dim(2) * truth.dim(3);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const Tensor& x = windows[w].x;
    const std::size_t last = (x.dim(0) - 1) * cell;
    for (std::size_t o = 0; o < O; ++o)
      std::copy_n(x.data().begin() + last, cell, pred.data().begin() + (w * O + o) * cell);
  }
  return compute_metrics(data::zscore_invert(pred, stats), data::zscore_invert(truth, stats), names);
}

inline nlohmann::json metrics_json(const Metrics& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t m = 0; m < r.modalities.size(); ++m)
    for (std::size_t o = 0; o < r.horizons; ++o)
      rows.push_back({{"modality", r.modalities[m]}, {"horizon", o + 1}, {"mae", r.mae[m][o]}, {"rmse", r.rmse[m][o]}});
  return {{"windows", r.windows}, {"overall", {{"mae", r.overall_mae}, {"rmse", r.overall_rmse}}}, {"rows", rows}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics r;
  try {
    r.windows = j.at("windows").get<std::size_t>();
    r.overall_mae = j.at("overall").at("mae").get<double>();
    r.overall_rmse = j.at("overall").at("rmse").get<double>();
    for (const auto& row : j.at("rows")) {
      const auto name = row.at("modality").get<std::string>();
      const auto h = row.at("horizon").get<std::size_t>();
      if (r.modalities.empty() || r.modalities.back() != name) {
        r.modalities.push_back(name);
        r.mae.emplace_back();
        r.rmse.emplace_back();
      }
      if (h != r.mae.back().size() + 1) throw DataError("metrics rows out of order");
      r.mae.back().push_back(row.at("mae").get<double>());
      r.rmse.back().push_back(row.at("rmse").get<double>());
    }
    r.horizons = r.mae.empty() ? 0 : r.mae.front().size();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

inline std::string metrics_csv(const Metrics& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "modality,horizon,mae,rmse\n";
  for (std::size_t m = 0; m < r.modalities.size(); ++m)
    for (std::size_t o = 0; o < r.horizons; ++o)
      os << r.modalities[m] << ',' << o + 1 << ',' << r.mae[m][o] << ',' << r.rmse[m][o] << '\n';
  return os.str();
}

/// Writes <stem>.csv and <stem>.json.
inline void write_metrics(const std::filesystem::path& stem, const Metrics& r) {
  std::filesystem::create_directories(stem.parent_path().empty() ? "." : stem.parent_path());
  std::ofstream(stem.string() + ".csv") << metrics_csv(r);
  std::ofstream(stem.string() + ".json") << metrics_json(r).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  LossParts parts;
  std::optional<double> val_rmse;
  double seconds = 0.0;
};

struct TrainResult {
  ParamSet params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Permutation of 0..n-1 that depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "shuffle", epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

inline nlohmann::json history_json(const std::vector<EpochRecord>& history) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : history) {
    nlohmann::json e{{"epoch", r.epoch}, {"loss", r.loss}, {"recon", r.parts.recon}, {"seconds", r.seconds}};
    if (r.parts.global) e["global"] = *r.parts.global;
    if (r.parts.modality) e["modality"] = *r.parts.modality;
    if (r.val_rmse) e["val_rmse"] = *r.val_rmse;
    out.push_back(std::move(e));
  }
  return out;
}

/// Mini-batch Adam over the training windows.
///
/// Shuffle order and masks depend only on the seed. With early stopping the
/// parameters of the best validation epoch are returned, otherwise the last.
inline TrainResult train(const data::PreparedData& d, const ModelConfig& m, const TrainConfig& tc,
                         const EpochCallback& on_epoch = {}) {
  m.validate();
  tc.validate();
  if (d.train.empty()) throw DataError("training split has no windows");
  const Shape& sx = d.train[0].x.shape();
  if (sx != Shape{m.input_steps, m.nodes, m.modalities} || d.train[0].y.dim(0) != m.output_steps) {
    throw DimensionError("windows " + to_string(sx) + " do not match model config");
  }
  TrainResult res;
  ParamSet params = init_params(m, tc.ablation, tc.seed);
  AdamState adam;
  const std::uint64_t mask_seed = derive_seed(tc.seed, "mask");
  const bool can_stop = tc.early_stopping && !d.val.empty();
  double best = std::numeric_limits<double>::infinity();
  ParamSet best_params;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(d.train.size(), tc.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    double g_sum = 0.0, c_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch_size)));
      const Batch batch = make_batch(d.train, ids);
      Tape tape;
      BoundParams bp(tape, params, true);
      const Forward f = forward(tape, bp, m, tc, batch, MaskPolicy{mask_seed, epoch, std::nullopt});
      tape.backward(f.loss);
      adam_step(params, bp.gradients(tape, params), adam, tc.learning_rate);
      const LossParts parts = f.parts();
      rec.loss += f.loss.value().item();
      rec.parts.recon += parts.recon;
      if (parts.global) g_sum += *parts.global;
      if (parts.modality) c_sum += *parts.modality;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    rec.loss /= nb;
    rec.parts.recon /= nb;
    if (tc.ablation.uses_gssl()) rec.parts.global = g_sum / nb;
    if (tc.ablation.uses_mssl()) rec.parts.modality = c_sum / nb;
    if (!d.val.empty()) rec.val_rmse = evaluate(params, m, d.val, d.stats).overall_rmse;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (can_stop) {
      if (*rec.val_rmse < best) {
        best = *rec.val_rmse;
        best_params = params;
        res.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= tc.patience) {
        res.stopped_early = true;
        break;
      }
    }
  }
  if (can_stop) {
    res.params = std::move(best_params);
  } else {
    res.params = std::move(params);
    res.best_epoch = res.history.size();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint: manifest.json + params.bin (MOST containers in manifest order)

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelConfig model;
  Ablation ablation;
  ParamSet params;
  data::NormStats stats;
  std::vector<std::string> modality_names;
};

inline std::string config_hash(const ModelConfig& m, const Ablation& a) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(model_json(m, a).dump());
  return os.str();
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.input_steps = j.at("input_steps").get<std::size_t>();
  m.output_steps = j.at("output_steps").get<std::size_t>();
  m.nodes = j.at("nodes").get<std::size_t>();
  m.modalities = j.at("modalities").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::size_t>();
  m.components = j.at("components").get<std::size_t>();
  m.layers = j.at("layers").get<std::size_t>();
  m.kernel = j.at("kernel").get<std::size_t>();
  m.dilations = j.at("dilations").get<std::vector<std::size_t>>();
  m.residual = j.at("residual").get<bool>();
  m.straight_through = j.at("straight_through").get<bool>();
  m.average_negatives = j.at("average_negatives").get<bool>();
  m.zero_init_output = j.at("zero_init_output").get<bool>();
  m.mask_rate_scale = j.at("mask_rate_scale").get<double>();
  return m;
}

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  {
    std::ofstream os(dir / "params.bin", std::ios::binary);
    if (!os) throw DataError("cannot write " + (dir / "params.bin").string());
    for (const auto& [name, t] : ck.params) {
      params.push_back({{"name", name}, {"shape", t.shape()}});
      write_tensor(os, t);
    }
  }
  nlohmann::json j{
      {"format_version", kCheckpointFormatVersion},
      {"config_hash", config_hash(ck.model, ck.ablation)},
      {"model", model_json(ck.model, ck.ablation)},
      {"params", params},
      {"norm_stats", {{"mean", ck.stats.mean}, {"std", ck.stats.std}}},
      {"modalities", ck.modality_names},
      {"payload", "params.bin"},
  };
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';
}

/// Restores a checkpoint; any layout disagreement is a CheckpointError.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw CheckpointError("no checkpoint manifest at " + (dir / "manifest.json").string());
  nlohmann::json j;
  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> layout;
  try {
    ms >> j;
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointFormatVersion) + ")");
    }
    ck.model = model_from_json(j.at("model"));
    ck.ablation = Ablation::from_name(j.at("model").at("variant").get<std::string>());
    ck.stats.mean = j.at("norm_stats").at("mean").get<std::vector<double>>();
    ck.stats.std = j.at("norm_stats").at("std").get<std::vector<double>>();
    ck.modality_names = j.value("modalities", std::vector<std::string>{});
    for (const auto& p : j.at("params")) layout.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest (format version ") +
                          std::to_string(kCheckpointFormatVersion) + "): " + e.what());
  }
  if (j.at("config_hash").get<std::string>() != config_hash(ck.model, ck.ablation)) {
    throw CheckpointError("checkpoint config hash does not match its model section");
  }
  const ParamSet expected = init_params(ck.model, ck.ablation, 0);
  if (layout.size() != expected.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(layout.size()) + " tensors, model needs " +
                          std::to_string(expected.size()));
  }
  std::ifstream ps(dir / "params.bin", std::ios::binary);
  if (!ps) throw CheckpointError("missing checkpoint payload params.bin");
  for (const auto& [name, shape] : layout) {
    if (!expected.contains(name) || expected.get(name).shape() != shape) {
      throw CheckpointError("checkpoint tensor " + name + " " + to_string(shape) + " does not fit the model");
    }
    Tensor t;
    try {
      t = read_tensor(ps);
    } catch (const DataError& e) {
      throw CheckpointError(std::string("corrupt checkpoint payload: ") + e.what());
    }
    if (t.shape() != shape) throw CheckpointError("payload tensor " + name + " has shape " + to_string(t.shape()));
    ck.params.add(name, std::move(t));
  }
  return ck;
}

}  // namespace mossl::model
