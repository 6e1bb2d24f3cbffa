#pragma once

// Small configurations and datasets shared by the model, CLI and acceptance tests.

#include <string>

#include "mossl/config.hpp"
#include "mossl/data.hpp"
#include "mossl/model.hpp"
#include "mossl/random.hpp"

namespace fixture {

using namespace mossl;

/// T=4, two layers with dilations 1 and 2, N=3, M=2, d_z=4, K=2, O=1.
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.input_steps = 4;
  m.output_steps = 1;
  m.nodes = 3;
  m.modalities = 2;
  m.hidden = 4;
  m.components = 2;
  m.layers = 2;
  m.dilations = {1, 2};
  return m;
}

inline model::Batch random_batch(const ModelConfig& m, std::size_t B, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "batch"));
  model::Batch b{Tensor({B, m.input_steps, m.nodes, m.modalities}), Tensor({B, m.output_steps, m.nodes, m.modalities}), {}};
  for (double& v : b.x.data()) v = standard_normal(rng);
  for (double& v : b.y.data()) v = standard_normal(rng);
  for (std::size_t i = 0; i < B; ++i) b.ids.push_back(i);
  return b;
}

/// Synthetic series with a planted cross-modality coupling.
inline data::SynthSpec coupled_spec(std::size_t nodes, std::size_t modalities, std::size_t steps) {
  data::SynthSpec s;
  s.nodes = nodes;
  s.modalities = modalities;
  s.steps = steps;
  s.regimes = 2;
  std::vector<std::vector<double>> a(modalities, std::vector<double>(modalities, 0.0));
  std::vector<std::vector<double>> b = a;
  for (std::size_t i = 0; i < modalities; ++i) {
    a[i][i] = 0.6;
    a[i][(i + 1) % modalities] += 0.4;
    b[i][i] = 0.5;
    b[i][(i + modalities - 1) % modalities] += 0.5;
  }
  if (modalities == 1) a = b = {{1.0}};
  s.coupling = {a, b};
  return s;
}

inline data::PreparedData tiny_data(const ModelConfig& m, std::size_t steps = 80, std::uint64_t seed = 3) {
  return data::prepare(data::synth_generate(coupled_spec(m.nodes, m.modalities, steps), seed), data::SplitSpec{},
                       m.input_steps, m.output_steps);
}

}  // namespace fixture
