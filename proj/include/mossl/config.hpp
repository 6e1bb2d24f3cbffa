#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mossl/data.hpp"
#include "mossl/errors.hpp"

namespace mossl {

/// Model dimensions. Defaults are the published settings; `nodes` and
/// `modalities` come from the dataset (0 until known).
struct ModelConfig {
  std::size_t input_steps = 16;
  std::size_t output_steps = 3;
  std::size_t nodes = 0;
  std::size_t modalities = 0;
  std::size_t hidden = 48;
  std::size_t components = 4;
  std::size_t layers = 4;
  std::size_t kernel = 2;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  bool residual = false;
  bool straight_through = false;
  bool average_negatives = false;
  bool zero_init_output = false;
  double mask_rate_scale = 1.0;

  /// Time steps left after the encoder's valid convolutions.
  std::size_t encoded_steps() const {
    std::size_t reach = 0;
    for (std::size_t d : dilations) reach += (kernel - 1) * d;
    if (reach >= input_steps) {
      std::ostringstream os;
      os << "dilation schedule {";
      for (std::size_t i = 0; i < dilations.size(); ++i) os << (i ? "," : "") << dilations[i];
      os << "} with kernel " << kernel << " consumes " << reach << " steps; input has only " << input_steps;
      throw ConfigError(os.str());
    }
    return input_steps - reach;
  }

  std::size_t grid_cells() const { return encoded_steps() * nodes * modalities; }

  void validate() const {
    if (input_steps == 0 || output_steps == 0 || hidden == 0 || components == 0 || layers == 0 || kernel == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (dilations.size() != layers) {
      throw ConfigError("dilation schedule has " + std::to_string(dilations.size()) + " entries for " +
                        std::to_string(layers) + " layers");
    }
    for (std::size_t d : dilations) {
      if (d == 0) throw ConfigError("dilations must be positive");
    }
    encoded_steps();
    if (nodes == 0 || modalities == 0) throw ConfigError("model nodes/modalities are not set");
    if (!(mask_rate_scale >= 0.0)) throw ConfigError("mask_rate_scale must be non-negative");
  }
};

/// Variant switches; the full model has all four off.
struct Ablation {
  bool no_av = false;    // drop the augmented view; MSSL contrasts H with itself
  bool no_mg = false;    // drop augmentation and GSSL; second view from an unshared encoder
  bool no_gssl = false;
  bool no_mssl = false;

  bool uses_augmented_view() const { return !no_av && !no_mg; }
  bool uses_gssl() const { return uses_augmented_view() && !no_gssl; }
  bool uses_mssl() const { return !no_mssl; }
  bool uses_aux_encoder() const { return no_mg && uses_mssl(); }

  std::string name() const {
    if (no_av) return "no_av";
    if (no_mg) return "no_mg";
    if (no_gssl) return "no_gssl";
    if (no_mssl) return "no_mssl";
    return "full";
  }

  static Ablation from_name(const std::string& name) {
    Ablation a;
    if (name == "no_av") a.no_av = true;
    else if (name == "no_mg") a.no_mg = true;
    else if (name == "no_gssl") a.no_gssl = true;
    else if (name == "no_mssl") a.no_mssl = true;
    else if (name != "full") throw ConfigError("unknown variant " + name);
    return a;
  }
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double weight_recon = 1.0;
  double weight_global = 1.0;
  double weight_modality = 1.0;
  bool early_stopping = true;
  std::size_t patience = 10;
  Ablation ablation;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    const int variants = ablation.no_av + ablation.no_mg + ablation.no_gssl + ablation.no_mssl;
    if (variants > 1) throw ConfigError("at most one ablation flag may be set");
  }
};

struct DataConfig {
  std::string path;  // prepared dataset directory
  std::string csv;   // raw CSV for `prepare`
  std::string name;
  data::SplitSpec split;
  bool split_given = false;
  std::size_t stride = 1;
};

/// Complete experiment description, read from JSON.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  DataConfig data;
  std::optional<data::SynthSpec> synth;
  ModelConfig model;
  TrainConfig train;
  std::string source_text;  // verbatim file contents
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for '" + where + "." + key + "'");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config JSON: ") + e.what());
  }
  using detail::check_keys;
  using detail::read;
  check_keys(j, "", {"seed", "output_dir", "data", "synth", "model", "train"});
  RunConfig rc;
  rc.source_text = text;
  read(j, "seed", rc.seed, "");
  read(j, "output_dir", rc.output_dir, "");

  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, "data", {"path", "csv", "name", "split", "stride"});
    read(d, "path", rc.data.path, "data");
    read(d, "csv", rc.data.csv, "data");
    read(d, "name", rc.data.name, "data");
    read(d, "stride", rc.data.stride, "data");
    if (d.contains("split")) {
      std::vector<double> s;
      read(d, "split", s, "data");
      if (s.size() != 3) throw ConfigError("data.split must have three fractions");
      rc.data.split = {s[0], s[1], s[2]};
      rc.data.split.validate();
      rc.data.split_given = true;
    }
    if (rc.data.stride == 0) throw ConfigError("data.stride must be positive");
  }

  if (j.contains("synth")) {
    const auto& s = j["synth"];
    check_keys(s, "synth", {"nodes", "modalities", "steps", "regimes", "coupling", "noise", "base_period",
                            "start_time", "step_seconds"});
    data::SynthSpec spec;
    read(s, "nodes", spec.nodes, "synth");
    read(s, "modalities", spec.modalities, "synth");
    read(s, "steps", spec.steps, "synth");
    read(s, "regimes", spec.regimes, "synth");
    read(s, "noise", spec.noise, "synth");
    read(s, "base_period", spec.base_period, "synth");
    read(s, "start_time", spec.start_time, "synth");
    read(s, "step_seconds", spec.step_seconds, "synth");
    if (s.contains("coupling")) {
      const auto& c = s["coupling"];
      try {
        if (c.is_array() && !c.empty() && c[0].is_array() && !c[0].empty() && c[0][0].is_number()) {
          spec.coupling = {c.get<std::vector<std::vector<double>>>()};
        } else {
          spec.coupling = c.get<std::vector<std::vector<std::vector<double>>>>();
        }
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("synth.coupling must be an M x M matrix or a list of them");
      }
    } else {
      std::vector<std::vector<double>> eye(spec.modalities, std::vector<double>(spec.modalities, 0.0));
      for (std::size_t m = 0; m < spec.modalities; ++m) eye[m][m] = 1.0;
      spec.coupling = {eye};
    }
    spec.validate();
    rc.synth = spec;
  }

  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"input_steps", "output_steps", "nodes", "modalities", "hidden", "components", "layers",
                            "kernel", "dilations", "residual", "straight_through", "average_negatives",
                            "zero_init_output", "mask_rate_scale"});
    auto& mc = rc.model;
    read(m, "input_steps", mc.input_steps, "model");
    read(m, "output_steps", mc.output_steps, "model");
    read(m, "nodes", mc.nodes, "model");
    read(m, "modalities", mc.modalities, "model");
    read(m, "hidden", mc.hidden, "model");
    read(m, "components", mc.components, "model");
    read(m, "layers", mc.layers, "model");
    read(m, "kernel", mc.kernel, "model");
    read(m, "dilations", mc.dilations, "model");
    read(m, "residual", mc.residual, "model");
    read(m, "straight_through", mc.straight_through, "model");
    read(m, "average_negatives", mc.average_negatives, "model");
    read(m, "zero_init_output", mc.zero_init_output, "model");
    read(m, "mask_rate_scale", mc.mask_rate_scale, "model");
    if (mc.input_steps == 0 || mc.output_steps == 0 || mc.hidden == 0 || mc.components == 0 || mc.layers == 0 ||
        mc.kernel == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (mc.dilations.size() != mc.layers) throw ConfigError("model.dilations must have one entry per layer");
    mc.encoded_steps();
  }

  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"epochs", "batch_size", "learning_rate", "loss_weights", "early_stopping", "patience",
                            "ablation"});
    auto& tc = rc.train;
    read(t, "epochs", tc.epochs, "train");
    read(t, "batch_size", tc.batch_size, "train");
    read(t, "learning_rate", tc.learning_rate, "train");
    read(t, "early_stopping", tc.early_stopping, "train");
    read(t, "patience", tc.patience, "train");
    if (t.contains("loss_weights")) {
      std::vector<double> w;
      read(t, "loss_weights", w, "train");
      if (w.size() != 3) throw ConfigError("train.loss_weights must be [recon, global, modality]");
      tc.weight_recon = w[0];
      tc.weight_global = w[1];
      tc.weight_modality = w[2];
    }
    if (t.contains("ablation")) {
      const auto& a = t["ablation"];
      check_keys(a, "train.ablation", {"no_av", "no_mg", "no_gssl", "no_mssl"});
      read(a, "no_av", tc.ablation.no_av, "train.ablation");
      read(a, "no_mg", tc.ablation.no_mg, "train.ablation");
      read(a, "no_gssl", tc.ablation.no_gssl, "train.ablation");
      read(a, "no_mssl", tc.ablation.no_mssl, "train.ablation");
    }
  }
  rc.train.seed = rc.seed;
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

/// Canonical JSON of everything that fixes the parameter layout.
inline nlohmann::json model_json(const ModelConfig& m, const Ablation& a) {
  return {
      {"input_steps", m.input_steps},
      {"output_steps", m.output_steps},
      {"nodes", m.nodes},
      {"modalities", m.modalities},
      {"hidden", m.hidden},
      {"components", m.components},
      {"layers", m.layers},
      {"kernel", m.kernel},
      {"dilations", m.dilations},
      {"residual", m.residual},
      {"straight_through", m.straight_through},
      {"average_negatives", m.average_negatives},
      {"zero_init_output", m.zero_init_output},
      {"mask_rate_scale", m.mask_rate_scale},
      {"variant", a.name()},
  };
}

}  // namespace mossl
