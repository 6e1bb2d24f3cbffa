#pragma once

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mossl/random.hpp"
#include "mossl/tensor.hpp"

namespace mossl::data {

/// Observations over (time, node, modality) with axis metadata.
struct MoSTSeries {
  Tensor values;                         // [T_total, N, M]
  std::vector<std::int64_t> time_labels;  // seconds since epoch, constant step
  std::vector<std::string> node_ids;
  std::vector<std::string> modality_names;

  std::size_t steps() const { return values.dim(0); }
  std::size_t nodes() const { return values.dim(1); }
  std::size_t modalities() const { return values.dim(2); }

  void validate() const {
    if (values.rank() != 3) throw DataError("series values must be [T, N, M], got " + to_string(values.shape()));
    if (time_labels.size() != steps() || node_ids.size() != nodes() || modality_names.size() != modalities()) {
      throw DataError("series axis metadata does not match values shape " + to_string(values.shape()));
    }
    if (time_labels.size() >= 2) {
      const std::int64_t step = time_labels[1] - time_labels[0];
      if (step <= 0) throw DataError("timestamps must be strictly increasing");
      for (std::size_t i = 1; i < time_labels.size(); ++i) {
        if (time_labels[i] - time_labels[i - 1] != step) {
          throw DataError("timestamps must have a constant step (break at index " + std::to_string(i) + ")");
        }
      }
    }
  }
};

struct WindowSample {
  Tensor x;  // [T, N, M]
  Tensor y;  // [O, N, M]
  std::size_t anchor = 0;  // series index of the first target step
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Chronological train/val/test fractions.
struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;

  void validate() const {
    if (train <= 0.0 || val < 0.0 || test < 0.0 || std::abs(train + val + test - 1.0) > 1e-9) {
      throw ConfigError("split fractions must be non-negative, train positive, and sum to 1");
    }
  }
};

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct SplitRanges {
  Range train, val, test;
};

inline SplitRanges split_ranges(std::size_t total, const SplitSpec& spec) {
  spec.validate();
  const auto a = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(total) + 1e-9));
  const auto b = static_cast<std::size_t>(std::floor((spec.train + spec.val) * static_cast<double>(total) + 1e-9));
  return {{0, a}, {a, std::min(b, total)}, {std::min(b, total), total}};
}

// ---------------------------------------------------------------------------
// CSV ingestion: header time,node,modality,value over a complete grid.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& f : out) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
    while (!f.empty() && f.front() == ' ') f.erase(f.begin());
  }
  return out;
}

}  // namespace detail

/// Integer seconds, or ISO-8601 "YYYY-MM-DD[T| ]HH:MM[:SS]" interpreted as UTC.
inline std::optional<std::int64_t> parse_timestamp(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t pos = 0;
  bool integral = true;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(std::isdigit(static_cast<unsigned char>(s[i])) || (i == 0 && s[i] == '-'))) integral = false;
  }
  if (integral) {
    try {
      const long long v = std::stoll(s, &pos);
      if (pos == s.size()) return v;
    } catch (...) {
    }
    return std::nullopt;
  }
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  const int n = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &consumed);
  if (n < 6 || (sep != 'T' && sep != ' ')) {
    consumed = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d%n", &y, &mo, &d, &consumed) != 3 || consumed != static_cast<int>(s.size())) {
      return std::nullopt;
    }
    h = mi = 0;
  } else if (consumed != static_cast<int>(s.size())) {
    int extra = 0;
    if (std::sscanf(s.c_str() + consumed, ":%2d%n", &sec, &extra) != 1 ||
        consumed + extra != static_cast<int>(s.size())) {
      return std::nullopt;
    }
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + sec;
}

inline MoSTSeries load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError(path.string() + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header != std::vector<std::string>{"time", "node", "modality", "value"}) {
    throw DataError(path.string() + ": header must be time,node,modality,value");
  }

  std::vector<std::string> nodes, modalities;
  std::map<std::string, std::size_t> node_index, modality_index;
  std::map<std::int64_t, std::size_t> time_index;
  struct Row {
    std::int64_t time;
    std::size_t node, modality;
    double value;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 4) throw DataError(where + ": ragged row, expected 4 fields, got " + std::to_string(f.size()));
    const auto ts = parse_timestamp(f[0]);
    if (!ts) throw DataError(where + ": unparseable timestamp '" + f[0] + "'");
    double value = 0.0;
    try {
      std::size_t used = 0;
      value = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(where + ": unparseable value '" + f[3] + "'");
    }
    if (!std::isfinite(value)) throw DataError(where + ": non-finite value");
    auto [ni, new_node] = node_index.emplace(f[1], nodes.size());
    if (new_node) nodes.push_back(f[1]);
    auto [mi, new_mod] = modality_index.emplace(f[2], modalities.size());
    if (new_mod) modalities.push_back(f[2]);
    time_index.emplace(*ts, 0);
    rows.push_back({*ts, ni->second, mi->second, value});
  }
  if (rows.empty()) throw DataError(path.string() + ": no data rows");

  std::vector<std::int64_t> times;
  for (auto& [t, idx] : time_index) {
    idx = times.size();
    times.push_back(t);
  }
  const std::size_t T = times.size(), N = nodes.size(), M = modalities.size();
  Tensor values({T, N, M}, 0.0);
  std::vector<bool> seen(T * N * M, false);
  for (const Row& r : rows) {
    const std::size_t off = (time_index[r.time] * N + r.node) * M + r.modality;
    if (seen[off]) {
      throw DataError(path.string() + ": duplicate cell (time " + std::to_string(r.time) + ", node " + nodes[r.node] +
                      ", modality " + modalities[r.modality] + ")");
    }
    seen[off] = true;
    values[off] = r.value;
  }
  std::vector<std::string> gaps;
  std::size_t gap_count = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < M; ++m) {
        if (seen[(t * N + n) * M + m]) continue;
        if (++gap_count <= 10) {
          gaps.push_back("(" + std::to_string(times[t]) + "," + nodes[n] + "," + modalities[m] + ")");
        }
      }
  if (gap_count > 0) {
    std::string msg = path.string() + ": incomplete grid, " + std::to_string(gap_count) + " missing cell(s):";
    for (const auto& g : gaps) msg += " " + g;
    throw DataError(msg);
  }

  MoSTSeries series{std::move(values), std::move(times), std::move(nodes), std::move(modalities)};
  series.validate();
  return series;
}

/// Checks declared axis sizes (zero means "not declared").
inline void validate_axes(const MoSTSeries& s, std::size_t nodes, std::size_t modalities) {
  if (nodes != 0 && s.nodes() != nodes) {
    throw DataError("dataset has " + std::to_string(s.nodes()) + " nodes, configuration declares " +
                    std::to_string(nodes));
  }
  if (modalities != 0 && s.modalities() != modalities) {
    throw DataError("dataset has " + std::to_string(s.modalities()) + " modalities, configuration declares " +
                    std::to_string(modalities));
  }
}

// ---------------------------------------------------------------------------
// Per-modality z-score

inline constexpr double kStdFloor = 1e-8;

inline NormStats zscore_fit(const Tensor& values, Range train) {
  if (values.rank() != 3) throw DataError("zscore_fit expects [T, N, M] values");
  if (train.size() == 0 || train.end > values.dim(0)) throw DataError("zscore_fit needs a non-empty training range");
  const std::size_t N = values.dim(1), M = values.dim(2);
  NormStats stats{std::vector<double>(M, 0.0), std::vector<double>(M, 0.0)};
  const double count = static_cast<double>(train.size() * N);
  for (std::size_t m = 0; m < M; ++m) {
    double s = 0.0;
    for (std::size_t t = train.begin; t < train.end; ++t)
      for (std::size_t n = 0; n < N; ++n) s += values[(t * N + n) * M + m];
    const double mu = s / count;
    double ss = 0.0;
    for (std::size_t t = train.begin; t < train.end; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        const double d = values[(t * N + n) * M + m] - mu;
        ss += d * d;
      }
    double sd = std::sqrt(ss / count);
    if (sd < kStdFloor) {
      logging::warn("modality " + std::to_string(m) + " has (near) zero variance on the training split; std floored");
      sd = kStdFloor;
    }
    stats.mean[m] = mu;
    stats.std[m] = sd;
  }
  return stats;
}

inline NormStats zscore_fit(const MoSTSeries& s, Range train) { return zscore_fit(s.values, train); }

/// Normalizes a tensor whose last axis is the modality axis.
inline Tensor zscore_apply(const Tensor& x, const NormStats& stats) {
  const std::size_t M = stats.mean.size();
  if (x.rank() == 0 || x.shape().back() != M) throw DimensionError("zscore_apply: last axis must have " + std::to_string(M) + " modalities");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - stats.mean[i % M]) / stats.std[i % M];
  return y;
}

inline Tensor zscore_invert(const Tensor& x, const NormStats& stats) {
  const std::size_t M = stats.mean.size();
  if (x.rank() == 0 || x.shape().back() != M) throw DimensionError("zscore_invert: last axis must have " + std::to_string(M) + " modalities");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * stats.std[i % M] + stats.mean[i % M];
  return y;
}

// ---------------------------------------------------------------------------
// Windowing

inline std::size_t window_count(std::size_t length, std::size_t T, std::size_t O, std::size_t stride) {
  if (length < T + O) return 0;
  return (length - T - O) / stride + 1;
}

/// Sliding windows fully contained in `range` of a [T_total, N, M] tensor.
inline std::vector<WindowSample> make_windows(const Tensor& values, std::size_t T, std::size_t O, std::size_t stride,
                                              Range range) {
  if (T == 0 || O == 0 || stride == 0) throw ConfigError("window lengths and stride must be positive");
  if (range.end > values.dim(0)) throw DataError("window range exceeds series length");
  if (range.size() < T + O) {
    throw DataError("series segment of length " + std::to_string(range.size()) + " is too short for " +
                    std::to_string(T) + " input + " + std::to_string(O) + " output steps");
  }
  const std::size_t N = values.dim(1), M = values.dim(2), cell = N * M;
  const std::size_t count = window_count(range.size(), T, O, stride);
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = range.begin + w * stride;
    WindowSample s{Tensor({T, N, M}), Tensor({O, N, M}), start + T};
    std::copy_n(values.data().begin() + start * cell, T * cell, s.x.data().begin());
    std::copy_n(values.data().begin() + (start + T) * cell, O * cell, s.y.data().begin());
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<WindowSample> make_windows(const MoSTSeries& s, std::size_t T, std::size_t O, std::size_t stride = 1) {
  return make_windows(s.values, T, O, stride, Range{0, s.steps()});
}

// ---------------------------------------------------------------------------
// Synthetic generator with planted regimes and cross-modality coupling.

struct SynthSpec {
  std::size_t nodes = 6;
  std::size_t modalities = 3;
  std::size_t steps = 2000;
  std::size_t regimes = 2;
  /// One row-stochastic [M x M] matrix per regime (a single matrix is shared by all regimes).
  std::vector<std::vector<std::vector<double>>> coupling;
  double noise = 0.1;
  double base_period = 24.0;
  std::int64_t start_time = 1459468800;  // 2016-04-01T00:00:00Z
  std::int64_t step_seconds = 1800;

  void validate() const {
    if (nodes == 0 || modalities == 0 || steps == 0 || regimes == 0) {
      throw ConfigError("synthetic spec needs positive nodes, modalities, steps and regimes");
    }
    if (noise < 0.0 || base_period <= 0.0 || step_seconds <= 0) throw ConfigError("invalid synthetic noise/period/step");
    if (coupling.size() != 1 && coupling.size() != regimes) {
      throw ConfigError("coupling must hold one matrix or one per regime");
    }
    for (const auto& C : coupling) {
      if (C.size() != modalities) throw ConfigError("coupling matrix must be M x M");
      for (const auto& row : C) {
        if (row.size() != modalities) throw ConfigError("coupling matrix must be M x M");
        double s = 0.0;
        for (double v : row) {
          if (!(v >= 0.0)) throw ConfigError("coupling matrix is not row-stochastic (negative entry)");
          s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ConfigError("coupling matrix is not row-stochastic (row sum " + std::to_string(s) + ")");
      }
    }
  }

  const std::vector<std::vector<double>>& coupling_for(std::size_t regime) const {
    return coupling.size() == 1 ? coupling.front() : coupling[regime];
  }
};

/// Node n follows regime n mod R. Each (node, source) pair carries its own
/// seasonal signal whose periods depend on the regime and source index; the
/// observed modality m is the coupling-weighted mix of the node's sources plus
/// Gaussian noise. Distinct source periods make uncoupled modalities nearly
/// uncorrelated.
inline MoSTSeries synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t T = spec.steps, N = spec.nodes, M = spec.modalities;
  Rng rng(derive_seed(seed, "synth"));
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::vector<double> amp(N), phase(N * M), slow_phase(N * M);
  for (double& a : amp) a = uniform(rng, 0.6, 1.4);
  for (std::size_t i = 0; i < N * M; ++i) {
    phase[i] = uniform(rng, 0.0, two_pi);
    slow_phase[i] = uniform(rng, 0.0, two_pi);
  }

  Tensor values({T, N, M}, 0.0);
  std::vector<double> source(M);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t r = n % spec.regimes;
      for (std::size_t j = 0; j < M; ++j) {
        const double period = spec.base_period * (1.0 + 0.5 * static_cast<double>(j)) * (1.0 + 0.25 * static_cast<double>(r));
        const double tt = static_cast<double>(t);
        source[j] = amp[n] * (std::sin(two_pi * tt / period + phase[n * M + j]) +
                              0.5 * std::sin(two_pi * tt / (7.0 * period) + slow_phase[n * M + j]));
      }
      const auto& C = spec.coupling_for(r);
      for (std::size_t m = 0; m < M; ++m) {
        double v = 0.0;
        for (std::size_t j = 0; j < M; ++j) v += C[m][j] * source[j];
        values[(t * N + n) * M + m] = v;
      }
    }
  }
  if (spec.noise > 0.0) {
    for (double& v : values.data()) v += spec.noise * standard_normal(rng);
  }

  MoSTSeries s;
  s.values = std::move(values);
  for (std::size_t t = 0; t < T; ++t) s.time_labels.push_back(spec.start_time + static_cast<std::int64_t>(t) * spec.step_seconds);
  for (std::size_t n = 0; n < N; ++n) s.node_ids.push_back("node" + std::to_string(n));
  for (std::size_t m = 0; m < M; ++m) s.modality_names.push_back("modality" + std::to_string(m));
  return s;
}

// ---------------------------------------------------------------------------
// Prepared dataset directory: series.most + dataset.json descriptor.

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  std::string name;
  MoSTSeries series;
  SplitSpec split;
};

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  ds.series.validate();
  std::filesystem::create_directories(dir);
  save_tensor(dir / "series.most", ds.series.values);
  const std::int64_t step = ds.series.time_labels.size() >= 2 ? ds.series.time_labels[1] - ds.series.time_labels[0] : 0;
  nlohmann::json j{
      {"format_version", kDatasetFormatVersion},
      {"name", ds.name},
      {"steps", ds.series.steps()},
      {"nodes", ds.series.node_ids},
      {"modalities", ds.series.modality_names},
      {"time_start", ds.series.time_labels.front()},
      {"time_step_seconds", step},
      {"split", {ds.split.train, ds.split.val, ds.split.test}},
      {"values", "series.most"},
  };
  std::ofstream os(dir / "dataset.json");
  os << j.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw DataError("no dataset descriptor at " + (dir / "dataset.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed dataset descriptor: " + std::string(e.what()));
  }
  try {
    if (j.at("format_version").get<int>() != kDatasetFormatVersion) throw DataError("unsupported dataset format version");
    Dataset ds;
    ds.name = j.value("name", "");
    ds.series.values = load_tensor(dir / j.at("values").get<std::string>());
    ds.series.node_ids = j.at("nodes").get<std::vector<std::string>>();
    ds.series.modality_names = j.at("modalities").get<std::vector<std::string>>();
    const auto start = j.at("time_start").get<std::int64_t>();
    const auto step = j.at("time_step_seconds").get<std::int64_t>();
    const auto steps = j.at("steps").get<std::size_t>();
    for (std::size_t t = 0; t < steps; ++t) ds.series.time_labels.push_back(start + static_cast<std::int64_t>(t) * step);
    const auto split = j.at("split").get<std::vector<double>>();
    if (split.size() != 3) throw DataError("split must have three fractions");
    ds.split = {split[0], split[1], split[2]};
    ds.series.validate();
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid dataset descriptor: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Normalized, windowed splits ready for training.

struct PreparedData {
  MoSTSeries series;  // raw
  Tensor normalized;  // [T_total, N, M]
  NormStats stats;
  SplitRanges ranges;
  std::vector<WindowSample> train, val, test;
};

inline PreparedData prepare(const MoSTSeries& series, const SplitSpec& split, std::size_t T, std::size_t O,
                            std::size_t stride = 1) {
  series.validate();
  PreparedData p;
  p.series = series;
  p.ranges = split_ranges(series.steps(), split);
  p.stats = zscore_fit(series.values, p.ranges.train);
  p.normalized = zscore_apply(series.values, p.stats);
  p.train = make_windows(p.normalized, T, O, stride, p.ranges.train);
  if (p.ranges.val.size() >= T + O) p.val = make_windows(p.normalized, T, O, stride, p.ranges.val);
  if (p.ranges.test.size() >= T + O) p.test = make_windows(p.normalized, T, O, stride, p.ranges.test);
  return p;
}

}  // namespace mossl::data
