#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowxpert/error.hpp"
#include "flowxpert/neural.hpp"
#include "flowxpert/preprocess.hpp"
#include "flowxpert/trainer.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

struct ClassMetrics {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Per-class one-vs-rest metrics. Accuracy is intentionally absent: with the
// class imbalance of real traffic it says little.
struct MetricsReport {
  std::array<ClassMetrics, 2> per_class{};
  std::size_t total = 0;

  const ClassMetrics& operator[](TrafficClass c) const { return per_class[static_cast<std::size_t>(c)]; }

  json to_json() const {
    json j;
    j["total"] = total;
    for (auto c : {TrafficClass::benign, TrafficClass::malicious}) {
      const auto& m = (*this)[c];
      j[std::string(to_string(c))] = {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                                      {"tp", m.tp},               {"fp", m.fp},         {"fn", m.fn},
                                      {"tn", m.tn}};
    }
    return j;
  }
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

inline MetricsReport score(std::span<const TrafficClass> predictions, std::span<const TrafficClass> labels) {
  if (predictions.size() != labels.size()) {
    throw LengthMismatch(std::to_string(predictions.size()) + " predictions vs " + std::to_string(labels.size()) +
                         " labels");
  }
  if (labels.empty()) throw LengthMismatch("cannot score an empty dataset");
  MetricsReport r;
  r.total = labels.size();
  for (std::size_t c = 0; c < 2; ++c) {
    const auto cls = static_cast<TrafficClass>(c);
    auto& m = r.per_class[c];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool p = predictions[i] == cls;
      const bool t = labels[i] == cls;
      m.tp += p && t;
      m.fp += p && !t;
      m.fn += !p && t;
      m.tn += !p && !t;
    }
    m.precision = m.tp + m.fp > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
    m.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
    m.f1 = f1_score(m.precision, m.recall);
  }
  return r;
}

// Fold x class table with percentages, two decimals.
inline void write_metrics_table(std::ostream& out, const std::vector<MetricsReport>& folds) {
  char line[160];
  std::snprintf(line, sizeof(line), "%-6s %-10s %10s %10s %10s %10s\n", "Fold", "Class", "Precision", "Recall",
                "F1-Score", "Support");
  out << line;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    for (auto c : {TrafficClass::benign, TrafficClass::malicious}) {
      const auto& m = folds[f][c];
      std::snprintf(line, sizeof(line), "%-6zu %-10s %9.2f%% %9.2f%% %9.2f%% %10zu\n", f + 1,
                    std::string(to_string(c)).c_str(), 100 * m.precision, 100 * m.recall, 100 * m.f1, m.tp + m.fn);
      out << line;
    }
  }
}

// ---------------------------------------------------------------------------
// Sparsity
// ---------------------------------------------------------------------------

struct SparsityReport {
  double tau = 0.01;
  std::vector<double> per_feature;  // fraction of |x_i| < tau
  double overall = 0.0;

  json to_json() const { return {{"tau", tau}, {"per_feature", per_feature}, {"overall", overall}}; }
};

template <typename Vec>
SparsityReport sparsity_report(std::span<const Vec> vectors, double tau = 0.01) {
  if (vectors.empty()) throw EmptyTrainingSet("sparsity report needs at least one vector");
  SparsityReport r;
  r.tau = tau;
  const std::size_t dims = vectors.front().size();
  std::vector<std::size_t> near_zero(dims, 0);
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < dims; ++i) near_zero[i] += std::abs(static_cast<double>(v[i])) < tau;
  }
  std::size_t all = 0;
  for (std::size_t i = 0; i < dims; ++i) {
    r.per_feature.push_back(static_cast<double>(near_zero[i]) / static_cast<double>(vectors.size()));
    all += near_zero[i];
  }
  r.overall = static_cast<double>(all) / static_cast<double>(dims * vectors.size());
  return r;
}

// ---------------------------------------------------------------------------
// First-layer gradient norm versus input scale
// ---------------------------------------------------------------------------

struct GradientNormRow {
  double scale = 1.0;
  double input_norm = 0.0;
  double weight_grad_norm = 0.0;  // Frobenius
  double bias_grad_norm = 0.0;
  double ratio = 0.0;  // weight_grad_norm relative to the first row
};

// Backpropagates a fixed upstream error `delta` through `layer` for scaled
// copies of `x`. dL/dW = delta x^T, so the weight gradient norm is exactly
// |delta| |x| and tracks the input scale.
template <typename T>
std::vector<GradientNormRow> gradient_norm_probe(nn::Dense<T> layer, const nn::Vector<T>& delta,
                                                 const nn::Vector<T>& x, std::span<const double> scales) {
  std::vector<GradientNormRow> rows;
  for (double s : scales) {
    const nn::Matrix<T> input = x * static_cast<T>(s);
    layer.forward(input);
    const nn::Matrix<T> upstream = delta;
    layer.backward(upstream);
    GradientNormRow row;
    row.scale = s;
    row.input_norm = static_cast<double>(input.norm());
    row.weight_grad_norm = static_cast<double>(layer.weight_grad.norm());
    row.bias_grad_norm = static_cast<double>(layer.bias_grad.norm());
    rows.push_back(row);
  }
  for (auto& r : rows) {
    r.ratio = rows.front().weight_grad_norm > 0.0 ? r.weight_grad_norm / rows.front().weight_grad_norm : 0.0;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Latency / throughput
// ---------------------------------------------------------------------------

struct StageStats {
  double p50_us = 0.0;
  double p90_us = 0.0;
  double p99_us = 0.0;
  double mean_us = 0.0;
  double qps_measured = 0.0;   // iterations / wall time of the timed loop
  double qps_from_mean = 0.0;  // 1e6 / mean latency

  json to_json() const {
    return {{"p50_us", p50_us},   {"p90_us", p90_us},           {"p99_us", p99_us},
            {"mean_us", mean_us}, {"qps_measured", qps_measured}, {"qps_from_mean", qps_from_mean}};
  }
};

struct BenchReport {
  StageStats embedding;
  StageStats encoder;
  StageStats end_to_end;
  std::size_t batch_size = 1;
  std::size_t warmup = 0;
  std::size_t iterations = 0;

  json to_json() const {
    return {{"embedding", embedding.to_json()},   {"encoder", encoder.to_json()},
            {"end_to_end", end_to_end.to_json()}, {"batch_size", batch_size},
            {"warmup", warmup},                   {"iterations", iterations}};
  }
};

// Nearest-rank percentile of an ascending sample.
inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

namespace detail {

template <typename Fn>
StageStats time_stage(std::size_t warmup, std::size_t iters, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) fn(i);
  std::vector<double> lat;
  lat.reserve(iters);
  const auto wall0 = clock::now();
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    fn(i);
    const auto t1 = clock::now();
    lat.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  const double wall_s = std::chrono::duration<double>(clock::now() - wall0).count();
  StageStats s;
  double sum = 0.0;
  for (double v : lat) sum += v;
  s.mean_us = sum / static_cast<double>(iters);
  std::sort(lat.begin(), lat.end());
  s.p50_us = percentile(lat, 50);
  s.p90_us = percentile(lat, 90);
  s.p99_us = percentile(lat, 99);
  s.qps_measured = static_cast<double>(iters) / wall_s;
  s.qps_from_mean = 1e6 / s.mean_us;
  return s;
}

}  // namespace detail

// Single-threaded batch-1 timing of three stages: the embedding alone, encoder
// + head on precomputed concatenations, and full predict from raw records.
inline BenchReport bench(const ModelBundle& bundle, std::span<const RawFeatureRecord> records, std::size_t n_iters,
                         std::size_t warmup) {
  if (n_iters < 1000 || warmup < 100) throw UsageError("bench needs >= 1000 iterations and >= 100 warmup");
  if (records.empty()) throw EmptyTrainingSet("bench needs at least one record");
  const auto vectors = vectorize_all(records, bundle.scaler);
  std::vector<nn::Matrix<float>> inputs;
  std::vector<nn::Matrix<float>> fused;
  for (const auto& v : vectors) {
    inputs.push_back(Eigen::Map<const nn::Matrix<float>>(v.data(), static_cast<nn::Index>(kInputDim), 1));
    fused.push_back(nn::concat_with_embedding(inputs.back(), bundle.embedding));
  }
  const std::size_t n = records.size();
  volatile float sink = 0.0f;

  BenchReport rep;
  rep.warmup = warmup;
  rep.iterations = n_iters;
  rep.embedding = detail::time_stage(warmup, n_iters, [&](std::size_t i) {
    sink = sink + bundle.embedding.infer(inputs[i % n])(0, 0);
  });
  rep.encoder = detail::time_stage(warmup, n_iters, [&](std::size_t i) {
    sink = sink + bundle.head.infer(bundle.encoder.infer(fused[i % n]))(0, 0);
  });
  rep.end_to_end = detail::time_stage(warmup, n_iters, [&](std::size_t i) {
    sink = sink + static_cast<float>(predict(bundle, records[i % n]).probabilities[1]);
  });
  return rep;
}

inline void write_bench_text(std::ostream& out, const BenchReport& r) {
  char line[200];
  std::snprintf(line, sizeof(line), "%-12s %10s %10s %10s %10s %14s %14s\n", "stage", "p50_us", "p90_us", "p99_us",
                "mean_us", "qps_measured", "qps_from_mean");
  out << line;
  auto row = [&](const char* name, const StageStats& s) {
    std::snprintf(line, sizeof(line), "%-12s %10.3f %10.3f %10.3f %10.3f %14.0f %14.0f\n", name, s.p50_us, s.p90_us,
                  s.p99_us, s.mean_us, s.qps_measured, s.qps_from_mean);
    out << line;
  };
  row("embedding", r.embedding);
  row("encoder", r.encoder);
  row("end_to_end", r.end_to_end);
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

// One row per vector in input order: index, embedding values, label, cluster.
// Unknown labels / clusters are left empty.
inline void export_embeddings(const ModelBundle& bundle, std::span<const FeatureVector> vectors,
                              std::span<const TrafficClass> labels, std::span<const int> clusters,
                              std::ostream& out) {
  const nn::Index dim = bundle.embedding.out_features();
  out << "index";
  for (nn::Index d = 0; d < dim; ++d) out << ",e" << d;
  out << ",label,cluster\n";
  constexpr std::size_t chunk = 4096;
  for (std::size_t start = 0; start < vectors.size(); start += chunk) {
    const std::size_t b = std::min(chunk, vectors.size() - start);
    const auto emb = bundle.embedding.infer(to_matrix(vectors.subspan(start, b)));
    for (std::size_t k = 0; k < b; ++k) {
      const std::size_t i = start + k;
      out << i;
      for (nn::Index d = 0; d < dim; ++d) out << ',' << format_real(emb(d, static_cast<nn::Index>(k)));
      out << ',';
      if (i < labels.size()) out << to_string(labels[i]);
      out << ',';
      if (i < clusters.size()) out << clusters[i];
      out << '\n';
    }
  }
}

}  // namespace flowxpert
