#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowxpert/cluster.hpp"
#include "flowxpert/error.hpp"
#include "flowxpert/flow.hpp"
#include "flowxpert/trainer.hpp"

namespace flowxpert {

inline constexpr std::string_view kVersion = "0.1.0";

// Every tunable of a run. Keys are the snake_case field names; the matching
// command-line flag is the same name with dashes.
struct RunConfig {
  std::vector<std::string> pcaps;
  std::string labels;
  std::string flows;
  std::string model;
  std::string embed_model;
  std::string out;
  std::string report;
  std::string embeddings;

  FlowConfig flow;
  DbscanParams dbscan;
  EmbedTrainConfig embed;
  DetectorTrainConfig detector;
  std::uint64_t seed = 7;
  std::size_t folds = 0;
  std::size_t kdist_k = 0;  // 0: use min_pts
  double tau = 0.01;
  std::size_t bench_iters = 10000;
  std::size_t bench_warmup = 1000;

  // Per-stage seeds derived from the single user seed.
  std::uint64_t split_seed() const { return seed; }
  std::uint64_t embed_seed() const { return seed + 1; }
  std::uint64_t detector_seed() const { return seed + 2; }

  PipelineConfig pipeline() const {
    PipelineConfig p{dbscan, embed, detector};
    p.embed.seed = embed_seed();
    p.detector.seed = detector_seed();
    return p;
  }

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  static const std::vector<std::string>& keys();
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw UsageError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline std::string number_text(double v) { return format_real(v); }

inline nn::OptimizerKind parse_optimizer(const std::string& v) {
  if (v == "adam") return nn::OptimizerKind::adam;
  if (v == "sgd") return nn::OptimizerKind::sgd;
  throw UsageError("optimizer must be adam or sgd, got '" + v + "'");
}

inline std::string optimizer_text(nn::OptimizerKind k) { return k == nn::OptimizerKind::adam ? "adam" : "sgd"; }

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto path = [&](const char* k, std::string RunConfig::*m) {
      t[k] = {[m](RunConfig& c, const std::string& v) { c.*m = v; }, [m](const RunConfig& c) { return c.*m; }};
    };
    path("labels", &RunConfig::labels);
    path("flows", &RunConfig::flows);
    path("model", &RunConfig::model);
    path("embed_model", &RunConfig::embed_model);
    path("out", &RunConfig::out);
    path("report", &RunConfig::report);
    path("embeddings", &RunConfig::embeddings);
    t["pcap"] = {[](RunConfig& c, const std::string& v) {
                   c.pcaps.clear();
                   std::stringstream ss(v);
                   for (std::string p; std::getline(ss, p, ',');) {
                     if (!p.empty()) c.pcaps.push_back(p);
                   }
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (const auto& p : c.pcaps) s += (s.empty() ? "" : ",") + p;
                   return s;
                 }};

    auto real = [&](const char* k, auto access) {
      t[k] = {[k, access](RunConfig& c, const std::string& v) { access(c) = parse_number<double>(k, v); },
              [access](const RunConfig& c) { return number_text(access(const_cast<RunConfig&>(c))); }};
    };
    auto count = [&](const char* k, auto access) {
      t[k] = {[k, access](RunConfig& c, const std::string& v) {
                access(c) = static_cast<std::remove_reference_t<decltype(access(c))>>(
                    parse_number<std::uint64_t>(k, v));
              },
              [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
    };
    real("inactivity_timeout", [](RunConfig& c) -> double& { return c.flow.inactivity_timeout_s; });
    real("active_timeout", [](RunConfig& c) -> double& { return c.flow.active_timeout_s; });
    real("duration_floor", [](RunConfig& c) -> double& { return c.flow.duration_floor_s; });
    real("eps", [](RunConfig& c) -> double& { return c.dbscan.eps; });
    count("min_pts", [](RunConfig& c) -> std::size_t& { return c.dbscan.min_pts; });
    real("margin", [](RunConfig& c) -> double& { return c.embed.margin; });
    count("embed_epochs", [](RunConfig& c) -> std::size_t& { return c.embed.epochs; });
    count("embed_batch", [](RunConfig& c) -> std::size_t& { return c.embed.batch_size; });
    real("embed_lr", [](RunConfig& c) -> double& { return c.embed.learning_rate; });
    real("downsample_rate", [](RunConfig& c) -> double& { return c.embed.downsample_rate; });
    count("detector_epochs", [](RunConfig& c) -> std::size_t& { return c.detector.epochs; });
    count("detector_batch", [](RunConfig& c) -> std::size_t& { return c.detector.batch_size; });
    real("detector_lr", [](RunConfig& c) -> double& { return c.detector.learning_rate; });
    count("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    count("folds", [](RunConfig& c) -> std::size_t& { return c.folds; });
    count("kdist_k", [](RunConfig& c) -> std::size_t& { return c.kdist_k; });
    real("tau", [](RunConfig& c) -> double& { return c.tau; });
    count("bench_iters", [](RunConfig& c) -> std::size_t& { return c.bench_iters; });
    count("bench_warmup", [](RunConfig& c) -> std::size_t& { return c.bench_warmup; });
    t["optimizer"] = {[](RunConfig& c, const std::string& v) {
                        c.embed.optimizer = c.detector.optimizer = parse_optimizer(v);
                      },
                      [](const RunConfig& c) { return optimizer_text(c.embed.optimizer); }};
    return t;
  }();
  return table;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw UsageError("unknown config key '" + key + "'");
  it->second.set(*this, value);
}

inline std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::fields()) out[k] = f.get(*this);
  return out;
}

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> v;
    for (const auto& [name, _] : detail::fields()) v.push_back(name);
    return v;
  }();
  return k;
}

// Flat "key = value" lines; '#' starts a comment line.
inline void apply_config_file(RunConfig& cfg, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  apply_config_file(cfg, in);
}

}  // namespace flowxpert
