#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowxpert/error.hpp"
#include "flowxpert/flow.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

inline constexpr std::size_t kProtocolDims = 3;
inline constexpr std::size_t kInputDim = kProtocolDims + kContinuousFeatures;  // 15

// One-hot protocol (TCP, UDP, OTHER) followed by the twelve min-max scaled features.
using FeatureVector = std::array<float, kInputDim>;

struct Scaler {
  std::array<double, kContinuousFeatures> min{};
  std::array<double, kContinuousFeatures> max{};

  bool operator==(const Scaler&) const = default;
};

inline Scaler fit_scaler(std::span<const RawFeatureRecord> records) {
  if (records.empty()) throw EmptyTrainingSet("cannot fit scaler on an empty training split");
  Scaler s;
  s.min = records.front().values;
  s.max = records.front().values;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < kContinuousFeatures; ++i) {
      s.min[i] = std::min(s.min[i], r.values[i]);
      s.max[i] = std::max(s.max[i], r.values[i]);
    }
  }
  return s;
}

// Values outside the fitted range are clamped; a constant feature maps to 0.
inline FeatureVector vectorize(const RawFeatureRecord& record, const Scaler& scaler) {
  FeatureVector v{};
  v[static_cast<std::size_t>(record.protocol)] = 1.0f;
  for (std::size_t i = 0; i < kContinuousFeatures; ++i) {
    const double span = scaler.max[i] - scaler.min[i];
    double x = 0.0;
    if (span > 0.0) x = std::clamp((record.values[i] - scaler.min[i]) / span, 0.0, 1.0);
    v[kProtocolDims + i] = static_cast<float>(x);
  }
  return v;
}

inline std::vector<FeatureVector> vectorize_all(std::span<const RawFeatureRecord> records, const Scaler& scaler) {
  std::vector<FeatureVector> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(vectorize(r, scaler));
  return out;
}

// ---------------------------------------------------------------------------
// Label specification
// ---------------------------------------------------------------------------

// Empty optionals are "*" wildcards.
struct LabelRule {
  std::optional<IpAddress> src_ip;
  std::optional<IpAddress> dst_ip;
  std::optional<std::uint16_t> src_port;
  std::optional<std::uint16_t> dst_port;
  std::optional<Protocol> protocol;
  TrafficClass label = TrafficClass::malicious;

  bool matches(const IpAddress& sip, std::uint16_t sport, const IpAddress& dip, std::uint16_t dport,
               Protocol proto) const {
    return (!src_ip || *src_ip == sip) && (!dst_ip || *dst_ip == dip) && (!src_port || *src_port == sport) &&
           (!dst_port || *dst_port == dport) && (!protocol || *protocol == proto);
  }
};

struct LabelSpec {
  std::vector<LabelRule> rules;
  TrafficClass default_class = TrafficClass::benign;

  // First matching rule wins; each rule is tried initiator-first, then reversed.
  TrafficClass classify(const RawFeatureRecord& r) const {
    for (const auto& rule : rules) {
      if (rule.matches(r.src_ip, r.src_port, r.dst_ip, r.dst_port, r.protocol) ||
          rule.matches(r.dst_ip, r.dst_port, r.src_ip, r.src_port, r.protocol)) {
        return rule.label;
      }
    }
    return default_class;
  }
};

inline constexpr std::string_view kLabelSpecHeader = "src_ip,dst_ip,src_port,dst_port,protocol,label";

inline LabelSpec parse_label_spec(std::istream& in) {
  LabelSpec spec;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {
      header_seen = true;
      if (line == kLabelSpecHeader) continue;
      throw MalformedRule("label spec must start with header '" + std::string(kLabelSpecHeader) + "'");
    }
    auto cells = detail::split_csv_line(line);
    auto fail = [&](const std::string& why) { return MalformedRule("line " + std::to_string(lineno) + ": " + why); };
    if (cells.size() != 6) throw fail("expected 6 columns");
    LabelRule rule;
    auto ip = [&](const std::string& s, std::optional<IpAddress>& dst) {
      if (s == "*") return;
      auto v = IpAddress::parse(s);
      if (!v) throw fail("bad IP literal '" + s + "'");
      dst = *v;
    };
    auto port = [&](const std::string& s, std::optional<std::uint16_t>& dst) {
      if (s == "*") return;
      auto v = detail::parse_port(s);
      if (!v) throw fail("bad port literal '" + s + "'");
      dst = *v;
    };
    ip(cells[0], rule.src_ip);
    ip(cells[1], rule.dst_ip);
    port(cells[2], rule.src_port);
    port(cells[3], rule.dst_port);
    if (cells[4] != "*") {
      rule.protocol = parse_protocol(cells[4]);
      if (!rule.protocol) throw fail("bad protocol '" + cells[4] + "'");
    }
    auto cls = parse_traffic_class(cells[5]);
    if (!cls) throw fail("bad label '" + cells[5] + "'");
    rule.label = *cls;
    spec.rules.push_back(rule);
  }
  return spec;
}

inline std::vector<TrafficClass> join_labels(std::span<const RawFeatureRecord> records, const LabelSpec& spec) {
  std::vector<TrafficClass> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(spec.classify(r));
  return labels;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

// Random partition of [0, n) into k folds whose sizes differ by at most one
// (larger folds first). Indices inside each fold are ascending.
inline std::vector<std::vector<std::size_t>> split_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0 || n < k) {
    throw TooFewRecords("need at least " + std::to_string(k) + " records for " + std::to_string(k) +
                        " folds, got " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                    perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

// Everything outside fold `test`.
inline std::vector<std::size_t> training_indices(const std::vector<std::vector<std::size_t>>& folds,
                                                 std::size_t test) {
  std::vector<std::size_t> train;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f != test) train.insert(train.end(), folds[f].begin(), folds[f].end());
  }
  std::sort(train.begin(), train.end());
  return train;
}

inline std::size_t downsample_size(std::size_t n, double rate) {
  // Guard against products such as 0.07 * 100 = 7.000000000000001.
  const double exact = rate * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::min(k, n);
}

// Uniform sample without replacement of ceil(rate * n) indices, ascending.
inline std::vector<std::size_t> downsample(std::size_t n, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw UsageError("downsample rate must be in (0, 1]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t k = downsample_size(n, rate);
  if (k == n) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
std::vector<T> gather(std::span<const T> items, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace flowxpert
