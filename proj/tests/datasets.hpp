#pragma once

#include <vector>

#include "flowxpert/flow.hpp"
#include "flowxpert/preprocess.hpp"
#include "flowxpert/synth.hpp"

namespace fxtest {

struct LabelledFlows {
  std::vector<flowxpert::RawFeatureRecord> records;
  std::vector<flowxpert::TrafficClass> labels;
};

// Synthetic traffic pushed straight through a FlowTable (no file round trip).
inline LabelledFlows synthetic_flows(const flowxpert::synth::TrafficConfig& cfg) {
  const auto traffic = flowxpert::synth::generate(cfg);
  flowxpert::FlowTable table;
  LabelledFlows out;
  for (const auto& p : traffic.packets) {
    auto done = table.assign_packet(p);
    out.records.insert(out.records.end(), done.begin(), done.end());
  }
  auto rest = table.finalize();
  out.records.insert(out.records.end(), rest.begin(), rest.end());
  out.labels = flowxpert::join_labels(out.records, traffic.labels);
  return out;
}

inline flowxpert::synth::TrafficConfig small_traffic(std::uint64_t seed = 1) {
  flowxpert::synth::TrafficConfig cfg;
  cfg.seed = seed;
  cfg.clients = 60;
  cfg.sessions_per_client = 25;
  cfg.scanners = 6;
  cfg.probes_per_scanner = 120;
  cfg.duration_s = 300;
  return cfg;
}

}  // namespace fxtest
