#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowxpert/cluster.hpp"
#include "flowxpert/config.hpp"
#include "flowxpert/error.hpp"
#include "flowxpert/evaluate.hpp"
#include "flowxpert/flow.hpp"
#include "flowxpert/pcap.hpp"
#include "flowxpert/preprocess.hpp"
#include "flowxpert/trainer.hpp"

namespace flowxpert::cli {

namespace detail {

inline std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  for (auto& c : f) {
    if (c == '_') c = '-';
  }
  return f;
}

inline void require(const std::string& value, const std::string& key, const std::string& command) {
  if (value.empty()) throw UsageError(command + " requires " + flag_for(key));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

inline void write_json(const std::string& path, const json& j) { open_out(path) << j.dump(2) << '\n'; }

inline std::string fnv_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Dataset {
  std::vector<RawFeatureRecord> records;
  std::vector<TrafficClass> labels;  // empty when the CSV has no label column
};

inline Dataset load_flows(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  Dataset d;
  for (auto& row : read_flow_csv(in)) {
    d.records.push_back(row.record);
    if (row.label) d.labels.push_back(*row.label);
  }
  if (!d.labels.empty() && d.labels.size() != d.records.size()) {
    throw MalformedFlowCsv("label column is incomplete");
  }
  return d;
}

inline Dataset load_labelled(const std::string& path, const std::string& command) {
  auto d = load_flows(path);
  if (d.labels.empty()) throw UsageError(command + " needs a labelled flow CSV (run extract with --labels)");
  return d;
}

// Configuration, seeds, version and a content hash of every input file.
inline void write_manifest(const std::string& primary, const std::string& command, const RunConfig& cfg) {
  json m;
  m["tool"] = "flowxpert";
  m["version"] = kVersion;
  m["command"] = command;
  json config(cfg.to_map());
  m["config"] = config;
  m["config_hash"] = fnv_hex(config.dump());
  m["seeds"] = {{"seed", cfg.seed},
                {"split", cfg.split_seed()},
                {"embedding", cfg.embed_seed()},
                {"detector", cfg.detector_seed()}};
  json inputs = json::object();
  auto add = [&](const std::string& path) {
    if (!path.empty()) inputs[path] = fnv_hex(read_file(path));
  };
  for (const auto& p : cfg.pcaps) add(p);
  add(cfg.labels);
  add(cfg.flows);
  add(cfg.model);
  add(cfg.embed_model);
  m["inputs"] = inputs;
  write_json(primary + ".manifest.json", m);
}

inline void write_loss_curve(const std::string& path, const std::vector<std::pair<std::string, const std::vector<double>*>>& curves) {
  auto out = open_out(path);
  out << "stage,epoch,loss\n";
  for (const auto& [stage, losses] : curves) {
    for (std::size_t e = 0; e < losses->size(); ++e) out << stage << ',' << e + 1 << ',' << format_real((*losses)[e]) << '\n';
  }
}

inline json ingest_json(const IngestReport& r, std::size_t flows) {
  json skipped = json::object();
  for (const auto& [reason, n] : r.skipped) skipped[std::string(to_string(reason))] = n;
  return {{"records_seen", r.records_seen},
          {"packets_read", r.packets_read},
          {"skipped", skipped},
          {"skipped_total", r.skipped_total()},
          {"flows", flows}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_extract(const RunConfig& cfg, std::ostream& out) {
  if (cfg.pcaps.empty()) throw UsageError("extract requires --pcap");
  require(cfg.out, "out", "extract");
  auto res = extract_flows(cfg.pcaps, cfg.flow);
  std::vector<TrafficClass> labels;
  if (!cfg.labels.empty()) {
    std::ifstream in(cfg.labels);
    if (!in) throw IoError("cannot open " + cfg.labels);
    labels = join_labels(res.records, parse_label_spec(in));
  }
  {
    auto csv = open_out(cfg.out);
    write_flow_csv(csv, res.records, labels);
  }
  const auto report = ingest_json(res.report, res.records.size());
  write_json(cfg.report.empty() ? cfg.out + ".ingest.json" : cfg.report, report);
  out << "records seen: " << res.report.records_seen << "\npackets read: " << res.report.packets_read
      << "\nskipped: " << res.report.skipped_total() << "\nflows: " << res.records.size() << '\n';
  if (!labels.empty()) {
    const auto bad = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), TrafficClass::malicious));
    out << "malicious flows: " << bad << '\n';
  }
  write_manifest(cfg.out, "extract", cfg);
}

inline void cmd_fit(const RunConfig& cfg, std::ostream& out) {
  require(cfg.flows, "flows", "fit");
  require(cfg.out, "out", "fit");
  const auto data = load_flows(cfg.flows);
  const auto scaler = fit_scaler(data.records);
  const auto vectors = vectorize_all(data.records, scaler);
  {
    auto csv = open_out(cfg.out);
    for (auto name : kProtocolVocabulary) csv << "proto_" << name << ',';
    for (std::size_t i = 0; i < kContinuousFeatures; ++i) csv << (i ? "," : "") << kContinuousFeatureNames[i];
    csv << (data.labels.empty() ? "\n" : ",label\n");
    for (std::size_t r = 0; r < vectors.size(); ++r) {
      for (std::size_t i = 0; i < kInputDim; ++i) csv << (i ? "," : "") << format_real(vectors[r][i]);
      if (!data.labels.empty()) csv << ',' << to_string(data.labels[r]);
      csv << '\n';
    }
  }
  write_json(cfg.out + ".scaler.json",
             {{"features", kContinuousFeatureNames}, {"min", scaler.min}, {"max", scaler.max}});
  const auto sparsity = sparsity_report(std::span<const FeatureVector>(vectors), cfg.tau);
  out << "vectors: " << vectors.size() << "\nsparsity (|x| < " << format_real(cfg.tau)
      << "): " << format_real(sparsity.overall) << '\n';
  write_manifest(cfg.out, "fit", cfg);
}

inline void cmd_cluster(const RunConfig& cfg, std::ostream& out) {
  require(cfg.flows, "flows", "cluster");
  require(cfg.out, "out", "cluster");
  const auto data = load_flows(cfg.flows);
  const auto vectors = vectorize_all(data.records, fit_scaler(data.records));
  const auto idx = downsample(vectors.size(), cfg.embed.downsample_rate, cfg.embed_seed());
  const auto sample = gather(std::span<const FeatureVector>(vectors), std::span<const std::size_t>(idx));
  const auto labels = dbscan(sample, cfg.dbscan);
  {
    auto dump = open_out(cfg.out);
    write_pseudo_labels(dump, labels, idx);
  }
  const std::size_t k = cfg.kdist_k ? cfg.kdist_k : cfg.dbscan.min_pts;
  const auto kd = k_distances(std::span<const FeatureVector>(sample), k);
  {
    auto f = open_out(cfg.out + ".kdist.csv");
    f << "rank,k_distance\n";
    for (std::size_t i = 0; i < kd.size(); ++i) f << i + 1 << ',' << format_real(kd[i]) << '\n';
  }
  out << "samples: " << sample.size() << "\nclusters: " << labels.clusters << "\nnoise: " << labels.noise_count()
      << '\n';
  write_manifest(cfg.out, "cluster", cfg);
}

inline void cmd_train_embed(const RunConfig& cfg, std::ostream& out) {
  require(cfg.flows, "flows", "train-embed");
  require(cfg.out, "out", "train-embed");
  const auto data = load_flows(cfg.flows);
  auto stage = train_embedding_stage(data.records, data.labels, cfg.pipeline());
  save_model(stage.bundle, cfg.out);
  write_loss_curve(cfg.out + ".loss.csv", {{"embedding", &stage.embed_loss}});
  out << "embedding samples: " << stage.embed_sample.size() << "\nclusters: " << stage.pseudo_labels.clusters
      << "\nnoise: " << stage.pseudo_labels.noise_count() << "\nfinal loss: " << format_real(stage.embed_loss.back())
      << '\n';
  write_manifest(cfg.out, "train-embed", cfg);
}

inline void cmd_train(const RunConfig& cfg, std::ostream& out) {
  require(cfg.flows, "flows", "train");
  require(cfg.out, "out", "train");
  const auto data = load_labelled(cfg.flows, "train");
  const auto pipeline = cfg.pipeline();
  PipelineResult res;
  if (!cfg.embed_model.empty()) {
    res.bundle = load_model(cfg.embed_model);
    train_detector_stage(res, data.records, data.labels, pipeline.detector);
  } else {
    res = train_pipeline(data.records, data.labels, pipeline);
  }
  save_model(res.bundle, cfg.out);
  write_loss_curve(cfg.out + ".loss.csv", {{"embedding", &res.embed_loss}, {"detector", &res.detector_loss}});
  out << "trainable parameters: " << res.bundle.parameter_count() << "\nfinal detector loss: "
      << format_real(res.detector_loss.back()) << '\n';
  write_manifest(cfg.out, "train", cfg);
}

inline std::vector<TrafficClass> classes_of(const std::vector<Prediction>& preds) {
  std::vector<TrafficClass> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.label);
  return out;
}

inline void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  require(cfg.flows, "flows", "eval");
  const auto data = load_labelled(cfg.flows, "eval");
  std::vector<MetricsReport> reports;
  if (cfg.folds >= 2) {
    const auto folds = split_folds(data.records.size(), cfg.folds, cfg.split_seed());
    const std::span<const RawFeatureRecord> records(data.records);
    const std::span<const TrafficClass> labels(data.labels);
    for (std::size_t f = 0; f < folds.size(); ++f) {
      const auto train_idx = training_indices(folds, f);
      const auto train_records = gather(records, std::span<const std::size_t>(train_idx));
      const auto train_labels = gather(labels, std::span<const std::size_t>(train_idx));
      const auto res = train_pipeline(train_records, train_labels, cfg.pipeline());
      const auto test_records = gather(records, std::span<const std::size_t>(folds[f]));
      const auto test_labels = gather(labels, std::span<const std::size_t>(folds[f]));
      const auto preds = predict_batch(res.bundle, vectorize_all(test_records, res.bundle.scaler));
      reports.push_back(score(classes_of(preds), test_labels));
    }
  } else {
    if (cfg.model.empty()) throw UsageError("eval requires --model, or --folds >= 2 for cross-validation");
    const auto bundle = load_model(cfg.model);
    const auto vectors = vectorize_all(data.records, bundle.scaler);
    reports.push_back(score(classes_of(predict_batch(bundle, vectors)), data.labels));
    if (!cfg.embeddings.empty()) {
      auto f = open_out(cfg.embeddings);
      export_embeddings(bundle, vectors, data.labels, {}, f);
    }
  }
  write_metrics_table(out, reports);
  if (!cfg.out.empty()) {
    json j;
    for (const auto& r : reports) j["folds"].push_back(r.to_json());
    write_json(cfg.out, j);
    write_manifest(cfg.out, "eval", cfg);
  }
}

inline void cmd_bench(const RunConfig& cfg, std::ostream& out) {
  require(cfg.model, "model", "bench");
  require(cfg.flows, "flows", "bench");
  const auto bundle = load_model(cfg.model);
  const auto data = load_flows(cfg.flows);
  const auto rep = bench(bundle, data.records, cfg.bench_iters, cfg.bench_warmup);
  write_bench_text(out, rep);
  if (!cfg.out.empty()) {
    write_json(cfg.out, rep.to_json());
    write_manifest(cfg.out, "bench", cfg);
  }
}

inline void cmd_predict(const RunConfig& cfg, std::ostream& out) {
  require(cfg.model, "model", "predict");
  require(cfg.flows, "flows", "predict");
  require(cfg.out, "out", "predict");
  const auto bundle = load_model(cfg.model);
  const auto data = load_flows(cfg.flows);
  const auto preds = predict_batch(bundle, vectorize_all(data.records, bundle.scaler));
  {
    auto csv = open_out(cfg.out);
    csv << "index,class,p_benign,p_malicious\n";
    for (std::size_t i = 0; i < preds.size(); ++i) {
      csv << i << ',' << to_string(preds[i].label) << ',' << format_real(preds[i].probabilities[0]) << ','
          << format_real(preds[i].probabilities[1]) << '\n';
    }
  }
  const auto classes = classes_of(preds);
  out << "records: " << preds.size() << "\nmalicious: "
      << std::count(classes.begin(), classes.end(), TrafficClass::malicious) << '\n';
  if (!data.labels.empty()) write_metrics_table(out, {score(classes, data.labels)});
  write_manifest(cfg.out, "predict", cfg);
}

inline void cmd_inspect(const RunConfig& cfg, std::ostream& out) {
  require(cfg.model, "model", "inspect");
  auto bundle = load_model(cfg.model);
  std::size_t payload = 0;
  for (const auto& t : bundle.tensors()) payload += t.trainable ? t.value.size() * sizeof(float) : 0;
  out << "trainable parameters: " << bundle.parameter_count() << '\n'
      << "  embedding: " << bundle.embedding.parameter_count() << '\n'
      << "  encoder: " << bundle.encoder.parameter_count() << '\n'
      << "  head: " << bundle.head.parameter_count() << '\n'
      << "weight payload bytes: " << payload << '\n';
  if (!cfg.flows.empty()) {
    const auto data = load_flows(cfg.flows);
    const auto vectors = vectorize_all(data.records, bundle.scaler);
    const auto s = sparsity_report(std::span<const FeatureVector>(vectors), cfg.tau);
    out << "sparsity (|x| < " << format_real(cfg.tau) << "): " << format_real(s.overall) << '\n';
    for (std::size_t i = 0; i < s.per_feature.size(); ++i) {
      const std::string name = i < kProtocolDims ? "proto_" + std::string(kProtocolVocabulary[i])
                                                 : std::string(kContinuousFeatureNames[i - kProtocolDims]);
      out << "  " << name << ": " << format_real(s.per_feature[i]) << '\n';
    }
    if (!cfg.embeddings.empty()) {
      auto f = open_out(cfg.embeddings);
      export_embeddings(bundle, vectors, data.labels, {}, f);
    }
  } else {
    out << "sparsity: pass --flows to compute\n";
  }
  out << "manifest: " << bundle.manifest.dump(2) << '\n';
}

}  // namespace detail

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"extract", "fit",  "cluster", "train-embed", "train",
                                                 "eval",    "bench", "predict", "inspect"};
  return names;
}

// Parses argv, runs one subcommand and maps failures onto exit codes:
// 0 success, 1 usage error, 2 data error (error name on `err`).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"flowxpert: flow-level intrusion detection with contrastive embeddings", "flowxpert"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "flat key = value run config");
  std::vector<std::string> pcaps;
  app.add_option("--pcap", pcaps, "input capture (repeatable)");
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  for (const auto& key : RunConfig::keys()) {
    if (key == "pcap") continue;
    options[key] = app.add_option(detail::flag_for(key), values[key]);
  }
  const std::map<std::string, std::string> about = {
      {"extract", "pcap files to a flow CSV"},
      {"fit", "fit the scaler and write model-input vectors"},
      {"cluster", "DBSCAN pseudo-labels and the k-distance curve"},
      {"train-embed", "train the contrastive embedding only"},
      {"train", "train the detector (and the embedding unless --embed-model)"},
      {"eval", "score a model, or cross-validate with --folds"},
      {"bench", "batch-1 latency and throughput"},
      {"predict", "per-flow predictions to CSV"},
      {"inspect", "parameter counts, payload size, sparsity, manifest"},
  };
  for (const auto& name : subcommands()) app.add_subcommand(name, about.at(name));

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) cfg.set(key, values[key]);
    }
    if (!pcaps.empty()) cfg.pcaps = pcaps;

    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "extract") detail::cmd_extract(cfg, out);
    else if (command == "fit") detail::cmd_fit(cfg, out);
    else if (command == "cluster") detail::cmd_cluster(cfg, out);
    else if (command == "train-embed") detail::cmd_train_embed(cfg, out);
    else if (command == "train") detail::cmd_train(cfg, out);
    else if (command == "eval") detail::cmd_eval(cfg, out);
    else if (command == "bench") detail::cmd_bench(cfg, out);
    else if (command == "predict") detail::cmd_predict(cfg, out);
    else detail::cmd_inspect(cfg, out);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << e.name() << ": " << e.what() << '\n';
    return 2;
  }
}

}  // namespace flowxpert::cli
