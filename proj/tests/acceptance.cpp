// Acceptance harness: one PASS/FAIL line per criterion, indented detail lines
// below it. Exit status is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "flowxpert/cli.hpp"
#include "flowxpert/evaluate.hpp"
#include "flowxpert/synth.hpp"
#include "flowxpert/trainer.hpp"
#include "datasets.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flowxpert;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail << "  " << (ok ? "ok   " : "FAIL ") << what << '\n';
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// --------------------------------------------------------------------------

void parameter_accounting(Verdict& v) {
  ModelBundle bundle;
  std::mt19937_64 rng(1);
  bundle.embedding.init(rng);
  bundle.encoder.init(rng);
  bundle.head.init(rng);
  v.require(bundle.embedding.parameter_count() == 4368, "embedding parameters 4368");
  v.require(bundle.encoder.parameter_count() == 180608, "encoder parameters 180608");
  v.require(bundle.head.parameter_count() == 258, "head parameters 258");
  v.require(bundle.parameter_count() == 185234, "total trainable parameters 185234");

  const auto bytes = serialize_model(bundle);
  const std::uint32_t hlen =
      bytes[8] | bytes[9] << 8 | bytes[10] << 16 | static_cast<std::uint32_t>(bytes[11]) << 24;
  const auto header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  std::size_t trainable = 0, buffers = 0;
  for (const auto& t : header.at("tensors")) {
    const auto n = 4 * t.at("shape")[0].get<std::size_t>() * t.at("shape")[1].get<std::size_t>();
    (t.at("trainable").get<bool>() ? trainable : buffers) += n;
  }
  const std::size_t data = bytes.size() - 12 - hlen - 4;
  v.require(data - buffers == 740936, "trainable payload bytes 740936 (measured " + std::to_string(data - buffers) +
                                           ", " + fmt("%.1f KiB", (data - buffers) / 1024.0) + ")");
  v.require(trainable == 740936 && header.at("trainable_bytes") == 740936, "header declares 740936 trainable bytes");
}

void gradient_correctness(Verdict& v) {
  const auto worst = fxtest::gradient_sweep(1, 25);
  double overall = 0.0;
  for (const auto& [name, err] : worst) {
    overall = std::max(overall, err);
    v.detail << "  " << name << ": " << fmt("%.2e", err) << '\n';
  }
  v.require(worst.size() == 8, "dense, batchnorm (train/eval), leaky relu, both losses, both networks checked");
  v.require(overall < 1e-4, "max relative error over 25 seeds " + fmt("%.2e", overall) + " < 1e-4");
}

void dbscan_equivalence(Verdict& v) {
  std::mt19937_64 rng(77);
  std::size_t matched = 0, nontrivial = 0;
  for (int t = 0; t < 100; ++t) {
    const auto inst = fxtest::random_instance(rng);
    const auto got = dbscan(inst.pts, {inst.eps, inst.min_pts});
    const auto expect = fxtest::dbscan_oracle(inst.pts, inst.eps, inst.min_pts);
    matched += fxtest::partition_of(got.ids) == fxtest::partition_of(expect);
    nontrivial += got.clusters >= 2 && got.noise_count() > 0;
  }
  v.require(matched == 100, std::to_string(matched) + "/100 instances match the naive partition");
  v.detail << "  instances with >= 2 clusters and noise: " << nontrivial << '\n';
}

void contrastive_margin(Verdict& v) {
  constexpr int k = 3, per = 80, dim = 15;
  constexpr double sigma = 0.03;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<std::array<double, dim>> centers;
  while (centers.size() < k) {
    std::array<double, dim> c;
    for (auto& x : c) x = 0.15 + 0.7 * unit(rng);
    bool far = true;
    for (const auto& o : centers) {
      double s = 0.0;
      for (int d = 0; d < dim; ++d) s += (c[d] - o[d]) * (c[d] - o[d]);
      far = far && std::sqrt(s) >= 6 * sigma * std::sqrt(dim);
    }
    if (far) centers.push_back(c);
  }
  std::vector<std::vector<double>> pts;
  std::vector<int> truth;
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < per; ++i) {
      std::vector<double> p(dim);
      for (int d = 0; d < dim; ++d) p[d] = centers[c][d] + g(rng);
      pts.push_back(p);
      truth.push_back(c);
    }
  }

  // Pseudo-labels come from DBSCAN, as in the pipeline.
  const auto pseudo = dbscan(pts, DbscanParams{});
  v.require(fxtest::partition_of(pseudo.ids) == fxtest::partition_of(truth),
            "default DBSCAN recovers the 3 clusters (" + std::to_string(pseudo.clusters) + " found)");

  nn::Matrix<float> x(dim, k * per);
  for (int j = 0; j < k * per; ++j)
    for (int d = 0; d < dim; ++d) x(d, j) = static_cast<float>(pts[j][d]);
  EmbedTrainConfig cfg;  // 150 epochs, margin 1
  auto trained = train_embedding(x, pseudo.ids, cfg);
  const auto emb = trained.net.infer(x);
  const double m = cfg.margin;
  std::size_t intra = 0, intra_ok = 0, inter = 0, inter_ok = 0;
  for (int a = 0; a < k * per; ++a) {
    for (int b = a + 1; b < k * per; ++b) {
      const double dist = static_cast<double>((emb.col(a) - emb.col(b)).norm());
      if (truth[a] == truth[b]) {
        ++intra;
        intra_ok += dist <= m + 0.1;
      } else {
        ++inter;
        inter_ok += dist >= 2 * m - 0.1;
      }
    }
  }
  const double fi = double(intra_ok) / double(intra), fo = double(inter_ok) / double(inter);
  const double ratio = trained.epoch_loss.back() / trained.epoch_loss.front();
  v.require(trained.epoch_loss.size() == 150, "150 epochs");
  v.require(fi >= 0.95, "intra-cluster distances <= m + 0.1: " + fmt("%.4f", fi));
  v.require(fo >= 0.95, "inter-cluster distances >= 2m - 0.1: " + fmt("%.4f", fo));
  v.require(ratio < 0.1, "final / first epoch loss " + fmt("%.3e", ratio) + " < 0.1");
}

void hinge_grid(Verdict& v) {
  const double m = 1.0;
  std::size_t checked = 0, violations = 0;
  for (int i = 0; i < 100; ++i) {
    for (int j = 0; j < 100; ++j) {
      const double pos = 3.0 * m * i / 99.0;
      const double neg = 3.0 * m * j / 99.0;
      for (int s = 1; s <= 100; ++s) {
        const double eps = m * s / 100.0;
        ++checked;
        violations += nn::contrastive_hinge(pos - eps, neg + eps, m) > nn::contrastive_hinge(pos, neg, m);
      }
    }
  }
  v.require(violations == 0, std::to_string(checked) + " (pos, neg, eps) points, " + std::to_string(violations) +
                                 " violations");
}

void flow_golden(Verdict& v) {
  using namespace fxtest;
  TempDir dir;
  PcapBuilder b(0xa1b23c4d);
  b.record(1000, 0, ethernet(0x0800, ipv4(6, {10, 0, 0, 1}, {10, 0, 0, 2}, tcp(40000, 80, 0x02))));
  b.record(1000, 100'000'000, ethernet(0x0800, ipv4(6, {10, 0, 0, 2}, {10, 0, 0, 1}, tcp(80, 40000, 0x12))));
  b.record(1000, 300'000'000, ethernet(0x0800, ipv4(6, {10, 0, 0, 1}, {10, 0, 0, 2}, tcp(40000, 80, 0x10))));
  b.save(dir.file("golden.pcap"));
  const auto res = extract_flows({dir.file("golden.pcap")});
  v.require(res.records.size() == 1, "golden capture gives one flow");
  if (res.records.size() == 1) {
    const auto& r = res.records[0];
    v.require(r[Feature::flow_dur] == 0.3 && r[Feature::iat_mean] == 0.15 && r[Feature::iat_std] == 0.05 &&
                  r[Feature::pkts_per_sec] == 10.0,
              "flow_dur 0.3, iat_mean 0.15, iat_std 0.05, pkts_per_sec 10.0 exactly");
  }

  // A generated TCP port scan, written to a capture and read back.
  synth::TrafficConfig cfg;
  cfg.clients = 0;
  cfg.scanners = 2;
  cfg.probes_per_scanner = 400;
  const auto traffic = synth::generate(cfg);
  synth::write_capture(traffic, dir.file("scan.pcap"));
  const auto scan = extract_flows({dir.file("scan.pcap")});
  const auto scanner = traffic.scanners[1];
  std::set<std::uint16_t> ports;
  std::set<std::tuple<std::uint16_t, std::string, std::uint16_t>> tuples;
  std::int64_t first = std::numeric_limits<std::int64_t>::max(), last = 0;
  for (const auto& p : traffic.packets) {
    const bool out = p.src_ip == scanner, in = p.dst_ip == scanner;
    if (!out && !in) continue;
    first = std::min(first, p.ts.nanos());
    last = std::max(last, p.ts.nanos());
    if (out) {
      ports.insert(p.dst_port);
      tuples.emplace(p.src_port, p.dst_ip.to_string(), p.dst_port);
    }
  }
  const double truth_rate = static_cast<double>(tuples.size()) * 1e9 / static_cast<double>(last - first);
  std::size_t flows = 0, port_ok = 0;
  double rate_at_end = -1.0;
  std::int64_t latest = 0;
  for (const auto& r : scan.records) {
    if (r.src_ip != scanner) continue;
    ++flows;
    port_ok += r[Feature::num_d_port] == static_cast<double>(ports.size());
    const auto end = r.first_ts.nanos() + static_cast<std::int64_t>(std::llround(r[Feature::flow_dur] * 1e9));
    if (end >= latest) {
      latest = end;
      rate_at_end = r[Feature::con_per_sec];
    }
  }
  v.require(flows == tuples.size() && flows == 400, "scan flows " + std::to_string(flows) + " = probes 400");
  v.require(port_ok == flows, "num_d_port = " + std::to_string(ports.size()) + " distinct probed ports on every flow");
  v.require(rate_at_end == truth_rate, "con_per_sec " + fmt("%.6f", rate_at_end) + " = generator " + fmt("%.6f", truth_rate));
}

// The trained model is reused by the latency criterion.
ModelBundle g_detector;
std::vector<RawFeatureRecord> g_bench_records;

void end_to_end_detection(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  synth::TrafficConfig train_cfg;  // defaults: ~50k flows
  auto test_cfg = train_cfg;
  test_cfg.seed = 2;
  const auto train = fxtest::synthetic_flows(train_cfg);
  const auto test = fxtest::synthetic_flows(test_cfg);
  const auto bad = std::count(train.labels.begin(), train.labels.end(), TrafficClass::malicious);
  v.detail << "  training flows " << train.records.size() << " (" << bad << " malicious), held-out flows "
           << test.records.size() << '\n';
  v.require(train.records.size() >= 50000, "corpus has >= 50k flows");

  RunConfig defaults;
  auto res = train_pipeline(train.records, train.labels, defaults.pipeline());
  const auto preds = predict_batch(res.bundle, vectorize_all(test.records, res.bundle.scaler));
  std::vector<TrafficClass> classes;
  for (const auto& p : preds) classes.push_back(p.label);
  const auto report = score(classes, test.labels);
  std::ostringstream table;
  write_metrics_table(table, {report});
  std::istringstream lines(table.str());
  for (std::string line; std::getline(lines, line);) v.detail << "  " << line << '\n';
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.require(report[TrafficClass::benign].f1 >= 0.95, "benign F1 " + fmt("%.4f", report[TrafficClass::benign].f1));
  v.require(report[TrafficClass::malicious].f1 >= 0.95,
            "malicious F1 " + fmt("%.4f", report[TrafficClass::malicious].f1));
  v.require(secs < 600, "runtime " + fmt("%.1f s", secs) + " < 600 s");
  g_detector = std::move(res.bundle);
  g_bench_records.assign(test.records.begin(), test.records.begin() + std::min<std::size_t>(test.records.size(), 4096));
}

void gradient_norm_law(Verdict& v) {
  std::mt19937_64 rng(3);
  nn::Dense<double> layer(15, 128);
  layer.init(rng);
  std::normal_distribution<double> g;
  nn::Vector<double> x(15), delta(128);
  for (auto& e : x) e = g(rng);
  for (auto& e : delta) e = g(rng);
  const std::vector<double> scales{1.0, 0.01, 0.1, 0.5, 2.0, 10.0, 100.0};
  double worst = 0.0;
  for (const auto& row : gradient_norm_probe(layer, delta, x, scales)) {
    worst = std::max(worst, std::fabs(row.ratio / row.scale - 1.0));
  }
  v.require(worst < 1e-6, "max |ratio / scale - 1| " + fmt("%.2e", worst) + " < 1e-6");
}

void latency(Verdict& v) {
  if (g_bench_records.empty()) {
    v.require(false, "no trained model from the detection criterion");
    return;
  }
  const auto r = bench(g_detector, g_bench_records, 10000, 1000);
  std::ostringstream text;
  write_bench_text(text, r);
  std::istringstream lines(text.str());
  for (std::string line; std::getline(lines, line);) v.detail << "  " << line << '\n';
  v.require(r.end_to_end.p50_us < 50.0, "end-to-end p50 " + fmt("%.2f us", r.end_to_end.p50_us) + " < 50 us");
  bool ordered = true;
  for (const auto* s : {&r.embedding, &r.encoder, &r.end_to_end}) {
    ordered = ordered && s->p50_us <= s->p90_us && s->p90_us <= s->p99_us && s->p50_us > 0;
  }
  v.require(ordered, "p50 <= p90 <= p99 for every stage");
  bool consistent = true;
  for (const auto* s : {&r.embedding, &r.encoder, &r.end_to_end}) {
    consistent = consistent && std::fabs(s->qps_from_mean * s->mean_us - 1e6) < 1e-3 && s->qps_measured > 0;
  }
  v.require(consistent, "qps_from_mean = 1e6 / mean_us and measured qps positive");
  // Encoder and head are most of the end-to-end cost, so only the embedding
  // stage is compared against it.
  v.require(r.embedding.p50_us < r.end_to_end.p50_us, "embedding p50 < end-to-end p50");
}

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    out[e.path().filename().string()] = fxtest::slurp(e.path().string());
  }
  return out;
}

void determinism(Verdict& v) {
  fxtest::TempDir in, work;
  const auto traffic = synth::generate(fxtest::small_traffic(5));
  synth::write_capture(traffic, in.file("t.pcap"));
  {
    std::ofstream spec(in.file("labels.csv"));
    synth::write_label_spec(spec, traffic.labels);
  }
  const std::vector<std::string> quick = {"--downsample-rate", "0.2", "--embed-epochs", "20", "--detector-epochs", "5"};
  const std::vector<std::vector<std::string>> steps = {
      {"extract", "--pcap", in.file("t.pcap"), "--labels", in.file("labels.csv"), "--out", work.file("flows.csv")},
      {"cluster", "--flows", work.file("flows.csv"), "--out", work.file("pseudo.csv")},
      {"train-embed", "--flows", work.file("flows.csv"), "--out", work.file("embed.bin")},
      {"train", "--flows", work.file("flows.csv"), "--embed-model", work.file("embed.bin"), "--out",
       work.file("model.bin")},
      {"eval", "--flows", work.file("flows.csv"), "--model", work.file("model.bin"), "--out", work.file("eval.json"),
       "--embeddings", work.file("emb.csv")},
      {"eval", "--flows", work.file("flows.csv"), "--folds", "3", "--out", work.file("cv.json")},
  };
  auto run_all = [&](std::string& console) {
    for (auto step : steps) {
      step.insert(step.begin() + 1, quick.begin(), quick.end());
      step.insert(step.begin(), "flowxpert");
      step.push_back("--seed");
      step.push_back("7");
      std::vector<const char*> argv;
      for (const auto& a : step) argv.push_back(a.c_str());
      std::ostringstream out, err;
      const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
      console += out.str();
      if (code != 0) return step[1] + " exited " + std::to_string(code) + ": " + err.str();
    }
    return std::string();
  };
  std::string first_console, second_console;
  const auto e1 = run_all(first_console);
  const auto first = snapshot(work.path());
  const auto e2 = run_all(second_console);
  const auto second = snapshot(work.path());
  v.require(e1.empty() && e2.empty(), "all commands succeed" + (e1.empty() ? e2 : ": " + e1));
  std::size_t same = 0;
  for (const auto& [name, bytes] : first) {
    auto it = second.find(name);
    if (it != second.end() && it->second == bytes) ++same;
    else v.detail << "  differs: " << name << '\n';
  }
  v.require(first.size() == second.size() && same == first.size() && first.size() >= 15,
            std::to_string(same) + "/" + std::to_string(first.size()) + " output files byte-identical");
  v.require(first_console == second_console, "console output identical");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria = {
      {"AC1 parameter accounting", parameter_accounting},
      {"AC2 gradient correctness", gradient_correctness},
      {"AC3 DBSCAN oracle equivalence", dbscan_equivalence},
      {"AC4 contrastive margin property", contrastive_margin},
      {"AC5 hinge pair grid", hinge_grid},
      {"AC6 flow features golden and scan", flow_golden},
      {"AC7 end-to-end synthetic detection", end_to_end_detection},
      {"AC8 gradient norm scaling", gradient_norm_law},
      {"AC9 latency", latency},
      {"AC10 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      check(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << " (" << fmt("%.2f s", secs) << ")\n" << v.detail.str();
    std::cout.flush();
    failed += !v.pass;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << '\n';
  return failed;
}
