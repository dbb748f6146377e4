// Writes a synthetic capture plus the label spec that marks its scanners.
//   make_synthetic_pcap --out traffic.pcap --labels labels.csv [--seed N] [--clients N] ...
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "flowxpert/synth.hpp"

int main(int argc, char** argv) {
  flowxpert::synth::TrafficConfig cfg;
  std::string out_path;
  std::string labels_path;
  CLI::App app{"synthetic benign + scanning traffic generator", "make_synthetic_pcap"};
  app.add_option("--out", out_path, "output pcap")->required();
  app.add_option("--labels", labels_path, "output label spec")->required();
  app.add_option("--seed", cfg.seed);
  app.add_option("--clients", cfg.clients);
  app.add_option("--servers", cfg.servers);
  app.add_option("--sessions-per-client", cfg.sessions_per_client);
  app.add_option("--scanners", cfg.scanners);
  app.add_option("--probes-per-scanner", cfg.probes_per_scanner);
  app.add_option("--duration", cfg.duration_s);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto traffic = flowxpert::synth::generate(cfg);
    flowxpert::synth::write_capture(traffic, out_path);
    std::ofstream labels(labels_path);
    if (!labels) throw flowxpert::IoError("cannot write " + labels_path);
    flowxpert::synth::write_label_spec(labels, traffic.labels);
    std::cout << "packets: " << traffic.packets.size() << "\nbenign sessions: " << traffic.benign_sessions
              << "\nscan probes: " << traffic.malicious_probes << '\n';
  } catch (const flowxpert::Error& e) {
    std::cerr << e.name() << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}
