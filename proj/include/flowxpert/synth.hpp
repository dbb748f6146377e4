#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flowxpert/pcap.hpp"
#include "flowxpert/preprocess.hpp"

// Synthetic capture generator: ordinary clients talking to a server farm, and
// scanning hosts probing many address/port combinations. Used by the test
// suites and the make_synthetic_pcap tool.
namespace flowxpert::synth {

struct TrafficConfig {
  std::uint64_t seed = 1;
  std::size_t clients = 400;
  std::size_t servers = 20;
  std::size_t sessions_per_client = 90;
  std::size_t scanners = 30;
  std::size_t probes_per_scanner = 500;
  double duration_s = 600.0;
  double refused_rate = 0.02;  // benign connection attempts answered with RST
  std::int64_t start_epoch = 1614556800;
};

struct Traffic {
  std::vector<PacketRecord> packets;  // ascending timestamps
  std::vector<IpAddress> scanners;
  LabelSpec labels;                   // one (scanner, *, *, *, *) -> malicious rule per scanner
  std::size_t benign_sessions = 0;
  std::size_t malicious_probes = 0;
};

namespace detail {

struct Builder {
  std::vector<std::pair<PacketRecord, std::size_t>> packets;  // (packet, generation order)
  std::int64_t start_ns;

  void add(double t, const IpAddress& src, std::uint16_t sport, const IpAddress& dst, std::uint16_t dport,
           Protocol proto, std::uint8_t flags, std::uint32_t len) {
    PacketRecord p;
    p.ts = Timestamp::from_nanos(start_ns + static_cast<std::int64_t>(std::llround(t * 1e6)) * 1000);
    p.src_ip = src;
    p.dst_ip = dst;
    p.src_port = proto == Protocol::other ? 0 : sport;
    p.dst_port = proto == Protocol::other ? 0 : dport;
    p.protocol = proto;
    p.tcp_flags = proto == Protocol::tcp ? flags : 0;
    p.wire_len = len;
    packets.emplace_back(p, packets.size());
  }
};

}  // namespace detail

inline Traffic generate(const TrafficConfig& cfg) {
  using namespace tcp_flag;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto ephemeral = [&]() { return static_cast<std::uint16_t>(32768 + pick(28232)); };

  detail::Builder b{{}, cfg.start_epoch * 1'000'000'000};
  Traffic out;

  std::vector<IpAddress> servers;
  for (std::size_t s = 0; s < cfg.servers; ++s) servers.push_back(IpAddress::v4(10, 1, 0, static_cast<std::uint8_t>(1 + s)));
  const std::uint16_t service_ports[] = {80, 443, 22, 25, 8080};

  // Benign clients.
  for (std::size_t c = 0; c < cfg.clients; ++c) {
    const auto client = IpAddress::v4(192, 168, static_cast<std::uint8_t>(c / 250), static_cast<std::uint8_t>(1 + c % 250));
    const auto home = pick(servers.size());
    for (std::size_t k = 0; k < cfg.sessions_per_client; ++k) {
      ++out.benign_sessions;
      // Clients favour a home server.
      const auto& server = servers[unit(rng) < 0.6 ? home : pick(servers.size())];
      double t = uniform(0.0, cfg.duration_s - 40.0);
      const double rtt = uniform(0.005, 0.08);
      const double kind = unit(rng);
      if (kind < 0.30) {
        const auto sport = ephemeral();
        b.add(t, client, sport, server, 53, Protocol::udp, 0, 74);
        b.add(t + uniform(0.001, 0.05), server, 53, client, sport, Protocol::udp, 0, 120);
        continue;
      }
      if (kind < 0.35) {
        b.add(t, client, 0, server, 0, Protocol::other, 0, 98);
        b.add(t + rtt, server, 0, client, 0, Protocol::other, 0, 98);
        continue;
      }
      const auto sport = ephemeral();
      const auto dport = service_ports[pick(std::size(service_ports))];
      b.add(t, client, sport, server, dport, Protocol::tcp, syn, 74);
      if (unit(rng) < cfg.refused_rate) {
        b.add(t + rtt, server, dport, client, sport, Protocol::tcp, rst | ack, 60);
        continue;
      }
      b.add(t + rtt, server, dport, client, sport, Protocol::tcp, syn | ack, 74);
      t += 1.5 * rtt;
      b.add(t, client, sport, server, dport, Protocol::tcp, ack, 66);
      const std::size_t data = 2 + pick(29);
      std::exponential_distribution<double> gap(1.0 / 0.02);
      for (std::size_t d = 0; d < data; ++d) {
        t += gap(rng);
        const bool up = d % 3 == 0;
        if (up) {
          b.add(t, client, sport, server, dport, Protocol::tcp, psh | ack, static_cast<std::uint32_t>(100 + pick(400)));
        } else {
          b.add(t, server, dport, client, sport, Protocol::tcp, psh | ack, static_cast<std::uint32_t>(200 + pick(1300)));
        }
      }
      t += gap(rng);
      b.add(t, client, sport, server, dport, Protocol::tcp, fin | ack, 66);
      b.add(t + rtt, server, dport, client, sport, Protocol::tcp, fin | ack, 66);
      b.add(t + 1.5 * rtt, client, sport, server, dport, Protocol::tcp, ack, 66);
    }
  }

  // Scanners.
  for (std::size_t s = 0; s < cfg.scanners; ++s) {
    const auto scanner = IpAddress::v4(203, 0, static_cast<std::uint8_t>(113 + s / 250), static_cast<std::uint8_t>(1 + s % 250));
    out.scanners.push_back(scanner);
    LabelRule rule;
    rule.src_ip = scanner;
    rule.label = TrafficClass::malicious;
    out.labels.rules.push_back(rule);

    const bool fixed_sport = s % 2 == 0;
    const bool udp_scan = s % 5 == 4;
    const std::uint16_t sport0 = ephemeral();
    const double rate = uniform(20.0, 200.0);
    double t = uniform(0.0, cfg.duration_s * 0.5);
    std::set<std::pair<std::uint8_t, std::uint16_t>> probed;
    const bool sweep_hosts = s % 3 == 0;
    for (std::size_t k = 0; k < cfg.probes_per_scanner; ++k) {
      std::uint8_t host;
      std::uint16_t port;
      do {
        if (sweep_hosts) {
          host = static_cast<std::uint8_t>(1 + pick(254));
          port = service_ports[pick(std::size(service_ports))];
        } else {
          host = static_cast<std::uint8_t>(1 + pick(cfg.servers));
          port = static_cast<std::uint16_t>(1 + pick(1024));
        }
      } while (!probed.emplace(host, port).second);
      ++out.malicious_probes;
      const auto target = IpAddress::v4(10, 1, 0, host);
      const auto sport = fixed_sport ? sport0 : ephemeral();
      const double rtt = uniform(0.002, 0.05);
      if (udp_scan) {
        b.add(t, scanner, sport, target, port, Protocol::udp, 0, 42);
      } else {
        b.add(t, scanner, sport, target, port, Protocol::tcp, syn, 58);
        const double r = unit(rng);
        if (r < 0.7) {
          b.add(t + rtt, target, port, scanner, sport, Protocol::tcp, rst | ack, 60);
        } else if (r < 0.8) {
          b.add(t + rtt, target, port, scanner, sport, Protocol::tcp, syn | ack, 60);
          b.add(t + 1.5 * rtt, scanner, sport, target, port, Protocol::tcp, rst, 54);
        }
      }
      std::exponential_distribution<double> gap(rate);
      t += gap(rng);
    }
  }

  std::sort(b.packets.begin(), b.packets.end(), [](const auto& x, const auto& y) {
    return std::tie(x.first.ts, x.second) < std::tie(y.first.ts, y.second);
  });
  out.packets.reserve(b.packets.size());
  for (auto& [p, _] : b.packets) out.packets.push_back(p);
  return out;
}

inline void write_capture(const Traffic& traffic, const std::string& path) {
  CaptureWriter w(path);
  for (const auto& p : traffic.packets) w.write(p);
}

inline void write_label_spec(std::ostream& out, const LabelSpec& spec) {
  out << kLabelSpecHeader << '\n';
  auto ip = [](const std::optional<IpAddress>& v) { return v ? v->to_string() : std::string("*"); };
  auto port = [](const std::optional<std::uint16_t>& v) { return v ? std::to_string(*v) : std::string("*"); };
  for (const auto& r : spec.rules) {
    out << ip(r.src_ip) << ',' << ip(r.dst_ip) << ',' << port(r.src_port) << ',' << port(r.dst_port) << ','
        << (r.protocol ? std::string(to_string(*r.protocol)) : std::string("*")) << ',' << to_string(r.label) << '\n';
  }
}

}  // namespace flowxpert::synth
