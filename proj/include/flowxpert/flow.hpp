#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "flowxpert/error.hpp"
#include "flowxpert/pcap.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

struct IpAddressHash {
  std::size_t operator()(const IpAddress& ip) const noexcept {
    std::uint64_t h = 1469598103934665603ULL ^ static_cast<std::uint64_t>(ip.family);
    for (auto b : ip.bytes) h = (h ^ b) * 1099511628211ULL;
    return static_cast<std::size_t>(h);
  }
};

// Canonical bidirectional 5-tuple: (ip_a, port_a) <= (ip_b, port_b).
struct FlowKey {
  IpAddress ip_a;
  std::uint16_t port_a = 0;
  IpAddress ip_b;
  std::uint16_t port_b = 0;
  Protocol protocol = Protocol::other;

  static FlowKey of(const IpAddress& src, std::uint16_t sport, const IpAddress& dst, std::uint16_t dport,
                    Protocol proto) {
    if (std::tie(dst, dport) < std::tie(src, sport)) return {dst, dport, src, sport, proto};
    return {src, sport, dst, dport, proto};
  }

  static FlowKey of(const PacketRecord& p) { return of(p.src_ip, p.src_port, p.dst_ip, p.dst_port, p.protocol); }

  auto operator<=>(const FlowKey&) const = default;
};

struct FlowKeyHash {
  std::size_t operator()(const FlowKey& k) const noexcept {
    IpAddressHash h;
    std::size_t x = h(k.ip_a);
    x = x * 31 + h(k.ip_b);
    x = x * 31 + (static_cast<std::size_t>(k.port_a) << 16 | k.port_b);
    return x * 31 + static_cast<std::size_t>(k.protocol);
  }
};

struct FlowRecord {
  FlowKey key;
  // Orientation of the first packet seen; the initiator owns the contextual features.
  IpAddress initiator_ip;
  IpAddress responder_ip;
  std::uint16_t initiator_port = 0;
  std::uint16_t responder_port = 0;
  Timestamp first_ts;
  Timestamp last_ts;
  std::uint64_t pkt_num = 0;
  std::uint64_t syn_num = 0;
  std::uint64_t fin_num = 0;
  std::uint64_t rst_num = 0;
  // Inter-arrival gaps in nanoseconds; exact integer moments.
  std::int64_t gap_sum_ns = 0;
  unsigned __int128 gap_sumsq_ns = 0;
  Protocol protocol = Protocol::other;
};

struct HostContext {
  std::unordered_set<std::uint16_t> src_ports;
  std::unordered_set<IpAddress, IpAddressHash> dst_ips;
  std::unordered_set<std::uint16_t> dst_ports;
  std::uint64_t flows_initiated = 0;
  Timestamp first_seen_ts;
};

// Positions of the twelve continuous features inside RawFeatureRecord::values.
enum class Feature : std::size_t {
  flow_dur = 0,
  iat_mean,
  iat_std,
  fin_num,
  syn_num,
  rst_num,
  pkt_num,
  pkts_per_sec,
  num_s_port,
  num_d_ip,
  num_d_port,
  con_per_sec,
};

inline constexpr std::size_t kContinuousFeatures = 12;

inline constexpr std::array<std::string_view, kContinuousFeatures> kContinuousFeatureNames = {
    "flow_dur",     "iat_mean",   "iat_std",  "fin_num",    "syn_num",    "rst_num",
    "pkt_num",      "pkts_per_sec", "num_s_port", "num_d_ip", "num_d_port", "con_per_sec"};

// One emitted flow: protocol plus twelve non-negative reals. The metadata
// (addresses, ports, first_ts) is carried for labelling and never vectorized.
struct RawFeatureRecord {
  Protocol protocol = Protocol::other;
  std::array<double, kContinuousFeatures> values{};

  FlowKey key;
  IpAddress src_ip;  // initiator
  IpAddress dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  Timestamp first_ts;

  double& operator[](Feature f) { return values[static_cast<std::size_t>(f)]; }
  double operator[](Feature f) const { return values[static_cast<std::size_t>(f)]; }

  bool operator==(const RawFeatureRecord&) const = default;
};

struct FlowConfig {
  double inactivity_timeout_s = 120.0;
  double active_timeout_s = 3600.0;
  double duration_floor_s = 1e-3;
};

inline RawFeatureRecord emit_record(const FlowRecord& flow, const HostContext& ctx, double duration_floor_s = 1e-3) {
  RawFeatureRecord r;
  r.protocol = flow.protocol;
  r.key = flow.key;
  r.src_ip = flow.initiator_ip;
  r.dst_ip = flow.responder_ip;
  r.src_port = flow.initiator_port;
  r.dst_port = flow.responder_port;
  r.first_ts = flow.first_ts;

  const std::int64_t dur_ns = flow.last_ts.nanos() - flow.first_ts.nanos();
  const std::int64_t floor_ns = static_cast<std::int64_t>(std::llround(duration_floor_s * 1e9));
  const double n = static_cast<double>(flow.pkt_num);
  r[Feature::flow_dur] = static_cast<double>(dur_ns) / 1e9;
  if (flow.pkt_num >= 2) {
    const auto gaps = static_cast<long double>(flow.pkt_num - 1);
    r[Feature::iat_mean] = static_cast<double>(flow.gap_sum_ns / gaps / 1e9L);
    // Population variance from exact integer moments: (k*sumsq - sum^2) / k^2.
    const unsigned __int128 k = flow.pkt_num - 1;
    const unsigned __int128 s = static_cast<unsigned __int128>(flow.gap_sum_ns);
    const unsigned __int128 num = k * flow.gap_sumsq_ns - s * s;
    const long double var_ns2 = static_cast<long double>(num) / (gaps * gaps);
    r[Feature::iat_std] = static_cast<double>(std::sqrt(var_ns2) / 1e9L);
  }
  r[Feature::fin_num] = static_cast<double>(flow.fin_num);
  r[Feature::syn_num] = static_cast<double>(flow.syn_num);
  r[Feature::rst_num] = static_cast<double>(flow.rst_num);
  r[Feature::pkt_num] = n;
  r[Feature::pkts_per_sec] = n * 1e9 / static_cast<double>(std::max(dur_ns, floor_ns));

  r[Feature::num_s_port] = static_cast<double>(ctx.src_ports.size());
  r[Feature::num_d_ip] = static_cast<double>(ctx.dst_ips.size());
  r[Feature::num_d_port] = static_cast<double>(ctx.dst_ports.size());
  const std::int64_t host_ns = flow.last_ts.nanos() - ctx.first_seen_ts.nanos();
  r[Feature::con_per_sec] =
      static_cast<double>(ctx.flows_initiated) * 1e9 / static_cast<double>(std::max(host_ns, floor_ns));
  return r;
}

// Live flow state plus per-initiator context. Single writer.
class FlowTable {
 public:
  explicit FlowTable(FlowConfig cfg = {})
      : cfg_(cfg),
        idle_ns_(static_cast<std::int64_t>(std::llround(cfg.inactivity_timeout_s * 1e9))),
        active_ns_(static_cast<std::int64_t>(std::llround(cfg.active_timeout_s * 1e9))) {}

  const FlowConfig& config() const { return cfg_; }
  std::size_t live_flows() const { return flows_.size(); }
  const HostContext* context(const IpAddress& ip) const {
    auto it = hosts_.find(ip);
    return it == hosts_.end() ? nullptr : &it->second;
  }

  // Adds pkt to its flow. Returns flows expired by pkt's timestamp, ordered
  // by (first_ts, key); they are emitted before pkt is placed.
  std::vector<RawFeatureRecord> assign_packet(const PacketRecord& pkt) {
    const std::int64_t now = pkt.ts.nanos();
    std::set<std::pair<std::int64_t, FlowKey>> expired;
    while (!by_last_.empty() && now - by_last_.begin()->first > idle_ns_) {
      const FlowKey& k = by_last_.begin()->second;
      expired.emplace(flows_.at(k).first_ts.nanos(), k);
      by_last_.erase(by_last_.begin());
    }
    while (!by_first_.empty() && now - by_first_.begin()->first > active_ns_) {
      const FlowKey& k = by_first_.begin()->second;
      expired.emplace(by_first_.begin()->first, k);
      by_first_.erase(by_first_.begin());
    }
    std::vector<RawFeatureRecord> out;
    out.reserve(expired.size());
    for (const auto& [_, k] : expired) out.push_back(remove(k));

    const FlowKey key = FlowKey::of(pkt);
    auto it = flows_.find(key);
    if (it == flows_.end()) {
      it = open(key, pkt);
    } else {
      FlowRecord& f = it->second;
      by_last_.erase({f.last_ts.nanos(), key});
      const std::int64_t gap = std::max<std::int64_t>(0, now - f.last_ts.nanos());
      f.gap_sum_ns += gap;
      f.gap_sumsq_ns += static_cast<unsigned __int128>(gap) * static_cast<unsigned __int128>(gap);
      if (pkt.ts > f.last_ts) f.last_ts = pkt.ts;
      if (pkt.ts < f.first_ts) {
        by_first_.erase({f.first_ts.nanos(), key});
        f.first_ts = pkt.ts;
        by_first_.emplace(f.first_ts.nanos(), key);
      }
      by_last_.emplace(f.last_ts.nanos(), key);
    }
    count(it->second, pkt);
    return out;
  }

  // Emits every live flow ordered by (first_ts, key); the table is left empty.
  std::vector<RawFeatureRecord> finalize() {
    std::vector<std::pair<std::int64_t, FlowKey>> order;
    order.reserve(flows_.size());
    for (const auto& [k, f] : flows_) order.emplace_back(f.first_ts.nanos(), k);
    std::sort(order.begin(), order.end());
    std::vector<RawFeatureRecord> out;
    out.reserve(order.size());
    for (const auto& [_, k] : order) out.push_back(remove(k));
    by_last_.clear();
    by_first_.clear();
    return out;
  }

 private:
  using FlowMap = std::unordered_map<FlowKey, FlowRecord, FlowKeyHash>;

  FlowMap::iterator open(const FlowKey& key, const PacketRecord& pkt) {
    FlowRecord f;
    f.key = key;
    f.protocol = pkt.protocol;
    f.initiator_ip = pkt.src_ip;
    f.responder_ip = pkt.dst_ip;
    f.initiator_port = pkt.src_port;
    f.responder_port = pkt.dst_port;
    f.first_ts = pkt.ts;
    f.last_ts = pkt.ts;
    by_last_.emplace(pkt.ts.nanos(), key);
    by_first_.emplace(pkt.ts.nanos(), key);

    auto [hit, fresh] = hosts_.try_emplace(pkt.src_ip);
    HostContext& ctx = hit->second;
    if (fresh) ctx.first_seen_ts = pkt.ts;
    ctx.src_ports.insert(pkt.src_port);
    ctx.dst_ips.insert(pkt.dst_ip);
    ctx.dst_ports.insert(pkt.dst_port);
    ++ctx.flows_initiated;
    return flows_.emplace(key, f).first;
  }

  static void count(FlowRecord& f, const PacketRecord& pkt) {
    ++f.pkt_num;
    if (pkt.protocol != Protocol::tcp) return;
    if (pkt.has_flag(tcp_flag::syn)) ++f.syn_num;
    if (pkt.has_flag(tcp_flag::fin)) ++f.fin_num;
    if (pkt.has_flag(tcp_flag::rst)) ++f.rst_num;
  }

  RawFeatureRecord remove(const FlowKey& k) {
    auto it = flows_.find(k);
    const FlowRecord& f = it->second;
    by_last_.erase({f.last_ts.nanos(), k});
    by_first_.erase({f.first_ts.nanos(), k});
    RawFeatureRecord r = emit_record(f, hosts_.at(f.initiator_ip), cfg_.duration_floor_s);
    flows_.erase(it);
    return r;
  }

  FlowConfig cfg_;
  std::int64_t idle_ns_;
  std::int64_t active_ns_;
  FlowMap flows_;
  std::unordered_map<IpAddress, HostContext, IpAddressHash> hosts_;
  std::set<std::pair<std::int64_t, FlowKey>> by_last_;
  std::set<std::pair<std::int64_t, FlowKey>> by_first_;
};

struct ExtractResult {
  std::vector<RawFeatureRecord> records;
  IngestReport report;
};

// Runs every capture through one FlowTable, in the order given.
inline ExtractResult extract_flows(const std::vector<std::string>& pcap_paths, const FlowConfig& cfg = {}) {
  ExtractResult res;
  FlowTable table(cfg);
  for (const auto& path : pcap_paths) {
    auto stream = open_capture(path);
    while (auto pkt = stream.next()) {
      auto done = table.assign_packet(*pkt);
      res.records.insert(res.records.end(), done.begin(), done.end());
    }
    res.report += stream.report();
  }
  auto rest = table.finalize();
  res.records.insert(res.records.end(), rest.begin(), rest.end());
  return res;
}

// ---------------------------------------------------------------------------
// Flow CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view kFlowCsvHeader =
    "protocol,flow_dur,iat_mean,iat_std,fin_num,syn_num,rst_num,pkt_num,pkts_per_sec,num_s_port,num_d_ip,"
    "num_d_port,con_per_sec,src_ip,dst_ip,src_port,dst_port,first_ts";

struct FlowRow {
  RawFeatureRecord record;
  std::optional<TrafficClass> label;
};

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Writes the fixed header; a trailing label column is added when labels is non-empty.
inline void write_flow_csv(std::ostream& out, const std::vector<RawFeatureRecord>& records,
                           const std::vector<TrafficClass>& labels = {}) {
  const bool labelled = !labels.empty();
  out << kFlowCsvHeader << (labelled ? ",label\n" : "\n");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << to_string(r.protocol);
    for (double v : r.values) out << ',' << format_real(v);
    out << ',' << r.src_ip.to_string() << ',' << r.dst_ip.to_string() << ',' << r.src_port << ',' << r.dst_port
        << ',' << r.first_ts.to_string();
    if (labelled) out << ',' << to_string(labels.at(i));
    out << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<std::uint16_t> parse_port(const std::string& s) {
  if (s.empty() || s.size() > 5) return std::nullopt;
  unsigned v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + static_cast<unsigned>(c - '0');
  }
  if (v > 65535) return std::nullopt;
  return static_cast<std::uint16_t>(v);
}

}  // namespace detail

inline std::vector<FlowRow> read_flow_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw MalformedFlowCsv("empty flow CSV");
  while (!line.empty() && line.back() == '\r') line.pop_back();
  bool labelled = false;
  if (line == std::string(kFlowCsvHeader) + ",label") {
    labelled = true;
  } else if (line != kFlowCsvHeader) {
    throw MalformedFlowCsv("unexpected flow CSV header: " + line);
  }
  const std::size_t width = labelled ? 19 : 18;
  std::vector<FlowRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line);
    auto fail = [&](const std::string& why) {
      return MalformedFlowCsv("line " + std::to_string(lineno) + ": " + why);
    };
    if (cells.size() != width) throw fail("expected " + std::to_string(width) + " columns");
    FlowRow row;
    auto& r = row.record;
    auto proto = parse_protocol(cells[0]);
    if (!proto) throw fail("bad protocol '" + cells[0] + "'");
    r.protocol = *proto;
    for (std::size_t i = 0; i < kContinuousFeatures; ++i) {
      auto v = detail::parse_double(cells[1 + i]);
      if (!v || !std::isfinite(*v) || *v < 0) throw fail("bad value for " + std::string(kContinuousFeatureNames[i]));
      r.values[i] = *v;
    }
    auto src = IpAddress::parse(cells[13]);
    auto dst = IpAddress::parse(cells[14]);
    auto sport = detail::parse_port(cells[15]);
    auto dport = detail::parse_port(cells[16]);
    auto ts = Timestamp::parse(cells[17]);
    if (!src || !dst || !sport || !dport || !ts) throw fail("bad flow metadata");
    r.src_ip = *src;
    r.dst_ip = *dst;
    r.src_port = *sport;
    r.dst_port = *dport;
    r.first_ts = *ts;
    r.key = FlowKey::of(r.src_ip, r.src_port, r.dst_ip, r.dst_port, r.protocol);
    if (labelled) {
      row.label = parse_traffic_class(cells[18]);
      if (!row.label) throw fail("bad label '" + cells[18] + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace flowxpert
