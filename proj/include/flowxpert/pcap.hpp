#pragma once

#include <arpa/inet.h>

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "flowxpert/error.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

// ---------------------------------------------------------------------------
// Addresses and timestamps
// ---------------------------------------------------------------------------

enum class AddressFamily : std::uint8_t { ipv4 = 4, ipv6 = 6 };

// IPv4 addresses occupy the first four bytes; the rest stay zero so that the
// defaulted comparison is plain lexicographic byte order within a family.
struct IpAddress {
  AddressFamily family = AddressFamily::ipv4;
  std::array<std::uint8_t, 16> bytes{};

  static IpAddress v4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
    IpAddress ip;
    ip.bytes[0] = a;
    ip.bytes[1] = b;
    ip.bytes[2] = c;
    ip.bytes[3] = d;
    return ip;
  }

  static IpAddress v4(std::uint32_t host_order) {
    return v4(static_cast<std::uint8_t>(host_order >> 24), static_cast<std::uint8_t>(host_order >> 16),
              static_cast<std::uint8_t>(host_order >> 8), static_cast<std::uint8_t>(host_order));
  }

  static IpAddress v6(std::span<const std::uint8_t, 16> raw) {
    IpAddress ip;
    ip.family = AddressFamily::ipv6;
    std::memcpy(ip.bytes.data(), raw.data(), 16);
    return ip;
  }

  static std::optional<IpAddress> parse(const std::string& text) {
    IpAddress ip;
    if (inet_pton(AF_INET, text.c_str(), ip.bytes.data()) == 1) return ip;
    if (inet_pton(AF_INET6, text.c_str(), ip.bytes.data()) == 1) {
      ip.family = AddressFamily::ipv6;
      return ip;
    }
    return std::nullopt;
  }

  std::string to_string() const {
    char buf[INET6_ADDRSTRLEN] = {};
    inet_ntop(family == AddressFamily::ipv4 ? AF_INET : AF_INET6, bytes.data(), buf, sizeof(buf));
    return buf;
  }

  auto operator<=>(const IpAddress&) const = default;
};

// Capture timestamps are kept as integers so reconstruction is exact down to
// the capture resolution.
struct Timestamp {
  std::int64_t sec = 0;
  std::uint32_t nsec = 0;  // [0, 1e9)

  static Timestamp from_nanos(std::int64_t total) {
    std::int64_t s = total / 1'000'000'000;
    std::int64_t r = total % 1'000'000'000;
    if (r < 0) {
      r += 1'000'000'000;
      --s;
    }
    return {s, static_cast<std::uint32_t>(r)};
  }

  std::int64_t nanos() const { return sec * 1'000'000'000 + nsec; }
  double seconds() const { return static_cast<double>(sec) + static_cast<double>(nsec) / 1e9; }

  // Fixed "sec.nnnnnnnnn" form; lossless.
  std::string to_string() const {
    char buf[40];
    std::int64_t total = nanos();
    const char* sign = total < 0 ? "-" : "";
    std::uint64_t mag = total < 0 ? static_cast<std::uint64_t>(-total) : static_cast<std::uint64_t>(total);
    std::snprintf(buf, sizeof(buf), "%s%llu.%09llu", sign, static_cast<unsigned long long>(mag / 1'000'000'000ULL),
                  static_cast<unsigned long long>(mag % 1'000'000'000ULL));
    return buf;
  }

  static std::optional<Timestamp> parse(std::string_view text) {
    bool neg = false;
    if (!text.empty() && text.front() == '-') {
      neg = true;
      text.remove_prefix(1);
    }
    std::int64_t whole = 0;
    std::int64_t frac = 0;
    int frac_digits = 0;
    bool in_frac = false;
    bool any = false;
    for (char c : text) {
      if (c == '.' && !in_frac) {
        in_frac = true;
        continue;
      }
      if (c < '0' || c > '9') return std::nullopt;
      any = true;
      if (in_frac) {
        if (frac_digits < 9) {
          frac = frac * 10 + (c - '0');
          ++frac_digits;
        }
      } else {
        whole = whole * 10 + (c - '0');
      }
    }
    if (!any) return std::nullopt;
    while (frac_digits < 9) {
      frac *= 10;
      ++frac_digits;
    }
    std::int64_t total = whole * 1'000'000'000 + frac;
    return from_nanos(neg ? -total : total);
  }

  auto operator<=>(const Timestamp&) const = default;
};

namespace tcp_flag {
inline constexpr std::uint8_t fin = 0x01;
inline constexpr std::uint8_t syn = 0x02;
inline constexpr std::uint8_t rst = 0x04;
inline constexpr std::uint8_t psh = 0x08;
inline constexpr std::uint8_t ack = 0x10;
inline constexpr std::uint8_t urg = 0x20;
inline constexpr std::uint8_t ece = 0x40;
inline constexpr std::uint8_t cwr = 0x80;
}  // namespace tcp_flag

struct PacketRecord {
  Timestamp ts;
  IpAddress src_ip;
  IpAddress dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  Protocol protocol = Protocol::other;
  std::uint8_t tcp_flags = 0;  // empty for non-TCP
  std::uint32_t wire_len = 0;

  bool has_flag(std::uint8_t f) const { return (tcp_flags & f) != 0; }
  bool operator==(const PacketRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Classic pcap global header
// ---------------------------------------------------------------------------

namespace pcap_magic {
inline constexpr std::uint32_t micro = 0xa1b2c3d4;
inline constexpr std::uint32_t micro_swapped = 0xd4c3b2a1;
inline constexpr std::uint32_t nano = 0xa1b23c4d;
inline constexpr std::uint32_t nano_swapped = 0x4d3cb2a1;
}  // namespace pcap_magic

enum class ByteOrder : std::uint8_t { little, big };
enum class TimeResolution : std::uint8_t { microsecond, nanosecond };

inline constexpr std::uint32_t kLinkEthernet = 1;
inline constexpr std::uint32_t kLinkRawIp = 101;

struct CaptureHeader {
  std::uint32_t magic = pcap_magic::micro;  // as written in the file's own byte order
  ByteOrder endianness = ByteOrder::little;
  TimeResolution time_resolution = TimeResolution::microsecond;
  std::uint32_t link_type = kLinkEthernet;
  std::uint32_t snaplen = 65535;
};

enum class SkipReason : std::uint8_t { non_ip, ip_fragment, truncated, malformed_ip };

inline std::string_view to_string(SkipReason r) {
  switch (r) {
    case SkipReason::non_ip: return "non_ip";
    case SkipReason::ip_fragment: return "ip_fragment";
    case SkipReason::truncated: return "truncated";
    case SkipReason::malformed_ip: return "malformed_ip";
  }
  return "unknown";
}

struct IngestReport {
  std::size_t records_seen = 0;
  std::size_t packets_read = 0;
  std::map<SkipReason, std::size_t> skipped;

  std::size_t skipped_total() const {
    std::size_t n = 0;
    for (const auto& [_, c] : skipped) n += c;
    return n;
  }

  IngestReport& operator+=(const IngestReport& o) {
    records_seen += o.records_seen;
    packets_read += o.packets_read;
    for (const auto& [r, c] : o.skipped) skipped[r] += c;
    return *this;
  }
};

// ---------------------------------------------------------------------------
// Frame decoding
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint16_t be16(const std::uint8_t* p) { return static_cast<std::uint16_t>((p[0] << 8) | p[1]); }

inline std::uint32_t read_u32(const std::uint8_t* p, ByteOrder order) {
  if (order == ByteOrder::little) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline std::variant<PacketRecord, SkipReason> decode_transport(PacketRecord rec, std::uint8_t proto,
                                                               std::span<const std::uint8_t> l4) {
  if (proto == 6) {
    if (l4.size() < 20) return SkipReason::truncated;
    rec.protocol = Protocol::tcp;
    rec.src_port = be16(l4.data());
    rec.dst_port = be16(l4.data() + 2);
    rec.tcp_flags = l4[13];
  } else if (proto == 17) {
    if (l4.size() < 8) return SkipReason::truncated;
    rec.protocol = Protocol::udp;
    rec.src_port = be16(l4.data());
    rec.dst_port = be16(l4.data() + 2);
  } else {
    rec.protocol = Protocol::other;
  }
  return rec;
}

inline std::variant<PacketRecord, SkipReason> decode_ipv4(PacketRecord rec, std::span<const std::uint8_t> ip) {
  if (ip.size() < 20) return SkipReason::truncated;
  const std::size_t ihl = static_cast<std::size_t>(ip[0] & 0x0f) * 4;
  if (ihl < 20) return SkipReason::malformed_ip;
  if (ip.size() < ihl) return SkipReason::truncated;
  if ((be16(ip.data() + 6) & 0x1fff) != 0) return SkipReason::ip_fragment;
  rec.src_ip = IpAddress::v4(ip[12], ip[13], ip[14], ip[15]);
  rec.dst_ip = IpAddress::v4(ip[16], ip[17], ip[18], ip[19]);
  return decode_transport(rec, ip[9], ip.subspan(ihl));
}

inline std::variant<PacketRecord, SkipReason> decode_ipv6(PacketRecord rec, std::span<const std::uint8_t> ip) {
  if (ip.size() < 40) return SkipReason::truncated;
  rec.src_ip = IpAddress::v6(ip.subspan<8, 16>());
  rec.dst_ip = IpAddress::v6(ip.subspan<24, 16>());
  std::uint8_t next = ip[6];
  std::size_t off = 40;
  // Walk the extension header chain up to the transport header.
  for (;;) {
    if (next == 0 || next == 43 || next == 60) {
      if (ip.size() < off + 8) return SkipReason::truncated;
      const std::size_t len = (static_cast<std::size_t>(ip[off + 1]) + 1) * 8;
      next = ip[off];
      off += len;
    } else if (next == 44) {
      if (ip.size() < off + 8) return SkipReason::truncated;
      if ((be16(ip.data() + off + 2) >> 3) != 0) return SkipReason::ip_fragment;
      next = ip[off];
      off += 8;
    } else if (next == 51) {
      if (ip.size() < off + 8) return SkipReason::truncated;
      const std::size_t len = (static_cast<std::size_t>(ip[off + 1]) + 2) * 4;
      next = ip[off];
      off += len;
    } else {
      break;
    }
    if (off > ip.size()) return SkipReason::truncated;
  }
  return decode_transport(rec, next, ip.subspan(off));
}

inline std::variant<PacketRecord, SkipReason> decode_ip(PacketRecord rec, std::span<const std::uint8_t> ip) {
  if (ip.empty()) return SkipReason::truncated;
  switch (ip[0] >> 4) {
    case 4: return decode_ipv4(rec, ip);
    case 6: return decode_ipv6(rec, ip);
    default: return SkipReason::non_ip;
  }
}

}  // namespace detail

// Decodes one captured frame. ts and wire_len are left for the caller.
inline std::variant<PacketRecord, SkipReason> decode_frame(std::span<const std::uint8_t> frame,
                                                           std::uint32_t link_type) {
  PacketRecord rec;
  if (link_type == kLinkRawIp) return detail::decode_ip(rec, frame);

  if (frame.size() < 14) return SkipReason::truncated;
  std::size_t off = 12;
  std::uint16_t ethertype = detail::be16(frame.data() + off);
  off += 2;
  if (ethertype == 0x8100) {  // one 802.1Q tag
    if (frame.size() < off + 4) return SkipReason::truncated;
    ethertype = detail::be16(frame.data() + off + 2);
    off += 4;
  }
  if (ethertype == 0x0800) return detail::decode_ipv4(rec, frame.subspan(off));
  if (ethertype == 0x86dd) return detail::decode_ipv6(rec, frame.subspan(off));
  return SkipReason::non_ip;
}

// ---------------------------------------------------------------------------
// CaptureStream
// ---------------------------------------------------------------------------

// Sequential reader over a classic pcap file. Not shareable between threads.
class CaptureStream {
 public:
  static CaptureStream open(const std::string& path) {
    CaptureStream s;
    s.path_ = path;
    s.in_.open(path, std::ios::binary);
    if (!s.in_) throw IoError("cannot open capture: " + path);
    s.in_.seekg(0, std::ios::end);
    s.remaining_ = static_cast<std::uint64_t>(s.in_.tellg());
    s.in_.seekg(0, std::ios::beg);

    std::array<std::uint8_t, 24> gh{};
    if (s.remaining_ < gh.size()) throw TruncatedHeader(path + ": file shorter than the 24-byte global header");
    s.in_.read(reinterpret_cast<char*>(gh.data()), gh.size());
    s.remaining_ -= gh.size();

    const std::uint32_t raw = detail::read_u32(gh.data(), ByteOrder::big);
    CaptureHeader& h = s.header_;
    h.magic = raw;
    switch (raw) {
      case pcap_magic::micro:
        h.endianness = ByteOrder::big;
        h.time_resolution = TimeResolution::microsecond;
        break;
      case pcap_magic::micro_swapped:
        h.endianness = ByteOrder::little;
        h.time_resolution = TimeResolution::microsecond;
        break;
      case pcap_magic::nano:
        h.endianness = ByteOrder::big;
        h.time_resolution = TimeResolution::nanosecond;
        break;
      case pcap_magic::nano_swapped:
        h.endianness = ByteOrder::little;
        h.time_resolution = TimeResolution::nanosecond;
        break;
      default: {
        char buf[64];
        std::snprintf(buf, sizeof(buf), ": unknown magic 0x%08x", raw);
        throw UnknownMagic(path + buf);
      }
    }
    h.snaplen = detail::read_u32(gh.data() + 16, h.endianness);
    h.link_type = detail::read_u32(gh.data() + 20, h.endianness);
    if (h.link_type != kLinkEthernet && h.link_type != kLinkRawIp) {
      throw UnsupportedLinkType(path + ": link type " + std::to_string(h.link_type));
    }
    return s;
  }

  const CaptureHeader& header() const { return header_; }
  const IngestReport& report() const { return report_; }

  // Next decodable packet, or nullopt at end of file. Undecodable frames are
  // counted in report() and skipped.
  std::optional<PacketRecord> next() {
    for (;;) {
      if (remaining_ == 0) return std::nullopt;
      std::array<std::uint8_t, 16> rh{};
      if (remaining_ < rh.size()) {
        throw TruncatedRecord(path_ + ": partial record header after " + std::to_string(report_.packets_read) +
                                  " packets",
                              report_.packets_read);
      }
      in_.read(reinterpret_cast<char*>(rh.data()), rh.size());
      remaining_ -= rh.size();
      const auto order = header_.endianness;
      const std::uint32_t ts_sec = detail::read_u32(rh.data(), order);
      const std::uint32_t ts_frac = detail::read_u32(rh.data() + 4, order);
      const std::uint32_t incl_len = detail::read_u32(rh.data() + 8, order);
      const std::uint32_t orig_len = detail::read_u32(rh.data() + 12, order);
      if (incl_len > remaining_) {
        throw TruncatedRecord(path_ + ": record claims " + std::to_string(incl_len) + " bytes, " +
                                  std::to_string(remaining_) + " remain (after " +
                                  std::to_string(report_.packets_read) + " packets)",
                              report_.packets_read);
      }
      buf_.resize(incl_len);
      in_.read(reinterpret_cast<char*>(buf_.data()), incl_len);
      remaining_ -= incl_len;
      ++report_.records_seen;

      auto decoded = decode_frame(buf_, header_.link_type);
      if (auto* reason = std::get_if<SkipReason>(&decoded)) {
        ++report_.skipped[*reason];
        continue;
      }
      PacketRecord rec = std::get<PacketRecord>(decoded);
      const std::int64_t frac_ns =
          header_.time_resolution == TimeResolution::microsecond ? std::int64_t{ts_frac} * 1000 : ts_frac;
      rec.ts = Timestamp::from_nanos(std::int64_t{ts_sec} * 1'000'000'000 + frac_ns);
      rec.wire_len = orig_len;
      ++report_.packets_read;
      return rec;
    }
  }

 private:
  CaptureStream() = default;

  std::string path_;
  std::ifstream in_;
  std::uint64_t remaining_ = 0;
  CaptureHeader header_;
  IngestReport report_;
  std::vector<std::uint8_t> buf_;
};

inline CaptureStream open_capture(const std::string& path) { return CaptureStream::open(path); }

inline std::optional<PacketRecord> next_packet(CaptureStream& stream) { return stream.next(); }

// ---------------------------------------------------------------------------
// Writer (synthetic captures and fixtures)
// ---------------------------------------------------------------------------

// Emits little-endian classic pcap with Ethernet II framing. Frames are padded
// to the 60-byte Ethernet minimum; wire_len is recorded as orig_len.
class CaptureWriter {
 public:
  CaptureWriter(const std::string& path, TimeResolution res = TimeResolution::microsecond)
      : out_(path, std::ios::binary), res_(res) {
    if (!out_) throw IoError("cannot create capture: " + path);
    put32(res == TimeResolution::microsecond ? pcap_magic::micro : pcap_magic::nano);
    put16(2);
    put16(4);
    put32(0);
    put32(0);
    put32(65535);
    put32(kLinkEthernet);
  }

  void write(const PacketRecord& p) {
    frame_.clear();
    const bool v6 = p.src_ip.family == AddressFamily::ipv6;
    // Ethernet: fixed locally administered MACs.
    const std::uint8_t macs[12] = {0x02, 0, 0, 0, 0, 2, 0x02, 0, 0, 0, 0, 1};
    frame_.insert(frame_.end(), macs, macs + 12);
    push16(v6 ? 0x86dd : 0x0800);

    std::vector<std::uint8_t> l4;
    std::uint8_t proto = 1;  // ICMP for OTHER
    if (p.protocol == Protocol::tcp) {
      proto = 6;
      l4.assign(20, 0);
      l4[0] = static_cast<std::uint8_t>(p.src_port >> 8);
      l4[1] = static_cast<std::uint8_t>(p.src_port);
      l4[2] = static_cast<std::uint8_t>(p.dst_port >> 8);
      l4[3] = static_cast<std::uint8_t>(p.dst_port);
      l4[12] = 0x50;
      l4[13] = p.tcp_flags;
      l4[14] = 0xff;
      l4[15] = 0xff;
    } else if (p.protocol == Protocol::udp) {
      proto = 17;
      l4.assign(8, 0);
      l4[0] = static_cast<std::uint8_t>(p.src_port >> 8);
      l4[1] = static_cast<std::uint8_t>(p.src_port);
      l4[2] = static_cast<std::uint8_t>(p.dst_port >> 8);
      l4[3] = static_cast<std::uint8_t>(p.dst_port);
      l4[5] = 8;
    } else {
      proto = v6 ? 58 : 1;
      l4 = {8, 0, 0, 0, 0, 0, 0, 0};
    }

    if (!v6) {
      const std::uint16_t total = static_cast<std::uint16_t>(20 + l4.size());
      const std::uint8_t ip[20] = {0x45, 0, static_cast<std::uint8_t>(total >> 8), static_cast<std::uint8_t>(total),
                                   0, 0, 0x40, 0, 64, proto, 0, 0};
      frame_.insert(frame_.end(), ip, ip + 12);
      frame_.insert(frame_.end(), p.src_ip.bytes.begin(), p.src_ip.bytes.begin() + 4);
      frame_.insert(frame_.end(), p.dst_ip.bytes.begin(), p.dst_ip.bytes.begin() + 4);
    } else {
      const std::uint16_t payload = static_cast<std::uint16_t>(l4.size());
      const std::uint8_t ip[8] = {0x60, 0, 0, 0, static_cast<std::uint8_t>(payload >> 8),
                                  static_cast<std::uint8_t>(payload), proto, 64};
      frame_.insert(frame_.end(), ip, ip + 8);
      frame_.insert(frame_.end(), p.src_ip.bytes.begin(), p.src_ip.bytes.end());
      frame_.insert(frame_.end(), p.dst_ip.bytes.begin(), p.dst_ip.bytes.end());
    }
    frame_.insert(frame_.end(), l4.begin(), l4.end());
    if (frame_.size() < 60) frame_.resize(60, 0);

    const std::int64_t ns = p.ts.nanos();
    put32(static_cast<std::uint32_t>(ns / 1'000'000'000));
    const std::int64_t frac = ns % 1'000'000'000;
    put32(static_cast<std::uint32_t>(res_ == TimeResolution::microsecond ? frac / 1000 : frac));
    put32(static_cast<std::uint32_t>(frame_.size()));
    put32(std::max<std::uint32_t>(p.wire_len, static_cast<std::uint32_t>(frame_.size())));
    out_.write(reinterpret_cast<const char*>(frame_.data()), static_cast<std::streamsize>(frame_.size()));
  }

 private:
  void put16(std::uint16_t v) {
    const std::uint8_t b[2] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8)};
    out_.write(reinterpret_cast<const char*>(b), 2);
  }
  void put32(std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    out_.write(reinterpret_cast<const char*>(b), 4);
  }
  void push16(std::uint16_t v) {
    frame_.push_back(static_cast<std::uint8_t>(v >> 8));
    frame_.push_back(static_cast<std::uint8_t>(v));
  }

  std::ofstream out_;
  TimeResolution res_;
  std::vector<std::uint8_t> frame_;
};

}  // namespace flowxpert
