#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

// Byte-level pcap assembly independent of the library's writer.
namespace fxtest {

using Bytes = std::vector<std::uint8_t>;

inline void le32(Bytes& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void be32(Bytes& b, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void le16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void be16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}
inline void append(Bytes& b, std::initializer_list<int> xs) {
  for (int x : xs) b.push_back(static_cast<std::uint8_t>(x));
}
inline void append(Bytes& b, const Bytes& xs) { b.insert(b.end(), xs.begin(), xs.end()); }

struct PcapBuilder {
  Bytes bytes;
  bool big_endian = false;

  explicit PcapBuilder(std::uint32_t magic = 0xa1b2c3d4, bool big = false, std::uint32_t link = 1) : big_endian(big) {
    u32(magic);
    u16(2);
    u16(4);
    u32(0);
    u32(0);
    u32(65535);
    u32(link);
  }
  void u32(std::uint32_t v) { big_endian ? be32(bytes, v) : le32(bytes, v); }
  void u16(std::uint16_t v) { big_endian ? be16(bytes, v) : le16(bytes, v); }

  void record(std::uint32_t sec, std::uint32_t frac, const Bytes& frame, std::uint32_t orig_len = 0) {
    u32(sec);
    u32(frac);
    u32(static_cast<std::uint32_t>(frame.size()));
    u32(orig_len ? orig_len : static_cast<std::uint32_t>(frame.size()));
    append(bytes, frame);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
};

inline Bytes ethernet(std::uint16_t ethertype, const Bytes& payload, bool vlan = false) {
  Bytes f = {0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xaa, 0xbb};
  if (vlan) append(f, {0x81, 0x00, 0x00, 0x64});
  be16(f, ethertype);
  append(f, payload);
  while (f.size() < 60) f.push_back(0);
  return f;
}

inline Bytes ipv4(std::uint8_t proto, std::initializer_list<int> src, std::initializer_list<int> dst, const Bytes& l4,
                  std::uint16_t frag = 0) {
  Bytes ip = {0x45, 0x00};
  be16(ip, static_cast<std::uint16_t>(20 + l4.size()));
  append(ip, {0x12, 0x34});
  be16(ip, frag);
  append(ip, {64, proto, 0, 0});
  append(ip, src);
  append(ip, dst);
  append(ip, l4);
  return ip;
}

inline Bytes ipv6(std::uint8_t next, const Bytes& src16, const Bytes& dst16, const Bytes& payload) {
  Bytes ip = {0x60, 0, 0, 0};
  be16(ip, static_cast<std::uint16_t>(payload.size()));
  append(ip, {next, 64});
  append(ip, src16);
  append(ip, dst16);
  append(ip, payload);
  return ip;
}

inline Bytes tcp(std::uint16_t sport, std::uint16_t dport, std::uint8_t flags) {
  Bytes t;
  be16(t, sport);
  be16(t, dport);
  append(t, {0, 0, 0, 1, 0, 0, 0, 0, 0x50, flags, 0xff, 0xff, 0, 0, 0, 0});
  return t;
}

inline Bytes udp(std::uint16_t sport, std::uint16_t dport) {
  Bytes u;
  be16(u, sport);
  be16(u, dport);
  append(u, {0, 8, 0, 0});
  return u;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("flowxpert_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fxtest
