#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace flowxpert {

enum class Protocol : std::uint8_t { tcp = 0, udp = 1, other = 2 };

inline constexpr std::array<std::string_view, 3> kProtocolVocabulary = {"TCP", "UDP", "OTHER"};

inline std::string_view to_string(Protocol p) {
  return kProtocolVocabulary[static_cast<std::size_t>(p)];
}

inline std::optional<Protocol> parse_protocol(std::string_view s) {
  for (std::size_t i = 0; i < kProtocolVocabulary.size(); ++i) {
    const auto& name = kProtocolVocabulary[i];
    if (s.size() != name.size()) continue;
    bool same = true;
    for (std::size_t c = 0; c < s.size(); ++c) {
      char ch = s[c];
      if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
      if (ch != name[c]) { same = false; break; }
    }
    if (same) return static_cast<Protocol>(i);
  }
  return std::nullopt;
}

// Detector output classes; the numeric value is the logit index.
enum class TrafficClass : std::uint8_t { benign = 0, malicious = 1 };

inline std::string_view to_string(TrafficClass c) {
  return c == TrafficClass::benign ? "benign" : "malicious";
}

inline std::optional<TrafficClass> parse_traffic_class(std::string_view s) {
  if (s == "benign" || s == "0") return TrafficClass::benign;
  if (s == "malicious" || s == "1") return TrafficClass::malicious;
  return std::nullopt;
}

// B = 0 for two samples in the same cluster, 1 otherwise.
enum class PairLabel : std::uint8_t { same = 0, different = 1 };

}  // namespace flowxpert
