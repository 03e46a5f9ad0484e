// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"

namespace xtra {

inline constexpr std::string_view kToolVersion = "0.1.0";

// 64-bit FNV-1a, used for config hashes and artifact checksums.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Stamped into every artifact the tools write.
struct Provenance {
  std::string tool_version{kToolVersion};
  std::string config_hash = hex64(0);
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool_version"] = tool_version;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    return j;
  }

  static Provenance from_json(const nlohmann::json& j) {
    Provenance p;
    p.tool_version = j.value("tool_version", std::string{});
    p.config_hash = j.value("config_hash", hex64(0));
    p.seed = j.value("seed", std::uint64_t{0});
    return p;
  }

  // One-line form used as the first line of CSV outputs.
  std::string csv_comment() const {
    return "# xtra " + tool_version + " config_hash=" + config_hash + " seed=" + std::to_string(seed);
  }

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

}  // namespace xtra
