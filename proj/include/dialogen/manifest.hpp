#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace dialogen::manifest {

constexpr const char* kToolVersion = "0.1.0";

// FNV-1a over the file bytes, rendered as 16 hex digits.
std::string file_digest(const std::string& path);

// Writes <first_output>.manifest.json recording the tool version, the
// subcommand, every effective config value, and input digests. No
// timestamps, so reruns with identical inputs are byte-identical.
void write_manifest(const std::string& subcommand,
                    const nlohmann::ordered_json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs);

}  // namespace dialogen::manifest
