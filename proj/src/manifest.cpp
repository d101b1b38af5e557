#include "dialogen/manifest.hpp"

#include <fstream>

#include "dialogen/error.hpp"

namespace dialogen::manifest {

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for digest: " + path);
  std::uint64_t hash = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      hash ^= static_cast<unsigned char>(buf[i]);
      hash *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx",
                static_cast<unsigned long long>(hash));
  return out;
}

void write_manifest(const std::string& subcommand,
                    const nlohmann::ordered_json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  if (outputs.empty()) return;
  nlohmann::ordered_json doc;
  doc["tool"] = "dialogen";
  doc["version"] = kToolVersion;
  doc["subcommand"] = subcommand;
  doc["config"] = config;
  doc["inputs"] = nlohmann::ordered_json::object();
  for (const auto& input : inputs) doc["inputs"][input] = file_digest(input);
  doc["outputs"] = outputs;

  const std::string path = outputs.front() + ".manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << doc.dump(2) << '\n';
}

}  // namespace dialogen::manifest
