#pragma once

#include <map>
#include <string>

namespace medk {

// Reproducibility record written next to every CLI artifact: the command,
// resolved configuration, input/output digests, seeds and wall time.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> input_digests;
    std::map<std::string, std::string> artifact_digests;
    uint64_t seed = 0;
    double wall_ms = 0.0;

    std::string to_json() const;
};

// Writes through a temp file + rename so failures leave no partial artifact.
void write_file_atomic(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);  // DataError if missing
std::string file_digest(const std::string& path);

}  // namespace medk
