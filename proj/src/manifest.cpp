#include "medk/manifest.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "medk/common.hpp"

namespace medk {

std::string RunManifest::to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = input_digests;
    j["artifacts"] = artifact_digests;
    j["seed"] = seed;
    j["wall_ms"] = wall_ms;
    return j.dump(2) + "\n";
}

void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string file_digest(const std::string& path) {
    std::string bytes = read_file(path);
    return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace medk
