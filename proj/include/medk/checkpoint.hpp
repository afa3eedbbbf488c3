#pragma once

#include <string>

#include "medk/model.hpp"

namespace medk {

// Versioned checkpoint container. Header: magic "MEDK", u32 format version,
// the ModelConfig fields as little-endian int64, then every tensor in visit
// order as (u32 name length, name, u64 rows, u64 cols, row-major f64 data).
// Round-trips byte-exactly.

std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace medk
