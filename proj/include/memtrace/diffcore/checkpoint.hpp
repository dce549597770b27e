#pragma once

#include <cstdint>
#include <string>

#include "memtrace/diffcore/network.hpp"

namespace memtrace::diffcore {

// Checkpoint file layout: magic "MTCK", version u16, then per array:
// name length u16, name bytes, rank u8, dims u32 each, float32 LE data.
// All integers little-endian. Arrays are read until EOF.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace memtrace::diffcore
