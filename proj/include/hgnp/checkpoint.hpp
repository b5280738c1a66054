#pragma once

#include <string>

#include "hgnp/network.hpp"

namespace hgnp {

// Binary model file: "HGNP" magic, u16 format version, layer spec table,
// packed mask bits, then weights and biases as little-endian 64-bit floats
// in layer order. Writing the same network twice is byte-identical.

void save_checkpoint(const MaskedNetwork& net, const std::string& path);
MaskedNetwork load_checkpoint(const std::string& path);

}  // namespace hgnp
