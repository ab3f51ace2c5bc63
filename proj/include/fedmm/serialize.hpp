#pragma once

#include <cstdint>
#include <vector>

#include "fedmm/params.hpp"

namespace fedmm {

// Parameter wire format, bit-exact:
//   "FMM1" | u32le header length | UTF-8 JSON header | payload
// header: {"version":1,
//          "tensors":[{"name","shape","dtype":"f32","offset","len"}...],
//          "crc32": <crc of payload>}
// payload: per tensor, row-major little-endian f32 at its stated byte offset.
std::vector<uint8_t> serialize_params(const ParameterSet<float>& params);

// Round-trip inverse; throws CorruptHeader / UnsupportedVersion /
// LengthMismatch / ChecksumMismatch on malformed input.
ParameterSet<float> deserialize_params(const std::vector<uint8_t>& bytes);

}  // namespace fedmm
