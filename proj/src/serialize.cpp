#include "fedmm/serialize.hpp"

#include <zlib.h>

#include <cstring>
#include <json.hpp>
#include <string>

#include "fedmm/errors.hpp"

namespace fedmm {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'F', 'M', 'M', '1'};

void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void put_f32le(std::vector<uint8_t>& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32le(out, bits);
}

float get_f32le(const uint8_t* p) {
  uint32_t bits = get_u32le(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

uint32_t payload_crc(const std::vector<uint8_t>& payload) {
  return static_cast<uint32_t>(
      ::crc32(0L, payload.empty() ? Z_NULL : payload.data(),
              static_cast<uInt>(payload.size())));
}

}  // namespace

std::vector<uint8_t> serialize_params(const ParameterSet<float>& params) {
  std::vector<uint8_t> payload;
  json tensors = json::array();
  for (const auto& e : params.entries()) {
    size_t offset = payload.size();
    for (float v : e.tensor.data()) put_f32le(payload, v);
    json t;
    t["name"] = e.name;
    t["shape"] = e.tensor.shape();
    t["dtype"] = "f32";
    t["offset"] = offset;
    t["len"] = payload.size() - offset;
    tensors.push_back(std::move(t));
  }
  json header;
  header["version"] = 1;
  header["tensors"] = std::move(tensors);
  header["crc32"] = payload_crc(payload);
  std::string hs = header.dump();

  std::vector<uint8_t> out;
  out.reserve(4 + 4 + hs.size() + payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32le(out, static_cast<uint32_t>(hs.size()));
  out.insert(out.end(), hs.begin(), hs.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

ParameterSet<float> deserialize_params(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CorruptHeader("missing FMM1 magic");
  uint32_t hlen = get_u32le(bytes.data() + 4);
  if (8 + static_cast<size_t>(hlen) > bytes.size())
    throw CorruptHeader("header length " + std::to_string(hlen) + " exceeds message size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const json::exception& e) {
    throw CorruptHeader(std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.contains("version") || !header["version"].is_number_integer())
    throw CorruptHeader("header missing version");
  if (header["version"].get<int>() != 1)
    throw UnsupportedVersion("version " + std::to_string(header["version"].get<int>()));
  if (!header.contains("tensors") || !header["tensors"].is_array() || !header.contains("crc32"))
    throw CorruptHeader("header missing tensors/crc32");

  std::vector<uint8_t> payload(bytes.begin() + 8 + hlen, bytes.end());
  if (payload_crc(payload) != header["crc32"].get<uint32_t>())
    throw ChecksumMismatch("payload crc32 does not match header");

  ParameterSet<float> out;
  for (const auto& t : header["tensors"]) {
    std::string name = t.at("name").get<std::string>();
    Shape shape = t.at("shape").get<Shape>();
    if (t.at("dtype").get<std::string>() != "f32")
      throw UnsupportedVersion("dtype " + t.at("dtype").get<std::string>());
    size_t offset = t.at("offset").get<size_t>();
    size_t len = t.at("len").get<size_t>();
    int64_t count = shape_numel(shape);
    if (len != static_cast<size_t>(count) * 4)
      throw LengthMismatch("tensor " + name + ": len " + std::to_string(len) +
                           " vs shape " + shape_str(shape));
    if (offset + len > payload.size())
      throw LengthMismatch("tensor " + name + " extends past payload end");
    std::vector<float> data(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i)
      data[static_cast<size_t>(i)] = get_f32le(payload.data() + offset + 4 * i);
    bool trainable = name.find(".running_") == std::string::npos;
    out.add(name, Tensor<float>(std::move(shape), std::move(data), trainable), trainable);
  }
  return out;
}

}  // namespace fedmm
