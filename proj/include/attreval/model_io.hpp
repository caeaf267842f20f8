#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attreval/model.hpp"

namespace attreval {

// ATEV weight file: magic "ATEV", u32 LE version=1, u64 LE header length,
// UTF-8 JSON header (layer descriptors, shapes, taps, blob offsets), then
// concatenated little-endian f32 blobs in layer order. save->load->save is
// byte-identical.
std::vector<uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<uint8_t>& bytes);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// FNV-1a over the serialized bytes; used as the campaign cache key component
uint64_t model_hash(const Model& model);

} // namespace attreval
