#pragma once

// Binary checkpoint container.
//
//   "PFSEGCKP" | u32 version | u32 #meta | (str key, str value)*
//   | u32 #entries | (str name, u8 dtype, u32 rank, i64 dims[rank], u64 nbytes, bytes)*
//   | u32 crc32 of everything before it
// Strings are u32 length + bytes; all integers and floats little-endian.
// Metadata holds the model config ("config"), "mode" (train|deploy),
// "lora" (separate|merged) and a JSON "manifest" listing frozen and learnable
// names.

#include <map>
#include <string>
#include <vector>

#include "pfseg/config.hpp"

namespace pfseg {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<unsigned char> bytes;

  std::vector<double> values() const;
};

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

std::vector<unsigned char> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<unsigned char>& bytes, const std::string& source = "checkpoint");

/// Writes through a temporary file, so a failed save leaves no partial output.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint to_checkpoint(const SegModel<T>& model);

/// Rebuilds the model from its stored config and copies every tensor in.
/// Names must match exactly.
template <typename T>
SegModel<T> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace pfseg
