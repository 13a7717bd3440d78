#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "srnet/kv.hpp"
#include "srnet/tensor.hpp"

namespace srnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary container layout (all integers and floats little-endian):
///
///   "SRNT" u32 version
///   u32 n_params, then per parameter:
///     u32 name_len, name bytes (UTF-8), u32 rank, u64 dims[rank], f32 data[numel]
///   u32 n_masks, then per mask:
///     u32 name_len, name bytes, u32 rank, u64 dims[rank],
///     packed bits[ceil(numel/8)] (LSB-first), u8 has_real,
///     if has_real: f32 threshold, f32 real[numel]
///   u32 meta_len, meta bytes (flat key = value text)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct MaskRecord {
  std::string owner;
  Tensor binary;              // entries 0 or 1
  std::optional<Tensor> real;
  float threshold = 0.0f;
};

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<MaskRecord> masks;
  KeyValues meta;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace srnet
