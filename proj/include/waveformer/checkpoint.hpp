#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "waveformer/errors.hpp"
#include "waveformer/model.hpp"
#include "waveformer/quant.hpp"

// Binary layout, all integers little-endian:
//   "WFCK" | u32 version | u32 count | entries... | u32 crc32(version..entries)
// entry: u32 name_len | name | u8 dtype | u32 rank | u32 dims[rank] | payload
// dtype 0 f32, 1 f64, 2 i8 (payload: f32 scale then int8 values), 3 UTF-8 text
// (rank 1, dim = byte count).
namespace waveformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI8 = 2, kText = 3 };

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>, QuantizedTensor, std::string> payload;

  DType dtype() const { return static_cast<DType>(payload.index()); }
};

using Checkpoint = std::vector<CheckpointEntry>;

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries);
// FormatError on bad magic, unknown version, unknown dtype or truncation;
// ChecksumError when the CRC does not match.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries);
Checkpoint load_checkpoint(const std::filesystem::path& path);

const CheckpointEntry* find_entry(const Checkpoint& ckpt, const std::string& name);

// Parameters in the model precision (or i8 when quantize is set and the tensor is quantizable),
// preceded by a "config" text entry.
template <typename T>
Checkpoint model_checkpoint(const Model<T>& model, const std::string& config_text, bool quantize = false);

// Copies every parameter from the checkpoint. ShapeMismatchError names the
// first tensor that is missing or has a different shape.
template <typename T>
void load_parameters(Model<T>& model, const Checkpoint& ckpt);

class ShapeMismatchError : public DimensionError {
 public:
  ShapeMismatchError(const std::string& tensor, const std::string& what) : DimensionError(what), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

}  // namespace waveformer
