#pragma once

// "MM2G" checkpoint format (all integers little-endian):
//
//   magic "MM2G" | u32 version
//   u32 modality count, then per modality:
//     u32 name length | name | u8 kind (0 image, 1 text)
//     u32 channels | u32 height | u32 width | u32 context_len | u32 embed_dim
//   u32 parameter count, then per parameter:
//     u32 name length | name | u8 dtype (1 = f32) | u8 ndim | u32 dims[ndim]
//     u64 byte offset into the payload
//   u64 payload length | payload (f32 values)
//   u32 CRC32 of every preceding byte

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mflow/modality.hpp"
#include "mflow/system.hpp"

namespace mflow {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::vector<ModalitySpec> modalities;
  std::vector<CheckpointParam> params;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
// FormatError for bad magic, version or structure, IntegrityError for a CRC
// mismatch.
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

CheckpointData snapshot(const System& system);
// Copies values into the system's parameters. The registry and the parameter
// table must match the system exactly (FormatError otherwise).
void restore(System& system, const CheckpointData& data);

void save_checkpoint(const System& system, const std::string& path);
void load_checkpoint(System& system, const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace mflow
