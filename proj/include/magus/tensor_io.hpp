#pragma once

// On-disk containers.
//
// F32T tensor file (version 1):
//   bytes 0..3   magic "F32T"
//   byte  4      version (1)
//   u32 LE       rank
//   u32 LE x rank  dims
//   f32 LE x prod(dims)  row-major data
//
// MGCK checkpoint (version 1): a bundle of named F32T records plus a JSON
// configuration blob.
//   bytes 0..3   magic "MGCK"
//   byte  4      version (1)
//   u32 LE       length of UTF-8 JSON config, followed by the JSON bytes
//   u32 LE       tensor count
//   per tensor:  u32 LE name length, name bytes, one F32T record

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/types.h>

namespace magus {

inline constexpr std::uint8_t kF32TVersion = 1;
inline constexpr std::uint8_t kCheckpointVersion = 1;

std::string encode_f32t(const torch::Tensor& tensor);

/// Decodes one F32T record starting at `offset`; advances `offset` past it.
torch::Tensor decode_f32t(std::string_view bytes, std::size_t& offset);
torch::Tensor decode_f32t(std::string_view bytes);

void write_f32t(const std::filesystem::path& path, const torch::Tensor& tensor);
torch::Tensor read_f32t(const std::filesystem::path& path);

struct Checkpoint {
    std::string config_json;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor& at(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace magus
