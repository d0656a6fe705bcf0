#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "consolidator/checkpoint.hpp"
#include "consolidator/consolidate.hpp"

namespace consolidator {

// CNSB (checkpoint) and CNSD (task delta) are documented byte by byte in
// docs/formats.md. All integers are little-endian fixed width.

inline constexpr std::uint32_t kDeltaVersion = 1;

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);

/// Delta weights and biases are written as 32-bit floats; a delta built from
/// a 64-bit model is narrowed on disk.
std::vector<std::byte> encode_delta(const TaskDelta& delta);
TaskDelta decode_delta(std::span<const std::byte> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_delta(const TaskDelta& delta, const std::filesystem::path& path);
TaskDelta load_delta(const std::filesystem::path& path);

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace consolidator
