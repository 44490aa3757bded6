#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rceg/model.hpp"

namespace rceg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// 64-bit FNV-1a; used for checkpoint trailers and run manifests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::uint64_t file_checksum(const std::filesystem::path& path);

/// Binary layout: "RCEG", u32 version, config block, vocabulary, named
/// tensor table (name, shape, row-major f64), u64 FNV-1a of all prior bytes.
std::string serialize_checkpoint(const ModelState& state);
ModelState deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace rceg
