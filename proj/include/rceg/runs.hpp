#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace rceg {

struct RunArtifacts {
  nlohmann::json config;
  std::uint64_t seed = 0;
  /// Files copied into the run directory under their file names.
  std::vector<std::filesystem::path> files;
  /// (name, content) pairs written directly into the run directory.
  std::vector<std::pair<std::string, std::string>> documents;
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kPartialMarker = "PARTIAL";

/// "<UTC yyyymmddThhmmssZ>-seed<seed>"
std::string run_id(std::chrono::system_clock::time_point when, std::uint64_t seed);

/// Creates <root>/<run id>/ with config.json, the artifacts and a manifest of
/// sizes and checksums. A PARTIAL marker stays behind if writing fails.
std::filesystem::path persist_run(const std::filesystem::path& root, const RunArtifacts& artifacts,
                                  std::chrono::system_clock::time_point when =
                                      std::chrono::system_clock::now());

struct ManifestDigest {
  std::uintmax_t size = 0;
  std::uint64_t checksum = 0;
};

/// Size and FNV-1a recorded in manifests. Training logs (*_log.jsonl) are
/// digested with their wall_ms values zeroed.
ManifestDigest manifest_digest(const std::filesystem::path& path);

struct ManifestProblem {
  std::string file;
  std::string reason;  // "missing", "size", "checksum"
};

std::vector<ManifestProblem> verify_manifest(const std::filesystem::path& run_dir);

/// Path of a run inside `root`; rejects ids that would escape it.
std::filesystem::path resolve_run(const std::filesystem::path& root, std::string_view id);

}  // namespace rceg
