#include "rceg/runs.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <regex>
#include <sstream>

#include "rceg/checkpoint.hpp"
#include "rceg/errors.hpp"

namespace rceg {

namespace fs = std::filesystem;

std::string run_id(std::chrono::system_clock::time_point when, std::uint64_t seed) {
  const std::time_t t = std::chrono::system_clock::to_time_t(when);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return std::string(buf) + "-seed" + std::to_string(seed);
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::kIo, "short write for " + path.string());
}

bool is_training_log(const fs::path& path) {
  const auto name = path.filename().string();
  return name.size() > 10 && name.ends_with("_log.jsonl");
}

}  // namespace

ManifestDigest manifest_digest(const fs::path& path) {
  auto bytes = read_file(path);
  if (is_training_log(path)) {
    static const std::regex wall(R"("wall_ms":[-+0-9.eE]+)");
    bytes = std::regex_replace(bytes, wall, R"("wall_ms":0)");
  }
  return {bytes.size(), fnv1a64(bytes)};
}

fs::path persist_run(const fs::path& root, const RunArtifacts& artifacts,
                     std::chrono::system_clock::time_point when) {
  const auto base_id = run_id(when, artifacts.seed);
  fs::path dir = root / base_id;
  for (int k = 1; fs::exists(dir); ++k) dir = root / (base_id + "-" + std::to_string(k));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create run directory " + dir.string() + ": " + ec.message());

  const auto marker = dir / kPartialMarker;
  try {
    write_file(marker, "run in progress\n");
    std::vector<std::string> names{"config.json"};
    write_file(dir / "config.json", artifacts.config.dump(2) + "\n");
    for (const auto& f : artifacts.files) {
      const auto name = f.filename().string();
      fs::copy_file(f, dir / name, fs::copy_options::overwrite_existing);
      names.push_back(name);
    }
    for (const auto& [name, content] : artifacts.documents) {
      write_file(dir / name, content);
      names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());

    nlohmann::json manifest;
    manifest["run_id"] = dir.filename().string();
    manifest["seed"] = artifacts.seed;
    manifest["created_at"] = base_id.substr(0, base_id.find('-'));
    auto entries = nlohmann::json::array();
    for (const auto& name : names) {
      const auto p = dir / name;
      const auto d = manifest_digest(p);
      entries.push_back({{"path", name}, {"size", d.size}, {"checksum", hex64(d.checksum)}});
    }
    manifest["files"] = std::move(entries);
    write_file(dir / kManifestName, manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::ofstream(marker, std::ios::trunc) << "run aborted: " << e.what() << "\n";
    throw Error(ErrorCode::kIo, "run " + dir.string() + " left partial: " + e.what());
  }
  fs::remove(marker);
  return dir;
}

std::vector<ManifestProblem> verify_manifest(const fs::path& run_dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(run_dir / kManifestName));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruption, std::string("manifest unreadable: ") + e.what());
  }
  std::vector<ManifestProblem> problems;
  if (fs::exists(run_dir / kPartialMarker)) problems.push_back({kPartialMarker, "partial"});
  for (const auto& entry : manifest.at("files")) {
    const auto name = entry.at("path").get<std::string>();
    const auto p = run_dir / name;
    if (!fs::exists(p)) {
      problems.push_back({name, "missing"});
      continue;
    }
    const auto d = manifest_digest(p);
    if (d.size != entry.at("size").get<std::uintmax_t>()) {
      problems.push_back({name, "size"});
    } else if (hex64(d.checksum) != entry.at("checksum").get<std::string>()) {
      problems.push_back({name, "checksum"});
    }
  }
  return problems;
}

fs::path resolve_run(const fs::path& root, std::string_view id) {
  static const std::regex ok(R"([A-Za-z0-9][A-Za-z0-9_.\-]*)");
  const std::string s(id);
  if (!std::regex_match(s, ok) || s.find("..") != std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "invalid run id");
  }
  return root / s;
}

}  // namespace rceg
