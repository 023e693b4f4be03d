#pragma once

// Run manifests and the Markdown run report.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cdseg {

/// SHA-1 of "blob <size>\0<content>", as `git hash-object` computes it.
std::string git_blob_sha1(const std::string& content);

/// Blob hash of <root>/manifest.json.
std::string dataset_hash(const std::filesystem::path& root);

std::string utc_timestamp();

struct RunManifest {
  std::string command;
  nlohmann::json config;  // fully resolved
  std::string dataset_hash;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;  // empty while running
  nlohmann::json outputs = nlohmann::json::object();

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& dir) const;
};

struct Report {
  std::string markdown;
  std::vector<std::string> missing;  // artifact names not found
};

/// Artifact file names the report embeds.
inline constexpr const char* kSubsetGridFile = "subset_grid.md";
inline constexpr const char* kAblationFile = "ablation.md";
inline constexpr const char* kSweepFile = "sweep.md";
inline constexpr const char* kDisentanglementFile = "disentanglement.json";
inline constexpr const char* kHeatmapDir = "heatmaps";
inline constexpr const char* kReportFile = "report.md";

/// Collects artifacts from `run_dir` and its immediate subdirectories (sorted,
/// first match wins). Pure function of the files present.
Report render_report(const std::filesystem::path& run_dir);

}  // namespace cdseg
