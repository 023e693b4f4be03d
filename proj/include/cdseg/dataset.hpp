#pragma once

// On-disk phantom dataset container.
//
//   <root>/manifest.json            splits + generating config
//   <root>/cases/<name>/<MOD>.f32   little-endian float32, DHW order
//   <root>/cases/<name>/label.u8    uint8 labels, DHW order
//   <root>/cases/<name>/meta.json   shape, dtype, order, modalities, style records, seeds

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdseg/config.hpp"
#include "cdseg/phantom.hpp"

namespace cdseg {

/// Per-command run record; ignored when checking whether a directory is empty.
inline constexpr const char* kRunManifestFile = "run_manifest.json";

struct DatasetManifest {
  std::filesystem::path root;
  nlohmann::json config;
  GridShape grid_shape;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  const std::vector<std::string>& split(std::string_view name) const;
};

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

SplitCounts split_counts(int cases, const std::array<double, 3>& fractions);

std::string case_name(int index);

/// Builds case `index` of the dataset described by `config` in memory.
MultimodalSample generate_case(const PhantomConfig& config, int index);

/// Writes the dataset; refuses a non-empty `out` unless `overwrite`.
/// Parallel over cases, capped by CDSEG_NUM_WORKERS.
DatasetManifest generate_dataset(const PhantomConfig& config, const std::filesystem::path& out,
                                 bool overwrite);

DatasetManifest load_manifest(const std::filesystem::path& root);
MultimodalSample load_case(const DatasetManifest& manifest, const std::string& name);
std::vector<MultimodalSample> load_split(const DatasetManifest& manifest, std::string_view split,
                                         int limit = 0);

void write_case(const MultimodalSample& sample, const std::filesystem::path& dir,
                const nlohmann::json& seeds);

/// Worker count from CDSEG_NUM_WORKERS (default: hardware concurrency), at least 1.
int num_workers();

}  // namespace cdseg
