#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace brainmass {

/// V rows (ROIs) by T columns (timepoints), stored as 32-bit reals so that the
/// CSV and `.bts` encodings of a scan load to bitwise-identical matrices.
using ScanMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Split { train, val, test, pretrain_only };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

inline constexpr int kUnlabeled = -1;

struct TimeseriesScan {
  std::string subject_id;
  std::string site;
  int label = kUnlabeled;
  Split split = Split::pretrain_only;
  ScanMatrix data;
};

struct ManifestEntry {
  std::string subject_id;
  std::filesystem::path scan_path;  // as written in the manifest
  std::string site;
  int label = kUnlabeled;
  Split split = Split::pretrain_only;
};

struct CohortManifest {
  std::vector<ManifestEntry> entries;
  std::size_t atlas_rois = 0;
  std::filesystem::path base_dir;  // relative scan paths resolve against this

  std::filesystem::path resolve(const ManifestEntry& entry) const;
};

inline constexpr std::string_view kManifestHeader = "subject_id\tscan_path\tsite\tlabel\tsplit";

/// Parses a TSV manifest, loads every scan to establish V, and checks that all
/// scans agree on it.
CohortManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const CohortManifest& manifest);

/// Reads a headerless CSV or a `.bts` file (chosen by extension).
ScanMatrix load_scan(const std::filesystem::path& path);
void write_scan(const std::filesystem::path& path, const ScanMatrix& data);

/// Loads every scan in manifest order.
std::vector<TimeseriesScan> load_cohort(const CohortManifest& manifest);

}  // namespace brainmass
