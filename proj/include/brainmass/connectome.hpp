#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "brainmass/ingest.hpp"

namespace brainmass {

using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct NormalizedTimeseries {
  RealMatrix data;
  std::vector<std::size_t> zero_variance_rows;
};

/// Row-wise z-scoring (population variance). Constant rows come back as zeros
/// and are listed in `zero_variance_rows`.
NormalizedTimeseries normalize_timeseries(const RealMatrix& data);

/// A V×V Pearson correlation matrix. Symmetric, unit diagonal, entries in
/// [-1, 1]. Rows with zero variance correlate 0 with everything else.
struct Connectome {
  RealMatrix matrix;
  std::string source_subject;
  std::vector<std::size_t> dropped_timepoints;
  std::vector<std::size_t> zero_variance_rows;

  std::size_t rois() const { return static_cast<std::size_t>(matrix.rows()); }
};

Connectome pearson_fc(const RealMatrix& data, std::string source_subject = {});
inline Connectome pearson_fc(const ScanMatrix& data, std::string source_subject = {}) {
  return pearson_fc(RealMatrix(data.cast<double>()), std::move(source_subject));
}

/// Which timepoints survive one pseudo-FC draw.
struct DropPlan {
  double drop_rate = 0.0;
  std::size_t n_timepoints = 0;
  std::vector<std::size_t> kept_columns;  // strictly increasing
  std::uint64_t seed = 0;

  std::vector<std::size_t> dropped_columns() const;
};

inline constexpr double kDefaultDropRate = 0.15;
inline constexpr std::size_t kMinTimepoints = 3;

/// M = round(drop_rate·T), ties to even.
std::size_t drop_count(std::size_t n_timepoints, double drop_rate);

/// Drops M timepoints uniformly without replacement. Deterministic in
/// (T, drop_rate, seed).
DropPlan make_drop_plan(std::size_t n_timepoints, double drop_rate, std::uint64_t seed);

/// Pearson FC over the kept columns only.
Connectome pfc_augment(const RealMatrix& data, const DropPlan& plan, std::string source_subject = {});

void write_connectome_csv(const std::filesystem::path& path, const Connectome& fc);

}  // namespace brainmass
