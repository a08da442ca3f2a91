#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "brainmass/connectome.hpp"
#include "brainmass/ingest.hpp"

namespace brainmass {

/// Additive change to the latent covariance between two communities. When
/// block_a == block_b the change applies to that block's off-diagonal entries.
struct BlockEffect {
  std::size_t block_a = 0;
  std::size_t block_b = 0;
  double delta = 0.0;
};

struct SynthSpec {
  std::size_t n_subjects = 200;
  std::size_t v_rois = 16;
  std::size_t t_points = 200;
  std::size_t n_classes = 2;
  std::vector<std::size_t> block_partition;  // community of each ROI; empty: 4 equal blocks
  double within_block_corr = 0.5;
  double between_block_corr = 0.0;
  std::vector<std::vector<BlockEffect>> class_effects;  // one list per class; missing classes unchanged
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
  std::size_t n_sites = 2;

  void validate() const;
  std::vector<std::size_t> partition() const;
};

/// Two classes, class 1 differs from class 0 by `effect` on the correlation
/// between blocks 0 and 1 and by -effect inside block 2.
SynthSpec default_two_class_spec(std::size_t n_subjects, std::size_t v_rois, std::size_t t_points, double effect,
                                 std::uint64_t seed);

/// Latent covariance of one class. Throws ValidationError if a correlation
/// leaves (-1, 1) or the matrix is not positive definite.
RealMatrix latent_covariance(const SynthSpec& spec, std::size_t label);

/// Closed-form correlation of the observed signal: off-diagonal entries of the
/// latent covariance shrunk by 1/(1 + sigma²).
RealMatrix population_fc(const SynthSpec& spec, std::size_t label);

std::string synth_subject_id(std::size_t index);
std::size_t synth_label(const SynthSpec& spec, std::size_t index);

TimeseriesScan generate_subject(const SynthSpec& spec, std::size_t index);
std::vector<TimeseriesScan> generate_cohort(const SynthSpec& spec);

/// Writes scans (CSV, or `.bts` when `binary`) and a manifest whose splits are
/// stratified by (site, label). Returns the manifest path.
std::filesystem::path write_cohort(const std::filesystem::path& dir, const std::vector<TimeseriesScan>& cohort,
                                   std::uint64_t seed, bool binary = false);

/// Direct two-pass Pearson correlation. Entries involving a zero-variance row
/// are NaN.
RealMatrix oracle_pearson(const RealMatrix& data);

}  // namespace brainmass
