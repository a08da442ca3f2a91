#include "brainmass/synth.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include <Eigen/Cholesky>

#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"
#include "brainmass/probe.hpp"

namespace brainmass {

void SynthSpec::validate() const {
  if (n_subjects == 0) throw ParameterError("n_subjects must be positive");
  if (v_rois < 2) throw ParameterError("v_rois must be >= 2");
  if (t_points < 3) throw ParameterError("t_points must be >= 3");
  if (n_classes == 0) throw ParameterError("n_classes must be positive");
  if (n_sites == 0) throw ParameterError("n_sites must be positive");
  if (!(within_block_corr > 0.0 && within_block_corr < 1.0))
    throw ValidationError("within_block_corr must lie in (0, 1)");
  if (!(between_block_corr > -1.0 && between_block_corr < 1.0))
    throw ValidationError("between_block_corr must lie in (-1, 1)");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ParameterError("noise_sigma must be >= 0");
  if (!block_partition.empty() && block_partition.size() != v_rois)
    throw ValidationError("block_partition has " + std::to_string(block_partition.size()) + " entries, expected " +
                          std::to_string(v_rois));
  if (class_effects.size() > n_classes) throw ValidationError("more class effects than classes");
}

std::vector<std::size_t> SynthSpec::partition() const {
  if (!block_partition.empty()) return block_partition;
  const std::size_t blocks = std::min<std::size_t>(4, v_rois);
  std::vector<std::size_t> p(v_rois);
  for (std::size_t i = 0; i < v_rois; ++i) p[i] = i * blocks / v_rois;
  return p;
}

SynthSpec default_two_class_spec(std::size_t n_subjects, std::size_t v_rois, std::size_t t_points, double effect,
                                 std::uint64_t seed) {
  SynthSpec spec;
  spec.n_subjects = n_subjects;
  spec.v_rois = v_rois;
  spec.t_points = t_points;
  spec.n_classes = 2;
  spec.seed = seed;
  spec.class_effects = {{}, {BlockEffect{0, 1, effect}, BlockEffect{2, 2, -effect}}};
  return spec;
}

RealMatrix latent_covariance(const SynthSpec& spec, std::size_t label) {
  spec.validate();
  if (label >= spec.n_classes) throw ParameterError("label " + std::to_string(label) + " out of range");
  const auto part = spec.partition();
  const auto v = static_cast<Eigen::Index>(spec.v_rois);
  RealMatrix sigma(v, v);
  for (Eigen::Index i = 0; i < v; ++i)
    for (Eigen::Index j = 0; j < v; ++j)
      sigma(i, j) = i == j ? 1.0 : (part[i] == part[j] ? spec.within_block_corr : spec.between_block_corr);
  if (label < spec.class_effects.size()) {
    for (const auto& e : spec.class_effects[label]) {
      for (Eigen::Index i = 0; i < v; ++i)
        for (Eigen::Index j = 0; j < v; ++j) {
          if (i == j) continue;
          const bool hit = (part[i] == e.block_a && part[j] == e.block_b) || (part[i] == e.block_b && part[j] == e.block_a);
          if (hit) sigma(i, j) += e.delta;
        }
    }
  }
  for (Eigen::Index i = 0; i < v; ++i)
    for (Eigen::Index j = 0; j < v; ++j)
      if (i != j && !(sigma(i, j) > -1.0 && sigma(i, j) < 1.0))
        throw ValidationError("class " + std::to_string(label) + " correlation (" + std::to_string(i) + ", " +
                              std::to_string(j) + ") = " + std::to_string(sigma(i, j)) + " leaves (-1, 1)");
  Eigen::LLT<RealMatrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw ValidationError("class " + std::to_string(label) + " latent covariance is not positive definite");
  return sigma;
}

RealMatrix population_fc(const SynthSpec& spec, std::size_t label) {
  RealMatrix fc = latent_covariance(spec, label) / (1.0 + spec.noise_sigma * spec.noise_sigma);
  fc.diagonal().setOnes();
  return fc;
}

std::string synth_subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04zu", index);
  return buf;
}

std::size_t synth_label(const SynthSpec& spec, std::size_t index) { return index % spec.n_classes; }

namespace {

TimeseriesScan sample_subject(const SynthSpec& spec, std::size_t index, const RealMatrix& chol) {
  TimeseriesScan scan;
  scan.subject_id = synth_subject_id(index);
  scan.label = static_cast<int>(synth_label(spec, index));
  scan.site = "site" + std::to_string((index / spec.n_classes) % spec.n_sites);
  std::mt19937_64 rng(derive_seed(spec.seed, scan.subject_id, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto v = static_cast<Eigen::Index>(spec.v_rois);
  const auto t = static_cast<Eigen::Index>(spec.t_points);
  RealMatrix z(v, t), eps(v, t);
  for (Eigen::Index c = 0; c < t; ++c)
    for (Eigen::Index r = 0; r < v; ++r) z(r, c) = normal(rng);
  for (Eigen::Index c = 0; c < t; ++c)
    for (Eigen::Index r = 0; r < v; ++r) eps(r, c) = normal(rng);
  const RealMatrix x = chol * z + spec.noise_sigma * eps;
  scan.data = x.cast<float>();
  return scan;
}

std::vector<RealMatrix> class_factors(const SynthSpec& spec) {
  std::vector<RealMatrix> out;
  for (std::size_t k = 0; k < spec.n_classes; ++k) out.push_back(latent_covariance(spec, k).llt().matrixL());
  return out;
}

}  // namespace

TimeseriesScan generate_subject(const SynthSpec& spec, std::size_t index) {
  const RealMatrix l = latent_covariance(spec, synth_label(spec, index)).llt().matrixL();
  return sample_subject(spec, index, l);
}

std::vector<TimeseriesScan> generate_cohort(const SynthSpec& spec) {
  const auto factors = class_factors(spec);
  std::vector<TimeseriesScan> cohort;
  cohort.reserve(spec.n_subjects);
  for (std::size_t i = 0; i < spec.n_subjects; ++i)
    cohort.push_back(sample_subject(spec, i, factors[synth_label(spec, i)]));
  return cohort;
}

std::filesystem::path write_cohort(const std::filesystem::path& dir, const std::vector<TimeseriesScan>& cohort,
                                   std::uint64_t seed, bool binary) {
  if (cohort.empty()) throw ParameterError("empty cohort");
  std::error_code ec;
  std::filesystem::create_directories(dir / "scans", ec);
  if (ec) throw IoError("cannot create '" + (dir / "scans").string() + "': " + ec.message());

  std::vector<EmbeddingRecord> keys;
  for (const auto& s : cohort) keys.push_back(EmbeddingRecord{s.subject_id, {}, s.label, s.site, Split::train});
  const auto splits = stratified_split(keys, SplitFractions{}, seed);

  CohortManifest manifest;
  manifest.atlas_rois = static_cast<std::size_t>(cohort.front().data.rows());
  manifest.base_dir = dir;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& s = cohort[i];
    const std::filesystem::path rel = std::filesystem::path("scans") / (s.subject_id + (binary ? ".bts" : ".csv"));
    write_scan(dir / rel, s.data);
    manifest.entries.push_back(ManifestEntry{s.subject_id, rel, s.site, s.label, splits[i]});
  }
  const auto path = dir / "manifest.tsv";
  write_manifest(path, manifest);
  return path;
}

RealMatrix oracle_pearson(const RealMatrix& data) {
  const Eigen::Index v = data.rows();
  const Eigen::Index t = data.cols();
  if (t < 3) throw ValidationError("oracle_pearson needs T >= 3");
  std::vector<double> mean(static_cast<std::size_t>(v), 0.0);
  for (Eigen::Index i = 0; i < v; ++i) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) s += data(i, k);
    mean[static_cast<std::size_t>(i)] = s / static_cast<double>(t);
  }
  RealMatrix out(v, v);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index i = 0; i < v; ++i) {
    for (Eigen::Index j = 0; j < v; ++j) {
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      const double mi = mean[static_cast<std::size_t>(i)];
      const double mj = mean[static_cast<std::size_t>(j)];
      for (Eigen::Index k = 0; k < t; ++k) {
        const double a = data(i, k) - mi;
        const double b = data(j, k) - mj;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
      }
      out(i, j) = (sxx == 0.0 || syy == 0.0) ? nan : sxy / std::sqrt(sxx * syy);
    }
  }
  return out;
}

}  // namespace brainmass
