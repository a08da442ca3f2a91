#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brainmass/encoder.hpp"
#include "brainmass/probe.hpp"
#include "brainmass/tensor.hpp"
#include "brainmass/trainer.hpp"

namespace brainmass {

std::string version();

/// Model and training parameters read from one JSON file. Accepts either
/// {"encoder": {...}, "train": {...}} (train optional) or a bare encoder object.
struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
};

RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// Writes `out/run.json`: command, arguments, config, seed, version and the
/// FNV-1a digest of every listed output.
void write_run_manifest(const std::filesystem::path& out, const std::string& command, const nlohmann::json& args,
                        const nlohmann::json& config, std::uint64_t seed,
                        const std::vector<std::filesystem::path>& outputs);

struct SynthArgs {
  std::size_t subjects = 200;
  std::size_t rois = 16;
  std::size_t timepoints = 200;
  std::size_t classes = 2;
  double effect = 0.1;
  double noise = 0.5;
  std::uint64_t seed = 0;
  bool binary = false;
  std::filesystem::path out;
};
std::filesystem::path run_synth(const SynthArgs& args);

struct AugmentArgs {
  std::filesystem::path scan;
  double drop_rate = kDefaultDropRate;
  std::size_t views = 2;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
std::vector<std::filesystem::path> run_augment(const AugmentArgs& args);

struct PretrainArgs {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablate;
  bool deterministic = false;
  std::filesystem::path out;
  bool verbose = false;
};

struct PretrainRun {
  std::filesystem::path checkpoint;
  std::uint64_t digest = 0;
  PretrainResult result;
};
/// Trains, then writes checkpoint.bin, loss_curve.csv and run.json. A
/// diverged run still writes the best checkpoint so far, then throws
/// NumericError.
PretrainRun run_pretrain(const PretrainArgs& args);

struct EmbedArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::size_t threads = 1;
};
std::filesystem::path run_embed(const EmbedArgs& args);

struct ProbeArgs {
  std::filesystem::path embeddings;
  std::size_t repeats = 10;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
EvalReport run_probe(const ProbeArgs& args);

enum class EnsembleMode { zero, few };
EnsembleMode parse_ensemble_mode(const std::string& text);

struct EnsembleArgs {
  std::filesystem::path classifiers;  // directory of classifier JSON files
  std::filesystem::path embeddings;
  EnsembleMode mode = EnsembleMode::zero;
  double support_frac = 0.2;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

struct EnsembleReport {
  EnsembleMode mode = EnsembleMode::zero;
  std::vector<double> weights;
  std::vector<std::string> query_subjects;
  std::vector<double> probabilities;
  MetricsReport metrics;
  MetricsReport zero_shot_metrics;  // same query set, uniform weights
  std::size_t support_size = 0;
};
nlohmann::json to_json(const EnsembleReport& report);

std::vector<SvmModel> load_classifiers(const std::filesystem::path& dir);

/// Zero-shot: uniform average over every labeled record. Few-shot: draws a
/// label-stratified support set of `support_frac`, weights the classifiers on
/// it and scores the remaining records.
EnsembleReport ensemble_evaluate(std::span<const SvmModel> classifiers, const std::vector<EmbeddingRecord>& records,
                                 EnsembleMode mode, double support_frac, std::uint64_t seed);
EnsembleReport run_ensemble(const EnsembleArgs& args);

struct AttnArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  LayerSelect layer = LayerSelect::mean;
  std::filesystem::path out;
};
std::filesystem::path run_attn(const AttnArgs& args);

struct GradcheckArgs {
  std::optional<std::filesystem::path> config;
  int precision = 64;
  std::uint64_t seed = 0;
};

/// Finite-difference check of the full objective on a two-subject synthetic
/// batch, over every trainable parameter.
nn::GradCheckResult model_grad_check(const RunConfig& cfg, std::uint64_t seed, double h = 1e-5);
nn::GradCheckResult run_gradcheck(const GradcheckArgs& args);

}  // namespace brainmass
