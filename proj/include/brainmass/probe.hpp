#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brainmass/encoder.hpp"
#include "brainmass/ingest.hpp"

namespace brainmass {

struct EmbeddingRecord {
  std::string subject_id;
  std::vector<double> vector;  // D·V
  int label = kUnlabeled;
  std::string site;
  Split split = Split::pretrain_only;
};

/// Frozen-encoder representation of one scan: full FC, no dropping, no
/// masking, then encode and readout.
std::vector<double> embed_scan(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                               const ScanMatrix& data);

/// Runs embed_scan for every scan. `threads` > 1 splits subjects across
/// workers; the output does not depend on the thread count.
std::vector<EmbeddingRecord> extract_embeddings(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                                                const std::vector<TimeseriesScan>& scans, std::size_t threads = 1);

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_embeddings_csv(const std::filesystem::path& path);

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

/// Assigns train/val/test within every (site, label) cell. Cumulative
/// rounding keeps each cell within one sample of the target proportions and
/// the totals exact. Cells with fewer than 3 records go wholly to train.
std::vector<Split> stratified_split(std::span<const EmbeddingRecord> records, const SplitFractions& fractions,
                                    std::uint64_t seed);

/// Per-feature z-scoring with statistics from one set of rows.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(std::span<const std::vector<double>> rows);
  std::vector<double> apply(std::span<const double> x) const;
};

struct SvmOptions {
  std::size_t epochs = 100;
};

/// Binary soft-margin linear SVM. Inputs are standardized with the stored
/// training statistics before w·x + b.
struct SvmModel {
  std::vector<double> weights;
  double bias = 0.0;
  double c = 1.0;
  int negative_label = 0;
  int positive_label = 1;
  Standardizer standardizer;
  bool trained = false;

  double margin(std::span<const double> x) const;
  int predict(std::span<const double> x) const;
  /// Logistic of the signed margin.
  double probability(std::span<const double> x) const;
};

nlohmann::json to_json(const SvmModel& model);
SvmModel svm_model_from_json(const nlohmann::json& doc);

inline constexpr double kSvmGrid[] = {0.01, 0.1, 1.0, 10.0};

/// Minimizes ½||w||² + C·Σ hinge by seeded stochastic sub-gradient descent
/// with suffix-averaged iterates and a fixed epoch budget.
SvmModel svm_train(std::span<const std::vector<double>> features, std::span<const int> labels, double c,
                   std::uint64_t seed, const SvmOptions& options = {});
SvmModel svm_train(std::span<const EmbeddingRecord> train, double c, std::uint64_t seed,
                   const SvmOptions& options = {});

/// Trains one model per C in kSvmGrid and keeps the best validation accuracy
/// (ties favour the smaller C).
SvmModel svm_train_select(std::span<const EmbeddingRecord> train, std::span<const EmbeddingRecord> val,
                          std::uint64_t seed, const SvmOptions& options = {});

struct MetricsReport {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

MetricsReport metrics(std::span<const int> predictions, std::span<const int> labels, int positive_label = 1);
nlohmann::json to_json(const MetricsReport& report);

struct MetricSummary {
  std::optional<double> mean;
  std::optional<double> std;  // population standard deviation
  std::vector<std::optional<double>> values;
};

struct EvalReport {
  std::vector<MetricsReport> repeats;
  std::vector<double> chosen_c;
  MetricSummary accuracy, sensitivity, specificity;
  SvmModel first_model;
};

nlohmann::json to_json(const EvalReport& report);

/// Keeps the train split fixed and resamples val/test `k` times, stratified by
/// (site, label). Uses the records' own splits when any are train/val/test,
/// otherwise draws a fresh stratified split first. Unlabeled records are
/// ignored.
EvalReport repeated_eval(const std::vector<EmbeddingRecord>& records, std::size_t k, std::uint64_t seed,
                         const SplitFractions& fractions = {}, const SvmOptions& options = {});

/// Uniform (empty `weights`) or weighted average of per-classifier
/// probabilities.
double ensemble_probability(std::span<const SvmModel> classifiers, std::span<const double> x,
                            std::span<const double> weights = {});
double ensemble_zero_shot(std::span<const SvmModel> classifiers, std::span<const double> x);

double balanced_accuracy(const SvmModel& model, std::span<const EmbeddingRecord> support, int positive_label = 1);

/// Weights ∝ balanced accuracy on the support set, normalized to sum 1;
/// uniform when every classifier sits at chance.
std::vector<double> ensemble_few_shot(std::span<const SvmModel> classifiers, std::span<const EmbeddingRecord> support,
                                      int positive_label = 1);

}  // namespace brainmass
