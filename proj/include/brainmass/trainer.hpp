#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brainmass/ingest.hpp"
#include "brainmass/ssl.hpp"

namespace brainmass {

struct TrainConfig {
  double lr_init = 3e-5;
  double lr_peak = 3e-4;
  double warmup_epochs = 10.0;
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  bool deterministic = true;
  double drop_rate = kDefaultDropRate;
  LossWeights weights;
  ObjectiveToggles toggles;
  double weight_decay = 5e-5;
  double tau = kDefaultTau;
  bool cosine_decay = false;
  bool symmetric_latent = false;
  double init_std = 0.02;

  void validate() const;
  SslOptions ssl_options() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing fields keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig base = {});

/// Linear warmup from lr_init to lr_peak over warmup_epochs, then constant
/// (or cosine decay to zero over the remaining epochs when enabled).
double lr_at(double epoch, const TrainConfig& cfg);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Parameters flagged decay_exempt (norms,
/// positional and mask embeddings) are never decayed.
template <typename T>
class Adam {
 public:
  Adam(const nn::ParameterList<T>& params, AdamOptions options);

  /// Applies one update from the accumulated gradients. Non-finite gradients
  /// raise NumericError in checked mode.
  void step(const nn::ParameterList<T>& params, double lr);

  std::size_t step_count() const { return t_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  AdamOptions options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double l_latent = 0.0;
  double l_c = 0.0;
  double l_r = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  BrainMassModel<float> best_model;
  double best_loss = std::numeric_limits<double>::infinity();  // +inf: untrained
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> curve;
  bool diverged = false;
  std::string message;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded epoch loop over every scan (labels and splits are ignored). Keeps
/// the parameters with the lowest epoch-mean loss. A non-finite loss stops
/// training and returns the last good state with `diverged` set.
PretrainResult pretrain(const std::vector<TimeseriesScan>& scans, const EncoderConfig& encoder,
                        const TrainConfig& train, const EpochCallback& on_epoch = {});

void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve);

}  // namespace brainmass
