#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "brainmass/connectome.hpp"
#include "brainmass/encoder.hpp"
#include "brainmass/tensor.hpp"

namespace brainmass {

/// ROI positions hidden from the encoder in one masked forward pass.
struct MaskPlan {
  std::vector<std::size_t> indices;  // sorted, unique, each < V
  std::uint64_t seed = 0;
};

/// P = round(mask_ratio·V), ties to even.
std::size_t mask_count(std::size_t v_rois, double mask_ratio);
MaskPlan sample_mask(std::size_t v_rois, double mask_ratio, std::uint64_t seed);

struct LossWeights {
  double lambda_c = 0.1;
  double lambda_r = 5.0;
};

/// Which terms of the objective are active (ablation rows).
struct ObjectiveToggles {
  bool latent = true;
  bool mrm_cls = true;
  bool mrm_rec = true;

  bool any_mrm() const { return mrm_cls || mrm_rec; }
};

ObjectiveToggles parse_ablation(const std::string& disabled_terms);
std::string describe(const ObjectiveToggles& toggles);

inline constexpr double kDefaultTau = 0.996;

/// Masked-patch targets and head outputs, stacked over the minibatch (N rows).
template <typename T>
struct MrmOutputs {
  nn::Tensor<T> targets;  // x'_i, N×V
  nn::Tensor<T> cls;      // c_i, N×V
  nn::Tensor<T> rec;      // r_i, N×V

  std::size_t count() const { return targets.defined() ? targets.rows() : 0; }
};

/// Mean over rows of logsumexp(row) - diagonal entry, for an N×N score matrix.
template <typename T>
nn::Tensor<T> infonce_from_scores(const nn::Tensor<T>& scores);

/// Masked-ROI identity loss with every masked patch of the batch as negatives.
template <typename T>
nn::Tensor<T> loss_infonce(const MrmOutputs<T>& outputs);

/// (1/N) Σ ||r_i - x'_i||².
template <typename T>
nn::Tensor<T> loss_recon(const MrmOutputs<T>& outputs);

/// 2 - 2·cos(prediction, target). NumericError when either norm is below
/// 1e-12.
template <typename T>
nn::Tensor<T> loss_latent(const nn::Tensor<T>& prediction, const nn::Tensor<T>& target);

template <typename T>
nn::Tensor<T> predictor_forward(const nn::Mlp<T>& predictor, const nn::Tensor<T>& z);

/// ξ ← τξ + (1-τ)θ, elementwise.
template <typename T>
void ema_update(const nn::ParameterList<T>& target, const nn::ParameterList<T>& online, double tau);

template <typename T>
nn::Tensor<T> total_loss(const nn::Tensor<T>& latent, const nn::Tensor<T>& l_c, const nn::Tensor<T>& l_r,
                         const LossWeights& weights);
double total_loss(double latent, double l_c, double l_r, const LossWeights& weights);

/// Online encoder + MRM heads + predictor (θ) and the EMA target encoder (ξ).
/// The MRM branch shares the online encoder.
template <typename T>
struct BrainMassModel {
  EncoderConfig config;
  nn::EncoderParams<T> online;
  nn::Mlp<T> cls_head;
  nn::Mlp<T> rec_head;
  nn::Mlp<T> predictor;
  nn::EncoderParams<T> target;

  nn::ParameterList<T> trainable() const;
  nn::ParameterList<T> target_parameters() const;
  /// trainable() followed by target_parameters(); the checkpoint order.
  nn::ParameterList<T> all_parameters() const;
  std::size_t value_count() const;
};

/// Target starts as an exact copy of the online encoder.
template <typename T>
BrainMassModel<T> init_model(const EncoderConfig& cfg, std::uint64_t seed, double init_std = 0.02);

template <typename T>
BrainMassModel<T> clone_model(const BrainMassModel<T>& model);

struct SslOptions {
  double drop_rate = kDefaultDropRate;
  LossWeights weights;
  ObjectiveToggles toggles;
  double tau = kDefaultTau;
  bool symmetric_latent = false;
};

/// One subject in a pretraining minibatch. `seed` fixes both drop plans and
/// the mask for this step.
struct PretrainSample {
  const RealMatrix* timeseries = nullptr;  // V×T
  std::string subject_id;
  std::uint64_t seed = 0;
};

/// Per-sample randomness derived from PretrainSample::seed.
struct SampleViews {
  DropPlan plan_a;
  DropPlan plan_b;
  MaskPlan mask;
};
SampleViews plan_views(const PretrainSample& sample, std::size_t v_rois, double mask_ratio, double drop_rate);

template <typename T>
struct SslObjective {
  nn::Tensor<T> total;
  double latent = 0.0;
  double cls = 0.0;
  double rec = 0.0;
  std::size_t masked_patches = 0;
};

/// Builds views A/B for every sample and evaluates the weighted objective on
/// whatever tape is active. Disabled terms are neither evaluated nor
/// reported (they read 0).
template <typename T>
SslObjective<T> ssl_objective(const BrainMassModel<T>& model, std::span<const PretrainSample> batch,
                              const SslOptions& options);

struct StepLosses {
  double total = 0.0;
  double latent = 0.0;
  double cls = 0.0;
  double rec = 0.0;
  std::size_t masked_patches = 0;
};

/// Forward + backward on θ, then `apply_update(θ)` (the optimizer), then the
/// EMA update of ξ.
template <typename T>
StepLosses pretrain_step(BrainMassModel<T>& model, std::span<const PretrainSample> batch, const SslOptions& options,
                         const std::function<void(nn::ParameterList<T>&)>& apply_update);

}  // namespace brainmass
