#include "brainmass/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"

namespace brainmass {

using nn::Axis;
using nn::Tensor;

std::size_t mask_count(std::size_t v_rois, double mask_ratio) {
  return static_cast<std::size_t>(std::nearbyint(mask_ratio * static_cast<double>(v_rois)));
}

MaskPlan sample_mask(std::size_t v_rois, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ParameterError("mask_ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
  const std::size_t p = mask_count(v_rois, mask_ratio);
  if (p == 0 || p >= v_rois)
    throw ParameterError("mask_ratio " + std::to_string(mask_ratio) + " masks " + std::to_string(p) + " of " +
                         std::to_string(v_rois) + " ROIs; need 1 <= P < V");
  std::vector<std::size_t> order(v_rois);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < p; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v_rois - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskPlan plan{{order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p)}, seed};
  std::sort(plan.indices.begin(), plan.indices.end());
  return plan;
}

ObjectiveToggles parse_ablation(const std::string& disabled_terms) {
  ObjectiveToggles t;
  std::stringstream ss(disabled_terms);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "latent") {
      t.latent = false;
    } else if (item == "mrm_cls") {
      t.mrm_cls = false;
    } else if (item == "mrm_rec") {
      t.mrm_rec = false;
    } else {
      throw ParameterError("unknown objective term '" + item + "' (expected latent, mrm_cls, mrm_rec)");
    }
  }
  if (!t.latent && !t.any_mrm()) throw ParameterError("every objective term is disabled");
  return t;
}

std::string describe(const ObjectiveToggles& t) {
  std::string out;
  auto add = [&out](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += name;
  };
  add(t.latent, "latent");
  add(t.mrm_cls, "mrm_cls");
  add(t.mrm_rec, "mrm_rec");
  return out;
}

template <typename T>
Tensor<T> infonce_from_scores(const Tensor<T>& scores) {
  if (scores.rows() != scores.cols() || scores.rows() == 0)
    throw ShapeError("infonce: score matrix must be square and non-empty, got " + scores.shape().str());
  const std::size_t n = scores.rows();
  std::vector<T> eye(n * n, T{0});
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = T{1};
  const auto diagonal = nn::sum(nn::mul(scores, Tensor<T>(scores.shape(), std::move(eye))), Axis::cols);
  return nn::mean(nn::sub(nn::logsumexp_rows(scores), diagonal), Axis::rows);
}

template <typename T>
Tensor<T> loss_infonce(const MrmOutputs<T>& outputs) {
  if (outputs.count() == 0) throw ParameterError("infonce needs at least one masked patch");
  return infonce_from_scores(nn::matmul(outputs.cls, nn::transpose(outputs.targets)));
}

template <typename T>
Tensor<T> loss_recon(const MrmOutputs<T>& outputs) {
  if (outputs.count() == 0) throw ParameterError("reconstruction loss needs at least one masked patch");
  return nn::scale(nn::squared_error(outputs.rec, outputs.targets), T{1} / static_cast<T>(outputs.count()));
}

template <typename T>
Tensor<T> loss_latent(const Tensor<T>& prediction, const Tensor<T>& target) {
  if (prediction.shape() != target.shape())
    throw ShapeError("latent loss: " + prediction.shape().str() + " vs " + target.shape().str());
  const auto pn = nn::l2_norm(prediction);
  const auto tn = nn::l2_norm(target);
  if (pn.item() < T(1e-12) || tn.item() < T(1e-12))
    throw NumericError("latent loss: embedding norm below 1e-12 (collapsed representation)");
  const auto cosine = nn::div(nn::sum_all(nn::mul(prediction, target)), nn::mul(pn, tn));
  return nn::sub(Tensor<T>::scalar(T{2}), nn::scale(cosine, T{2}));
}

template <typename T>
Tensor<T> predictor_forward(const nn::Mlp<T>& predictor, const Tensor<T>& z) {
  return nn::mlp_forward(predictor, z);
}

template <typename T>
void ema_update(const nn::ParameterList<T>& target, const nn::ParameterList<T>& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("EMA decay must lie in [0, 1]");
  if (target.size() != online.size())
    throw ShapeError("EMA: target has " + std::to_string(target.size()) + " tensors, online has " +
                     std::to_string(online.size()));
  const T keep = static_cast<T>(tau);
  const T take = static_cast<T>(1.0 - tau);
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].tensor.shape() != online[i].tensor.shape())
      throw ShapeError("EMA: '" + target[i].name + "' " + target[i].tensor.shape().str() + " vs '" + online[i].name +
                       "' " + online[i].tensor.shape().str());
    auto xi = Tensor<T>(target[i].tensor).mutable_values();
    const auto theta = online[i].tensor.values();
    for (std::size_t k = 0; k < xi.size(); ++k) xi[k] = keep * xi[k] + take * theta[k];
  }
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& latent, const Tensor<T>& l_c, const Tensor<T>& l_r, const LossWeights& w) {
  return nn::add(nn::add(latent, nn::scale(l_c, static_cast<T>(w.lambda_c))), nn::scale(l_r, static_cast<T>(w.lambda_r)));
}

double total_loss(double latent, double l_c, double l_r, const LossWeights& w) {
  return latent + w.lambda_c * l_c + w.lambda_r * l_r;
}

template <typename T>
nn::ParameterList<T> BrainMassModel<T>::trainable() const {
  auto out = online.parameters("online.");
  for (auto&& p : cls_head.parameters("cls_head.")) out.push_back(std::move(p));
  for (auto&& p : rec_head.parameters("rec_head.")) out.push_back(std::move(p));
  for (auto&& p : predictor.parameters("predictor.")) out.push_back(std::move(p));
  return out;
}

template <typename T>
nn::ParameterList<T> BrainMassModel<T>::target_parameters() const {
  return target.parameters("target.");
}

template <typename T>
nn::ParameterList<T> BrainMassModel<T>::all_parameters() const {
  auto out = trainable();
  for (auto&& p : target_parameters()) out.push_back(std::move(p));
  return out;
}

template <typename T>
std::size_t BrainMassModel<T>::value_count() const {
  std::size_t n = 0;
  for (const auto& p : all_parameters()) n += p.tensor.size();
  return n;
}

namespace {

template <typename T>
void freeze(const nn::ParameterList<T>& params) {
  for (const auto& p : params) Tensor<T>(p.tensor).set_requires_grad(false);
}

}  // namespace

template <typename T>
BrainMassModel<T> init_model(const EncoderConfig& cfg, std::uint64_t seed, double init_std) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  BrainMassModel<T> m;
  m.config = cfg;
  m.online = nn::init_encoder<T>(cfg, rng, init_std);
  // Heads map a V-wide token back to V outputs through a V-wide hidden layer.
  m.cls_head = nn::init_mlp<T>(cfg.v_rois, cfg.v_rois, cfg.v_rois, rng, init_std);
  m.rec_head = nn::init_mlp<T>(cfg.v_rois, cfg.v_rois, cfg.v_rois, rng, init_std);
  const std::size_t e = cfg.embedding_dim();
  m.predictor = nn::init_mlp<T>(e, e, e, rng, init_std);
  std::mt19937_64 unused(seed);
  m.target = nn::init_encoder<T>(cfg, unused, init_std);
  nn::copy_values(m.target_parameters(), m.online.parameters("target."));
  freeze(m.target_parameters());
  return m;
}

template <typename T>
BrainMassModel<T> clone_model(const BrainMassModel<T>& model) {
  BrainMassModel<T> copy = init_model<T>(model.config, 0);
  nn::copy_values(copy.all_parameters(), model.all_parameters());
  return copy;
}

SampleViews plan_views(const PretrainSample& sample, std::size_t v_rois, double mask_ratio, double drop_rate) {
  if (sample.timeseries == nullptr) throw ParameterError("pretrain sample without timeseries");
  const auto t = static_cast<std::size_t>(sample.timeseries->cols());
  return SampleViews{make_drop_plan(t, drop_rate, mix_seed(sample.seed ^ 0xA1ULL)),
                     make_drop_plan(t, drop_rate, mix_seed(sample.seed ^ 0xB2ULL)),
                     sample_mask(v_rois, mask_ratio, mix_seed(sample.seed ^ 0xC3ULL))};
}

namespace {

template <typename T>
Tensor<T> embed(const nn::EncoderParams<T>& params, const EncoderConfig& cfg, const Tensor<T>& x) {
  return nn::readout(params, nn::encode(params, cfg, x).tokens);
}

template <typename T>
Tensor<T> stack_mean(const std::vector<Tensor<T>>& scalars) {
  return nn::scale(nn::sum_all(nn::concat(scalars, Axis::rows)), T{1} / static_cast<T>(scalars.size()));
}

}  // namespace

template <typename T>
SslObjective<T> ssl_objective(const BrainMassModel<T>& model, std::span<const PretrainSample> batch,
                              const SslOptions& options) {
  if (batch.empty()) throw ParameterError("empty pretraining batch");
  const auto& toggles = options.toggles;
  if (!toggles.latent && !toggles.any_mrm()) throw ParameterError("every objective term is disabled");
  const auto& cfg = model.config;

  std::vector<Tensor<T>> latents;
  std::vector<Tensor<T>> targets, cls, rec;
  for (const auto& sample : batch) {
    if (static_cast<std::size_t>(sample.timeseries->rows()) != cfg.v_rois)
      throw ValidationError("scan '" + sample.subject_id + "' has V=" + std::to_string(sample.timeseries->rows()) +
                            ", model expects " + std::to_string(cfg.v_rois));
    const SampleViews views = plan_views(sample, cfg.v_rois, cfg.mask_ratio, options.drop_rate);
    const auto xa = nn::to_tensor<T>(pfc_augment(*sample.timeseries, views.plan_a, sample.subject_id).matrix);
    const auto xb = nn::to_tensor<T>(pfc_augment(*sample.timeseries, views.plan_b, sample.subject_id).matrix);

    if (toggles.latent) {
      auto align = [&](const Tensor<T>& online_view, const Tensor<T>& target_view) {
        const auto q = predictor_forward(model.predictor, embed(model.online, cfg, online_view));
        Tensor<T> z_hat;
        {
          nn::NoGradScope<T> stop;
          z_hat = embed(model.target, cfg, target_view);
        }
        return loss_latent(q, z_hat);
      };
      auto l = align(xa, xb);
      if (options.symmetric_latent) l = nn::scale(nn::add(l, align(xb, xa)), T(0.5));
      latents.push_back(l);
    }
    if (toggles.any_mrm()) {
      const std::span<const std::size_t> masked(views.mask.indices);
      const auto tokens = nn::encode(model.online, cfg, xa, masked).tokens;
      const auto picked = nn::gather_rows(tokens, masked);
      targets.push_back(nn::gather_rows(xa, masked));
      if (toggles.mrm_cls) cls.push_back(nn::mlp_forward(model.cls_head, picked));
      if (toggles.mrm_rec) rec.push_back(nn::mlp_forward(model.rec_head, picked));
    }
  }

  SslObjective<T> result;
  std::vector<Tensor<T>> terms;
  if (toggles.latent) {
    const auto l = stack_mean(latents);
    result.latent = static_cast<double>(l.item());
    terms.push_back(l);
  }
  if (toggles.any_mrm()) {
    MrmOutputs<T> mrm;
    mrm.targets = nn::concat(targets, Axis::rows);
    result.masked_patches = mrm.count();
    if (toggles.mrm_cls) {
      mrm.cls = nn::concat(cls, Axis::rows);
      const auto l = loss_infonce(mrm);
      result.cls = static_cast<double>(l.item());
      terms.push_back(nn::scale(l, static_cast<T>(options.weights.lambda_c)));
    }
    if (toggles.mrm_rec) {
      mrm.rec = nn::concat(rec, Axis::rows);
      const auto l = loss_recon(mrm);
      result.rec = static_cast<double>(l.item());
      terms.push_back(nn::scale(l, static_cast<T>(options.weights.lambda_r)));
    }
  }
  result.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) result.total = nn::add(result.total, terms[i]);
  return result;
}

template <typename T>
StepLosses pretrain_step(BrainMassModel<T>& model, std::span<const PretrainSample> batch, const SslOptions& options,
                         const std::function<void(nn::ParameterList<T>&)>& apply_update) {
  auto theta = model.trainable();
  for (auto& p : theta) p.tensor.zero_grad();
  StepLosses losses;
  {
    nn::Tape<T> tape;
    nn::TapeScope<T> scope(tape);
    const auto objective = ssl_objective(model, batch, options);
    tape.backward(objective.total);
    losses = {static_cast<double>(objective.total.item()), objective.latent, objective.cls, objective.rec,
              objective.masked_patches};
  }
  if (apply_update) apply_update(theta);
  ema_update(model.target_parameters(), model.online.parameters("online."), options.tau);
  return losses;
}

#define BRAINMASS_INSTANTIATE(T)                                                                              \
  template Tensor<T> infonce_from_scores(const Tensor<T>&);                                                   \
  template Tensor<T> loss_infonce(const MrmOutputs<T>&);                                                      \
  template Tensor<T> loss_recon(const MrmOutputs<T>&);                                                        \
  template Tensor<T> loss_latent(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> predictor_forward(const nn::Mlp<T>&, const Tensor<T>&);                                  \
  template void ema_update(const nn::ParameterList<T>&, const nn::ParameterList<T>&, double);                 \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LossWeights&);    \
  template struct BrainMassModel<T>;                                                                          \
  template BrainMassModel<T> init_model<T>(const EncoderConfig&, std::uint64_t, double);                      \
  template BrainMassModel<T> clone_model(const BrainMassModel<T>&);                                           \
  template SslObjective<T> ssl_objective(const BrainMassModel<T>&, std::span<const PretrainSample>,           \
                                         const SslOptions&);                                                  \
  template StepLosses pretrain_step(BrainMassModel<T>&, std::span<const PretrainSample>, const SslOptions&,   \
                                    const std::function<void(nn::ParameterList<T>&)>&);

BRAINMASS_INSTANTIATE(float)
BRAINMASS_INSTANTIATE(double)

#undef BRAINMASS_INSTANTIATE

}  // namespace brainmass
