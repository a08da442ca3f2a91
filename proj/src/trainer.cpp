#include "brainmass/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "brainmass/connectome.hpp"
#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"

namespace brainmass {

void TrainConfig::validate() const {
  if (!(lr_init > 0.0) || !(lr_peak > 0.0)) throw ValidationError("learning rates must be positive");
  if (lr_init > lr_peak) throw ValidationError("lr_init must not exceed lr_peak");
  if (warmup_epochs < 0.0) throw ValidationError("warmup_epochs must be >= 0");
  if (epochs > 0 && warmup_epochs > static_cast<double>(epochs))
    throw ValidationError("warmup_epochs (" + std::to_string(warmup_epochs) + ") exceeds epochs (" +
                          std::to_string(epochs) + ")");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ValidationError("drop_rate must lie in [0, 1)");
  if (!(weights.lambda_c >= 0.0) || !(weights.lambda_r >= 0.0) || !std::isfinite(weights.lambda_c) ||
      !std::isfinite(weights.lambda_r))
    throw ValidationError("loss weights must be finite and non-negative");
  if (!toggles.latent && !toggles.any_mrm()) throw ValidationError("every objective term is disabled");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in [0, 1]");
  if (!(init_std > 0.0)) throw ValidationError("init_std must be positive");
}

SslOptions TrainConfig::ssl_options() const {
  return SslOptions{drop_rate, weights, toggles, tau, symmetric_latent};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr_init", c.lr_init},
          {"lr_peak", c.lr_peak},
          {"warmup_epochs", c.warmup_epochs},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"deterministic", c.deterministic},
          {"drop_rate", c.drop_rate},
          {"lambda_c", c.weights.lambda_c},
          {"lambda_r", c.weights.lambda_r},
          {"latent", c.toggles.latent},
          {"mrm_cls", c.toggles.mrm_cls},
          {"mrm_rec", c.toggles.mrm_rec},
          {"weight_decay", c.weight_decay},
          {"tau", c.tau},
          {"cosine_decay", c.cosine_decay},
          {"symmetric_latent", c.symmetric_latent},
          {"init_std", c.init_std}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig c) {
  if (!doc.is_object()) throw ValidationError("train config must be a JSON object");
  static const std::set<std::string> kKnown = {
      "lr_init", "lr_peak",  "warmup_epochs", "epochs",  "batch_size", "seed",         "deterministic",
      "drop_rate", "lambda_c", "lambda_r",    "latent",  "mrm_cls",    "mrm_rec",      "weight_decay",
      "tau",       "cosine_decay", "symmetric_latent", "init_std"};
  for (const auto& [key, _] : doc.items())
    if (!kKnown.contains(key)) throw ValidationError("unknown train config field '" + key + "'");
  try {
    auto get = [&doc](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr_init", c.lr_init);
    get("lr_peak", c.lr_peak);
    get("warmup_epochs", c.warmup_epochs);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    get("deterministic", c.deterministic);
    get("drop_rate", c.drop_rate);
    get("lambda_c", c.weights.lambda_c);
    get("lambda_r", c.weights.lambda_r);
    get("latent", c.toggles.latent);
    get("mrm_cls", c.toggles.mrm_cls);
    get("mrm_rec", c.toggles.mrm_rec);
    get("weight_decay", c.weight_decay);
    get("tau", c.tau);
    get("cosine_decay", c.cosine_decay);
    get("symmetric_latent", c.symmetric_latent);
    get("init_std", c.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_at(double epoch, const TrainConfig& cfg) {
  if (!(epoch >= 0.0)) throw ParameterError("epoch must be >= 0");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (epoch / cfg.warmup_epochs);
  if (!cfg.cosine_decay) return cfg.lr_peak;
  const double span = static_cast<double>(cfg.epochs) - cfg.warmup_epochs;
  if (span <= 0.0) return cfg.lr_peak;
  const double progress = std::clamp((epoch - cfg.warmup_epochs) / span, 0.0, 1.0);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
Adam<T>::Adam(const nn::ParameterList<T>& params, AdamOptions options) : options_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), T{0});
    v_.emplace_back(p.tensor.size(), T{0});
  }
}

template <typename T>
void Adam<T>::step(const nn::ParameterList<T>& params, double lr) {
  if (params.size() != m_.size()) throw ShapeError("optimizer built for a different parameter list");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Tensor<T> tensor = params[i].tensor;
    if (tensor.size() != m_[i].size()) throw ShapeError("optimizer state shape mismatch for '" + params[i].name + "'");
    const auto grad = tensor.grad();
    if (grad.empty()) continue;
    auto values = tensor.mutable_values();
    const bool decay = !params[i].decay_exempt && options_.weight_decay > 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = static_cast<double>(grad[k]);
      if (nn::checked_mode() && !std::isfinite(g))
        throw NumericError("non-finite gradient in '" + params[i].name + "'");
      double p = static_cast<double>(values[k]);
      if (decay) p -= lr * options_.weight_decay * p;
      const double m = b1 * static_cast<double>(m_[i][k]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(v_[i][k]) + (1.0 - b2) * g * g;
      m_[i][k] = static_cast<T>(m);
      v_[i][k] = static_cast<T>(v);
      p -= lr * (m / correction1) / (std::sqrt(v / correction2) + options_.eps);
      values[k] = static_cast<T>(p);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

PretrainResult pretrain(const std::vector<TimeseriesScan>& scans, const EncoderConfig& encoder,
                        const TrainConfig& train, const EpochCallback& on_epoch) {
  encoder.validate();
  train.validate();
  if (scans.empty()) throw ValidationError("pretraining needs at least one scan");

  std::vector<RealMatrix> series;
  series.reserve(scans.size());
  for (const auto& s : scans) {
    if (static_cast<std::size_t>(s.data.rows()) != encoder.v_rois)
      throw ValidationError("scan '" + s.subject_id + "' has V=" + std::to_string(s.data.rows()) +
                            ", encoder expects " + std::to_string(encoder.v_rois));
    series.push_back(normalize_timeseries(RealMatrix(s.data.cast<double>())).data);
  }

  PretrainResult result;
  auto model = init_model<float>(encoder, train.seed, train.init_std);
  result.best_model = clone_model(model);
  if (train.epochs == 0) return result;

  Adam<float> adam(model.trainable(), AdamOptions{0.9, 0.999, 1e-8, train.weight_decay});
  const SslOptions options = train.ssl_options();
  const std::size_t n = scans.size();
  const std::size_t batch = std::min(train.batch_size, n);
  const std::size_t steps = (n + batch - 1) / batch;

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(train.seed ^ (0x5eedULL + epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(static_cast<double>(epoch), train);
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        std::vector<PretrainSample> samples;
        for (std::size_t k = s * batch; k < std::min(n, (s + 1) * batch); ++k) {
          const auto idx = order[k];
          samples.push_back({&series[idx], scans[idx].subject_id, derive_seed(train.seed, scans[idx].subject_id, epoch)});
        }
        const double lr = lr_at(static_cast<double>(epoch) + static_cast<double>(s) / static_cast<double>(steps), train);
        const auto losses = pretrain_step<float>(model, samples, options, [&](nn::ParameterList<float>& theta) {
          adam.step(theta, lr);
        });
        if (!std::isfinite(losses.total)) throw NumericError("non-finite training loss");
        const double w = static_cast<double>(samples.size()) / static_cast<double>(n);
        rec.mean_loss += w * losses.total;
        rec.l_latent += w * losses.latent;
        rec.l_c += w * losses.cls;
        rec.l_r += w * losses.rec;
      }
    } catch (const NumericError& e) {
      result.diverged = true;
      result.message = "epoch " + std::to_string(epoch) + ": " + e.what();
      return result;
    }
    result.curve.push_back(rec);
    if (rec.mean_loss < result.best_loss) {
      result.best_loss = rec.mean_loss;
      result.best_epoch = epoch;
      result.best_model = clone_model(model);
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "epoch,mean_loss,l_latent,l_c,l_r,lr\n" << std::setprecision(17);
  for (const auto& r : curve)
    out << r.epoch << ',' << r.mean_loss << ',' << r.l_latent << ',' << r.l_c << ',' << r.l_r << ',' << r.lr << '\n';
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace brainmass
