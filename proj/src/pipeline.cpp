#include "brainmass/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>

#include "brainmass/checkpoint.hpp"
#include "brainmass/connectome.hpp"
#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"
#include "brainmass/ingest.hpp"
#include "brainmass/ssl.hpp"
#include "brainmass/synth.hpp"

namespace brainmass {

namespace fs = std::filesystem;

std::string version() { return BRAINMASS_VERSION; }

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string seed_string(std::uint64_t seed) { return std::to_string(seed); }

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("config must be a JSON object");
  RunConfig cfg;
  if (doc.contains("encoder")) {
    for (const auto& [key, value] : doc.items())
      if (key != "encoder" && key != "train") throw ValidationError("unknown config section '" + key + "'");
    cfg.encoder = encoder_config_from_json(doc.at("encoder"));
    if (doc.contains("train")) cfg.train = train_config_from_json(doc.at("train"));
  } else {
    cfg.encoder = encoder_config_from_json(doc);
  }
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json(path)); }

nlohmann::json to_json(const RunConfig& cfg) { return {{"encoder", to_json(cfg.encoder)}, {"train", to_json(cfg.train)}}; }

void write_run_manifest(const fs::path& out, const std::string& command, const nlohmann::json& args,
                        const nlohmann::json& config, std::uint64_t seed, const std::vector<fs::path>& outputs) {
  nlohmann::json digests = nlohmann::json::object();
  for (const auto& p : outputs) digests[p.filename().string()] = to_hex(file_digest(p.string()));
  write_json(out / "run.json", {{"command", command},
                                {"args", args},
                                {"config", config},
                                {"seed", seed_string(seed)},
                                {"versions", {{"brainmass", version()}, {"checkpoint_format", 1}}},
                                {"outputs", digests}});
}

fs::path run_synth(const SynthArgs& a) {
  auto spec = default_two_class_spec(a.subjects, a.rois, a.timepoints, a.effect, a.seed);
  spec.n_classes = a.classes;
  spec.noise_sigma = a.noise;
  if (a.classes == 1) spec.class_effects.clear();
  // Further classes repeat the class-1 pattern with a growing magnitude.
  for (std::size_t k = 2; k < a.classes; ++k)
    spec.class_effects.push_back({BlockEffect{0, 1, a.effect * static_cast<double>(k)},
                                  BlockEffect{2, 2, -a.effect * static_cast<double>(k)}});
  ensure_dir(a.out);
  const auto manifest = write_cohort(a.out, generate_cohort(spec), a.seed, a.binary);
  nlohmann::json args = {{"subjects", a.subjects}, {"rois", a.rois},   {"timepoints", a.timepoints},
                         {"classes", a.classes},   {"effect", a.effect}, {"noise", a.noise},
                         {"binary", a.binary}};
  write_run_manifest(a.out, "synth", args, nlohmann::json::object(), a.seed, {manifest});
  return manifest;
}

std::vector<fs::path> run_augment(const AugmentArgs& a) {
  if (a.views == 0) throw ParameterError("--views must be >= 1");
  const auto scan = load_scan(a.scan);
  const RealMatrix series = normalize_timeseries(RealMatrix(scan.cast<double>())).data;
  const std::string subject = a.scan.stem().string();
  ensure_dir(a.out);
  std::vector<fs::path> written;
  for (std::size_t v = 0; v < a.views; ++v) {
    const auto plan = make_drop_plan(static_cast<std::size_t>(series.cols()), a.drop_rate,
                                     derive_seed(a.seed, subject, v));
    const auto fc = pfc_augment(series, plan, subject);
    const auto path = a.out / (subject + "_view" + std::to_string(v) + ".csv");
    write_connectome_csv(path, fc);
    written.push_back(path);
  }
  write_run_manifest(a.out, "augment", {{"scan", a.scan.string()}, {"drop_rate", a.drop_rate}, {"views", a.views}},
                     nlohmann::json::object(), a.seed, written);
  return written;
}

PretrainRun run_pretrain(const PretrainArgs& a) {
  RunConfig cfg;
  if (a.config) cfg = load_run_config(*a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.ablate) cfg.train.toggles = parse_ablation(*a.ablate);
  if (a.deterministic) cfg.train.deterministic = true;
  cfg.train.validate();

  const auto manifest = load_manifest(a.manifest);
  if (manifest.atlas_rois != cfg.encoder.v_rois)
    throw ValidationError("manifest scans have V=" + std::to_string(manifest.atlas_rois) + " but the config expects V=" +
                          std::to_string(cfg.encoder.v_rois));
  const auto scans = load_cohort(manifest);
  ensure_dir(a.out);

  PretrainRun run;
  run.result = pretrain(scans, cfg.encoder, cfg.train, [&](const EpochRecord& r) {
    if (a.verbose)
      std::cerr << "epoch " << r.epoch << " loss " << r.mean_loss << " latent " << r.l_latent << " cls " << r.l_c
                << " rec " << r.l_r << " lr " << r.lr << '\n';
  });

  Checkpoint ckpt{CheckpointMeta{cfg.encoder, to_json(cfg.train), run.result.best_epoch, run.result.best_loss},
                  clone_model(run.result.best_model)};
  run.checkpoint = a.out / "checkpoint.bin";
  save_checkpoint(run.checkpoint, ckpt);
  run.digest = parameter_digest(ckpt.model);
  const auto curve = a.out / "loss_curve.csv";
  write_loss_curve(curve, run.result.curve);
  write_run_manifest(a.out, "pretrain",
                     {{"manifest", a.manifest.string()},
                      {"ablate", a.ablate.value_or("")},
                      {"deterministic", cfg.train.deterministic},
                      {"parameter_digest", to_hex(run.digest)}},
                     to_json(cfg), cfg.train.seed, {run.checkpoint, curve});
  if (run.result.diverged)
    throw NumericError("training diverged (" + run.result.message + "); best checkpoint so far written to " +
                       run.checkpoint.string());
  return run;
}

fs::path run_embed(const EmbedArgs& a) {
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto manifest = load_manifest(a.manifest);
  if (manifest.atlas_rois != ckpt.meta.encoder.v_rois)
    throw IncompatibleError("manifest scans have V=" + std::to_string(manifest.atlas_rois) +
                            " but the checkpoint encoder expects V=" + std::to_string(ckpt.meta.encoder.v_rois));
  const auto scans = load_cohort(manifest);
  const auto records = extract_embeddings(ckpt.model.online, ckpt.meta.encoder, scans, a.threads);
  ensure_dir(a.out);
  const auto path = a.out / "embeddings.csv";
  write_embeddings_csv(path, records);
  write_run_manifest(a.out, "embed", {{"checkpoint", a.checkpoint.string()}, {"manifest", a.manifest.string()}},
                     {{"encoder", to_json(ckpt.meta.encoder)}}, 0, {path});
  return path;
}

EvalReport run_probe(const ProbeArgs& a) {
  const auto records = read_embeddings_csv(a.embeddings);
  const auto report = repeated_eval(records, a.repeats, a.seed);
  ensure_dir(a.out);
  const auto metrics_path = a.out / "metrics.json";
  const auto clf_path = a.out / "classifier.json";
  write_json(metrics_path, to_json(report));
  write_json(clf_path, to_json(report.first_model));
  write_run_manifest(a.out, "probe", {{"embeddings", a.embeddings.string()}, {"repeats", a.repeats}},
                     {{"svm_grid", std::vector<double>(std::begin(kSvmGrid), std::end(kSvmGrid))}}, a.seed,
                     {metrics_path, clf_path});
  return report;
}

EnsembleMode parse_ensemble_mode(const std::string& text) {
  if (text == "zero") return EnsembleMode::zero;
  if (text == "few") return EnsembleMode::few;
  throw ParameterError("unknown ensemble mode '" + text + "' (expected zero or few)");
}

nlohmann::json to_json(const EnsembleReport& r) {
  return {{"mode", r.mode == EnsembleMode::zero ? "zero" : "few"},
          {"weights", r.weights},
          {"support_size", r.support_size},
          {"query_size", r.query_subjects.size()},
          {"metrics", to_json(r.metrics)},
          {"zero_shot_metrics", to_json(r.zero_shot_metrics)}};
}

std::vector<SvmModel> load_classifiers(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("classifier directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json" && entry.path().filename() != "run.json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no classifier JSON files in '" + dir.string() + "'");
  std::vector<SvmModel> models;
  for (const auto& f : files) models.push_back(svm_model_from_json(read_json(f)));
  return models;
}

EnsembleReport ensemble_evaluate(std::span<const SvmModel> classifiers, const std::vector<EmbeddingRecord>& all,
                                 EnsembleMode mode, double support_frac, std::uint64_t seed) {
  std::vector<EmbeddingRecord> records;
  for (const auto& r : all)
    if (r.label != kUnlabeled) records.push_back(r);
  if (records.empty()) throw ParameterError("no labeled records for the ensemble");
  const int positive = classifiers.front().positive_label;

  EnsembleReport report;
  report.mode = mode;
  std::vector<EmbeddingRecord> support, query;
  if (mode == EnsembleMode::few) {
    if (!(support_frac > 0.0 && support_frac < 1.0)) throw ParameterError("--support-frac must lie in (0, 1)");
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < records.size(); ++i) by_label[records[i].label].push_back(i);
    std::mt19937_64 rng(mix_seed(seed));
    std::vector<bool> in_support(records.size(), false);
    for (auto& [label, idx] : by_label) {
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto take = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::nearbyint(support_frac * static_cast<double>(idx.size()))));
      for (std::size_t k = 0; k < std::min(take, idx.size()); ++k) in_support[idx[k]] = true;
    }
    for (std::size_t i = 0; i < records.size(); ++i) (in_support[i] ? support : query).push_back(records[i]);
    report.weights = ensemble_few_shot(classifiers, support, positive);
  } else {
    query = records;
    report.weights.assign(classifiers.size(), 1.0 / static_cast<double>(classifiers.size()));
  }
  if (query.empty()) throw ParameterError("no query records left after drawing the support set");
  report.support_size = support.size();

  std::vector<int> pred, zero_pred, truth;
  const int negative = classifiers.front().negative_label;
  for (const auto& r : query) {
    const double p = ensemble_probability(classifiers, r.vector, report.weights);
    const double p0 = ensemble_zero_shot(classifiers, r.vector);
    report.query_subjects.push_back(r.subject_id);
    report.probabilities.push_back(p);
    pred.push_back(p >= 0.5 ? positive : negative);
    zero_pred.push_back(p0 >= 0.5 ? positive : negative);
    truth.push_back(r.label);
  }
  report.metrics = metrics(pred, truth, positive);
  report.zero_shot_metrics = metrics(zero_pred, truth, positive);
  return report;
}

EnsembleReport run_ensemble(const EnsembleArgs& a) {
  const auto classifiers = load_classifiers(a.classifiers);
  const auto records = read_embeddings_csv(a.embeddings);
  const auto report = ensemble_evaluate(classifiers, records, a.mode, a.support_frac, a.seed);
  ensure_dir(a.out);
  const auto summary = a.out / "ensemble.json";
  write_json(summary, to_json(report));
  const auto preds = a.out / "predictions.csv";
  {
    std::ofstream out(preds);
    if (!out) throw IoError("cannot write '" + preds.string() + "'");
    out << "subject_id,probability\n" << std::setprecision(17);
    for (std::size_t i = 0; i < report.query_subjects.size(); ++i)
      out << report.query_subjects[i] << ',' << report.probabilities[i] << '\n';
  }
  write_run_manifest(a.out, "ensemble",
                     {{"classifiers", a.classifiers.string()},
                      {"embeddings", a.embeddings.string()},
                      {"mode", a.mode == EnsembleMode::zero ? "zero" : "few"},
                      {"support_frac", a.support_frac}},
                     nlohmann::json::object(), a.seed, {summary, preds});
  return report;
}

fs::path run_attn(const AttnArgs& a) {
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto manifest = load_manifest(a.manifest);
  const auto scans = load_cohort(manifest);
  std::vector<Connectome> fcs;
  fcs.reserve(scans.size());
  for (const auto& s : scans)
    fcs.push_back(pearson_fc(normalize_timeseries(RealMatrix(s.data.cast<double>())).data, s.subject_id));
  const auto heat = attention_heatmap(ckpt.model.online, ckpt.meta.encoder, fcs, a.layer);
  ensure_dir(a.out);
  const auto path = a.out / "attention.csv";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < heat.rows(); ++i) {
    for (Eigen::Index j = 0; j < heat.cols(); ++j) out << (j ? "," : "") << heat(i, j);
    out << '\n';
  }
  out.close();
  const char* layer = a.layer == LayerSelect::first ? "first" : a.layer == LayerSelect::last ? "last" : "mean";
  write_run_manifest(a.out, "attn",
                     {{"checkpoint", a.checkpoint.string()}, {"manifest", a.manifest.string()}, {"layer", layer}},
                     {{"encoder", to_json(ckpt.meta.encoder)}}, 0, {path});
  return path;
}

nn::GradCheckResult model_grad_check(const RunConfig& cfg, std::uint64_t seed, double h) {
  cfg.encoder.validate();
  SynthSpec spec = default_two_class_spec(2, cfg.encoder.v_rois, 24, 0.1, seed);
  spec.block_partition.assign(cfg.encoder.v_rois, 0);
  for (std::size_t i = 0; i < cfg.encoder.v_rois; ++i) spec.block_partition[i] = i * 2 / cfg.encoder.v_rois;
  spec.class_effects = {{}, {BlockEffect{0, 1, 0.2}}};
  const auto cohort = generate_cohort(spec);
  std::vector<RealMatrix> series;
  for (const auto& s : cohort) series.push_back(normalize_timeseries(RealMatrix(s.data.cast<double>())).data);
  std::vector<PretrainSample> batch;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    batch.push_back({&series[i], cohort[i].subject_id, derive_seed(seed, cohort[i].subject_id, 0)});

  auto model = init_model<double>(cfg.encoder, seed, cfg.train.init_std);
  const SslOptions options = cfg.train.ssl_options();
  auto params = model.trainable();
  return nn::grad_check([&] { return ssl_objective(model, batch, options).total; }, params, h);
}

nn::GradCheckResult run_gradcheck(const GradcheckArgs& a) {
  if (a.precision != 64) throw ParameterError("gradcheck supports --precision 64 only");
  RunConfig cfg;
  if (a.config) {
    cfg = load_run_config(*a.config);
  } else {
    cfg.encoder = EncoderConfig{8, 2, 2, 16, 4, 0.25};
    cfg.train.init_std = 0.2;
  }
  return model_grad_check(cfg, a.seed);
}

}  // namespace brainmass
