#include "brainmass/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "brainmass/connectome.hpp"
#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"

namespace brainmass {

std::vector<double> embed_scan(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                               const ScanMatrix& data) {
  if (static_cast<std::size_t>(data.rows()) != cfg.v_rois)
    throw ValidationError("scan has V=" + std::to_string(data.rows()) + ", encoder expects " +
                          std::to_string(cfg.v_rois));
  nn::NoGradScope<float> frozen;
  const auto fc = pearson_fc(normalize_timeseries(RealMatrix(data.cast<double>())).data);
  const auto z = nn::readout(params, nn::encode(params, cfg, nn::to_tensor<float>(fc.matrix)).tokens);
  return {z.values().begin(), z.values().end()};
}

std::vector<EmbeddingRecord> extract_embeddings(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                                                const std::vector<TimeseriesScan>& scans, std::size_t threads) {
  std::vector<EmbeddingRecord> out(scans.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < scans.size(); i += stride) {
      const auto& s = scans[i];
      out[i] = EmbeddingRecord{s.subject_id, embed_scan(params, cfg, s.data), s.label, s.site, s.split};
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, scans.size()));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const std::size_t dim = records.empty() ? 0 : records.front().vector.size();
  out << "subject_id,label,site,split";
  for (std::size_t k = 0; k < dim; ++k) out << ",f" << k;
  out << '\n' << std::setprecision(17);
  for (const auto& r : records) {
    if (r.vector.size() != dim) throw ValidationError("embedding records differ in length");
    out << r.subject_id << ',' << r.label << ',' << r.site << ',' << to_string(r.split);
    for (double x : r.vector) out << ',' << x;
    out << '\n';
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::vector<EmbeddingRecord> read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty embeddings file");
  auto fields_of = [](const std::string& l) {
    std::vector<std::string> f;
    std::stringstream ss(l);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (!l.empty() && l.back() == ',') f.emplace_back();
    return f;
  };
  const auto header = fields_of(line);
  if (header.size() < 4 || header[0] != "subject_id" || header[1] != "label" || header[2] != "site" ||
      header[3] != "split")
    throw FormatError(path.string() + ": header must start with subject_id,label,site,split");
  const std::size_t dim = header.size() - 4;
  for (std::size_t k = 0; k < dim; ++k)
    if (header[4 + k] != "f" + std::to_string(k)) throw FormatError(path.string() + ": unexpected column '" + header[4 + k] + "'");

  std::vector<EmbeddingRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = fields_of(line);
    if (f.size() != header.size())
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                        " fields, expected " + std::to_string(header.size()));
    EmbeddingRecord r;
    r.subject_id = f[0];
    try {
      r.label = std::stoi(f[1]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad label on line " + std::to_string(line_no));
    }
    r.site = f[2];
    r.split = parse_split(f[3]);
    r.vector.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      const auto& s = f[4 + k];
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), r.vector[k]);
      if (ec != std::errc() || ptr != s.data() + s.size())
        throw FormatError(path.string() + ": bad value '" + s + "' on line " + std::to_string(line_no));
      if (!std::isfinite(r.vector[k]))
        throw ValidationError(path.string() + ": non-finite feature on line " + std::to_string(line_no));
    }
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

using CellKey = std::pair<std::string, int>;

// Groups items by cell and distributes each cell across `fractions.size()`
// groups; each cell is within one record of its target counts and the
// rounding carry keeps the totals close. Cells smaller than `min_cell`
// go wholly to group 0.
std::vector<std::size_t> assign_groups(const std::vector<CellKey>& keys, const std::vector<double>& fractions,
                                       std::uint64_t seed, std::size_t min_cell) {
  std::map<CellKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < keys.size(); ++i) cells[keys[i]].push_back(i);

  std::vector<std::size_t> group(keys.size(), 0);
  std::mt19937_64 rng(mix_seed(seed));
  const std::size_t g = fractions.size();
  std::vector<std::size_t> assigned(g, 0);
  std::vector<double> cum_target(g, 0.0);
  for (auto& [key, members] : cells) {
    std::shuffle(members.begin(), members.end(), rng);
    if (members.size() < min_cell) {
      warn("stratification cell (site '" + key.first + "', label " + std::to_string(key.second) + ") has only " +
           std::to_string(members.size()) + " record(s); assigned wholly to the first split");
      continue;
    }
    // floor within the cell, leftovers to the groups furthest behind globally
    std::vector<std::size_t> take(g, 0);
    std::size_t used = 0;
    for (std::size_t k = 0; k < g; ++k) {
      cum_target[k] += fractions[k] * static_cast<double>(members.size());
      take[k] = static_cast<std::size_t>(std::floor(fractions[k] * static_cast<double>(members.size()) + 1e-9));
      used += take[k];
    }
    std::vector<std::size_t> rank(g);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t x, std::size_t y) {
      const double dx = cum_target[x] - static_cast<double>(assigned[x] + take[x]);
      const double dy = cum_target[y] - static_cast<double>(assigned[y] + take[y]);
      return dx > dy + 1e-9;
    });
    for (std::size_t r = 0; used < members.size(); ++r, ++used) ++take[rank[r % g]];
    for (std::size_t k = 0; k < g; ++k) assigned[k] += take[k];
    std::size_t pos = 0;
    for (std::size_t k = 0; k < g; ++k)
      for (std::size_t n = 0; n < take[k]; ++n) group[members[pos++]] = k;
  }
  return group;
}

std::vector<std::vector<double>> feature_rows(std::span<const EmbeddingRecord> records) {
  std::vector<std::vector<double>> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(r.vector);
  return rows;
}

std::vector<int> labels_of(std::span<const EmbeddingRecord> records) {
  std::vector<int> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(r.label);
  return y;
}

double accuracy_on(const SvmModel& m, std::span<const EmbeddingRecord> records) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) correct += m.predict(r.vector) == r.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

MetricSummary summarize(const std::vector<std::optional<double>>& values) {
  MetricSummary s;
  s.values = values;
  std::vector<double> defined;
  for (const auto& v : values)
    if (v) defined.push_back(*v);
  if (defined.empty()) return s;
  double mean = 0.0;
  for (double v : defined) mean += v;
  mean /= static_cast<double>(defined.size());
  double var = 0.0;
  for (double v : defined) var += (v - mean) * (v - mean);
  s.mean = mean;
  s.std = std::sqrt(var / static_cast<double>(defined.size()));
  return s;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json to_json(const MetricSummary& s) {
  nlohmann::json values = nlohmann::json::array();
  for (const auto& v : s.values) values.push_back(optional_json(v));
  return {{"mean", optional_json(s.mean)}, {"std", optional_json(s.std)}, {"values", values}};
}

}  // namespace

std::vector<Split> stratified_split(std::span<const EmbeddingRecord> records, const SplitFractions& fr,
                                    std::uint64_t seed) {
  if (fr.train < 0 || fr.val < 0 || fr.test < 0 || std::abs(fr.train + fr.val + fr.test - 1.0) > 1e-9)
    throw ParameterError("split fractions must be non-negative and sum to 1");
  std::vector<CellKey> keys;
  keys.reserve(records.size());
  for (const auto& r : records) keys.emplace_back(r.site, r.label);
  const auto groups = assign_groups(keys, {fr.train, fr.val, fr.test}, seed, 3);
  static constexpr Split kOrder[] = {Split::train, Split::val, Split::test};
  std::vector<Split> out;
  out.reserve(groups.size());
  for (auto g : groups) out.push_back(kOrder[g]);
  return out;
}

Standardizer Standardizer::fit(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw ParameterError("cannot standardize an empty set");
  const std::size_t d = rows.front().size();
  Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  for (const auto& r : rows) {
    if (r.size() != d) throw ShapeError("feature rows differ in length");
    for (std::size_t k = 0; k < d; ++k) s.mean[k] += r[k];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  std::vector<double> var(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < d; ++k) var[k] += (r[k] - s.mean[k]) * (r[k] - s.mean[k]);
  for (std::size_t k = 0; k < d; ++k) {
    const double sd = std::sqrt(var[k] / static_cast<double>(rows.size()));
    s.scale[k] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(std::span<const double> x) const {
  if (x.size() != mean.size())
    throw ShapeError("feature vector of length " + std::to_string(x.size()) + ", expected " + std::to_string(mean.size()));
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (x[k] - mean[k]) / scale[k];
  return out;
}

double SvmModel::margin(std::span<const double> x) const {
  if (!trained) throw ContractError("SVM used before training");
  const auto z = standardizer.apply(x);
  double acc = bias;
  for (std::size_t k = 0; k < z.size(); ++k) acc += weights[k] * z[k];
  return acc;
}

int SvmModel::predict(std::span<const double> x) const { return margin(x) >= 0.0 ? positive_label : negative_label; }

double SvmModel::probability(std::span<const double> x) const { return 1.0 / (1.0 + std::exp(-margin(x))); }

nlohmann::json to_json(const SvmModel& m) {
  return {{"weights", m.weights},
          {"bias", m.bias},
          {"c", m.c},
          {"negative_label", m.negative_label},
          {"positive_label", m.positive_label},
          {"feature_mean", m.standardizer.mean},
          {"feature_scale", m.standardizer.scale}};
}

SvmModel svm_model_from_json(const nlohmann::json& doc) {
  SvmModel m;
  try {
    m.weights = doc.at("weights").get<std::vector<double>>();
    m.bias = doc.at("bias").get<double>();
    m.c = doc.at("c").get<double>();
    m.negative_label = doc.at("negative_label").get<int>();
    m.positive_label = doc.at("positive_label").get<int>();
    m.standardizer.mean = doc.at("feature_mean").get<std::vector<double>>();
    m.standardizer.scale = doc.at("feature_scale").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed classifier: ") + e.what());
  }
  if (m.weights.size() != m.standardizer.mean.size() || m.weights.size() != m.standardizer.scale.size())
    throw FormatError("classifier vectors differ in length");
  for (double w : m.weights)
    if (!std::isfinite(w)) throw ValidationError("classifier has non-finite weights");
  m.trained = true;
  return m;
}

SvmModel svm_train(std::span<const std::vector<double>> features, std::span<const int> labels, double c,
                   std::uint64_t seed, const SvmOptions& options) {
  if (features.size() != labels.size()) throw ShapeError("features and labels differ in length");
  if (features.empty()) throw ParameterError("empty training set");
  if (!(c > 0.0)) throw ParameterError("SVM C must be positive");
  const auto [lo, hi] = std::minmax_element(labels.begin(), labels.end());
  if (*lo == *hi) throw ParameterError("training set contains a single class (" + std::to_string(*lo) + ")");
  for (int y : labels)
    if (y != *lo && y != *hi) throw ParameterError("SVM is binary; found more than two labels");

  SvmModel model;
  model.c = c;
  model.negative_label = *lo;
  model.positive_label = *hi;
  model.standardizer = Standardizer::fit(features);
  const std::size_t n = features.size();
  const std::size_t d = features.front().size();
  std::vector<std::vector<double>> x;
  x.reserve(n);
  for (const auto& f : features) x.push_back(model.standardizer.apply(f));
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = labels[i] == model.positive_label ? 1.0 : -1.0;

  // Objective ½||w||² + C Σ hinge ≡ (λ/2)||w||² + mean hinge with λ = 1/(C n).
  const double lambda = 1.0 / (c * static_cast<double>(n));
  std::vector<double> w(d, 0.0), w_avg(d, 0.0);
  double b = 0.0, b_avg = 0.0;
  std::size_t averaged = 0;
  const std::size_t total = options.epochs * n;
  std::size_t t = 0;
  std::mt19937_64 rng(mix_seed(seed));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto i : order) {
      ++t;
      const double eta = 1.0 / (1.0 + lambda * static_cast<double>(t));
      double score = b;
      for (std::size_t k = 0; k < d; ++k) score += w[k] * x[i][k];
      const double shrink = 1.0 - eta * lambda;
      for (auto& wk : w) wk *= shrink;
      if (y[i] * score < 1.0) {
        for (std::size_t k = 0; k < d; ++k) w[k] += eta * y[i] * x[i][k];
        b += eta * y[i];
      }
      if (2 * t > total) {
        ++averaged;
        const double a = 1.0 / static_cast<double>(averaged);
        for (std::size_t k = 0; k < d; ++k) w_avg[k] += a * (w[k] - w_avg[k]);
        b_avg += a * (b - b_avg);
      }
    }
  }
  model.weights = std::move(w_avg);
  model.bias = b_avg;
  model.trained = true;
  return model;
}

SvmModel svm_train(std::span<const EmbeddingRecord> train, double c, std::uint64_t seed, const SvmOptions& options) {
  const auto x = feature_rows(train);
  const auto y = labels_of(train);
  return svm_train(x, y, c, seed, options);
}

SvmModel svm_train_select(std::span<const EmbeddingRecord> train, std::span<const EmbeddingRecord> val,
                          std::uint64_t seed, const SvmOptions& options) {
  std::optional<SvmModel> best;
  double best_acc = -1.0;
  for (double c : kSvmGrid) {
    auto m = svm_train(train, c, seed, options);
    const double acc = val.empty() ? 0.0 : accuracy_on(m, val);
    if (acc > best_acc) {
      best_acc = acc;
      best = std::move(m);
    }
  }
  return *best;
}

MetricsReport metrics(std::span<const int> predictions, std::span<const int> labels, int positive) {
  if (predictions.empty()) throw ParameterError("metrics need at least one prediction");
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  MetricsReport r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool pred = predictions[i] == positive;
    const bool truth = labels[i] == positive;
    if (pred && truth) ++r.tp;
    else if (pred && !truth) ++r.fp;
    else if (!pred && truth) ++r.fn;
    else ++r.tn;
  }
  const auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(r.tp + r.tn, predictions.size());
  r.sensitivity = ratio(r.tp, r.tp + r.fn);
  r.specificity = ratio(r.tn, r.tn + r.fp);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"accuracy", optional_json(r.accuracy)},
          {"sensitivity", optional_json(r.sensitivity)},
          {"specificity", optional_json(r.specificity)},
          {"tp", r.tp},
          {"fp", r.fp},
          {"tn", r.tn},
          {"fn", r.fn}};
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json repeats = nlohmann::json::array();
  for (std::size_t i = 0; i < report.repeats.size(); ++i) {
    auto j = to_json(report.repeats[i]);
    j["c"] = report.chosen_c[i];
    repeats.push_back(j);
  }
  return {{"accuracy", to_json(report.accuracy)},
          {"sensitivity", to_json(report.sensitivity)},
          {"specificity", to_json(report.specificity)},
          {"repeats", repeats}};
}

EvalReport repeated_eval(const std::vector<EmbeddingRecord>& all, std::size_t k, std::uint64_t seed,
                         const SplitFractions& fractions, const SvmOptions& options) {
  if (k < 1) throw ParameterError("repeats must be >= 1");
  std::vector<EmbeddingRecord> records;
  for (const auto& r : all)
    if (r.label != kUnlabeled) records.push_back(r);
  if (records.empty()) throw ParameterError("no labeled records to evaluate");

  const bool has_splits = std::any_of(records.begin(), records.end(), [](const auto& r) {
    return r.split == Split::train || r.split == Split::val || r.split == Split::test;
  });
  if (!has_splits) {
    const auto assignment = stratified_split(records, fractions, seed);
    for (std::size_t i = 0; i < records.size(); ++i) records[i].split = assignment[i];
  }

  std::vector<EmbeddingRecord> train;
  std::vector<EmbeddingRecord> pool;
  for (const auto& r : records) {
    if (r.split == Split::train) train.push_back(r);
    else if (r.split == Split::val || r.split == Split::test) pool.push_back(r);
  }
  if (pool.empty()) throw ParameterError("no validation/test records to evaluate on");
  std::vector<CellKey> pool_keys;
  for (const auto& r : pool) pool_keys.emplace_back(r.site, r.label);
  const double held = fractions.val + fractions.test;
  const std::vector<double> pool_fractions = {held > 0 ? fractions.val / held : 0.5, held > 0 ? fractions.test / held : 0.5};

  EvalReport report;
  std::vector<std::optional<double>> acc, sen, spe;
  for (std::size_t rep = 0; rep < k; ++rep) {
    const auto groups = assign_groups(pool_keys, pool_fractions, mix_seed(seed + 1 + rep), 1);
    std::vector<EmbeddingRecord> val, test;
    for (std::size_t i = 0; i < pool.size(); ++i) (groups[i] == 0 ? val : test).push_back(pool[i]);
    if (test.empty()) throw ParameterError("resampled test split is empty");
    const auto model = svm_train_select(train, val, seed, options);
    std::vector<int> pred, truth;
    for (const auto& r : test) {
      pred.push_back(model.predict(r.vector));
      truth.push_back(r.label);
    }
    const auto m = metrics(pred, truth, model.positive_label);
    if (rep == 0) report.first_model = model;
    report.repeats.push_back(m);
    report.chosen_c.push_back(model.c);
    acc.push_back(m.accuracy);
    sen.push_back(m.sensitivity);
    spe.push_back(m.specificity);
  }
  report.accuracy = summarize(acc);
  report.sensitivity = summarize(sen);
  report.specificity = summarize(spe);
  return report;
}

double ensemble_probability(std::span<const SvmModel> classifiers, std::span<const double> x,
                            std::span<const double> weights) {
  if (classifiers.empty()) throw ParameterError("ensemble needs at least one classifier");
  if (!weights.empty() && weights.size() != classifiers.size())
    throw ShapeError("ensemble weights do not match the classifier count");
  double total = 0.0, weight_sum = 0.0;
  for (std::size_t i = 0; i < classifiers.size(); ++i) {
    if (classifiers[i].weights.size() != x.size())
      throw ShapeError("classifier " + std::to_string(i) + " expects " + std::to_string(classifiers[i].weights.size()) +
                       " features, got " + std::to_string(x.size()));
    const double w = weights.empty() ? 1.0 : weights[i];
    total += w * classifiers[i].probability(x);
    weight_sum += w;
  }
  if (!(weight_sum > 0.0)) throw ParameterError("ensemble weights sum to zero");
  return total / weight_sum;
}

double ensemble_zero_shot(std::span<const SvmModel> classifiers, std::span<const double> x) {
  return ensemble_probability(classifiers, x);
}

double balanced_accuracy(const SvmModel& model, std::span<const EmbeddingRecord> support, int positive) {
  std::size_t tp = 0, pos = 0, tn = 0, neg = 0;
  for (const auto& r : support) {
    const bool predicted = model.probability(r.vector) >= 0.5;
    if (r.label == positive) {
      ++pos;
      tp += predicted ? 1 : 0;
    } else {
      ++neg;
      tn += predicted ? 0 : 1;
    }
  }
  if (pos == 0 || neg == 0) throw ParameterError("balanced accuracy needs both classes in the support set");
  return 0.5 * (static_cast<double>(tp) / static_cast<double>(pos) + static_cast<double>(tn) / static_cast<double>(neg));
}

std::vector<double> ensemble_few_shot(std::span<const SvmModel> classifiers, std::span<const EmbeddingRecord> support,
                                      int positive) {
  if (classifiers.empty()) throw ParameterError("ensemble needs at least one classifier");
  if (support.empty()) throw ParameterError("few-shot support set is empty");
  std::vector<double> ba;
  for (const auto& c : classifiers) ba.push_back(balanced_accuracy(c, support, positive));
  const std::size_t n = classifiers.size();
  const bool all_chance = std::all_of(ba.begin(), ba.end(), [](double b) { return std::abs(b - 0.5) < 1e-12; });
  const double total = std::accumulate(ba.begin(), ba.end(), 0.0);
  if (all_chance || !(total > 0.0)) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  for (auto& b : ba) b /= total;
  return ba;
}

}  // namespace brainmass
