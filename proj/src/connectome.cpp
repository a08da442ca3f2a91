#include "brainmass/connectome.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include "brainmass/errors.hpp"

namespace brainmass {
namespace {

void require_timepoints(Eigen::Index t) {
  if (t < static_cast<Eigen::Index>(kMinTimepoints))
    throw ParameterError("need at least 3 timepoints, got " + std::to_string(t));
}

// A row counts as constant when its spread is at rounding level relative to
// its magnitude.
bool is_degenerate(double sum_sq, double max_abs, Eigen::Index t) {
  const double floor = 1e-12 * max_abs;
  return sum_sq <= static_cast<double>(t) * floor * floor;
}

}  // namespace

NormalizedTimeseries normalize_timeseries(const RealMatrix& data) {
  require_timepoints(data.cols());
  NormalizedTimeseries out{RealMatrix::Zero(data.rows(), data.cols()), {}};
  const auto t = data.cols();
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    double mean = 0.0;
    double max_abs = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) {
      mean += data(i, k);
      max_abs = std::max(max_abs, std::abs(data(i, k)));
    }
    mean /= static_cast<double>(t);
    double ss = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) ss += (data(i, k) - mean) * (data(i, k) - mean);
    if (is_degenerate(ss, max_abs, t)) {
      out.zero_variance_rows.push_back(static_cast<std::size_t>(i));
      continue;
    }
    const double sd = std::sqrt(ss / static_cast<double>(t));
    for (Eigen::Index k = 0; k < t; ++k) out.data(i, k) = (data(i, k) - mean) / sd;
  }
  return out;
}

Connectome pearson_fc(const RealMatrix& data, std::string source_subject) {
  require_timepoints(data.cols());
  const auto v = data.rows();
  const auto t = data.cols();
  RealMatrix centered(v, t);
  std::vector<double> ss(static_cast<std::size_t>(v), 0.0);
  std::vector<bool> degenerate(static_cast<std::size_t>(v), false);

  Connectome fc;
  fc.source_subject = std::move(source_subject);
  for (Eigen::Index i = 0; i < v; ++i) {
    double mean = 0.0;
    double max_abs = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) {
      mean += data(i, k);
      max_abs = std::max(max_abs, std::abs(data(i, k)));
    }
    mean /= static_cast<double>(t);
    double acc = 0.0;
    for (Eigen::Index k = 0; k < t; ++k) {
      centered(i, k) = data(i, k) - mean;
      acc += centered(i, k) * centered(i, k);
    }
    ss[i] = acc;
    if (is_degenerate(acc, max_abs, t)) {
      degenerate[i] = true;
      fc.zero_variance_rows.push_back(static_cast<std::size_t>(i));
    }
  }

  fc.matrix = RealMatrix::Identity(v, v);
  for (Eigen::Index i = 0; i < v; ++i) {
    for (Eigen::Index j = i + 1; j < v; ++j) {
      double r = 0.0;
      if (!degenerate[i] && !degenerate[j]) {
        double cov = 0.0;
        for (Eigen::Index k = 0; k < t; ++k) cov += centered(i, k) * centered(j, k);
        r = std::clamp(cov / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
      }
      fc.matrix(i, j) = r;
      fc.matrix(j, i) = r;
    }
  }
  if (!fc.zero_variance_rows.empty()) {
    std::string rows;
    for (auto r : fc.zero_variance_rows) rows += (rows.empty() ? "" : ",") + std::to_string(r);
    warn("zero-variance ROI rows [" + rows + "]" +
         (fc.source_subject.empty() ? std::string() : " in '" + fc.source_subject + "'") +
         "; their correlations are set to 0");
  }
  return fc;
}

std::vector<std::size_t> DropPlan::dropped_columns() const {
  std::vector<std::size_t> dropped;
  std::size_t next = 0;
  for (std::size_t c = 0; c < n_timepoints; ++c) {
    if (next < kept_columns.size() && kept_columns[next] == c) {
      ++next;
    } else {
      dropped.push_back(c);
    }
  }
  return dropped;
}

std::size_t drop_count(std::size_t n_timepoints, double drop_rate) {
  // std::nearbyint honours the default round-to-nearest-even mode.
  return static_cast<std::size_t>(std::nearbyint(drop_rate * static_cast<double>(n_timepoints)));
}

DropPlan make_drop_plan(std::size_t n_timepoints, double drop_rate, std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0))
    throw ParameterError("drop_rate must lie in [0, 1), got " + std::to_string(drop_rate));
  const std::size_t m = drop_count(n_timepoints, drop_rate);
  if (m > n_timepoints || n_timepoints - m < kMinTimepoints)
    throw ParameterError("drop_rate " + std::to_string(drop_rate) + " leaves fewer than 3 of " +
                         std::to_string(n_timepoints) + " timepoints");

  DropPlan plan{drop_rate, n_timepoints, {}, seed};
  std::vector<std::size_t> order(n_timepoints);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first m slots become the dropped set.
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_timepoints - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  plan.kept_columns.assign(order.begin() + static_cast<std::ptrdiff_t>(m), order.end());
  std::sort(plan.kept_columns.begin(), plan.kept_columns.end());
  return plan;
}

Connectome pfc_augment(const RealMatrix& data, const DropPlan& plan, std::string source_subject) {
  if (plan.n_timepoints != static_cast<std::size_t>(data.cols()))
    throw ParameterError("drop plan built for T=" + std::to_string(plan.n_timepoints) + " applied to T=" +
                         std::to_string(data.cols()));
  if (plan.kept_columns.size() < kMinTimepoints) throw ParameterError("drop plan keeps fewer than 3 timepoints");
  for (std::size_t k = 1; k < plan.kept_columns.size(); ++k)
    if (plan.kept_columns[k] <= plan.kept_columns[k - 1]) throw ParameterError("drop plan columns not strictly increasing");
  if (plan.kept_columns.back() >= plan.n_timepoints) throw ParameterError("drop plan column out of range");

  RealMatrix kept(data.rows(), static_cast<Eigen::Index>(plan.kept_columns.size()));
  for (Eigen::Index i = 0; i < data.rows(); ++i)
    for (std::size_t k = 0; k < plan.kept_columns.size(); ++k)
      kept(i, static_cast<Eigen::Index>(k)) = data(i, static_cast<Eigen::Index>(plan.kept_columns[k]));
  Connectome fc = pearson_fc(kept, std::move(source_subject));
  fc.dropped_timepoints = plan.dropped_columns();
  return fc;
}

void write_connectome_csv(const std::filesystem::path& path, const Connectome& fc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index i = 0; i < fc.matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < fc.matrix.cols(); ++j) {
      if (j > 0) out << ',';
      out << fc.matrix(i, j);
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace brainmass
