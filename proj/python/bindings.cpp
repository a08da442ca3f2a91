#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "brainmass/connectome.hpp"
#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"
#include "brainmass/pipeline.hpp"
#include "brainmass/probe.hpp"
#include "brainmass/synth.hpp"

namespace py = pybind11;
namespace bm = brainmass;

namespace {

// JSON crosses the boundary as text; the Python side parses it.
std::string dump(const nlohmann::json& doc) { return doc.dump(); }

py::dict gradcheck_dict(const bm::nn::GradCheckResult& r) {
  py::dict d;
  d["max_rel_error"] = r.max_rel_error;
  d["checked"] = r.checked;
  d["worst_parameter"] = r.worst_parameter;
  d["worst_index"] = r.worst_index;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "brainmass native core";

  auto base = py::register_exception<bm::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<bm::ValidationError>(m, "ValidationError", base);
  py::register_exception<bm::ParameterError>(m, "ParameterError", base);
  py::register_exception<bm::ShapeError>(m, "ShapeError", base);
  py::register_exception<bm::ContractError>(m, "ContractError", base);
  py::register_exception<bm::IncompatibleError>(m, "IncompatibleError", base);
  py::register_exception<bm::FormatError>(m, "FormatError", base);
  py::register_exception<bm::IoError>(m, "IoError", base);
  py::register_exception<bm::CorruptionError>(m, "CorruptionError", base);
  py::register_exception<bm::NumericError>(m, "NumericError", base);

  m.def("version", &bm::version);

  m.def(
      "pearson_fc", [](const bm::RealMatrix& data) { return bm::pearson_fc(data).matrix; }, py::arg("data"),
      "Pearson FC of a (rois, timepoints) array.");
  m.def(
      "pfc_augment",
      [](const bm::RealMatrix& data, double drop_rate, std::uint64_t seed) {
        auto plan = bm::make_drop_plan(static_cast<std::size_t>(data.cols()), drop_rate, seed);
        auto fc = bm::pfc_augment(data, plan);
        return py::make_tuple(fc.matrix, fc.dropped_timepoints);
      },
      py::arg("data"), py::arg("drop_rate") = bm::kDefaultDropRate, py::arg("seed") = 0,
      "Pseudo-FC after dropping timepoints. Returns (matrix, dropped_columns).");
  m.def("drop_count", &bm::drop_count, py::arg("n_timepoints"), py::arg("drop_rate"));
  m.def("oracle_pearson", &bm::oracle_pearson, py::arg("data"));

  m.def(
      "synth_cohort",
      [](std::size_t subjects, std::size_t rois, std::size_t timepoints, double effect, std::uint64_t seed) {
        auto spec = bm::default_two_class_spec(subjects, rois, timepoints, effect, seed);
        py::list out;
        for (const auto& scan : bm::generate_cohort(spec)) {
          py::dict d;
          d["subject_id"] = scan.subject_id;
          d["site"] = scan.site;
          d["label"] = scan.label;
          d["data"] = bm::RealMatrix(scan.data.cast<double>());
          out.append(d);
        }
        return out;
      },
      py::arg("subjects") = 200, py::arg("rois") = 16, py::arg("timepoints") = 200, py::arg("effect") = 0.1,
      py::arg("seed") = 0);

  m.def(
      "run_synth",
      [](const std::filesystem::path& out, std::size_t subjects, std::size_t rois, std::size_t timepoints,
         double effect, double noise, std::uint64_t seed, bool binary) {
        bm::SynthArgs a;
        a.out = out;
        a.subjects = subjects;
        a.rois = rois;
        a.timepoints = timepoints;
        a.effect = effect;
        a.noise = noise;
        a.seed = seed;
        a.binary = binary;
        return bm::run_synth(a);
      },
      py::arg("out"), py::arg("subjects") = 200, py::arg("rois") = 16, py::arg("timepoints") = 200,
      py::arg("effect") = 0.1, py::arg("noise") = 0.5, py::arg("seed") = 0, py::arg("binary") = false,
      "Writes a synthetic cohort and returns the manifest path.");

  m.def(
      "run_pretrain",
      [](const std::filesystem::path& manifest, const std::filesystem::path& out,
         std::optional<std::filesystem::path> config, std::optional<std::uint64_t> seed,
         std::optional<std::string> ablate, bool deterministic) {
        bm::PretrainArgs a;
        a.manifest = manifest;
        a.out = out;
        a.config = std::move(config);
        a.seed = seed;
        a.ablate = std::move(ablate);
        a.deterministic = deterministic;
        bm::PretrainRun run;
        {
          py::gil_scoped_release release;
          run = bm::run_pretrain(a);
        }
        py::dict d;
        d["checkpoint"] = run.checkpoint;
        d["digest"] = bm::to_hex(run.digest);
        d["best_loss"] = run.result.best_loss;
        d["best_epoch"] = run.result.best_epoch;
        return d;
      },
      py::arg("manifest"), py::arg("out"), py::arg("config") = py::none(), py::arg("seed") = py::none(),
      py::arg("ablate") = py::none(), py::arg("deterministic") = false);

  m.def(
      "run_embed",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
         const std::filesystem::path& out, std::size_t threads) {
        py::gil_scoped_release release;
        return bm::run_embed({checkpoint, manifest, out, threads});
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("out"), py::arg("threads") = 1);

  m.def(
      "run_probe",
      [](const std::filesystem::path& embeddings, const std::filesystem::path& out, std::size_t repeats,
         std::uint64_t seed) {
        bm::EvalReport report;
        {
          py::gil_scoped_release release;
          report = bm::run_probe({embeddings, repeats, seed, out});
        }
        return dump(bm::to_json(report));
      },
      py::arg("embeddings"), py::arg("out"), py::arg("repeats") = 10, py::arg("seed") = 0);

  m.def(
      "run_ensemble",
      [](const std::filesystem::path& classifiers, const std::filesystem::path& embeddings,
         const std::filesystem::path& out, const std::string& mode, double support_frac, std::uint64_t seed) {
        bm::EnsembleArgs a;
        a.classifiers = classifiers;
        a.embeddings = embeddings;
        a.out = out;
        a.mode = bm::parse_ensemble_mode(mode);
        a.support_frac = support_frac;
        a.seed = seed;
        return dump(bm::to_json(bm::run_ensemble(a)));
      },
      py::arg("classifiers"), py::arg("embeddings"), py::arg("out"), py::arg("mode") = "zero",
      py::arg("support_frac") = 0.2, py::arg("seed") = 0);

  m.def(
      "metrics",
      [](const std::vector<int>& predictions, const std::vector<int>& labels, int positive_label) {
        return dump(bm::to_json(bm::metrics(predictions, labels, positive_label)));
      },
      py::arg("predictions"), py::arg("labels"), py::arg("positive_label") = 1);

  m.def(
      "gradcheck",
      [](std::optional<std::filesystem::path> config, std::uint64_t seed) {
        bm::GradcheckArgs a;
        a.config = std::move(config);
        a.seed = seed;
        return gradcheck_dict(bm::run_gradcheck(a));
      },
      py::arg("config") = py::none(), py::arg("seed") = 0);
}
