#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "brainmass/errors.hpp"
#include "brainmass/pipeline.hpp"

using namespace brainmass;

namespace {

std::size_t g_threads = 1;

void print_eval(const EvalReport& r) {
  auto show = [](const char* name, const MetricSummary& s) {
    std::cout << name << ": ";
    if (s.mean)
      std::cout << *s.mean << " +/- " << *s.std << '\n';
    else
      std::cout << "undefined\n";
  };
  show("accuracy", r.accuracy);
  show("sensitivity", r.sensitivity);
  show("specificity", r.specificity);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BrainMass: self-supervised pretraining for functional brain networks", "brainmass"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", g_threads, "Worker threads for embedding extraction")->capture_default_str();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic cohort (manifest + scans)");
  c_synth->add_option("--subjects", synth.subjects, "Number of subjects")->capture_default_str();
  c_synth->add_option("--rois", synth.rois, "ROIs per scan (V)")->capture_default_str();
  c_synth->add_option("--timepoints", synth.timepoints, "Timepoints per scan (T)")->capture_default_str();
  c_synth->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  c_synth->add_option("--effect", synth.effect, "Class effect on the planted block correlations")->capture_default_str();
  c_synth->add_option("--noise", synth.noise, "Observation noise sigma")->capture_default_str();
  c_synth->add_flag("--binary", synth.binary, "Write .bts scans instead of CSV");
  c_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  AugmentArgs augment;
  auto* c_aug = app.add_subcommand("augment", "Write pseudo-FC views of one scan");
  c_aug->add_option("--scan", augment.scan, "Scan file (.csv or .bts)")->required();
  c_aug->add_option("--drop-rate", augment.drop_rate, "Fraction of timepoints dropped per view")->capture_default_str();
  c_aug->add_option("--views", augment.views, "Number of views")->capture_default_str();
  c_aug->add_option("--seed", augment.seed, "Random seed")->capture_default_str();
  c_aug->add_option("--out", augment.out, "Output directory")->required();

  PretrainArgs pre;
  std::string pre_config, pre_ablate;
  std::uint64_t pre_seed = 0;
  auto* c_pre = app.add_subcommand("pretrain", "Self-supervised pretraining; writes checkpoint.bin and loss_curve.csv");
  c_pre->add_option("--manifest", pre.manifest, "Cohort manifest (TSV)")->required();
  c_pre->add_option("--config", pre_config, "Run config JSON (encoder + train); flags override it");
  auto* o_seed = c_pre->add_option("--seed", pre_seed, "Random seed (overrides train.seed)");
  auto* o_ablate = c_pre->add_option("--ablate", pre_ablate, "Disable objective terms: latent,mrm_cls,mrm_rec");
  c_pre->add_flag("--deterministic", pre.deterministic, "Force serial, bitwise-reproducible training");
  c_pre->add_flag("--verbose", pre.verbose, "Print per-epoch losses to stderr");
  c_pre->add_option("--out", pre.out, "Output directory")->required();

  EmbedArgs embed;
  auto* c_embed = app.add_subcommand("embed", "Extract frozen-encoder embeddings; writes embeddings.csv");
  c_embed->add_option("--ckpt", embed.checkpoint, "Checkpoint file")->required();
  c_embed->add_option("--manifest", embed.manifest, "Cohort manifest (TSV)")->required();
  c_embed->add_option("--out", embed.out, "Output directory")->required();

  ProbeArgs probe;
  auto* c_probe = app.add_subcommand("probe", "Linear SVM probe; writes metrics.json and classifier.json");
  c_probe->add_option("--embeddings", probe.embeddings, "Embeddings CSV")->required();
  c_probe->add_option("--repeats", probe.repeats, "Resampled val/test repeats")->capture_default_str();
  c_probe->add_option("--seed", probe.seed, "Random seed")->capture_default_str();
  c_probe->add_option("--out", probe.out, "Output directory")->required();

  EnsembleArgs ens;
  std::string ens_mode = "zero";
  auto* c_ens = app.add_subcommand("ensemble", "Zero- or few-shot ensemble of trained classifiers");
  c_ens->add_option("--classifiers", ens.classifiers, "Directory of classifier JSON files")->required();
  c_ens->add_option("--embeddings", ens.embeddings, "Embeddings CSV of the target cohort")->required();
  c_ens->add_option("--mode", ens_mode, "zero or few")->check(CLI::IsMember({"zero", "few"}))->capture_default_str();
  c_ens->add_option("--support-frac", ens.support_frac, "Labeled support fraction for few-shot weighting")
      ->capture_default_str();
  c_ens->add_option("--seed", ens.seed, "Random seed")->capture_default_str();
  c_ens->add_option("--out", ens.out, "Output directory")->required();

  AttnArgs attn;
  std::string attn_layer = "mean";
  auto* c_attn = app.add_subcommand("attn", "Export the cohort-averaged attention heatmap; writes attention.csv");
  c_attn->add_option("--ckpt", attn.checkpoint, "Checkpoint file")->required();
  c_attn->add_option("--manifest", attn.manifest, "Cohort manifest (TSV)")->required();
  c_attn->add_option("--layer", attn_layer, "first, last or mean")
      ->check(CLI::IsMember({"first", "last", "mean"}))
      ->capture_default_str();
  c_attn->add_option("--out", attn.out, "Output directory")->required();

  GradcheckArgs gc;
  std::string gc_config;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
  c_gc->add_option("--config", gc_config, "Run config JSON (default: built-in V=8 tiny model)");
  c_gc->add_option("--precision", gc.precision, "Floating-point bits")->check(CLI::IsMember({64}))->capture_default_str();
  c_gc->add_option("--seed", gc.seed, "Random seed")->capture_default_str();

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    const auto subs = app.get_subcommands([&](CLI::App* sub) { return sub->get_name() == name; });
    if (subs.empty()) {
      std::cerr << "unknown subcommand '" << name << "'\n" << app.help();
      return 1;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return 1;
  }

  try {
    if (c_synth->parsed()) {
      std::cout << run_synth(synth).string() << '\n';
    } else if (c_aug->parsed()) {
      for (const auto& p : run_augment(augment)) std::cout << p.string() << '\n';
    } else if (c_pre->parsed()) {
      if (!pre_config.empty()) pre.config = pre_config;
      if (o_seed->count()) pre.seed = pre_seed;
      if (o_ablate->count()) pre.ablate = pre_ablate;
      const auto run = run_pretrain(pre);
      std::cout << "best epoch " << run.result.best_epoch << " loss " << run.result.best_loss << '\n'
                << "checkpoint " << run.checkpoint.string() << " digest " << std::hex << run.digest << std::dec << '\n';
    } else if (c_embed->parsed()) {
      embed.threads = g_threads;
      std::cout << run_embed(embed).string() << '\n';
    } else if (c_probe->parsed()) {
      print_eval(run_probe(probe));
    } else if (c_ens->parsed()) {
      ens.mode = parse_ensemble_mode(ens_mode);
      const auto r = run_ensemble(ens);
      std::cout << "accuracy " << r.metrics.accuracy.value_or(0.0) << " (zero-shot "
                << r.zero_shot_metrics.accuracy.value_or(0.0) << ")\n";
    } else if (c_attn->parsed()) {
      attn.layer = parse_layer_select(attn_layer);
      std::cout << run_attn(attn).string() << '\n';
    } else if (c_gc->parsed()) {
      if (!gc_config.empty()) gc.config = gc_config;
      const auto r = run_gradcheck(gc);
      std::cout << "max relative error " << r.max_rel_error << " over " << r.checked << " entries (worst "
                << r.worst_parameter << "[" << r.worst_index << "])\n";
      if (!(r.max_rel_error < 1e-3)) {
        std::cerr << "gradient check failed\n";
        return 3;
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
