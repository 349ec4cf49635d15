// nnmobile: train / eval / crossval / ablate / gradcheck / synth / augment-preview
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "nnm/errors.hpp"
#include "nnm/gradcheck.hpp"
#include "nnm/harness.hpp"

using namespace nnm;
namespace fs = std::filesystem;

namespace {

void print_epoch(const EpochLog& e) {
  std::cout << "epoch " << std::setw(4) << e.epoch << "  lr " << std::scientific << std::setprecision(3) << e.lr
            << "  loss " << std::fixed << std::setprecision(4) << e.train_loss;
  if (e.eval) {
    std::cout << "  acc " << e.eval->acc;
    if (e.eval->auc.value) std::cout << "  auc " << *e.eval->auc.value;
    if (e.eval->kappa.value) std::cout << "  kappa " << *e.eval->kappa.value;
  }
  std::cout << std::endl;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

int run(int argc, char** argv) {
  CLI::App app{"nnmobile: channel-aware MobileNet training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, resume, ckpt, manifest, root, out, grid = "table1", image;
  bool deterministic = false, quiet = false;
  std::size_t k = 10, per_class = 8, classes = 5, size = 32, count = 8;
  std::uint64_t seed = 0;
  int stop_after = -1;

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_flag("--deterministic", deterministic, "fixed-order single-threaded execution");
  train->add_option("--resume", resume, "last.ckpt to continue from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop after this epoch (0-based)");
  train->add_flag("--quiet", quiet, "no per-epoch lines");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--root", root, "image root (default: manifest directory)");
  eval->add_option("--out", out, "JSON report path (default: report.json next to the checkpoint)");

  auto* cv = app.add_subcommand("crossval", "stratified k-fold cross-validation");
  cv->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cv->add_option("--k", k, "number of folds")->check(CLI::Range(2, 1000));
  cv->add_flag("--quiet", quiet, "no per-epoch lines");

  auto* ablate = app.add_subcommand("ablate", "run the ablation ladder");
  ablate->add_option("--config", config_path, "base run config (JSON)")->required()->check(CLI::ExistingFile);
  ablate->add_option("--grid", grid, "table1 or single");
  ablate->add_flag("--quiet", quiet, "no per-epoch lines");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");

  auto* synth = app.add_subcommand("synth", "write a synthetic fundus-like dataset");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--per-class", per_class, "images per class");
  synth->add_option("--classes", classes, "number of grades");
  synth->add_option("--size", size, "image side in pixels");
  synth->add_option("--seed", seed, "generator seed");

  auto* preview = app.add_subcommand("augment-preview", "write original plus augmented views as one PNG");
  preview->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  preview->add_option("--image", image, "input image")->required()->check(CLI::ExistingFile);
  preview->add_option("--out", out, "output PNG (default: preview.png)");
  preview->add_option("--count", count, "augmented views");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  TrainOptions topt;
  if (!quiet) topt.on_epoch = print_epoch;

  if (*train) {
    RunConfig cfg = RunConfig::load(config_path);
    if (deterministic) cfg.deterministic = true;
    topt.resume = resume;
    topt.stop_after = stop_after;
    const auto result = cmd_train(cfg, topt);
    std::cout << "parameters " << result.log.parameters << "\n";
    if (result.log.final_report)
      std::cout << "best epoch " << result.log.best_epoch << "\n" << result.log.final_report->to_text();
    std::cout << "artifacts in " << cfg.out_dir << "\n";
  } else if (*eval) {
    const auto report = cmd_eval(ckpt, manifest, root);
    std::cout << report.to_text();
    const std::string path = out.empty() ? (fs::path(ckpt).parent_path() / "report.json").string() : out;
    write_text(path, report.to_json().dump(2) + "\n");
    std::cout << "report written to " << path << "\n";
  } else if (*cv) {
    const RunConfig cfg = RunConfig::load(config_path);
    const auto rep = cmd_crossval(cfg, k, topt);
    std::cout << rep.to_text();
    for (const auto& f : rep.folds)
      if (!f.report) return 2;
  } else if (*ablate) {
    const RunConfig cfg = RunConfig::load(config_path);
    const auto table = cmd_ablate(cfg, grid, topt);
    std::cout << table.to_text();
    for (const auto& r : table.rows)
      if (!r.error.empty()) return 2;
  } else if (*gc) {
    const auto results = run_gradcheck(standard_gradcheck_cases(), GradCheckOptions{});
    bool ok = true;
    for (const auto& r : results) {
      std::cout << (r.passed ? "pass " : "FAIL ") << std::left << std::setw(24) << r.op << " max rel err "
                << std::scientific << std::setprecision(2) << r.max_rel_error << "  (" << r.trials << " seeds)";
      if (!r.passed) std::cout << "  worst at " << r.worst;
      std::cout << "\n";
      ok = ok && r.passed;
    }
    return ok ? 0 : 3;
  } else if (*synth) {
    SynthOptions o;
    o.per_class = per_class;
    o.classes = classes;
    o.image_size = size;
    o.seed = seed;
    const auto m = synth_generate(out, o);
    std::cout << "wrote " << m.records.size() << " images and manifest.csv to " << out << "\n";
  } else if (*preview) {
    const RunConfig cfg = RunConfig::load(config_path);
    const std::string path = out.empty() ? "preview.png" : out;
    augment_preview(cfg, image, path, count);
    std::cout << "preview written to " << path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
