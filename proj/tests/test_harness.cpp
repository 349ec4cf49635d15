#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "doctest.h"
#include "nnm/errors.hpp"
#include "nnm/harness.hpp"

using namespace nnm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("nnm_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny_model(std::size_t classes) {
  ModelConfig m;
  m.stem_channels = 8;
  m.head_channels = 16;
  m.num_classes = classes;
  m.se_reduction = 4;
  BlockSpec a;
  a.expansion = 1;
  a.out_channels = 8;
  BlockSpec b;
  b.out_channels = 16;
  b.first_stride = 2;
  m.blocks = {a, b};
  return m;
}

RunConfig tiny_run(const TempDir& dir, std::size_t per_class = 4) {
  SynthOptions so;
  so.per_class = per_class;
  so.image_size = 16;
  synth_generate(dir.file("data"), so);
  RunConfig c;
  c.model = tiny_model(5);
  c.batch_size = 8;
  c.epochs = 4;
  c.eval_every = 2;
  c.image_size = 16;
  c.schedule.base_lr = 0.005;
  c.schedule.warmup_epochs = 1;
  c.train_manifest = dir.file("data/manifest.csv");
  c.out_dir = dir.file("run");
  return c;
}

}  // namespace

TEST_CASE("run config") {
  TempDir dir;
  std::ofstream(dir.file("cfg.json")) << R"({
    "model": {"table": "mbv2", "num_classes": 2},
    "task": "binary", "epochs": 50,
    "schedule": {"warmup_epochs": 5},
    "aug": {"recipe": "II"},
    "data": {"train_manifest": "d/m.csv"}
  })";
  const auto c = RunConfig::load(dir.file("cfg.json"));
  CHECK(c.task == Task::binary);
  CHECK(c.schedule.total_epochs == 50);
  CHECK(c.aug.recipe == Recipe::II);
  CHECK(fs::path(c.train_manifest) == (dir.path / "d/m.csv").lexically_normal());
  const auto back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  CHECK_THROWS_AS(RunConfig::from_json({{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"optimizer", {{"name", "lamb"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schedule", {{"warmup", 3}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"task", "binary"}}), ConfigError);  // K stays 5
  CHECK_THROWS_AS(RunConfig::from_json({{"batch_size", -1}}), ConfigError);
  std::ofstream(dir.file("bad.json")) << "{ not json";
  CHECK_THROWS_AS(RunConfig::load(dir.file("bad.json")), ConfigError);
}

TEST_CASE("fresh model starts near ln K") {
  TempDir dir;
  const auto c = tiny_run(dir);
  const auto m = load_manifest(c.train_manifest, dir.file("data"));
  const auto data = load_dataset(m, 16);
  std::vector<Image> imgs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < data.size(); ++i) imgs.push_back(data.images[i]), labels.push_back(data.label(i));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto rng = Rng(seed);
    Model<float> model(c.model, rng);
    const double loss = batch_loss(model, imgs, labels, dataset_norm_stats(data), seed);
    CHECK(std::abs(loss - std::log(5.0)) <= 0.1);
  }
}

TEST_CASE("eval mode") {
  TempDir dir;
  const auto c = tiny_run(dir);
  const auto data = load_dataset(load_manifest(c.train_manifest, dir.file("data")), 16);
  const auto norm = dataset_norm_stats(data);
  Rng rng(3);
  Model<float> model(c.model, rng);
  const auto a = evaluate_model(model, data, norm, Task::multiclass);
  const auto b = evaluate_model(model, data, norm, Task::multiclass);
  CHECK(a.to_json() == b.to_json());

  // a zeroed classifier gives uniform scores; argmax falls on class 0
  for (auto& v : model.classifier.weight.data()) v = 0;
  for (auto& v : model.classifier.bias.data()) v = 0;
  const auto z = evaluate_model(model, data, norm, Task::multiclass);
  const auto counts = data.manifest.class_counts();
  const double max_prior = double(*std::max_element(counts.begin(), counts.end())) / double(data.size());
  CHECK(z.acc == doctest::Approx(max_prior).epsilon(1e-12));
}

TEST_CASE("training is deterministic and resumable") {
  TempDir dir;
  auto c = tiny_run(dir);
  c.aug.recipe = Recipe::III;
  TrainOptions quiet;
  quiet.write_files = false;
  const auto first = cmd_train(c, quiet);
  const auto second = cmd_train(c, quiet);
  CHECK(first.log.to_json().dump() == second.log.to_json().dump());
  REQUIRE(first.log.epochs.size() == 4);
  CHECK(first.log.epochs[1].eval.has_value());
  CHECK_FALSE(first.log.epochs[0].eval.has_value());
  CHECK(std::isfinite(first.log.initial_loss));
  for (std::size_t i = 0; i < first.best.tensors.size(); ++i) {
    const auto x = first.best.tensors[i].second.data(), y = second.best.tensors[i].second.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }

  SUBCASE("resume reproduces the uninterrupted run") {
    TrainOptions part;
    part.stop_after = 1;
    cmd_train(c, part);
    TrainOptions rest;
    rest.resume = dir.file("run/last.ckpt");
    const auto resumed = cmd_train(c, rest);
    CHECK(resumed.log.to_json().dump() == first.log.to_json().dump());
    const auto x = resumed.last.find("classifier.weight")->data(), y = first.last.find("classifier.weight")->data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
    // run artifacts embed the config and seed
    const auto best = load_checkpoint(dir.file("run/best.ckpt"));
    CHECK(best.meta.at("seed").get<std::uint64_t>() == c.seed);
    CHECK(best.meta.at("run_config").at("epochs") == 4);
  }
  SUBCASE("resume refuses a different config") {
    TrainOptions part;
    part.stop_after = 0;
    cmd_train(c, part);
    auto other = c;
    other.seed = 9;
    TrainOptions rest;
    rest.resume = dir.file("run/last.ckpt");
    CHECK_THROWS_AS(cmd_train(other, rest), CompatibilityError);
  }
  SUBCASE("non-finite loss aborts and keeps the last good state") {
    TrainOptions part;
    part.stop_after = 1;
    cmd_train(c, part);
    auto ck = load_checkpoint(dir.file("run/last.ckpt"));
    for (auto& [name, t] : ck.tensors)
      if (name == "classifier.bias") t.data()[0] = std::nanf("");
    save_checkpoint(dir.file("run/last.ckpt"), ck);
    const auto before = slurp(dir.file("run/last.ckpt"));
    TrainOptions rest;
    rest.resume = dir.file("run/last.ckpt");
    try {
      cmd_train(c, rest);
      FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
      CHECK(e.exit_code() == 3);
    }
    CHECK(slurp(dir.file("run/last.ckpt")) == before);
  }
}

TEST_CASE("eval command") {
  TempDir dir;
  auto c = tiny_run(dir);
  c.epochs = 2;
  c.eval_every = 1;
  cmd_train(c, {});
  const auto report = cmd_eval(dir.file("run/best.ckpt"), c.train_manifest);
  CHECK(report.samples == 20);
  CHECK(report.to_json() == cmd_eval(dir.file("run/best.ckpt"), c.train_manifest).to_json());
  std::ofstream(dir.file("data/k7.csv")) << "filename,label\nimg_0_0.png,7\n";
  CHECK_THROWS_AS(cmd_eval(dir.file("run/best.ckpt"), dir.file("data/k7.csv")), CompatibilityError);

  // binary checkpoint: kappa is left out, grades outside the model fail
  auto b = c;
  b.task = Task::binary;
  b.model.num_classes = 2;
  b.out_dir = dir.file("bin");
  cmd_train(b, {});
  const auto br = cmd_eval(dir.file("bin/best.ckpt"), c.train_manifest);
  CHECK(br.task == Task::binary);
  CHECK_FALSE(br.kappa.value.has_value());
  CHECK_FALSE(br.to_json().contains("kappa"));

  auto m2 = b;
  m2.task = Task::multiclass;
  m2.out_dir = dir.file("k2");
  // a 2-class grading model cannot score grades 2..4
  CHECK_THROWS_AS(cmd_train(m2, {}), CompatibilityError);
}

TEST_CASE("cross-validation") {
  TempDir dir;
  auto c = tiny_run(dir);
  c.epochs = 2;
  c.eval_every = 1;
  TrainOptions quiet;
  quiet.write_files = false;
  const auto rep = cmd_crossval(c, 2, quiet);
  REQUIRE(rep.folds.size() == 2);
  for (const auto& f : rep.folds) {
    CHECK(f.error.empty());
    REQUIRE(f.report.has_value());
    CHECK(f.report->samples == 10);
  }
  for (const auto& [name, ms] : rep.aggregate) {
    double sum = 0;
    for (const auto& f : rep.folds) {
      const auto j = f.report->to_json();
      sum += j.at(name).get<double>();
    }
    CHECK(ms.first == doctest::Approx(sum / 2).epsilon(1e-12));
  }
  CHECK(rep.to_json()["aggregate"].contains("kappa_quadratic"));
  CHECK_THROWS_AS(cmd_crossval(c, 1, quiet), ConfigError);
}

TEST_CASE("ablation ladder") {
  const auto rows = ablation_grid("table1");
  REQUIRE(rows.size() == 6);
  const bool pattern[6][5] = {{0, 0, 0, 0, 0}, {1, 0, 0, 0, 0}, {1, 1, 0, 0, 0},
                              {1, 1, 1, 0, 0}, {1, 1, 1, 1, 0}, {1, 1, 1, 1, 1}};
  for (int i = 0; i < 6; ++i) {
    const auto& r = rows[std::size_t(i)];
    CHECK(r.ilrb == pattern[i][0]);
    CHECK(r.da == pattern[i][1]);
    CHECK(r.dropout == pattern[i][2]);
    CHECK(r.adamp == pattern[i][3]);
    CHECK(r.relu6 == pattern[i][4]);
  }
  CHECK_THROWS_AS(ablation_grid("table9"), ConfigError);

  RunConfig base;
  base.model = tiny_model(5);
  const auto first = apply_ablation_row(base, rows[0]);
  CHECK(first.model.block_kind == BlockKind::plain_residual);
  CHECK(first.aug.recipe == Recipe::I);
  CHECK(first.optimizer == OptimizerKind::adam);
  CHECK(first.model.activation == ActivationKind::silu);
  for (const auto& b : first.model.blocks) CHECK(b.dropout_position == 0);
  const auto last = apply_ablation_row(base, rows[5]);
  CHECK(last.model.block_kind == BlockKind::ilrb);
  CHECK(last.aug.recipe == Recipe::III);
  CHECK(last.optimizer == OptimizerKind::adamp);
  CHECK(last.model.activation == ActivationKind::relu6);
  for (const auto& b : last.model.blocks) CHECK(b.dropout_position == 3);

  SUBCASE("single row equals a plain training run") {
    TempDir dir;
    auto c = tiny_run(dir);
    c.epochs = 2;
    c.eval_every = 1;
    TrainOptions quiet;
    quiet.write_files = false;
    const auto table = cmd_ablate(c, "single", quiet);
    REQUIRE(table.rows.size() == 1);
    const auto run = cmd_train(c, quiet);
    CHECK(table.rows[0].auc == run.log.final_report->auc.value);
    CHECK(table.rows[0].kappa == run.log.final_report->kappa.value);
    CHECK(table.to_text().find("✓") != std::string::npos);
  }
}

TEST_CASE("augment preview") {
  TempDir dir;
  auto c = tiny_run(dir, 1);
  augment_preview(c, dir.file("data/img_0_0.png"), dir.file("p.png"), 3);
  const auto img = read_image(dir.file("p.png"));
  CHECK(img.height == 16);
  CHECK(img.width == 4 * 16 + 3 * 2);
}
