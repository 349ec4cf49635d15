#include "nnm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nnm/errors.hpp"
#include "nnm/json_util.hpp"
#include "nnm/ops.hpp"

namespace nnm {

namespace fs = std::filesystem;

namespace {

// stream tags
constexpr std::uint64_t kInit = 0x696e6974, kShuffle = 0x73687566, kAug = 0x61756721, kMix = 0x6d697821,
                        kDrop = 0x64726f70, kFold = 0x666f6c64, kPreview = 0x70726576;

std::string resolve(const std::string& path, const std::string& base) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

std::string dir_of(const std::string& path) {
  const auto p = fs::path(path).parent_path();
  return p.empty() ? "." : p.string();
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::error_code ec;
  fs::create_directories(dir_of(path), ec);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw DataError("write failed for " + path);
  }
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp + ": " + ec.message());
}

nlohmann::json norm_to_json(const NormStats& n) { return {{"mean", n.mean}, {"std", n.std}}; }

NormStats norm_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"mean", "std"}, where);
  NormStats n;
  read_opt(j, "mean", n.mean, where);
  read_opt(j, "std", n.std, where);
  n.validate();
  return n;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void RunConfig::validate() const {
  model.validate();
  aug.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  Schedule s = schedule;
  s.total_epochs = epochs;
  s.validate();
  if (task == Task::binary && model.num_classes != 2) throw ConfigError("binary task needs model.num_classes = 2");
  if (norm) norm->validate();
  if (!(hyper.beta1 >= 0 && hyper.beta1 < 1 && hyper.beta2 >= 0 && hyper.beta2 < 1 && hyper.eps > 0))
    throw ConfigError("optimizer betas must lie in [0,1) and eps > 0");
  if (hyper.weight_decay < 0 || hyper.delta < 0 || hyper.wd_ratio < 0 || hyper.momentum < 0)
    throw ConfigError("optimizer hyperparameters must be non-negative");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = {
      {"model", model.to_json()},
      {"aug", aug.to_json()},
      {"optimizer",
       {{"name", to_string(optimizer)},
        {"beta1", hyper.beta1},
        {"beta2", hyper.beta2},
        {"eps", hyper.eps},
        {"weight_decay", hyper.weight_decay},
        {"delta", hyper.delta},
        {"wd_ratio", hyper.wd_ratio},
        {"momentum", hyper.momentum},
        {"nesterov", hyper.nesterov}}},
      {"schedule",
       {{"base_lr", schedule.base_lr}, {"warmup_epochs", schedule.warmup_epochs}, {"min_lr", schedule.min_lr}}},
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"eval_every", eval_every},
      {"seed", seed},
      {"image_size", image_size},
      {"task", to_string(task)},
      {"binary_threshold", binary_threshold},
      {"deterministic", deterministic},
      {"data",
       {{"train_manifest", train_manifest},
        {"train_root", train_root},
        {"eval_manifest", eval_manifest},
        {"eval_root", eval_root}}},
      {"out_dir", out_dir}};
  if (norm) j["norm"] = norm_to_json(*norm);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::string& base_dir) {
  const std::string w = "config";
  reject_unknown_keys(j,
                      {"model", "aug", "optimizer", "schedule", "batch_size", "epochs", "eval_every", "seed",
                       "image_size", "task", "binary_threshold", "deterministic", "data", "out_dir", "norm"},
                      w);
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  else c.model = default_model_config("mbv2", c.model.num_classes);
  if (j.contains("aug")) c.aug = AugPolicy::from_json(j.at("aug"));
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    const std::string ow = w + ".optimizer";
    reject_unknown_keys(o, {"name", "beta1", "beta2", "eps", "weight_decay", "delta", "wd_ratio", "momentum", "nesterov"},
                        ow);
    std::string name = to_string(c.optimizer);
    read_opt(o, "name", name, ow);
    c.optimizer = parse_optimizer(name);
    read_opt(o, "beta1", c.hyper.beta1, ow);
    read_opt(o, "beta2", c.hyper.beta2, ow);
    read_opt(o, "eps", c.hyper.eps, ow);
    read_opt(o, "weight_decay", c.hyper.weight_decay, ow);
    read_opt(o, "delta", c.hyper.delta, ow);
    read_opt(o, "wd_ratio", c.hyper.wd_ratio, ow);
    read_opt(o, "momentum", c.hyper.momentum, ow);
    read_opt(o, "nesterov", c.hyper.nesterov, ow);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    const std::string sw = w + ".schedule";
    reject_unknown_keys(s, {"base_lr", "warmup_epochs", "min_lr"}, sw);
    read_opt(s, "base_lr", c.schedule.base_lr, sw);
    read_opt(s, "warmup_epochs", c.schedule.warmup_epochs, sw);
    read_opt(s, "min_lr", c.schedule.min_lr, sw);
  }
  read_opt(j, "batch_size", c.batch_size, w);
  read_opt(j, "epochs", c.epochs, w);
  read_opt(j, "eval_every", c.eval_every, w);
  read_opt(j, "seed", c.seed, w);
  read_opt(j, "image_size", c.image_size, w);
  std::string task = to_string(c.task);
  read_opt(j, "task", task, w);
  c.task = parse_task(task);
  read_opt(j, "binary_threshold", c.binary_threshold, w);
  read_opt(j, "deterministic", c.deterministic, w);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const std::string dw = w + ".data";
    reject_unknown_keys(d, {"train_manifest", "train_root", "eval_manifest", "eval_root"}, dw);
    read_opt(d, "train_manifest", c.train_manifest, dw);
    read_opt(d, "train_root", c.train_root, dw);
    read_opt(d, "eval_manifest", c.eval_manifest, dw);
    read_opt(d, "eval_root", c.eval_root, dw);
  }
  read_opt(j, "out_dir", c.out_dir, w);
  if (j.contains("norm")) c.norm = norm_from_json(j.at("norm"), w + ".norm");
  c.train_manifest = resolve(c.train_manifest, base_dir);
  c.train_root = resolve(c.train_root, base_dir);
  c.eval_manifest = resolve(c.eval_manifest, base_dir);
  c.eval_root = resolve(c.eval_root, base_dir);
  c.out_dir = resolve(c.out_dir, base_dir);
  c.schedule.total_epochs = c.epochs;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j, dir_of(path));
}

// ---- data ---------------------------------------------------------------------------

Dataset load_dataset(const Manifest& manifest, std::size_t side) {
  Dataset d{manifest, {}};
  d.images.reserve(manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    d.images.push_back(resize_bilinear(read_image(manifest.path_of(i)), side, side));
  return d;
}

NormStats dataset_norm_stats(const Dataset& data) {
  if (data.images.empty()) throw DataError("cannot compute normalisation stats of an empty dataset");
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& img : data.images) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < img.plane(); ++p) {
        const double v = img.data[c * img.plane() + p];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += double(img.plane());
  }
  NormStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    s.mean[c] = float(mean);
    s.std[c] = float(std::max(std::sqrt(std::max(sq[c] / count - mean * mean, 0.0)), 1e-3));
  }
  return s;
}

namespace {

// Labels checked against K; binary tasks relabel grades first.
Manifest prepare_manifest(Manifest m, const RunConfig& c) {
  if (c.task == Task::binary) m = relabel_binary(m, c.binary_threshold);
  const auto k = c.model.num_classes;
  for (const auto& r : m.records)
    if (std::size_t(r.label) >= k)
      throw CompatibilityError("label " + std::to_string(r.label) + " of " + r.filename + " does not fit a " +
                               std::to_string(k) + "-class model");
  m.classes = k;
  return m;
}

Manifest load_for(const std::string& csv, const std::string& root, const RunConfig& c) {
  if (csv.empty()) throw ConfigError("config.data.train_manifest is required");
  return prepare_manifest(load_manifest(csv, root.empty() ? dir_of(csv) : root), c);
}

Tensor<float> to_batch(const std::vector<Image>& images, const NormStats& norm) {
  const std::size_t h = images.front().height, w = images.front().width;
  Tensor<float> x(Shape{images.size(), 3, h, w});
  auto d = x.data();
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < images.size(); ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        d[(n * 3 + c) * plane + i] = (images[n].data[c * plane + i] - norm.mean[c]) / norm.std[c];
  return x;
}

Tensor<float> to_targets(const std::vector<std::vector<double>>& soft, std::size_t classes) {
  Tensor<float> t(Shape{soft.size(), classes});
  auto d = t.data();
  for (std::size_t n = 0; n < soft.size(); ++n)
    for (std::size_t k = 0; k < classes; ++k) d[n * classes + k] = float(soft[n][k]);
  return t;
}

void check_model_input(const ModelConfig& m, std::size_t size) {
  // stem and every stride-2 stage halve the side; keep at least 1 pixel
  std::size_t side = size;
  auto halve = [&] { side = (side + 1) / 2; };
  halve();
  for (const auto& b : m.blocks)
    if (b.first_stride == 2) halve();
  if (side < 1) throw ConfigError("image_size too small for the model");
}

double score_of(const MetricsReport& r) { return r.selection_score().value_or(r.acc); }

Checkpoint last_state(Model<float>& model, Optimizer<float>& opt, const RunConfig& cfg, const TrainLog& log,
                      int epoch) {
  Checkpoint ck = model_state(model);
  auto& params = opt.params();
  auto& state = opt.state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& dims = params[i].tensor.dims();
    if (!state[i].m.empty()) ck.tensors.emplace_back("optim.m." + params[i].name, Tensor<float>(dims, state[i].m));
    if (!state[i].v.empty()) ck.tensors.emplace_back("optim.v." + params[i].name, Tensor<float>(dims, state[i].v));
  }
  ck.meta["kind"] = "last";
  ck.meta["run_config"] = cfg.to_json();
  ck.meta["seed"] = cfg.seed;
  ck.meta["epoch"] = epoch;
  ck.meta["steps"] = opt.steps();
  ck.meta["log"] = log.to_json();
  return ck;
}

nlohmann::json comparable(nlohmann::json j) {
  j.erase("out_dir");
  return j;
}

}  // namespace

// ---- logs ---------------------------------------------------------------------------

nlohmann::json EpochLog::to_json() const {
  nlohmann::json j = {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}};
  if (eval) j["eval"] = eval->to_json();
  return j;
}

EpochLog EpochLog::from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<int>();
  e.lr = j.at("lr").get<double>();
  e.train_loss = j.at("train_loss").get<double>();
  if (j.contains("eval")) e.eval = MetricsReport::from_json(j.at("eval"));
  return e;
}

void TrainLog::append(EpochLog entry) {
  if (!epochs.empty() && entry.epoch <= epochs.back().epoch)
    throw ContractError("train log epochs must increase strictly");
  epochs.push_back(std::move(entry));
}

nlohmann::json TrainLog::to_json() const {
  nlohmann::json j = {{"config", config},           {"best_epoch", best_epoch}, {"initial_loss", initial_loss},
                      {"parameters", parameters}, {"epochs", nlohmann::json::array()}};
  for (const auto& e : epochs) j["epochs"].push_back(e.to_json());
  if (best_score) j["best_score"] = *best_score;
  if (final_report) j["final_report"] = final_report->to_json();
  return j;
}

TrainLog TrainLog::from_json(const nlohmann::json& j) {
  TrainLog log;
  log.config = j.at("config");
  log.best_epoch = j.at("best_epoch").get<int>();
  log.initial_loss = j.at("initial_loss").get<double>();
  log.parameters = j.at("parameters").get<std::size_t>();
  for (const auto& e : j.at("epochs")) log.epochs.push_back(EpochLog::from_json(e));
  if (j.contains("best_score")) log.best_score = j.at("best_score").get<double>();
  if (j.contains("final_report")) log.final_report = MetricsReport::from_json(j.at("final_report"));
  return log;
}

// ---- evaluation -------------------------------------------------------------------------

MetricsReport evaluate_model(Model<float>& model, const Dataset& data, const NormStats& norm, Task task,
                             std::size_t batch_size) {
  NoGradGuard no_grad;
  EvalBuffer buffer(model.config().num_classes);
  Rng unused(0);
  const std::size_t k = model.config().num_classes;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<Image> images(data.images.begin() + std::ptrdiff_t(start), data.images.begin() + std::ptrdiff_t(end));
    const auto logits = model.forward(to_batch(images, norm), Mode::eval, unused);
    const auto probs = ops::softmax_rows<float>(logits.data(), k);
    for (std::size_t n = 0; n < images.size(); ++n)
      buffer.append(data.label(start + n), std::vector<double>(probs.begin() + std::ptrdiff_t(n * k),
                                                               probs.begin() + std::ptrdiff_t((n + 1) * k)));
  }
  return evaluate(buffer, task);
}

double batch_loss(Model<float>& model, const std::vector<Image>& images, const std::vector<int>& labels,
                  const NormStats& norm, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  const auto batch = one_hot_batch(images, labels, model.config().num_classes);
  const auto logits = model.forward(to_batch(batch.images, norm), Mode::train, rng);
  return double(ops::softmax_cross_entropy(logits, to_targets(batch.soft_labels, model.config().num_classes)).item());
}

// ---- training -------------------------------------------------------------------------

TrainResult train_on(const RunConfig& config_in, const Dataset& train, const Dataset& eval, const NormStats& norm,
                     const TrainOptions& options) {
  RunConfig cfg = config_in;
  cfg.schedule.total_epochs = cfg.epochs;
  cfg.norm = norm;
  cfg.validate();
  check_model_input(cfg.model, cfg.image_size);
  if (train.size() == 0) throw DataError("training set is empty");
  if (eval.size() == 0) throw DataError("evaluation set is empty");
  const std::size_t k = cfg.model.num_classes;

  auto init = Rng::derive(cfg.seed, {kInit});
  Model<float> model(cfg.model, init);
  Optimizer<float> opt(cfg.optimizer, cfg.hyper, model.parameters());

  TrainResult result;
  TrainLog& log = result.log;
  log.config = cfg.to_json();
  log.parameters = count_params(model);
  int start_epoch = 0;

  if (!options.resume.empty()) {
    const Checkpoint ck = load_checkpoint(options.resume);
    if (ck.meta.value("kind", "") != "last") throw CompatibilityError(options.resume + " is not a resumable state");
    if (comparable(ck.meta.at("run_config")) != comparable(cfg.to_json()))
      throw CompatibilityError("resume state was written by a different run config");
    load_model_state(model, ck);
    auto& params = opt.params();
    auto& state = opt.state();
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (auto [prefix, buf] : {std::pair{"optim.m.", &state[i].m}, std::pair{"optim.v.", &state[i].v}}) {
        const auto* t = ck.find(prefix + params[i].name);
        if (!t) continue;
        if (t->dims() != params[i].tensor.dims()) throw CompatibilityError("optimizer state shape mismatch");
        buf->assign(t->data().begin(), t->data().end());
      }
    }
    opt.set_steps(ck.meta.at("steps").get<std::uint64_t>());
    log = TrainLog::from_json(ck.meta.at("log"));
    start_epoch = ck.meta.at("epoch").get<int>() + 1;
    result.last = ck;
    if (log.best_epoch >= 0) {
      const auto best_path = (fs::path(dir_of(options.resume)) / "best.ckpt").string();
      if (fs::exists(best_path)) result.best = load_checkpoint(best_path);
    }
  } else {
    // initialisation sanity: one-hot first batch of the epoch-0 order, no augmentation
    std::vector<Image> imgs;
    std::vector<int> labels;
    for (std::size_t i = 0; i < std::min(cfg.batch_size, train.size()); ++i) {
      imgs.push_back(resize_bilinear(train.images[i], cfg.image_size, cfg.image_size));
      labels.push_back(train.label(i));
    }
    log.initial_loss = batch_loss(model, imgs, labels, norm, cfg.seed);
  }

  const std::string out = cfg.out_dir;
  if (options.write_files) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw DataError("cannot create " + out + ": " + ec.message());
  }

  const int last_epoch = options.stop_after >= 0 ? std::min(options.stop_after, cfg.epochs - 1) : cfg.epochs - 1;
  for (int epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_at(cfg.schedule, epoch);
    const auto order = Rng::derive(cfg.seed, {kShuffle, std::uint64_t(epoch)}).permutation(train.size());
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0, start = 0; start < order.size(); ++b, start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Image> imgs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        auto rng = Rng::derive(cfg.seed, {kAug, std::uint64_t(epoch), order[i]});
        imgs.push_back(apply_sample_augs(train.images[order[i]], cfg.aug, cfg.image_size, rng));
        labels.push_back(train.label(order[i]));
      }
      auto mix_rng = Rng::derive(cfg.seed, {kMix, std::uint64_t(epoch), b});
      const auto batch = mix_dispatch(std::move(imgs), labels, k, cfg.aug, mix_rng);
      auto drop_rng = Rng::derive(cfg.seed, {kDrop, std::uint64_t(epoch), b});
      opt.zero_grad();
      const auto logits = model.forward(to_batch(batch.images, norm), Mode::train, drop_rng);
      auto loss = ops::softmax_cross_entropy(logits, to_targets(batch.soft_labels, k));
      const double value = double(loss.item());
      if (!std::isfinite(value))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + (options.write_files ? "; last good state kept in " + out : ""));
      backward(loss);
      opt.step(entry.lr);
      loss_sum += value * double(end - start);
      seen += end - start;
    }
    entry.train_loss = loss_sum / double(seen);

    if ((epoch + 1) % cfg.eval_every == 0 || epoch == cfg.epochs - 1) {
      entry.eval = evaluate_model(model, eval, norm, cfg.task, cfg.batch_size);
      const double score = score_of(*entry.eval);
      if (!log.best_score || score > *log.best_score) {
        log.best_score = score;
        log.best_epoch = epoch;
        log.final_report = entry.eval;
        result.best = model_state(model);
        result.best.meta["kind"] = "best";
        result.best.meta["run_config"] = cfg.to_json();
        result.best.meta["seed"] = cfg.seed;
        result.best.meta["epoch"] = epoch;
        result.best.meta["report"] = entry.eval->to_json();
        if (options.write_files) save_checkpoint((fs::path(out) / "best.ckpt").string(), result.best);
      }
    }
    log.append(entry);
    result.last = last_state(model, opt, cfg, log, epoch);
    if (options.write_files) {
      save_checkpoint((fs::path(out) / "last.ckpt").string(), result.last);
      write_json((fs::path(out) / "train_log.json").string(), log.to_json());
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  return result;
}

TrainResult cmd_train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const std::size_t big = std::max(config.image_size, std::size_t(std::lround(double(config.image_size) * config.aug.resize_ratio)));
  const Manifest train_m = load_for(config.train_manifest, config.train_root, config);
  const Dataset train = load_dataset(train_m, big);
  const Dataset eval = config.eval_manifest.empty()
                           ? load_dataset(train_m, config.image_size)
                           : load_dataset(load_for(config.eval_manifest, config.eval_root, config), config.image_size);
  const NormStats norm = config.norm ? *config.norm : dataset_norm_stats(load_dataset(train_m, config.image_size));
  return train_on(config, train, eval, norm, options);
}

// ---- eval command ----------------------------------------------------------------------

MetricsReport eval_checkpoint(const Checkpoint& ck, const Manifest& manifest) {
  if (!ck.meta.contains("run_config")) throw CompatibilityError("checkpoint carries no run config");
  const RunConfig cfg = RunConfig::from_json(ck.meta.at("run_config"));
  if (!cfg.norm) throw CompatibilityError("checkpoint carries no normalisation stats");
  Rng init(0);
  Model<float> model(cfg.model, init);
  load_model_state(model, ck);
  const Dataset data = load_dataset(prepare_manifest(manifest, cfg), cfg.image_size);
  return evaluate_model(model, data, *cfg.norm, cfg.task, cfg.batch_size);
}

MetricsReport cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& root) {
  return eval_checkpoint(load_checkpoint(checkpoint), load_manifest(manifest, root.empty() ? dir_of(manifest) : root));
}

// ---- cross-validation ----------------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, double>> report_values(const MetricsReport& r) {
  std::vector<std::pair<std::string, double>> v{{"acc", r.acc}};
  if (r.auc.value) v.emplace_back("auc", *r.auc.value);
  if (r.kappa.value) v.emplace_back("kappa_quadratic", *r.kappa.value);
  v.emplace_back("f1_macro", r.f1_macro);
  v.emplace_back("f1_weighted", r.f1_weighted);
  return v;
}

}  // namespace

CrossvalReport crossval_on(const RunConfig& config, const Manifest& manifest_in, const FoldPlan& plan,
                           const TrainOptions& options) {
  config.validate();
  const Manifest manifest = prepare_manifest(manifest_in, config);
  if (plan.fold.size() != manifest.records.size()) throw ContractError("fold plan does not match the manifest");
  CrossvalReport rep;
  rep.k = plan.k;
  const std::size_t big = std::max(config.image_size, std::size_t(std::lround(double(config.image_size) * config.aug.resize_ratio)));
  for (std::size_t f = 0; f < plan.k; ++f) {
    FoldOutcome outcome;
    outcome.fold = int(f);
    try {
      RunConfig fc = config;
      fc.seed = Rng::derive(config.seed, {kFold, f}).next_u64();
      fc.out_dir = (fs::path(config.out_dir) / ("fold_" + std::to_string(f))).string();
      const auto train_idx = plan.complement(int(f)), eval_idx = plan.members(int(f));
      if (train_idx.empty() || eval_idx.empty()) throw DataError("fold " + std::to_string(f) + " is empty");
      const Manifest tm = manifest.subset(train_idx);
      const Dataset train = load_dataset(tm, big);
      const Dataset eval = load_dataset(manifest.subset(eval_idx), config.image_size);
      // stats from the training part only
      const NormStats norm = config.norm ? *config.norm : dataset_norm_stats(load_dataset(tm, config.image_size));
      fc.norm.reset();
      auto result = train_on(fc, train, eval, norm, options);
      outcome.report = result.log.final_report;
      if (!outcome.report) outcome.error = "no evaluation was run";
    } catch (const Error& e) {
      outcome.error = e.what();
    }
    rep.folds.push_back(std::move(outcome));
  }
  // aggregate over the folds that finished
  std::vector<std::string> names;
  for (const auto& f : rep.folds)
    if (f.report)
      for (const auto& [name, v] : report_values(*f.report))
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  for (const auto& name : names) {
    std::vector<double> xs;
    for (const auto& f : rep.folds)
      if (f.report)
        for (const auto& [n, v] : report_values(*f.report))
          if (n == name) xs.push_back(v);
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double sd = xs.size() > 1 ? std::sqrt(var / double(xs.size() - 1)) : 0.0;
    rep.aggregate.push_back({name, {mean, sd}});
  }
  if (options.write_files) write_json((fs::path(config.out_dir) / "crossval.json").string(), rep.to_json());
  return rep;
}

CrossvalReport cmd_crossval(const RunConfig& config, std::size_t k, const TrainOptions& options) {
  if (k < 2) throw ConfigError("crossval needs k >= 2");
  if (config.train_manifest.empty()) throw ConfigError("config.data.train_manifest is required");
  // raw grades: crossval_on relabels
  const Manifest m = load_manifest(config.train_manifest,
                                   config.train_root.empty() ? dir_of(config.train_manifest) : config.train_root);
  const bool pinned = std::all_of(m.records.begin(), m.records.end(), [](const Record& r) { return r.fold.has_value(); });
  FoldPlan plan;
  if (pinned) {
    plan.k = k;
    plan.seed = config.seed;
    for (const auto& r : m.records) {
      if (*r.fold >= int(k)) throw ConfigError("manifest fold " + std::to_string(*r.fold) + " outside [0,k)");
      plan.fold.push_back(*r.fold);
    }
  } else {
    plan = stratified_kfold(m, k, config.seed);
  }
  return crossval_on(config, m, plan, options);
}

std::string CrossvalReport::to_text() const {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  for (const auto& f : folds) {
    s << "fold " << f.fold << ": ";
    if (!f.report) {
      s << "FAILED (" << f.error << ")\n";
      continue;
    }
    for (const auto& [n, v] : report_values(*f.report)) s << n << " " << v << "  ";
    s << "\n";
  }
  s << "mean +- std over " << std::count_if(folds.begin(), folds.end(), [](const FoldOutcome& f) { return f.report.has_value(); })
    << "/" << k << " folds:\n";
  for (const auto& [n, ms] : aggregate) s << "  " << std::setw(12) << std::left << n << ms.first << " +- " << ms.second << "\n";
  return s.str();
}

nlohmann::json CrossvalReport::to_json() const {
  nlohmann::json j = {{"schema_version", MetricsReport::kSchemaVersion}, {"k", k}, {"folds", nlohmann::json::array()}};
  for (const auto& f : folds) {
    nlohmann::json fj = {{"fold", f.fold}};
    if (f.report) fj["report"] = f.report->to_json();
    else fj["error"] = f.error;
    j["folds"].push_back(fj);
  }
  for (const auto& [n, ms] : aggregate) j["aggregate"][n] = {{"mean", ms.first}, {"std", ms.second}};
  return j;
}

// ---- ablation -----------------------------------------------------------------------------

std::vector<AblationRow> ablation_grid(const std::string& grid) {
  if (grid == "single") {
    AblationRow base;
    base.name = "base";
    return {base};
  }
  if (grid != "table1") throw ConfigError("unknown ablation grid '" + grid + "' (expected table1 or single)");
  std::vector<AblationRow> rows;
  AblationRow r;
  r.name = "baseline";
  rows.push_back(r);
  r.ilrb = true, r.name = "+ILRB";
  rows.push_back(r);
  r.da = true, r.name = "+DA";
  rows.push_back(r);
  r.dropout = true, r.name = "+D";
  rows.push_back(r);
  r.adamp = true, r.name = "+O";
  rows.push_back(r);
  r.relu6 = true, r.name = "+AF";
  rows.push_back(r);
  return rows;
}

RunConfig apply_ablation_row(RunConfig c, const AblationRow& row) {
  c.model.block_kind = row.ilrb ? BlockKind::ilrb : BlockKind::plain_residual;
  c.aug.recipe = row.da ? Recipe::III : Recipe::I;
  c.model.dropout_mode = DropoutMode::spatial;
  for (auto& b : c.model.blocks) b.dropout_position = row.dropout ? 3 : 0;
  c.optimizer = row.adamp ? OptimizerKind::adamp : OptimizerKind::adam;
  c.model.activation = row.relu6 ? ActivationKind::relu6 : ActivationKind::silu;
  return c;
}

AblationTable cmd_ablate(const RunConfig& base, const std::string& grid, const TrainOptions& options) {
  base.validate();
  AblationTable table;
  auto rows = ablation_grid(grid);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& row = rows[i];
    RunConfig c = base;
    if (grid == "single") {
      // flags describe the base config as is
      row.ilrb = c.model.block_kind == BlockKind::ilrb;
      row.da = c.aug.recipe == Recipe::III;
      row.dropout = std::any_of(c.model.blocks.begin(), c.model.blocks.end(), [](const BlockSpec& b) { return b.dropout_position != 0; });
      row.adamp = c.optimizer == OptimizerKind::adamp;
      row.relu6 = c.model.activation == ActivationKind::relu6;
    } else {
      c = apply_ablation_row(base, row);
      c.out_dir = (fs::path(base.out_dir) / ("row_" + std::to_string(i))).string();
    }
    try {
      const auto result = cmd_train(c, options);
      if (result.log.final_report) {
        row.auc = result.log.final_report->auc.value;
        row.kappa = result.log.final_report->kappa.value;
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
    table.rows.push_back(row);
  }
  if (options.write_files) write_json((fs::path(base.out_dir) / "ablation.json").string(), table.to_json());
  return table;
}

std::string AblationTable::to_text() const {
  std::ostringstream s;
  auto mark = [](bool b) { return b ? "✓" : "✗"; };
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("   n/a");
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << std::setw(6) << 100.0 * *v;
    return o.str();
  };
  s << "row        ILRB  DA  D  O  AF     AUC   Kappa\n";
  for (const auto& r : rows) {
    s << std::left << std::setw(10) << r.name << " " << mark(r.ilrb) << "     " << mark(r.da) << "   " << mark(r.dropout)
      << "  " << mark(r.adamp) << "  " << mark(r.relu6) << "   " << num(r.auc) << "  " << num(r.kappa);
    if (!r.error.empty()) s << "  FAILED: " << r.error;
    s << "\n";
  }
  return s.str();
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json j = {{"schema_version", MetricsReport::kSchemaVersion}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) {
    nlohmann::json rj = {{"name", r.name}, {"ILRB", r.ilrb}, {"DA", r.da}, {"D", r.dropout}, {"O", r.adamp}, {"AF", r.relu6}};
    rj["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
    rj["kappa"] = r.kappa ? nlohmann::json(*r.kappa) : nlohmann::json(nullptr);
    if (!r.error.empty()) rj["error"] = r.error;
    j["rows"].push_back(rj);
  }
  return j;
}

// ---- preview -------------------------------------------------------------------------------

void augment_preview(const RunConfig& config, const std::string& image, const std::string& out, std::size_t count) {
  const std::size_t s = config.image_size, gap = 2;
  const std::size_t big = std::max(s, std::size_t(std::lround(double(s) * config.aug.resize_ratio)));
  const Image src = resize_bilinear(read_image(image), big, big);
  std::vector<Image> tiles{resize_bilinear(src, s, s)};
  for (std::size_t i = 0; i < count; ++i) {
    auto rng = Rng::derive(config.seed, {kPreview, i});
    tiles.push_back(apply_sample_augs(src, config.aug, s, rng));
  }
  Image grid(s, tiles.size() * s + (tiles.size() - 1) * gap, 1.0f);
  for (std::size_t t = 0; t < tiles.size(); ++t)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) grid.at(c, y, t * (s + gap) + x) = tiles[t].at(c, y, x);
  write_png(out, grid);
}

}  // namespace nnm
