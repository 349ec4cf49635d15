#include <filesystem>
#include <cstring>
#include <fstream>

#include <unistd.h>

#include "doctest.h"
#include "nnm/model.hpp"
#include "oracles/param_count.hpp"

using namespace nnm;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.stem_channels = 8;
  c.blocks = {{1, 8, 1, 1}, {6, 16, 1, 2}};
  c.head_channels = 32;
  c.num_classes = 5;
  return c;
}

Tensor<float> random_input(Rng& rng, Shape dims) {
  Tensor<float> t(std::move(dims));
  for (auto& v : t.data()) v = float(rng.uniform(-1, 1));
  return t;
}

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / ("nnm_model_test_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("channel rounding") {
  CHECK(round_channels(16) == 16);
  CHECK(round_channels(3) == 8);
  CHECK(round_channels(20) == 24);
  CHECK(round_channels(19.9) == 16);
  CHECK(round_channels(0.5 * 24) == 16);
}

TEST_CASE("default tables") {
  const auto mb = default_table("mbv2");
  REQUIRE(mb.size() == 7);
  CHECK(mb[0].expansion == 1);
  for (std::size_t i = 1; i < mb.size(); ++i) CHECK(mb[i].expansion == 6);
  const auto rx = default_table("rexnet-lin");
  REQUIRE(rx.size() == 16);
  CHECK(rx.front().out_channels == 16);
  CHECK(rx.back().out_channels == 184);  // 180 rounds to the nearest multiple of 8
  std::size_t downsamples = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    CHECK(rx[i].expansion == (i == 0 ? 1u : 6u));
    if (i > 0) CHECK(rx[i].out_channels >= rx[i - 1].out_channels);
    downsamples += rx[i].first_stride == 2;
  }
  CHECK(downsamples == 4);
  CHECK_THROWS_AS(default_table("resnet"), ConfigError);
}

TEST_CASE("logits shape for a full-size input") {
  Rng rng(1);
  Model<float> model(default_model_config("mbv2", 5), rng);
  Rng run(2);
  auto y = model.forward(random_input(run, {1, 3, 224, 224}), Mode::eval, run);
  CHECK(y.dims() == Shape{1, 5});
}

TEST_CASE("pre-pool map is s x s for 32s inputs") {
  Rng rng(3);
  auto cfg = toy_config();
  cfg.blocks = {{1, 8, 1, 2}, {6, 16, 1, 2}, {6, 16, 1, 2}, {6, 24, 1, 2}};
  Model<float> model(cfg, rng);
  for (std::size_t s : {1u, 2u}) {
    auto h = model.features(random_input(rng, {1, 3, 32 * s, 32 * s}), Mode::eval, rng);
    CHECK(h.dim(2) == s);
    CHECK(h.dim(3) == s);
  }
}

TEST_CASE("parameter counts") {
  Rng rng(4);
  Linear<float> lin(10, 5, rng);
  CHECK(count_params(lin) == 55);

  Model<float> toy(toy_config(), rng);
  const std::size_t expected = oracle::model_params(8, {{1, 8, 1, true}, {6, 16, 2, true}}, 32, 5);
  CHECK(expected == 3461);
  CHECK(count_params(toy) == expected);

  auto no_se = toy_config();
  for (auto& b : no_se.blocks) b.se = false;
  Model<float> toy2(no_se, rng);
  CHECK(count_params(toy2) == oracle::model_params(8, {{1, 8, 1, false}, {6, 16, 2, false}}, 32, 5));

  std::size_t prev = 0;
  for (double w : {0.25, 0.5, 0.75, 1.0, 1.5}) {
    auto c = toy_config();
    c.width_multiplier = w;
    Model<float> m(c, rng);
    CHECK(count_params(m) >= prev);
    prev = count_params(m);
  }
}

TEST_CASE("plain residual stand-in has no SE and no expansion") {
  Rng rng(5);
  auto c = toy_config();
  c.block_kind = BlockKind::plain_residual;
  Model<float> m(c, rng);
  for (auto& p : m.parameters()) {
    CHECK(p.name.find(".se.") == std::string::npos);
    CHECK(p.name.find("expand") == std::string::npos);
  }
  auto y = m.forward(random_input(rng, {2, 3, 32, 32}), Mode::train, rng);
  CHECK(y.dims() == Shape{2, 5});
}

TEST_CASE("initialisation and forward are deterministic") {
  auto logits = [] {
    Rng rng(6);
    Model<float> m(toy_config(), rng);
    Rng data(7);
    auto y = m.forward(random_input(data, {2, 3, 32, 32}), Mode::train, data);
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  CHECK(logits() == logits());
}

TEST_CASE("config json round trip and strictness") {
  auto c = toy_config();
  c.activation = ActivationKind::silu;
  const auto j = c.to_json();
  const auto back = ModelConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == c.hash());
  auto bad = j;
  bad["widht_multiplier"] = 2.0;
  CHECK_THROWS_AS(ModelConfig::from_json(bad), ConfigError);
  auto neg = j;
  neg["stem_channels"] = -3;
  CHECK_THROWS_AS(ModelConfig::from_json(neg), ConfigError);
  auto stride = j;
  stride["blocks"][0]["first_stride"] = 3;
  CHECK_THROWS_AS(ModelConfig::from_json(stride), ConfigError);

  const auto tabled = ModelConfig::from_json({{"table", "rexnet-lin"}, {"dropout_position", 0}});
  CHECK(tabled.blocks.size() == 16);
  for (const auto& b : tabled.blocks) CHECK(b.dropout_position == 0);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = temp_dir();
  Rng rng(8);
  Model<float> m(toy_config(), rng);
  // give the running stats non-default values
  m.forward(random_input(rng, {2, 3, 32, 32}), Mode::train, rng);
  auto ck = model_state(m);
  ck.meta["epoch"] = 3;
  const auto path = (dir / "m.nnmn").string();
  save_checkpoint(path, ck);
  const auto loaded = load_checkpoint(path);
  REQUIRE(loaded.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(loaded.tensors[i].first == ck.tensors[i].first);
    CHECK(loaded.tensors[i].second.dims() == ck.tensors[i].second.dims());
    CHECK(std::memcmp(loaded.tensors[i].second.data().data(), ck.tensors[i].second.data().data(),
                      ck.tensors[i].second.numel() * sizeof(float)) == 0);
  }
  CHECK(loaded.meta == ck.meta);

  Rng other(9);
  Model<float> fresh(toy_config(), other);
  load_model_state(fresh, loaded);
  Rng a(10), b(10);
  auto x = random_input(a, {1, 3, 32, 32});
  (void)random_input(b, {1, 3, 32, 32});
  auto y1 = m.forward(x, Mode::eval, a);
  auto y2 = fresh.forward(x, Mode::eval, b);
  CHECK(std::vector<float>(y1.data().begin(), y1.data().end()) ==
        std::vector<float>(y2.data().begin(), y2.data().end()));

  SUBCASE("mismatched config is rejected without touching the model") {
    auto c = toy_config();
    c.num_classes = 4;
    Rng r(11);
    Model<float> other_model(c, r);
    const auto before = other_model.parameters()[0].tensor.clone();
    CHECK_THROWS_AS(load_model_state(other_model, loaded), CompatibilityError);
    CHECK(std::equal(before.data().begin(), before.data().end(),
                     other_model.parameters()[0].tensor.data().begin()));
  }
  SUBCASE("truncated and foreign files are format errors") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto cut = (dir / "cut.nnmn").string();
    std::ofstream(cut, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(cut), FormatError);
    const auto junk = (dir / "junk.nnmn").string();
    std::ofstream(junk, std::ios::binary) << "PNG not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(junk), FormatError);
    bytes[4] = 2;
    const auto ver = (dir / "ver.nnmn").string();
    std::ofstream(ver, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(ver), FormatError);
  }
  fs::remove_all(dir);
}
