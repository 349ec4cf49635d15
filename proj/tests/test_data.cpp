#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include <unistd.h>

#include "doctest.h"
#include "nnm/data.hpp"
#include "nnm/errors.hpp"
#include "nnm/rng.hpp"

using namespace nnm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("nnm_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

Manifest fake_manifest(const std::vector<std::size_t>& per_class) {
  Manifest m;
  m.classes = per_class.size();
  for (std::size_t c = 0; c < per_class.size(); ++c)
    for (std::size_t i = 0; i < per_class[c]; ++i)
      m.records.push_back({"f" + std::to_string(c) + "_" + std::to_string(i), int(c), std::nullopt});
  return m;
}

}  // namespace

TEST_CASE("manifest loading") {
  TempDir dir;
  for (const char* f : {"a.ppm", "b.ppm", "c.ppm"}) write_ppm(dir.file(f), Image(2, 2, 0.5f));

  SUBCASE("valid file") {
    write_text(dir.file("m.csv"), "filename,label\na.ppm,0\nb.ppm,2\r\nc.ppm,1\n");
    const auto m = load_manifest(dir.file("m.csv"), dir.path.string());
    CHECK(m.records.size() == 3);
    CHECK(m.classes == 3);
    CHECK(m.records[1].filename == "b.ppm");
    const auto again = load_manifest(dir.file("m.csv"), dir.path.string());
    for (std::size_t i = 0; i < 3; ++i) CHECK(again.records[i].filename == m.records[i].filename);
  }
  SUBCASE("missing files are listed together") {
    write_text(dir.file("m.csv"), "filename,label\na.ppm,0\nx.ppm,1\ny.ppm,1\n");
    try {
      load_manifest(dir.file("m.csv"), dir.path.string());
      FAIL("expected an error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("x.ppm") != std::string::npos);
      CHECK(msg.find("y.ppm") != std::string::npos);
    }
  }
  SUBCASE("bad label names the line") {
    write_text(dir.file("m.csv"), "filename,label\na.ppm,0\nb.ppm,two\n");
    try {
      load_manifest(dir.file("m.csv"), dir.path.string());
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
  }
  SUBCASE("duplicates and headers") {
    write_text(dir.file("d.csv"), "filename,label\na.ppm,0\na.ppm,1\n");
    CHECK_THROWS_AS(load_manifest(dir.file("d.csv"), dir.path.string()), ValidationError);
    write_text(dir.file("h.csv"), "file,label\na.ppm,0\n");
    CHECK_THROWS_AS(load_manifest(dir.file("h.csv"), dir.path.string()), ValidationError);
  }
  SUBCASE("fold column is kept") {
    write_text(dir.file("f.csv"), "filename,label,fold\na.ppm,0,1\nb.ppm,1,0\n");
    const auto m = load_manifest(dir.file("f.csv"), dir.path.string());
    CHECK(m.records[0].fold == 1);
    write_manifest(dir.file("g.csv"), m);
    CHECK(load_manifest(dir.file("g.csv"), dir.path.string()).records[1].fold == 0);
  }
}

TEST_CASE("1000-row manifest loads identically twice") {
  TempDir dir;
  write_ppm(dir.file("x.ppm"), Image(1, 1));
  std::string csv = "filename,label\n";
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::string name = "s" + std::to_string(rng.below(1u << 30)) + "_" + std::to_string(i) + ".ppm";
    fs::copy_file(dir.file("x.ppm"), dir.file(name));
    csv += name + "," + std::to_string(i % 5) + "\n";
  }
  write_text(dir.file("m.csv"), csv);
  const auto a = load_manifest(dir.file("m.csv"), dir.path.string());
  const auto b = load_manifest(dir.file("m.csv"), dir.path.string());
  REQUIRE(a.records.size() == 1000);
  for (std::size_t i = 0; i < 1000; ++i) CHECK(a.records[i].filename == b.records[i].filename);
}

TEST_CASE("relabel to referable") {
  const auto m = relabel_binary(fake_manifest({1, 1, 1, 1}));
  CHECK(m.classes == 2);
  std::vector<int> labels;
  for (const auto& r : m.records) labels.push_back(r.label);
  CHECK(labels == std::vector<int>{0, 0, 1, 1});
}

TEST_CASE("stratified k-fold") {
  SUBCASE("one class of 10 over 5 folds") {
    const auto plan = stratified_kfold(fake_manifest({10}), 5, 3);
    for (int f = 0; f < 5; ++f) CHECK(plan.members(f).size() == 2);
  }
  SUBCASE("seeding") {
    const auto m = fake_manifest({13, 7, 9});
    const auto a = stratified_kfold(m, 4, 1), b = stratified_kfold(m, 4, 1), c = stratified_kfold(m, 4, 2);
    CHECK(a.fold == b.fold);
    CHECK(a.fold != c.fold);
    for (int f = 0; f < 4; ++f) CHECK(a.members(f).size() == c.members(f).size());
  }
  SUBCASE("class histogram per fold") {
    const auto m = fake_manifest({40, 30, 20, 10});
    const auto plan = stratified_kfold(m, 5, 9);
    const int expected[4] = {8, 6, 4, 2};
    for (int f = 0; f < 5; ++f) {
      int hist[4] = {0, 0, 0, 0};
      for (auto i : plan.members(f)) ++hist[m.records[i].label];
      for (int c = 0; c < 4; ++c) CHECK(std::abs(hist[c] - expected[c]) <= 1);
    }
  }
  SUBCASE("partition with uneven strata") {
    const auto m = fake_manifest({7, 3, 11, 1});
    const auto plan = stratified_kfold(m, 3, 5);
    CHECK_FALSE(plan.warnings.empty());
    std::size_t total = 0;
    for (int f = 0; f < 3; ++f) total += plan.members(f).size();
    CHECK(total == m.records.size());
    for (int v : plan.fold) CHECK((v >= 0 && v < 3));
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<int> sizes(3, 0);
      for (std::size_t i = 0; i < m.records.size(); ++i)
        if (m.records[i].label == int(c)) ++sizes[plan.fold[i]];
      CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    }
  }
  CHECK_THROWS_AS(stratified_kfold(fake_manifest({4}), 1, 0), ConfigError);
}

TEST_CASE("decode and preprocess") {
  TempDir dir;
  SUBCASE("grey PPM normalises to zero") {
    Image grey(4, 4, 0.5f);
    std::ofstream out(dir.file("g.ppm"), std::ios::binary);
    out << "P6\n4 4\n254\n";
    for (int i = 0; i < 48; ++i) out.put(char(127));
    out.close();
    NormStats s;
    s.mean = {0.5f, 0.5f, 0.5f};
    s.std = {0.5f, 0.5f, 0.5f};
    const auto t = decode_and_preprocess(dir.file("g.ppm"), 4, s);
    for (float v : t.data()) CHECK(v == 0.0f);
  }
  SUBCASE("constant images stay constant under resize") {
    Image c(5, 7, 0.3f);
    const auto r = resize_bilinear(c, 3, 11);
    for (float v : r.data) CHECK(v == doctest::Approx(0.3f));
  }
  SUBCASE("4x4 gradient down to 2x2") {
    Image g(4, 4);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t c = 0; c < 3; ++c) g.at(c, y, x) = float(x + 4 * y) / 16.0f;
    const auto r = resize_bilinear(g, 2, 2);
    // each output centre sits between four source pixels
    const float expected[2][2] = {{(0 + 1 + 4 + 5) / 64.0f, (2 + 3 + 6 + 7) / 64.0f},
                                  {(8 + 9 + 12 + 13) / 64.0f, (10 + 11 + 14 + 15) / 64.0f}};
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) CHECK(r.at(1, y, x) == doctest::Approx(expected[y][x]).epsilon(1e-6));
  }
  SUBCASE("png and ppm round trips") {
    Image img(3, 5);
    Rng rng(2);
    for (auto& v : img.data) v = float(rng.below(256)) / 255.0f;
    write_png(dir.file("a.png"), img);
    write_ppm(dir.file("a.ppm"), img);
    for (const auto& p : {dir.file("a.png"), dir.file("a.ppm")}) {
      const auto back = read_image(p);
      REQUIRE(back.height == 3);
      REQUIRE(back.width == 5);
      for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
    }
  }
  SUBCASE("corrupt and unknown files") {
    write_text(dir.file("bad.png"), "\x89PNG\r\n\x1a\nnot really");
    CHECK_THROWS_AS(read_image(dir.file("bad.png")), FormatError);
    write_text(dir.file("x.jpg"), "JFIF");
    try {
      read_image(dir.file("x.jpg"));
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("x.jpg") != std::string::npos);
    }
    write_text(dir.file("short.ppm"), "P6\n4 4\n255\nabc");
    CHECK_THROWS_AS(read_image(dir.file("short.ppm")), FormatError);
  }
  SUBCASE("normalisation inverts") {
    Image img(6, 6);
    Rng rng(3);
    for (auto& v : img.data) v = float(rng.uniform());
    NormStats s{{0.4f, 0.3f, 0.2f}, {0.2f, 0.25f, 0.1f}};
    const auto back = denormalize(normalize(img, s), s);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) <= 1e-6);
  }
}

TEST_CASE("synthetic generator") {
  TempDir dir;
  const auto m = synth_generate(dir.path.string(), {8, 5, 32, 4});
  CHECK(m.records.size() == 40);
  const auto loaded = load_manifest(dir.file("manifest.csv"), dir.path.string());
  CHECK(loaded.class_counts() == std::vector<std::size_t>(5, 8));
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir.path)) pngs += e.path().extension() == ".png";
  CHECK(pngs == 40);

  SynthInfo info;
  for (std::uint64_t i = 0; i < 10; ++i) {
    synth_image(0, 32, 4, i, &info);
    CHECK(info.blobs == 0);
  }

  std::vector<double> red(5, 0.0);
  for (std::size_t i = 0; i < loaded.records.size(); ++i)
    red[loaded.records[i].label] += read_image(loaded.path_of(i)).channel_mean(0) / 8.0;
  for (std::size_t c = 1; c < 5; ++c) CHECK(red[c] > red[c - 1]);

  const auto stats = compute_norm_stats(loaded, 32);
  for (float s : stats.std) CHECK(s > 0.0f);
  CHECK(stats.mean[0] > stats.mean[2]);
}

TEST_CASE("a depth-2 stump on mean red separates four grades") {
  // a depth-2 tree has four leaves, so four classes is the most it can tell apart
  std::vector<std::pair<double, int>> pts;
  for (int c = 0; c < 4; ++c)
    for (std::uint64_t i = 0; i < 20; ++i) pts.push_back({synth_image(c, 32, 11, i).channel_mean(0), c});
  std::sort(pts.begin(), pts.end());
  const std::size_t n = pts.size();
  // prefix class counts for fast interval majority
  std::vector<std::array<int, 4>> pre(n + 1, {0, 0, 0, 0});
  for (std::size_t i = 0; i < n; ++i) {
    pre[i + 1] = pre[i];
    ++pre[i + 1][pts[i].second];
  }
  auto best_in = [&](std::size_t a, std::size_t b) {
    int best = 0;
    for (int c = 0; c < 4; ++c) best = std::max(best, pre[b][c] - pre[a][c]);
    return best;
  };
  int best = 0;
  for (std::size_t i = 0; i <= n; ++i)
    for (std::size_t j = i; j <= n; ++j)
      for (std::size_t k = j; k <= n; ++k)
        best = std::max(best, best_in(0, i) + best_in(i, j) + best_in(j, k) + best_in(k, n));
  CHECK(double(best) / n > 0.8);
}
