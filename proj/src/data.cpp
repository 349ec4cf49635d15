#include "nnm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "nnm/errors.hpp"
#include "nnm/rng.hpp"

namespace nnm {

namespace fs = std::filesystem;

std::string Manifest::path_of(std::size_t i) const { return (fs::path(root) / records.at(i).filename).string(); }

std::vector<std::size_t> Manifest::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& r : records) ++counts[r.label];
  return counts;
}

Manifest Manifest::subset(const std::vector<std::size_t>& indices) const {
  Manifest m{root, {}, classes};
  for (auto i : indices) m.records.push_back(records.at(i));
  return m;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_int(const std::string& s, const std::string& what, const std::string& where) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ValidationError(where + ": bad " + what + " '" + s + "'");
  return v;
}

}  // namespace

Manifest load_manifest(const std::string& csv_path, const std::string& root, std::optional<std::size_t> classes) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open manifest " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(csv_path + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  const bool has_fold = header == std::vector<std::string>{"filename", "label", "fold"};
  if (!has_fold && header != std::vector<std::string>{"filename", "label"})
    throw ValidationError(csv_path + ":1: header must be 'filename,label' or 'filename,label,fold'");

  Manifest m;
  m.root = root;
  std::set<std::string> seen;
  std::vector<std::string> missing;
  int max_label = -1;
  for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = csv_path + ":" + std::to_string(line_no);
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ValidationError(where + ": expected " + std::to_string(header.size()) + " fields");
    Record r;
    r.filename = cells[0];
    if (r.filename.empty()) throw ValidationError(where + ": empty filename");
    r.label = parse_int(cells[1], "label", where);
    if (r.label < 0) throw ValidationError(where + ": negative label");
    if (classes && std::size_t(r.label) >= *classes)
      throw ValidationError(where + ": label " + cells[1] + " outside [0," + std::to_string(*classes) + ")");
    if (has_fold) {
      r.fold = parse_int(cells[2], "fold", where);
      if (*r.fold < 0) throw ValidationError(where + ": negative fold");
    }
    if (!seen.insert(r.filename).second) throw ValidationError(where + ": duplicate filename " + r.filename);
    if (!fs::exists(fs::path(root) / r.filename)) missing.push_back((fs::path(root) / r.filename).string());
    max_label = std::max(max_label, r.label);
    m.records.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " manifest file(s) missing:";
    for (const auto& p : missing) msg += "\n  " + p;
    throw DataError(msg);
  }
  if (m.records.empty()) throw ValidationError(csv_path + ": manifest has no records");
  m.classes = classes ? *classes : std::size_t(max_label + 1);
  return m;
}

void write_manifest(const std::string& csv_path, const Manifest& m) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write manifest " + csv_path);
  const bool has_fold = std::any_of(m.records.begin(), m.records.end(), [](const Record& r) { return r.fold.has_value(); });
  out << (has_fold ? "filename,label,fold\n" : "filename,label\n");
  for (const auto& r : m.records) {
    out << r.filename << "," << r.label;
    if (has_fold) out << "," << r.fold.value_or(0);
    out << "\n";
  }
}

Manifest relabel_binary(const Manifest& manifest, int threshold) {
  Manifest m = manifest;
  for (auto& r : m.records) r.label = r.label >= threshold ? 1 : 0;
  m.classes = 2;
  return m;
}

std::vector<std::size_t> FoldPlan::members(int f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] == f) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::complement(int f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] != f) out.push_back(i);
  return out;
}

FoldPlan stratified_kfold(const Manifest& manifest, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.fold.assign(manifest.records.size(), -1);
  std::size_t start = 0;
  for (std::size_t c = 0; c < manifest.classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].label == int(c)) members.push_back(i);
    if (members.empty()) continue;
    if (members.size() < k)
      plan.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                              " samples for " + std::to_string(k) + " folds");
    auto rng = Rng::derive(seed, {0x6b666f6cull, c});
    rng.shuffle(members.begin(), members.end());
    for (std::size_t j = 0; j < members.size(); ++j) plan.fold[members[j]] = int((start + j) % k);
    start = (start + members.size()) % k;
  }
  return plan;
}

NormStats compute_norm_stats(const Manifest& manifest, std::size_t size) {
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto img = resize_bilinear(read_image(manifest.path_of(i)), size, size);
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
    const double var = std::max(sq[c] / count - mean * mean, 0.0);
    s.mean[c] = float(mean);
    s.std[c] = float(std::max(std::sqrt(var), 1e-3));  // flat channels would divide by zero
  }
  return s;
}

// ---- synthetic fundus-like images ------------------------------------------------

Image synth_image(std::size_t label, std::size_t size, std::uint64_t seed, std::uint64_t index, SynthInfo* info) {
  auto rng = Rng::derive(seed, {0x73796e74ull, label, index});
  const double s = double(size);
  Image img(size, size);
  const double cx = s / 2 + rng.uniform(-0.03, 0.03) * s;
  const double cy = s / 2 + rng.uniform(-0.03, 0.03) * s;
  const double radius = 0.42 * s;
  const double gain = rng.uniform(0.98, 1.02);

  // lesions: more and larger with the grade, none for grade 0
  struct Blob {
    double x, y, r;
  };
  std::vector<Blob> blobs;
  const std::size_t count = 3 * label;
  const double blob_r = (0.05 + 0.01 * double(label)) * s;
  for (std::size_t b = 0; b < count; ++b) {
    const double a = rng.uniform(0, 2 * std::numbers::pi);
    const double d = std::sqrt(rng.uniform()) * 0.7 * radius;
    blobs.push_back({cx + d * std::cos(a), cy + d * std::sin(a), blob_r});
  }
  if (info) info->blobs = blobs.size();

  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      const double dr = std::hypot(px - cx, py - cy) / radius;
      double r = 0.05, g = 0.03, b = 0.02;
      if (dr <= 1.0) {
        const double shade = 1.0 - 0.35 * dr * dr;  // darker towards the rim
        r = 0.60 * shade, g = 0.32 * shade, b = 0.12 * shade;
        for (const auto& bl : blobs) {
          if (std::hypot(px - bl.x, py - bl.y) <= bl.r) {
            r = 0.98, g = 0.12, b = 0.08;
            break;
          }
        }
      }
      img.at(0, y, x) = float(r * gain + rng.normal(0, 0.01));
      img.at(1, y, x) = float(g * gain + rng.normal(0, 0.01));
      img.at(2, y, x) = float(b * gain + rng.normal(0, 0.01));
    }
  img.clamp();
  return img;
}

Manifest synth_generate(const std::string& out_dir, const SynthOptions& o) {
  if (o.classes < 2 || o.per_class < 1 || o.image_size < 8) throw ConfigError("synth: need >= 2 classes, >= 1 per class, size >= 8");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir + ": " + ec.message());
  Manifest m;
  m.root = out_dir;
  m.classes = o.classes;
  for (std::size_t c = 0; c < o.classes; ++c)
    for (std::size_t i = 0; i < o.per_class; ++i) {
      const std::string name = "img_" + std::to_string(c) + "_" + std::to_string(i) + ".png";
      write_png((fs::path(out_dir) / name).string(), synth_image(c, o.image_size, o.seed, i));
      m.records.push_back({name, int(c), std::nullopt});
    }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), m);
  return m;
}

}  // namespace nnm
