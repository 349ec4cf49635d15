#include "nnm/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nnm/errors.hpp"
#include "nnm/json_util.hpp"

namespace nnm {

const char* to_string(Recipe recipe) {
  switch (recipe) {
    case Recipe::I: return "I";
    case Recipe::II: return "II";
    case Recipe::III: return "III";
  }
  return "?";
}

Recipe parse_recipe(const std::string& name) {
  if (name == "I") return Recipe::I;
  if (name == "II") return Recipe::II;
  if (name == "III") return Recipe::III;
  throw ConfigError("unknown augmentation recipe '" + name + "' (expected I, II or III)");
}

const char* to_string(MixMode mode) {
  switch (mode) {
    case MixMode::none: return "none";
    case MixMode::mixup: return "mixup";
    case MixMode::cutmix: return "cutmix";
  }
  return "?";
}

std::vector<std::string> AugPolicy::op_set() const {
  std::vector<std::string> ops{"resize", "random_crop", "hflip", "brightness"};
  if (uses_mix()) {
    ops.push_back("mixup");
    ops.push_back("cutmix");
  }
  if (uses_randaugment()) {
    for (const auto& op : randaugment_ops()) ops.push_back("randaugment:" + op);
    ops.push_back("random_erasing");
  }
  return ops;
}

void AugPolicy::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0 && p <= 1)) throw ConfigError(std::string("augment.") + name + " must be in [0,1]");
  };
  prob(hflip_prob, "hflip_prob");
  prob(mix_prob, "mix_prob");
  prob(mix_switch_prob, "mix_switch_prob");
  prob(erasing.prob, "erasing.prob");
  if (!(resize_ratio >= 1)) throw ConfigError("augment.resize_ratio must be >= 1");
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1))
    throw ConfigError("augment crop scale must satisfy 0 < min <= max <= 1");
  if (!(brightness >= 0 && brightness < 1)) throw ConfigError("augment.brightness must be in [0,1)");
  if (!(mixup_alpha > 0) || !(cutmix_alpha > 0)) throw ConfigError("mixup/cutmix alpha must be positive");
  if (randaugment.num_ops < 0) throw ConfigError("randaugment.num_ops must be >= 0");
  if (!(randaugment.magnitude >= 0 && randaugment.magnitude <= 10)) throw ConfigError("randaugment.magnitude must be in [0,10]");
  if (!(randaugment.magnitude_std >= 0)) throw ConfigError("randaugment.magnitude_std must be >= 0");
  if (!(erasing.area_min > 0 && erasing.area_min <= erasing.area_max && erasing.area_max < 1))
    throw ConfigError("erasing area must satisfy 0 < min <= max < 1");
  if (!(erasing.aspect_min > 0 && erasing.aspect_min <= erasing.aspect_max))
    throw ConfigError("erasing aspect must satisfy 0 < min <= max");
}

nlohmann::json AugPolicy::to_json() const {
  return {{"recipe", to_string(recipe)},
          {"resize_ratio", resize_ratio},
          {"crop_scale", {crop_scale_min, crop_scale_max}},
          {"hflip_prob", hflip_prob},
          {"brightness", brightness},
          {"randaugment",
           {{"num_ops", randaugment.num_ops},
            {"magnitude", randaugment.magnitude},
            {"magnitude_std", randaugment.magnitude_std}}},
          {"erasing",
           {{"prob", erasing.prob},
            {"area", {erasing.area_min, erasing.area_max}},
            {"aspect", {erasing.aspect_min, erasing.aspect_max}},
            {"random_fill", erasing.random_fill}}},
          {"mixup_alpha", mixup_alpha},
          {"cutmix_alpha", cutmix_alpha},
          {"mix_prob", mix_prob},
          {"mix_switch_prob", mix_switch_prob}};
}

namespace {

void read_pair(const nlohmann::json& j, const char* key, double& lo, double& hi, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError(where + "." + key + ": expected [lo, hi]");
  lo = v[0].get<double>();
  hi = v[1].get<double>();
}

}  // namespace

AugPolicy AugPolicy::from_json(const nlohmann::json& j) {
  const std::string where = "augment";
  reject_unknown_keys(j,
                      {"recipe", "resize_ratio", "crop_scale", "hflip_prob", "brightness", "randaugment", "erasing",
                       "mixup_alpha", "cutmix_alpha", "mix_prob", "mix_switch_prob"},
                      where);
  AugPolicy p;
  std::string recipe = to_string(p.recipe);
  read_opt(j, "recipe", recipe, where);
  p.recipe = parse_recipe(recipe);
  read_opt(j, "resize_ratio", p.resize_ratio, where);
  read_pair(j, "crop_scale", p.crop_scale_min, p.crop_scale_max, where);
  read_opt(j, "hflip_prob", p.hflip_prob, where);
  read_opt(j, "brightness", p.brightness, where);
  if (j.contains("randaugment")) {
    const auto& r = j.at("randaugment");
    reject_unknown_keys(r, {"num_ops", "magnitude", "magnitude_std"}, where + ".randaugment");
    read_opt(r, "num_ops", p.randaugment.num_ops, where + ".randaugment");
    read_opt(r, "magnitude", p.randaugment.magnitude, where + ".randaugment");
    read_opt(r, "magnitude_std", p.randaugment.magnitude_std, where + ".randaugment");
  }
  if (j.contains("erasing")) {
    const auto& e = j.at("erasing");
    reject_unknown_keys(e, {"prob", "area", "aspect", "random_fill"}, where + ".erasing");
    read_opt(e, "prob", p.erasing.prob, where + ".erasing");
    read_pair(e, "area", p.erasing.area_min, p.erasing.area_max, where + ".erasing");
    read_pair(e, "aspect", p.erasing.aspect_min, p.erasing.aspect_max, where + ".erasing");
    read_opt(e, "random_fill", p.erasing.random_fill, where + ".erasing");
  }
  read_opt(j, "mixup_alpha", p.mixup_alpha, where);
  read_opt(j, "cutmix_alpha", p.cutmix_alpha, where);
  read_opt(j, "mix_prob", p.mix_prob, where);
  read_opt(j, "mix_switch_prob", p.mix_switch_prob, where);
  p.validate();
  return p;
}

// ---- per-sample ops -----------------------------------------------------------

namespace {

template <typename F>
Image map_values(const Image& img, F f) {
  Image out = img;
  for (auto& v : out.data) v = std::clamp(float(f(v)), 0.0f, 1.0f);
  return out;
}

// Per-channel lookup over 256 levels.
template <typename F>
Image map_channels(const Image& img, F make_lut) {
  Image out = img;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto lut = make_lut(img, c);
    for (std::size_t i = 0; i < img.plane(); ++i) {
      float& v = out.data[c * img.plane() + i];
      v = lut[std::size_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))];
    }
  }
  return out;
}

std::size_t level_of(float v) { return std::size_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

Image hflip(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image adjust_brightness(const Image& img, double factor) {
  return map_values(img, [&](float v) { return double(v) * factor; });
}

// Blend towards the mean grey level.
Image adjust_contrast(const Image& img, double factor) {
  double grey = 0;
  for (std::size_t i = 0; i < img.plane(); ++i)
    grey += 0.299 * img.data[i] + 0.587 * img.data[img.plane() + i] + 0.114 * img.data[2 * img.plane() + i];
  grey /= double(std::max<std::size_t>(img.plane(), 1));
  return map_values(img, [&](float v) { return grey + factor * (double(v) - grey); });
}

Image solarize(const Image& img, double threshold) {
  return map_values(img, [&](float v) { return double(v) >= threshold ? 1.0 - double(v) : double(v); });
}

Image posterize(const Image& img, int bits) {
  if (bits < 1 || bits > 8) throw ValidationError("posterize bits must be in [1,8]");
  const unsigned mask = (0xffu << (8 - bits)) & 0xffu;
  return map_values(img, [&](float v) { return double(level_of(v) & mask) / 255.0; });
}

Image equalize(const Image& img) {
  return map_channels(img, [](const Image& im, std::size_t c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < im.plane(); ++i) ++hist[level_of(im.data[c * im.plane() + i])];
    std::array<float, 256> lut{};
    // PIL-style: skip the last populated level when sizing the step
    std::size_t last = 255;
    while (last > 0 && hist[last] == 0) --last;
    const std::size_t step = (im.plane() - hist[last]) / 255;
    if (step == 0) {
      for (std::size_t l = 0; l < 256; ++l) lut[l] = float(l) / 255.0f;
      return lut;
    }
    std::size_t acc = step / 2;
    for (std::size_t l = 0; l < 256; ++l) {
      lut[l] = float(std::min<std::size_t>(acc / step, 255)) / 255.0f;
      acc += hist[l];
    }
    return lut;
  });
}

Image autocontrast(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto first = img.data.begin() + std::ptrdiff_t(c * img.plane());
    const auto [lo, hi] = std::minmax_element(first, first + std::ptrdiff_t(img.plane()));
    const float a = *lo, b = *hi;
    if (b - a <= 0) continue;
    for (std::size_t i = 0; i < img.plane(); ++i) {
      float& v = out.data[c * img.plane() + i];
      v = std::clamp((v - a) / (b - a), 0.0f, 1.0f);
    }
  }
  return out;
}

Image affine(const Image& img, const std::array<double, 6>& m) {
  Image out(img.height, img.width);
  const double cx = double(img.width) / 2, cy = double(img.height) / 2;
  const std::array<float, 3> fill{img.channel_mean(0), img.channel_mean(1), img.channel_mean(2)};
  auto sample = [&](std::size_t c, long y, long x) -> double {
    if (y < 0 || x < 0 || y >= long(img.height) || x >= long(img.width)) return fill[c];
    return img.at(c, std::size_t(y), std::size_t(x));
  };
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double ox = double(x) + 0.5 - cx, oy = double(y) + 0.5 - cy;
      const double sx = m[0] * ox + m[1] * oy + m[2] + cx - 0.5;
      const double sy = m[3] * ox + m[4] * oy + m[5] + cy - 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const long x0 = long(fx), y0 = long(fy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * sample(c, y0, x0) + wx * sample(c, y0, x0 + 1);
        const double bottom = (1 - wx) * sample(c, y0 + 1, x0) + wx * sample(c, y0 + 1, x0 + 1);
        out.at(c, y, x) = std::clamp(float((1 - wy) * top + wy * bottom), 0.0f, 1.0f);
      }
    }
  return out;
}

Image rotate(const Image& img, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  // inverse of a rotation by t
  return affine(img, {std::cos(t), std::sin(t), 0, -std::sin(t), std::cos(t), 0});
}

Image shear_x(const Image& img, double factor) { return affine(img, {1, factor, 0, 0, 1, 0}); }
Image shear_y(const Image& img, double factor) { return affine(img, {1, 0, 0, factor, 1, 0}); }
Image translate_x(const Image& img, double pixels) { return affine(img, {1, 0, -pixels, 0, 1, 0}); }
Image translate_y(const Image& img, double pixels) { return affine(img, {1, 0, 0, 0, 1, -pixels}); }

const std::vector<std::string>& randaugment_ops() {
  static const std::vector<std::string> ops{"rotate",     "shear_x",  "shear_y",   "translate_x",  "translate_y",
                                            "brightness", "contrast", "solarize",  "posterize",    "equalize",
                                            "autocontrast"};
  return ops;
}

Image apply_randaugment_op(const Image& img, const std::string& op, double level, Rng& rng) {
  level = std::clamp(level, 0.0, 1.0);
  auto signed_level = [&](double scale) { return (rng.bernoulli(0.5) ? -1.0 : 1.0) * level * scale; };
  if (op == "rotate") return rotate(img, signed_level(30.0));
  if (op == "shear_x") return shear_x(img, signed_level(0.3));
  if (op == "shear_y") return shear_y(img, signed_level(0.3));
  if (op == "translate_x") return translate_x(img, signed_level(0.45 * double(img.width)));
  if (op == "translate_y") return translate_y(img, signed_level(0.45 * double(img.height)));
  if (op == "brightness") return adjust_brightness(img, 1.0 + signed_level(0.9));
  if (op == "contrast") return adjust_contrast(img, 1.0 + signed_level(0.9));
  if (op == "solarize") return solarize(img, 1.0 - level);
  if (op == "posterize") return posterize(img, 8 - int(std::lround(level * 4)));
  if (op == "equalize") return equalize(img);
  if (op == "autocontrast") return autocontrast(img);
  throw ConfigError("unknown RandAugment op '" + op + "'");
}

Image randaugment(const Image& img, const RandAugmentOptions& o, Rng& rng) {
  const auto& ops = randaugment_ops();
  Image out = img;
  for (int n = 0; n < o.num_ops; ++n) {
    const auto& op = ops[rng.below(ops.size())];
    const double m = std::clamp(o.magnitude_std > 0 ? rng.normal(o.magnitude, o.magnitude_std) : o.magnitude, 0.0, 10.0);
    out = apply_randaugment_op(out, op, m / 10.0, rng);
  }
  return out;
}

std::optional<Box> random_erase(Image& img, const ErasingOptions& o, Rng& rng) {
  if (!rng.bernoulli(o.prob)) return std::nullopt;
  const double total = double(img.plane());
  const double log_lo = std::log(o.aspect_min), log_hi = std::log(o.aspect_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(o.area_min, o.area_max) * total;
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto h = std::size_t(std::lround(std::sqrt(area * aspect)));
    const auto w = std::size_t(std::lround(std::sqrt(area / aspect)));
    if (h == 0 || w == 0 || h >= img.height || w >= img.width) continue;
    // rounding can push the realised fraction out of range; retry then
    const double frac = double(h * w) / total;
    if (frac < o.area_min || frac > o.area_max) continue;
    Box box{rng.below(img.height - h + 1), rng.below(img.width - w + 1), h, w};
    for (std::size_t c = 0; c < 3; ++c) {
      const float mean = img.channel_mean(c);
      for (std::size_t y = box.y0; y < box.y0 + h; ++y)
        for (std::size_t x = box.x0; x < box.x0 + w; ++x)
          img.at(c, y, x) = o.random_fill ? float(rng.uniform()) : mean;
    }
    return box;
  }
  return std::nullopt;
}

Image apply_sample_augs(const Image& img, const AugPolicy& p, std::size_t size, Rng& rng) {
  if (size == 0) throw DimensionError("augment output size must be positive");
  const auto big = std::max(size, std::size_t(std::lround(double(size) * p.resize_ratio)));
  Image out = resize_bilinear(img, big, big);
  const double scale = p.crop_scale_min == p.crop_scale_max ? p.crop_scale_min
                                                            : rng.uniform(p.crop_scale_min, p.crop_scale_max);
  const auto side = std::clamp<std::size_t>(std::size_t(std::lround(double(big) * std::sqrt(scale))), 1, big);
  const std::size_t y0 = rng.below(big - side + 1), x0 = rng.below(big - side + 1);
  if (side != big) {
    Image crop(side, side);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) crop.at(c, y, x) = out.at(c, y0 + y, x0 + x);
    out = std::move(crop);
  }
  out = resize_bilinear(out, size, size);
  if (rng.bernoulli(p.hflip_prob)) out = hflip(out);
  if (p.brightness > 0) out = adjust_brightness(out, rng.uniform(1 - p.brightness, 1 + p.brightness));
  if (p.uses_randaugment()) {
    out = randaugment(out, p.randaugment, rng);
    random_erase(out, p.erasing, rng);
  }
  out.clamp();
  return out;
}

// ---- batch mixing -------------------------------------------------------------

namespace {

void check_batch(const std::vector<Image>& images, const std::vector<int>& labels, std::size_t classes) {
  if (images.size() != labels.size()) throw DimensionError("batch images and labels differ in length");
  if (classes == 0) throw ConfigError("mixing needs at least one class");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= classes) throw ValidationError("label outside [0,K) in batch");
  for (const auto& im : images)
    if (im.height != images.front().height || im.width != images.front().width)
      throw DimensionError("batch images must share one size");
}

void check_permutation(const std::vector<std::size_t>& perm, std::size_t n) {
  if (perm.size() != n) throw DimensionError("mix permutation length differs from the batch");
  std::vector<bool> seen(n, false);
  for (auto p : perm) {
    if (p >= n || seen[p]) throw ValidationError("mix partner list is not a permutation");
    seen[p] = true;
  }
}

std::vector<std::vector<double>> mixed_labels(const std::vector<int>& labels, std::size_t classes, double lambda,
                                              const std::vector<std::size_t>& perm) {
  std::vector<std::vector<double>> out(labels.size(), std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i][std::size_t(labels[i])] += lambda;
    out[i][std::size_t(labels[perm[i]])] += 1.0 - lambda;
  }
  return out;
}

}  // namespace

MixedBatch one_hot_batch(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes) {
  check_batch(images, labels, classes);
  MixedBatch b;
  b.permutation.resize(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) b.permutation[i] = i;
  b.soft_labels = mixed_labels(labels, classes, 1.0, b.permutation);
  b.images = std::move(images);
  return b;
}

MixedBatch mixup_with(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double lambda,
                      std::vector<std::size_t> perm) {
  check_batch(images, labels, classes);
  check_permutation(perm, images.size());
  if (!(lambda >= 0 && lambda <= 1)) throw ValidationError("mixup lambda must be in [0,1]");
  MixedBatch b;
  b.images.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Image m = images[i];
    const auto& other = images[perm[i]];
    for (std::size_t k = 0; k < m.data.size(); ++k)
      m.data[k] = float(lambda * double(images[i].data[k]) + (1 - lambda) * double(other.data[k]));
    b.images.push_back(std::move(m));
  }
  b.soft_labels = mixed_labels(labels, classes, lambda, perm);
  b.lambda = lambda;
  b.permutation = std::move(perm);
  b.mode = MixMode::mixup;
  return b;
}

MixedBatch mixup(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double alpha,
                 Rng& rng) {
  if (images.size() < 2) return one_hot_batch(std::move(images), labels, classes);
  const double lambda = rng.beta(alpha, alpha);
  auto perm = rng.permutation(images.size());
  return mixup_with(std::move(images), labels, classes, lambda, std::move(perm));
}

Box cutmix_box(std::size_t height, std::size_t width, double lambda, Rng& rng) {
  const double ratio = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const auto ch = long(std::lround(double(height) * ratio)), cw = long(std::lround(double(width) * ratio));
  const auto cy = long(rng.below(height)), cx = long(rng.below(width));
  const long y0 = std::clamp(cy - ch / 2, 0L, long(height)), y1 = std::clamp(cy - ch / 2 + ch, 0L, long(height));
  const long x0 = std::clamp(cx - cw / 2, 0L, long(width)), x1 = std::clamp(cx - cw / 2 + cw, 0L, long(width));
  return {std::size_t(y0), std::size_t(x0), std::size_t(y1 - y0), std::size_t(x1 - x0)};
}

MixedBatch cutmix_with(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, const Box& box,
                       std::vector<std::size_t> perm) {
  check_batch(images, labels, classes);
  check_permutation(perm, images.size());
  const std::size_t H = images.empty() ? 0 : images.front().height, W = images.empty() ? 0 : images.front().width;
  if (box.y0 + box.h > H || box.x0 + box.w > W) throw DimensionError("cutmix box outside the image");
  MixedBatch b;
  b.images = images;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = box.y0; y < box.y0 + box.h; ++y)
        for (std::size_t x = box.x0; x < box.x0 + box.w; ++x) b.images[i].at(c, y, x) = images[perm[i]].at(c, y, x);
  // label weight follows the area actually pasted
  const double lambda = H * W == 0 ? 1.0 : 1.0 - double(box.area()) / double(H * W);
  b.soft_labels = mixed_labels(labels, classes, lambda, perm);
  b.lambda = lambda;
  b.permutation = std::move(perm);
  b.mode = MixMode::cutmix;
  b.box = box;
  return b;
}

MixedBatch cutmix(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double alpha,
                  Rng& rng) {
  check_batch(images, labels, classes);
  if (images.size() < 2) return one_hot_batch(std::move(images), labels, classes);
  const double lambda = rng.beta(alpha, alpha);
  const Box box = cutmix_box(images.front().height, images.front().width, lambda, rng);
  auto perm = rng.permutation(images.size());
  return cutmix_with(std::move(images), labels, classes, box, std::move(perm));
}

MixedBatch mix_dispatch(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes,
                        const AugPolicy& policy, Rng& rng) {
  if (!policy.uses_mix() || images.size() < 2 || !rng.bernoulli(policy.mix_prob))
    return one_hot_batch(std::move(images), labels, classes);
  if (rng.bernoulli(policy.mix_switch_prob)) return cutmix(std::move(images), labels, classes, policy.cutmix_alpha, rng);
  return mixup(std::move(images), labels, classes, policy.mixup_alpha, rng);
}

}  // namespace nnm
