#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nnm/image.hpp"
#include "nnm/rng.hpp"

namespace nnm {

enum class Recipe { I, II, III };

const char* to_string(Recipe recipe);
Recipe parse_recipe(const std::string& name);

struct RandAugmentOptions {
  int num_ops = 2;
  double magnitude = 9.0;  // out of 10
  double magnitude_std = 0.5;
};

struct ErasingOptions {
  double prob = 0.25;
  double area_min = 0.02;
  double area_max = 1.0 / 3.0;
  double aspect_min = 0.3;
  double aspect_max = 3.3;
  bool random_fill = true;  // false: fill with the image mean
};

struct AugPolicy {
  Recipe recipe = Recipe::III;
  // base ops: resize to size * resize_ratio, random square crop, resize back
  double resize_ratio = 256.0 / 224.0;
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  double hflip_prob = 0.5;
  double brightness = 0.2;  // factor drawn from [1-b, 1+b]
  RandAugmentOptions randaugment;
  ErasingOptions erasing;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double mix_prob = 1.0;
  double mix_switch_prob = 0.5;  // chance of cutmix once a mix is applied

  bool uses_mix() const { return recipe != Recipe::I; }
  bool uses_randaugment() const { return recipe == Recipe::III; }
  // Names of the ops the recipe can apply, for reports.
  std::vector<std::string> op_set() const;

  void validate() const;
  nlohmann::json to_json() const;
  static AugPolicy from_json(const nlohmann::json& j);
};

// ---- per-sample ops (all keep values in [0,1]) ------------------------------

Image hflip(const Image& img);
Image adjust_brightness(const Image& img, double factor);
Image adjust_contrast(const Image& img, double factor);
Image solarize(const Image& img, double threshold);
Image posterize(const Image& img, int bits);
Image equalize(const Image& img);
Image autocontrast(const Image& img);
// Inverse-mapped affine about the centre, bilinear, fill = per-channel mean.
// Maps output (x,y) to input (a*x + b*y + c, d*x + e*y + f) in centred coords.
Image affine(const Image& img, const std::array<double, 6>& inverse);
Image rotate(const Image& img, double degrees);
Image shear_x(const Image& img, double factor);
Image shear_y(const Image& img, double factor);
Image translate_x(const Image& img, double pixels);
Image translate_y(const Image& img, double pixels);

const std::vector<std::string>& randaugment_ops();
// One named op at magnitude level in [0,1]; sign drawn from rng for signed ops.
Image apply_randaugment_op(const Image& img, const std::string& op, double level, Rng& rng);
Image randaugment(const Image& img, const RandAugmentOptions& options, Rng& rng);

struct Box {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
  std::size_t area() const { return h * w; }
};

// Erases one rectangle with probability `prob`; returns it when applied.
std::optional<Box> random_erase(Image& img, const ErasingOptions& options, Rng& rng);

// Recipe I base ops, then RandAugment and erasing for recipe III. Output is
// size x size.
Image apply_sample_augs(const Image& img, const AugPolicy& policy, std::size_t size, Rng& rng);

// ---- batch mixing -------------------------------------------------------------

enum class MixMode { none, mixup, cutmix };

const char* to_string(MixMode mode);

struct MixedBatch {
  std::vector<Image> images;
  std::vector<std::vector<double>> soft_labels;  // [N][K], rows on the simplex
  double lambda = 1.0;                           // weight of the original sample
  std::vector<std::size_t> permutation;          // partner of sample i
  MixMode mode = MixMode::none;
  std::optional<Box> box;                        // cutmix only
};

MixedBatch one_hot_batch(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes);

MixedBatch mixup(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double alpha,
                 Rng& rng);
MixedBatch mixup_with(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double lambda,
                      std::vector<std::size_t> permutation);

// Box of target area (1-lambda)*H*W centred uniformly and clipped to the image.
Box cutmix_box(std::size_t height, std::size_t width, double lambda, Rng& rng);
MixedBatch cutmix(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, double alpha,
                  Rng& rng);
MixedBatch cutmix_with(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes, const Box& box,
                       std::vector<std::size_t> permutation);

MixedBatch mix_dispatch(std::vector<Image> images, const std::vector<int>& labels, std::size_t classes,
                        const AugPolicy& policy, Rng& rng);

}  // namespace nnm
