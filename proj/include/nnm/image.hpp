#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "nnm/tensor.hpp"

namespace nnm {

/// Planar RGB image, values in [0,1], layout [c][y][x].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;  // 3 * height * width

  static constexpr std::size_t channels = 3;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), data(3 * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  float channel_mean(std::size_t c) const;
  void clamp();
};

// Dispatches on the file signature (PNG or binary PPM). DataError names the path.
Image read_image(const std::string& path);
void write_png(const std::string& path, const Image& img);
void write_ppm(const std::string& path, const Image& img);

// Half-pixel-centre bilinear resampling with edge clamping.
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

struct NormStats {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};

  void validate() const;
};

// (x - mean) / std per channel, as a [3,H,W] tensor.
Tensor<float> normalize(const Image& img, const NormStats& stats);
Image denormalize(const Tensor<float>& t, const NormStats& stats);

// Decode, resize to size x size and normalise.
Tensor<float> decode_and_preprocess(const std::string& path, std::size_t size, const NormStats& stats);

}  // namespace nnm
