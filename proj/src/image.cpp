#include "nnm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "nnm/errors.hpp"

namespace nnm {

float Image::channel_mean(std::size_t c) const {
  double s = 0;
  for (std::size_t i = 0; i < plane(); ++i) s += data[c * plane() + i];
  return float(s / double(plane()));
}

void Image::clamp() {
  for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
}

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image from_interleaved(const unsigned char* px, std::size_t h, std::size_t w, int bytes_per_sample, float maxval) {
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = ((y * w + x) * 3 + c) * bytes_per_sample;
        const unsigned v = bytes_per_sample == 1 ? px[i] : (unsigned(px[i]) << 8 | px[i + 1]);
        img.at(c, y, x) = float(v) / maxval;
      }
  return img;
}

std::vector<unsigned char> to_interleaved(const Image& img) {
  std::vector<unsigned char> px(img.data.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        px[(y * img.width + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  return px;
}

Image decode_png(const std::string& bytes, const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw FormatError("corrupt PNG " + path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("corrupt PNG " + path + ": " + msg);
  }
  return from_interleaved(px.data(), png.height, png.width, 1, 255.0f);
}

// Binary PPM (P6), maxval up to 65535, '#' comments allowed in the header.
Image decode_ppm(const std::string& bytes, const std::string& path) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError("bad PPM header in " + path);
    }
    if (digits == 0) throw FormatError("bad PPM header in " + path);
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw FormatError("bad PPM header in " + path);
  ++pos;  // single whitespace before the raster
  const int bps = maxval > 255 ? 2 : 1;
  const std::size_t need = std::size_t(w) * std::size_t(h) * 3 * bps;
  if (pos > bytes.size() || bytes.size() - pos < need) throw FormatError("truncated PPM " + path);
  return from_interleaved(reinterpret_cast<const unsigned char*>(bytes.data() + pos), std::size_t(h), std::size_t(w),
                          bps, float(maxval));
}

}  // namespace

Image read_image(const std::string& path) {
  const std::string bytes = slurp(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
  throw FormatError("unsupported image format (PNG or binary PPM expected): " + path);
}

void write_png(const std::string& path, const Image& img) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = png_uint_32(img.width);
  png.height = png_uint_32(img.height);
  png.format = PNG_FORMAT_RGB;
  const auto px = to_interleaved(img);
  if (!png_image_write_to_file(&png, path.c_str(), 0, px.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path + ": " + png.message);
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  const auto px = to_interleaved(img);
  out.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
  if (!out) throw DataError("write failed for " + path);
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || img.height == 0 || img.width == 0) throw DimensionError("resize to empty image");
  if (height == img.height && width == img.width) return img;
  Image out(height, width);
  const double sy = double(img.height) / double(height), sx = double(img.width) / double(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const auto y0 = std::size_t(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const auto x0 = std::size_t(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
        const double bottom = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
        out.at(c, y, x) = float((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

void NormStats::validate() const {
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(std[c] > 0) || !std::isfinite(std[c]) || !std::isfinite(mean[c]))
      throw ValidationError("normalisation std must be positive and finite");
  }
}

Tensor<float> normalize(const Image& img, const NormStats& stats) {
  Tensor<float> t(Shape{3, img.height, img.width});
  auto d = t.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img.plane(); ++i)
      d[c * img.plane() + i] = (img.data[c * img.plane() + i] - stats.mean[c]) / stats.std[c];
  return t;
}

Image denormalize(const Tensor<float>& t, const NormStats& stats) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("denormalize expects [3,H,W]");
  Image img(t.dim(1), t.dim(2));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img.plane(); ++i)
      img.data[c * img.plane() + i] = t[c * img.plane() + i] * stats.std[c] + stats.mean[c];
  return img;
}

Tensor<float> decode_and_preprocess(const std::string& path, std::size_t size, const NormStats& stats) {
  stats.validate();
  return normalize(resize_bilinear(read_image(path), size, size), stats);
}

}  // namespace nnm
