#pragma once

#include "facetrack/common.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace facetrack {

/// 8-bit interleaved RGB image.
struct ColorImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  ColorImage() = default;
  ColorImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  std::uint8_t* pixel(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* pixel(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  GrayImage() = default;
  GrayImage(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}

  bool empty() const { return width <= 0 || height <= 0; }
  std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  /// Nearest-pixel read with border clamp.
  std::uint8_t clamped(int x, int y) const;
};

/// Depth in meters per pixel; 0 marks an invalid pixel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  DepthMap() = default;
  DepthMap(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0) {}

  bool empty() const { return width <= 0 || height <= 0; }
  std::size_t size() const { return values.size(); }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  double at(int x, int y) const { return values[index(x, y)]; }
  double& at(int x, int y) { return values[index(x, y)]; }
  bool valid(std::size_t i) const { return values[i] > 0.0; }
  std::size_t valid_count() const;
};

/// Grayscale probe intensity, (r + g + b) / 3.
GrayImage to_gray(const ColorImage& image);

void write_ppm(const std::filesystem::path& path, const ColorImage& image);
ColorImage read_ppm(const std::filesystem::path& path);

/// 16-bit binary PGM holding millimeters; values are rounded to the nearest mm.
void write_pgm16(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_pgm16(const std::filesystem::path& path);

/// Raw float32 depth: magic "BTDM", u32 version, u32 width, u32 height, then
/// width*height little-endian float32 meters in row-major order.
void write_depth_raw(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_depth_raw(const std::filesystem::path& path);

}  // namespace facetrack
