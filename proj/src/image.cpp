#include "facetrack/image.hpp"
#include "facetrack/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace facetrack {

std::uint8_t GrayImage::clamped(int x, int y) const {
  x = std::clamp(x, 0, width - 1);
  y = std::clamp(y, 0, height - 1);
  return values[static_cast<std::size_t>(y) * width + x];
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double v) { return v > 0.0; }));
}

GrayImage to_gray(const ColorImage& image) {
  GrayImage gray(image.width, image.height);
  for (std::size_t i = 0; i < gray.values.size(); ++i) {
    const unsigned sum = unsigned(image.rgb[3 * i]) + image.rgb[3 * i + 1] + image.rgb[3 * i + 2];
    gray.values[i] = static_cast<std::uint8_t>(sum / 3);
  }
  return gray;
}

namespace {

// Reads the PNM header tokens, skipping '#' comments, and consumes the single
// whitespace byte that precedes the raster.
struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& in, const std::filesystem::path& path) {
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    require(!t.empty(), ErrorCategory::format, path.string() + ": truncated PNM header");
    return t;
  };
  PnmHeader h;
  h.magic = token();
  try {
    h.width = std::stoi(token());
    h.height = std::stoi(token());
    h.maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorCategory::format, path.string() + ": malformed PNM header");
  }
  require(h.width > 0 && h.height > 0 && h.maxval > 0 && h.maxval < 65536, ErrorCategory::format,
          path.string() + ": invalid PNM dimensions");
  return h;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const ColorImage& image) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  require(out.good(), ErrorCategory::io, "write failed: " + path.string());
}

ColorImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCategory::io, "cannot open for reading: " + path.string());
  const auto h = read_pnm_header(in, path);
  require(h.magic == "P6" && h.maxval == 255, ErrorCategory::format, path.string() + ": expected 8-bit P6");
  ColorImage image(h.width, h.height);
  in.read(reinterpret_cast<char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  require(in.good(), ErrorCategory::format, path.string() + ": truncated raster");
  return image;
}

void write_pgm16(const std::filesystem::path& path, const DepthMap& depth) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  out << "P5\n" << depth.width << ' ' << depth.height << "\n65535\n";
  std::vector<unsigned char> raster(depth.values.size() * 2);
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    const double mm = std::round(depth.values[i] * 1000.0);
    const auto v = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
    raster[2 * i] = static_cast<unsigned char>(v >> 8);  // PGM is big-endian
    raster[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  require(out.good(), ErrorCategory::io, "write failed: " + path.string());
}

DepthMap read_pgm16(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCategory::io, "cannot open for reading: " + path.string());
  const auto h = read_pnm_header(in, path);
  require(h.magic == "P5" && h.maxval > 255, ErrorCategory::format, path.string() + ": expected 16-bit P5");
  DepthMap depth(h.width, h.height);
  std::vector<unsigned char> raster(depth.values.size() * 2);
  in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  require(in.good(), ErrorCategory::format, path.string() + ": truncated raster");
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    const unsigned v = (unsigned(raster[2 * i]) << 8) | raster[2 * i + 1];
    depth.values[i] = v / 1000.0;
  }
  return depth;
}

void write_depth_raw(const std::filesystem::path& path, const DepthMap& depth) {
  io::BinaryWriter w(path);
  w.magic("BTDM");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(depth.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(depth.height));
  std::vector<float> values(depth.values.begin(), depth.values.end());
  w.put_array(values.data(), values.size());
  w.finish();
}

DepthMap read_depth_raw(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BTDM");
  const auto version = r.get<std::uint32_t>();
  require(version == 1, ErrorCategory::format, path.string() + ": unsupported depth version");
  const auto w = r.get<std::uint32_t>();
  const auto h = r.get<std::uint32_t>();
  require(w > 0 && h > 0 && w < 65536 && h < 65536, ErrorCategory::format, path.string() + ": bad size");
  DepthMap depth(static_cast<int>(w), static_cast<int>(h));
  std::vector<float> values(depth.values.size());
  r.get_array(values.data(), values.size());
  std::copy(values.begin(), values.end(), depth.values.begin());
  return depth;
}

namespace io {

std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCategory::io, "cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace io

}  // namespace facetrack
