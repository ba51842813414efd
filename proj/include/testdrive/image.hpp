#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace testdrive {

/// Row-major grid of doubles. Grayscale images keep intensities in [0, 1];
/// gradient fields and reconstructed surfaces use the same type unbounded.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0);

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool empty() const noexcept { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

/// Reads PNG (gray, gray+alpha, RGB, RGBA; 8 or 16 bit) or binary/ASCII PGM.
/// Color is reduced to luma 0.299 R + 0.587 G + 0.114 B.
Image read_image(const std::filesystem::path& path);

/// Reads only the header. Throws Errc::data when the file is not a decodable image.
ImageSize probe_image(const std::filesystem::path& path);

/// 8-bit grayscale PNG; intensities are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

}  // namespace testdrive
