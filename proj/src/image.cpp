#include "testdrive/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

struct PngImage {
  png_image image{};
  PngImage() {
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

// Netpbm grayscale (P2 ascii / P5 binary).
struct PgmHeader {
  bool binary = true;
  int width = 0;
  int height = 0;
  int maxval = 0;
};

void skip_pgm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

PgmHeader read_pgm_header(std::istream& in, const std::filesystem::path& path) {
  char magic[2] = {};
  in.read(magic, 2);
  PgmHeader h;
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '2')) {
    fail(Errc::data, "unsupported or unreadable image: " + path.string());
  }
  h.binary = magic[1] == '5';
  skip_pgm_space(in);
  in >> h.width;
  skip_pgm_space(in);
  in >> h.height;
  skip_pgm_space(in);
  in >> h.maxval;
  if (!in || h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535) {
    fail(Errc::data, "corrupt PGM header: " + path.string());
  }
  in.get();  // single whitespace before raster
  return h;
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::data, "cannot open image: " + path.string());
  const PgmHeader h = read_pgm_header(in, path);
  Image img(h.width, h.height);
  const double scale = 1.0 / h.maxval;
  const bool wide = h.maxval > 255;
  for (double& p : img.pixels) {
    int v = 0;
    if (!h.binary) {
      in >> v;
    } else if (wide) {
      const int hi = in.get();
      const int lo = in.get();
      v = (hi << 8) | lo;
    } else {
      v = in.get();
    }
    if (!in) fail(Errc::data, "truncated PGM raster: " + path.string());
    p = std::clamp(v * scale, 0.0, 1.0);
  }
  return img;
}

}  // namespace

Image::Image(int w, int h, double fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

ImageSize probe_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(Errc::data, "missing image file: " + path.string());
  if (has_png_signature(path)) {
    PngImage png;
    if (!png_image_begin_read_from_file(&png.image, path.string().c_str())) {
      fail(Errc::data, "unreadable image " + path.string() + ": " + png.image.message);
    }
    return {static_cast<int>(png.image.width), static_cast<int>(png.image.height)};
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::data, "cannot open image: " + path.string());
  const PgmHeader h = read_pgm_header(in, path);
  return {h.width, h.height};
}

Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(Errc::data, "missing image file: " + path.string());
  if (!has_png_signature(path)) return read_pgm(path);

  PngImage png;
  if (!png_image_begin_read_from_file(&png.image, path.string().c_str())) {
    fail(Errc::data, "unreadable image " + path.string() + ": " + png.image.message);
  }
  const bool color = (png.image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, buffer.data(), 0, nullptr)) {
    fail(Errc::data, "unreadable image " + path.string() + ": " + png.image.message);
  }

  Image img(static_cast<int>(png.image.width), static_cast<int>(png.image.height));
  if (color) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double r = buffer[3 * i];
      const double g = buffer[3 * i + 1];
      const double b = buffer[3 * i + 2];
      img.pixels[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
    }
  } else {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = buffer[i] / 255.0;
  }
  return img;
}

namespace {

std::vector<png_byte> to_bytes(const Image& image) {
  std::vector<png_byte> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  return bytes;
}

void prepare(PngImage& png, const Image& image) {
  if (image.width <= 0 || image.height <= 0) fail(Errc::invalid_argument, "cannot encode an empty image");
  png.image.width = static_cast<png_uint_32>(image.width);
  png.image.height = static_cast<png_uint_32>(image.height);
  png.image.format = PNG_FORMAT_GRAY;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  PngImage png;
  prepare(png, image);
  const auto bytes = to_bytes(image);
  if (!png_image_write_to_file(&png.image, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    fail(Errc::io, "cannot write " + path.string() + ": " + png.image.message);
  }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  PngImage png;
  prepare(png, image);
  const auto bytes = to_bytes(image);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    fail(Errc::io, std::string("png encode failed: ") + png.image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    fail(Errc::io, std::string("png encode failed: ") + png.image.message);
  }
  out.resize(size);
  return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += alphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

}  // namespace testdrive
