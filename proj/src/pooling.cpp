#include "testdrive/pooling.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

// FFTW's planner is not thread-safe; execution on distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class ComplexGrid {
 public:
  ComplexGrid(int w, int h)
      : w_(w), h_(h), data_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * w * h))) {
    if (!data_) throw std::bad_alloc();
  }
  ~ComplexGrid() { fftw_free(data_); }
  ComplexGrid(const ComplexGrid&) = delete;
  ComplexGrid& operator=(const ComplexGrid&) = delete;

  fftw_complex* data() { return data_; }
  fftw_complex& at(int x, int y) { return data_[static_cast<std::size_t>(y) * w_ + x]; }

 private:
  int w_;
  int h_;
  fftw_complex* data_;
};

void dft(ComplexGrid& grid, int w, int h, int sign) {
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(h, w, grid.data(), grid.data(), sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

// The Nyquist bin of an even-length axis gets frequency 0 so the derivative
// multiplier stays odd and maps real fields to real fields.
double angular_frequency(int k, int n) {
  if (n % 2 == 0 && k == n / 2) return 0.0;
  const int signed_k = k <= n / 2 ? k : k - n;
  return 2.0 * std::numbers::pi * signed_k / n;
}

void check_same_size(std::span<const Patch> patches) {
  if (patches.size() < 2) fail(Errc::invalid_argument, "pooling needs at least two patches");
  const Image& first = patches.front().pixels;
  if (first.empty()) fail(Errc::invalid_argument, "cannot pool empty patches");
  for (const Patch& p : patches) {
    if (p.pixels.width != first.width || p.pixels.height != first.height) {
      fail(Errc::invalid_argument, "pooled patches must share dimensions");
    }
  }
}

std::vector<PatchProvenance> members_of(std::span<const Patch> patches) {
  std::vector<PatchProvenance> out;
  out.reserve(patches.size());
  for (const Patch& p : patches) out.push_back(p.provenance);
  return out;
}

}  // namespace

const char* to_string(PoolMethod method) noexcept {
  return method == PoolMethod::average ? "average" : "gradient";
}

PoolMethod pool_method_from_string(const std::string& text) {
  if (text == "average") return PoolMethod::average;
  if (text == "gradient") return PoolMethod::gradient;
  fail(Errc::invalid_argument, "unknown pooling method '" + text + "'");
}

PooledImage pool_average(std::span<const Patch> patches) {
  check_same_size(patches);
  const Image& first = patches.front().pixels;
  PooledImage out{Image(first.width, first.height), members_of(patches), PoolMethod::average};
  for (const Patch& p : patches) {
    for (std::size_t i = 0; i < out.pixels.pixels.size(); ++i) out.pixels.pixels[i] += p.pixels.pixels[i];
  }
  const double inv = 1.0 / static_cast<double>(patches.size());
  for (double& v : out.pixels.pixels) v *= inv;
  return out;
}

void central_gradient(const Image& image, Image& gx, Image& gy) {
  const int w = image.width;
  const int h = image.height;
  gx = Image(w, h);
  gy = Image(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gx.at(x, y) = 0.5 * (image.at(std::min(x + 1, w - 1), y) - image.at(std::max(x - 1, 0), y));
      gy.at(x, y) = 0.5 * (image.at(x, std::min(y + 1, h - 1)) - image.at(x, std::max(y - 1, 0)));
    }
  }
}

Image frankot_chellappa(const Image& gx, const Image& gy) {
  if (gx.width != gy.width || gx.height != gy.height) {
    fail(Errc::invalid_argument, "gradient fields must share dimensions");
  }
  const int w = gx.width;
  const int h = gx.height;
  if (w == 0 || h == 0) return Image(w, h);

  ComplexGrid fx(w, h);
  ComplexGrid fy(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      fx.at(x, y)[0] = gx.at(x, y);
      fx.at(x, y)[1] = 0.0;
      fy.at(x, y)[0] = gy.at(x, y);
      fy.at(x, y)[1] = 0.0;
    }
  }
  dft(fx, w, h, FFTW_FORWARD);
  dft(fy, w, h, FFTW_FORWARD);

  // Reuse fx for the surface spectrum.
  for (int y = 0; y < h; ++y) {
    const double v = angular_frequency(y, h);
    for (int x = 0; x < w; ++x) {
      const double u = angular_frequency(x, w);
      const double denom = u * u + v * v;
      fftw_complex& z = fx.at(x, y);
      if (denom == 0.0) {
        z[0] = 0.0;
        z[1] = 0.0;
        continue;
      }
      const double ax = fx.at(x, y)[0];
      const double bx = fx.at(x, y)[1];
      const double ay = fy.at(x, y)[0];
      const double by = fy.at(x, y)[1];
      // -j*(u*Gx + v*Gy) = (u*bx + v*by) - j*(u*ax + v*ay)
      z[0] = (u * bx + v * by) / denom;
      z[1] = -(u * ax + v * ay) / denom;
    }
  }
  dft(fx, w, h, FFTW_BACKWARD);

  Image out(w, h);
  const double scale = 1.0 / (static_cast<double>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.at(x, y) = fx.at(x, y)[0] * scale;
  }
  return out;
}

PooledImage pool_gradient(std::span<const Patch> patches) {
  check_same_size(patches);
  const int w = patches.front().pixels.width;
  const int h = patches.front().pixels.height;
  Image sum_x(w, h);
  Image sum_y(w, h);
  double mean_intensity = 0.0;
  for (const Patch& p : patches) {
    Image gx;
    Image gy;
    central_gradient(p.pixels, gx, gy);
    for (std::size_t i = 0; i < sum_x.pixels.size(); ++i) {
      sum_x.pixels[i] += gx.pixels[i];
      sum_y.pixels[i] += gy.pixels[i];
      mean_intensity += p.pixels.pixels[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(patches.size());
  for (std::size_t i = 0; i < sum_x.pixels.size(); ++i) {
    sum_x.pixels[i] *= inv;
    sum_y.pixels[i] *= inv;
  }
  mean_intensity /= static_cast<double>(patches.size()) * static_cast<double>(sum_x.pixels.size());

  Image surface = frankot_chellappa(sum_x, sum_y);
  const auto [lo, hi] = std::minmax_element(surface.pixels.begin(), surface.pixels.end());
  const double min = *lo;
  const double range = *hi - *lo;
  if (range <= 1e-12) {
    std::fill(surface.pixels.begin(), surface.pixels.end(), std::clamp(mean_intensity, 0.0, 1.0));
  } else {
    for (double& v : surface.pixels) v = std::clamp((v - min) / range, 0.0, 1.0);
  }
  return {std::move(surface), members_of(patches), PoolMethod::gradient};
}

void export_pooled(const std::filesystem::path& stem, const PooledImage& pooled) {
  auto png = stem;
  png += ".png";
  write_png(png, pooled.pixels);
  std::vector<GroundTruthBox> rows;
  for (const PatchProvenance& m : pooled.members) rows.push_back({m.image_id, m.box});
  auto sidecar = stem;
  sidecar += ".members.csv";
  write_boxes(sidecar, rows);
}

}  // namespace testdrive
