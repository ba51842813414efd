#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "testdrive/image.hpp"

namespace testdrive::synthetic {

namespace {

void fill_rect(Image& img, int x0, int y0, int w, int h, double v) {
  for (int y = std::max(0, y0); y < std::min(img.height, y0 + h); ++y) {
    for (int x = std::max(0, x0); x < std::min(img.width, x0 + w); ++x) img.at(x, y) = v;
  }
}

void fill_ellipse(Image& img, double cx, double cy, double rx, double ry, double v) {
  for (int y = std::max(0, static_cast<int>(cy - ry)); y <= std::min(img.height - 1, static_cast<int>(cy + ry)); ++y) {
    for (int x = std::max(0, static_cast<int>(cx - rx)); x <= std::min(img.width - 1, static_cast<int>(cx + rx)); ++x) {
      const double dx = (x + 0.5 - cx) / rx;
      const double dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) img.at(x, y) = v;
    }
  }
}

void draw_background(Image& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double base = 0.45 + 0.15 * u(rng);
  const double fx = 2.0 * M_PI / (40.0 + 60.0 * u(rng));
  const double fy = 2.0 * M_PI / (40.0 + 60.0 * u(rng));
  const double phase = 2.0 * M_PI * u(rng);
  std::normal_distribution<double> noise(0.0, 0.03);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      img.at(x, y) = base + 0.08 * std::sin(fx * x + phase) * std::cos(fy * y) + noise(rng);
    }
  }
  // A few soft blobs so the clutter is not purely periodic.
  for (int i = 0; i < 6; ++i) {
    fill_ellipse(img, u(rng) * img.width, u(rng) * img.height, 4 + 10 * u(rng), 4 + 10 * u(rng),
                 0.35 + 0.3 * u(rng));
  }
}

void draw_pedestrian(Image& img, int x, int y, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Clothing is darker or lighter than the street, and figures differ in
  // build, height and stride.
  const bool dark = u(rng) < 0.6;
  const double body = dark ? 0.05 + 0.2 * u(rng) : 0.75 + 0.2 * u(rng);
  const double legs = u(rng) < 0.5 ? body : (dark ? 0.75 + 0.2 * u(rng) : 0.05 + 0.2 * u(rng));
  const double scale = 0.75 + 0.35 * u(rng);
  const int top = y + static_cast<int>(6 * u(rng));
  const double cx = x + kCellWidth / 2.0 + (u(rng) - 0.5) * 6.0;
  const int half = static_cast<int>(8 * scale);
  const int torso = static_cast<int>(20 + 8 * u(rng));
  fill_ellipse(img, cx, top + 6, 4.5 * scale, 6, body);
  fill_rect(img, static_cast<int>(cx) - half, top + 12, 2 * half, torso, body);
  if (u(rng) < 0.7) {
    fill_rect(img, static_cast<int>(cx) - half - 3, top + 14, 3, torso - 4, body);
    fill_rect(img, static_cast<int>(cx) + half, top + 14, 3, torso - 4, body);
  }
  const int leg_top = top + 12 + torso;
  const int leg_len = std::max(8, y + kCellHeight - leg_top);
  const int stride = static_cast<int>(5 * u(rng));
  fill_rect(img, static_cast<int>(cx) - half + 1 - stride, leg_top, half - 1, leg_len, legs);
  fill_rect(img, static_cast<int>(cx) + 1 + stride, leg_top, half - 1, leg_len, legs);
}

void draw_pole(Image& img, int x, int y, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double v = 0.85 + 0.1 * u(rng);
  const int cx = x + kCellWidth / 2;
  fill_rect(img, cx - 3, y, 6, kCellHeight, v);
  fill_rect(img, cx - 9, y + 4, 18, 5, v);  // lamp arm
}

double clamp01(double v) { return std::clamp(v, 0.01, 0.99); }

}  // namespace

Fixture write_fixture(const std::filesystem::path& dir, const FixtureConfig& c) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-c.jitter, c.jitter);
  std::uniform_int_distribution<int> box_jitter(-c.box_jitter, c.box_jitter);
  std::normal_distribution<double> object_score(0.68, 0.15);
  std::normal_distribution<double> pole_score(0.45, 0.15);
  std::normal_distribution<double> clutter_score(0.3, 0.12);
  std::poisson_distribution<int> clutter_count(c.background_hits);

  const int cols = c.width / kCellWidth;
  const int rows = c.height / kCellHeight;
  Fixture f;
  std::vector<ManifestEntry> entries;

  for (int i = 0; i < c.images; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img%03d", i);
    const std::string id = name;
    Image img(c.width, c.height);
    draw_background(img, rng);

    std::vector<int> cells(static_cast<std::size_t>(cols * rows));
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::size_t next_cell = 0;
    auto place = [&](int cell) {
      const int x = std::clamp((cell % cols) * kCellWidth + jitter(rng), 0, c.width - kCellWidth);
      const int y = std::clamp((cell / cols) * kCellHeight + jitter(rng), 0, c.height - kCellHeight);
      return BoundingBox{double(x), double(y), double(kCellWidth), double(kCellHeight)};
    };
    auto detect_box = [&](const BoundingBox& b) {
      BoundingBox d{b.x + box_jitter(rng), b.y + box_jitter(rng), b.w, b.h};
      return clamp_to_image(d, c.width, c.height);
    };

    for (int k = 0; k < c.objects_per_image && next_cell < cells.size(); ++k) {
      const BoundingBox b = place(cells[next_cell++]);
      draw_pedestrian(img, static_cast<int>(b.x), static_cast<int>(b.y), rng);
      f.truth.push_back({id, b});
      if (u(rng) < c.detect_rate) f.detector.push_back({id, detect_box(b), clamp01(object_score(rng))});
    }
    for (int k = 0; k < c.poles_per_image && next_cell < cells.size(); ++k) {
      const BoundingBox b = place(cells[next_cell++]);
      draw_pole(img, static_cast<int>(b.x), static_cast<int>(b.y), rng);
      if (u(rng) < c.pole_rate) f.detector.push_back({id, detect_box(b), clamp01(pole_score(rng))});
    }
    const int hits = clutter_count(rng);
    for (int k = 0; k < hits && next_cell < cells.size(); ++k) {
      const BoundingBox b = place(cells[next_cell++]);
      f.detector.push_back({id, detect_box(b), clamp01(clutter_score(rng))});
    }

    for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
    const fs::path rel = fs::path("images") / (id + ".png");
    write_png(dir / rel, img);
    entries.push_back({id, rel, c.width, c.height});
  }

  f.manifest = dir / "manifest.csv";
  f.detections = dir / "detections.csv";
  f.groundtruth = dir / "groundtruth.csv";
  write_manifest(f.manifest, entries);
  write_detections(f.detections, f.detector);
  write_boxes(f.groundtruth, f.truth);
  return f;
}

}  // namespace testdrive::synthetic
