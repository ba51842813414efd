#include "testdrive/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

double parse_number(const std::string& field, const std::filesystem::path& path, std::size_t line,
                    const char* name) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || field.empty()) {
    fail(Errc::data, where(path, line) + ": malformed " + name + " '" + field + "'");
  }
  if (!std::isfinite(value)) fail(Errc::data, where(path, line) + ": non-finite " + name + " '" + field + "'");
  return value;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::data, "cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

bool is_header(const std::vector<std::string>& fields, const std::vector<std::string>& expected) {
  return fields == expected;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Parses `image_id,x,y,w,h[,score]` rows shared by detections and ground truth.
struct BoxRow {
  std::string image_id;
  BoundingBox box;
  double score = 0.0;
  std::size_t line = 0;
};

std::vector<BoxRow> read_box_rows(const std::filesystem::path& path, bool with_score) {
  const std::vector<std::string> header = with_score
                                              ? std::vector<std::string>{"image_id", "x", "y", "w", "h", "score"}
                                              : std::vector<std::string>{"image_id", "x", "y", "w", "h"};
  std::vector<BoxRow> rows;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string text = trim(lines[i]);
    if (text.empty() || text[0] == '#') continue;
    const auto fields = split_csv_line(text);
    if (i == 0 && is_header(fields, header)) continue;
    if (fields.size() != header.size()) {
      fail(Errc::data, where(path, i + 1) + ": expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()));
    }
    BoxRow row;
    row.line = i + 1;
    row.image_id = fields[0];
    if (row.image_id.empty()) fail(Errc::data, where(path, i + 1) + ": empty image_id");
    row.box.x = parse_number(fields[1], path, i + 1, "x");
    row.box.y = parse_number(fields[2], path, i + 1, "y");
    row.box.w = parse_number(fields[3], path, i + 1, "w");
    row.box.h = parse_number(fields[4], path, i + 1, "h");
    if (with_score) row.score = parse_number(fields[5], path, i + 1, "score");
    if (row.box.w <= 0.0 || row.box.h <= 0.0) {
      fail(Errc::data, where(path, i + 1) + ": box width and height must be positive");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& image_id) const {
  const auto it = index_.find(image_id);
  return it == index_.end() ? nullptr : &entries[it->second];
}

DatasetManifest make_manifest(std::filesystem::path root, std::vector<ManifestEntry> entries) {
  DatasetManifest m;
  m.root = std::move(root);
  m.entries = std::move(entries);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (!m.index_.emplace(m.entries[i].image_id, i).second) {
      fail(Errc::data, "duplicate image_id '" + m.entries[i].image_id + "'");
    }
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(Errc::data, "missing manifest file: " + path.string());
  const auto lines = read_lines(path);
  std::vector<ManifestEntry> entries;
  const std::vector<std::string> header = {"image_id", "path", "width", "height"};
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string text = trim(lines[i]);
    if (text.empty() || text[0] == '#') continue;
    const auto fields = split_csv_line(text);
    if (i == 0 && is_header(fields, header)) continue;
    if (fields.size() != 4) fail(Errc::data, where(path, i + 1) + ": expected 4 fields");
    ManifestEntry e;
    e.image_id = fields[0];
    e.path = fields[1];
    const double w = parse_number(fields[2], path, i + 1, "width");
    const double h = parse_number(fields[3], path, i + 1, "height");
    if (w < 1 || h < 1 || w != std::floor(w) || h != std::floor(h)) {
      fail(Errc::data, where(path, i + 1) + ": width/height must be positive integers");
    }
    e.width = static_cast<int>(w);
    e.height = static_cast<int>(h);
    entries.push_back(std::move(e));
  }
  if (entries.empty()) fail(Errc::data, "empty dataset: " + path.string());

  DatasetManifest m = make_manifest(path.parent_path(), std::move(entries));
  for (const ManifestEntry& e : m.entries) {
    const auto file = m.resolve(e);
    if (!std::filesystem::exists(file)) {
      fail(Errc::data, "image '" + e.image_id + "' references missing file " + file.string());
    }
    const ImageSize size = probe_image(file);
    if (size.width != e.width || size.height != e.height) {
      fail(Errc::data, "image '" + e.image_id + "' is " + std::to_string(size.width) + "x" +
                           std::to_string(size.height) + " but the manifest says " + std::to_string(e.width) +
                           "x" + std::to_string(e.height));
    }
  }
  return m;
}

DetectionLoad load_detections(const std::filesystem::path& path, const DatasetManifest& manifest) {
  DetectionLoad out;
  for (BoxRow& row : read_box_rows(path, true)) {
    const ManifestEntry* entry = manifest.find(row.image_id);
    if (!entry) fail(Errc::data, where(path, row.line) + ": unknown image_id '" + row.image_id + "'");
    const BoundingBox clamped = clamp_to_image(row.box, entry->width, entry->height);
    if (clamped.area() <= 0.0) fail(Errc::data, where(path, row.line) + ": box lies outside its image");
    if (clamped != row.box) out.warnings.push_back(where(path, row.line) + ": box clamped to image bounds");
    out.detections.push_back({std::move(row.image_id), clamped, row.score});
  }
  return out;
}

std::vector<GroundTruthBox> load_groundtruth(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::vector<GroundTruthBox> out;
  for (BoxRow& row : read_box_rows(path, false)) {
    const ManifestEntry* entry = manifest.find(row.image_id);
    if (!entry) fail(Errc::data, where(path, row.line) + ": unknown image_id '" + row.image_id + "'");
    const BoundingBox clamped = clamp_to_image(row.box, entry->width, entry->height);
    if (clamped.area() <= 0.0) fail(Errc::data, where(path, row.line) + ": box lies outside its image");
    out.push_back({std::move(row.image_id), clamped});
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const Detection> detections) {
  std::ofstream out(path);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  out << "image_id,x,y,w,h,score\n";
  for (const Detection& d : detections) {
    out << d.image_id << ',' << format_number(d.box.x) << ',' << format_number(d.box.y) << ','
        << format_number(d.box.w) << ',' << format_number(d.box.h) << ',' << format_number(d.score) << '\n';
  }
}

void write_boxes(const std::filesystem::path& path, std::span<const GroundTruthBox> boxes) {
  std::ofstream out(path);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  out << "image_id,x,y,w,h\n";
  for (const GroundTruthBox& b : boxes) {
    out << b.image_id << ',' << format_number(b.box.x) << ',' << format_number(b.box.y) << ','
        << format_number(b.box.w) << ',' << format_number(b.box.h) << '\n';
  }
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  std::ofstream out(path);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  out << "image_id,path,width,height\n";
  for (const ManifestEntry& e : entries) {
    out << e.image_id << ',' << e.path.generic_string() << ',' << e.width << ',' << e.height << '\n';
  }
}

Patch extract_patch(const Image& image, const std::string& image_id, const BoundingBox& box, int target_w,
                    int target_h) {
  if (target_w <= 0 || target_h <= 0) fail(Errc::invalid_argument, "patch target size must be positive");
  const BoundingBox b = clamp_to_image(box, image.width, image.height);
  if (b.area() <= 0.0) fail(Errc::invalid_argument, "zero-area box in image " + image_id);

  Patch patch{Image(target_w, target_h), {image_id, box}};
  const double sx = b.w / target_w;
  const double sy = b.h / target_h;
  const double max_x = image.width - 1;
  const double max_y = image.height - 1;
  for (int j = 0; j < target_h; ++j) {
    const double fy = std::clamp(b.y + (j + 0.5) * sy - 0.5, 0.0, max_y);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double ty = fy - y0;
    for (int i = 0; i < target_w; ++i) {
      const double fx = std::clamp(b.x + (i + 0.5) * sx - 0.5, 0.0, max_x);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double tx = fx - x0;
      const double top = image.at(x0, y0) * (1.0 - tx) + image.at(x1, y0) * tx;
      const double bottom = image.at(x0, y1) * (1.0 - tx) + image.at(x1, y1) * tx;
      patch.pixels.at(i, j) = std::clamp(top * (1.0 - ty) + bottom * ty, 0.0, 1.0);
    }
  }
  return patch;
}

}  // namespace testdrive
