#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "testdrive/core.hpp"
#include "testdrive/image.hpp"

namespace testdrive {

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path path;  // relative to the manifest root
  int width = 0;
  int height = 0;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  /// nullptr when the id is unknown.
  const ManifestEntry* find(const std::string& image_id) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const { return root / entry.path; }

 private:
  friend DatasetManifest load_manifest(const std::filesystem::path&);
  friend DatasetManifest make_manifest(std::filesystem::path, std::vector<ManifestEntry>);
  std::map<std::string, std::size_t> index_;
};

/// Reads `image_id,path,width,height`. Paths are resolved against the manifest's
/// directory; each file must exist, decode, and match the declared size.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Builds a manifest in memory (no file checks); rejects duplicate ids.
DatasetManifest make_manifest(std::filesystem::path root, std::vector<ManifestEntry> entries);

struct DetectionLoad {
  std::vector<Detection> detections;
  std::vector<std::string> warnings;  // clamping notes, one per affected line
};

/// Reads `image_id,x,y,w,h,score`; boxes are clamped to their image.
DetectionLoad load_detections(const std::filesystem::path& path, const DatasetManifest& manifest);

struct GroundTruthBox {
  std::string image_id;
  BoundingBox box;
};

/// Reads `image_id,x,y,w,h`.
std::vector<GroundTruthBox> load_groundtruth(const std::filesystem::path& path, const DatasetManifest& manifest);

void write_detections(const std::filesystem::path& path, std::span<const Detection> detections);
void write_boxes(const std::filesystem::path& path, std::span<const GroundTruthBox> boxes);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);

struct PatchProvenance {
  std::string image_id;
  BoundingBox box;

  friend bool operator==(const PatchProvenance&, const PatchProvenance&) = default;
};

struct Patch {
  Image pixels;
  PatchProvenance provenance;
};

/// Bilinear resample of `box` (pixel-centre aligned) to target_w x target_h.
Patch extract_patch(const Image& image, const std::string& image_id, const BoundingBox& box, int target_w,
                    int target_h);

/// Splits one CSV line on commas and trims surrounding whitespace from each field.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace testdrive
