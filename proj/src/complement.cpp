#include "testdrive/complement.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "testdrive/error.hpp"

namespace testdrive {

TileSize average_box(std::span<const Detection> all, std::span<const std::size_t> members) {
  if (members.empty()) {
    fail(Errc::invalid_argument, "no detections to average; supply a fallback tile size");
  }
  double w = 0.0;
  double h = 0.0;
  for (std::size_t i : members) {
    w += all[i].box.w;
    h += all[i].box.h;
  }
  const double n = static_cast<double>(members.size());
  return {std::max(kMinTileSide, static_cast<int>(std::lround(w / n))),
          std::max(kMinTileSide, static_cast<int>(std::lround(h / n)))};
}

ComplementSet build_complement(const DatasetManifest& manifest, std::span<const Detection> all,
                               std::span<const std::size_t> members, TileSize tile, double exclusion_threshold) {
  if (tile.width <= 0 || tile.height <= 0) fail(Errc::invalid_argument, "tile size must be positive");
  if (!(exclusion_threshold >= 0.0 && exclusion_threshold <= 1.0)) {
    fail(Errc::invalid_argument, "exclusion threshold must lie in [0, 1]");
  }
  std::map<std::string, std::vector<BoundingBox>> boxes;
  for (std::size_t i : members) boxes[all[i].image_id].push_back(all[i].box);

  ComplementSet out;
  out.tile = tile;
  out.exclusion_threshold = exclusion_threshold;
  const double tile_area = static_cast<double>(tile.width) * tile.height;
  const std::vector<BoundingBox> none;
  for (const ManifestEntry& e : manifest.entries) {
    if (e.width < tile.width || e.height < tile.height) {
      out.warnings.push_back("image '" + e.image_id + "' is smaller than one tile; skipped");
      continue;
    }
    const auto it = boxes.find(e.image_id);
    const std::vector<BoundingBox>& dets = it == boxes.end() ? none : it->second;
    for (int y = 0; y + tile.height <= e.height; y += tile.height) {
      for (int x = 0; x + tile.width <= e.width; x += tile.width) {
        const BoundingBox t{static_cast<double>(x), static_cast<double>(y), static_cast<double>(tile.width),
                            static_cast<double>(tile.height)};
        const bool excluded = std::any_of(dets.begin(), dets.end(), [&](const BoundingBox& d) {
          return intersection_area(t, d) > exclusion_threshold * tile_area;
        });
        if (!excluded) out.patches.push_back({e.image_id, t});
      }
    }
  }
  return out;
}

void write_complement(const std::filesystem::path& path, const ComplementSet& complement) {
  std::vector<GroundTruthBox> rows;
  rows.reserve(complement.patches.size());
  for (const PatchProvenance& p : complement.patches) rows.push_back({p.image_id, p.box});
  write_boxes(path, rows);
}

}  // namespace testdrive
