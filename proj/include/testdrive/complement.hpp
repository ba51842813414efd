#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "testdrive/core.hpp"
#include "testdrive/ingest.hpp"

namespace testdrive {

struct TileSize {
  int width = 0;
  int height = 0;

  friend bool operator==(const TileSize&, const TileSize&) = default;
};

inline constexpr int kMinTileSide = 8;

/// Tiles of the images that the detector did not report: the pool from which
/// missed objects are estimated.
struct ComplementSet {
  std::vector<PatchProvenance> patches;
  TileSize tile;
  double exclusion_threshold = 0.2;
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return patches.size(); }
};

/// Mean width and height of the given detections, rounded, each at least 8 px.
TileSize average_box(std::span<const Detection> all, std::span<const std::size_t> members);

/// Origin-anchored grid of full tiles per image (partial strips are dropped).
/// A tile is excluded when its overlap with any detection box exceeds
/// exclusion_threshold * tile area. Images smaller than one tile are skipped.
ComplementSet build_complement(const DatasetManifest& manifest, std::span<const Detection> all,
                               std::span<const std::size_t> members, TileSize tile, double exclusion_threshold);

/// Audit dump in the ground-truth CSV layout (image_id,x,y,w,h).
void write_complement(const std::filesystem::path& path, const ComplementSet& complement);

}  // namespace testdrive
