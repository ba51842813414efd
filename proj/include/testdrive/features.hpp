#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "testdrive/image.hpp"
#include "testdrive/ingest.hpp"

namespace testdrive {

/// Histogram-of-oriented-gradients parameters. Defaults are the Dalal-Triggs
/// pedestrian configuration on a 64x128 window.
struct HogConfig {
  int cell_size = 8;
  int block_size = 2;  // cells per block side; blocks slide by one cell
  int bins = 9;
  bool signed_orientation = false;
  double clip = 0.2;

  void validate() const;
  /// Descriptor length for a width x height patch.
  std::size_t dimension(int width, int height) const;
  std::uint64_t hash() const noexcept;
};

inline constexpr int kPatchWidth = 64;
inline constexpr int kPatchHeight = 128;

/// HOG of a grayscale patch: central-difference gradients, trilinear votes
/// (orientation and both cell axes), per-block L2 -> clip -> L2 normalisation.
/// Blocks without gradient energy stay zero.
Eigen::VectorXd hog(const Image& patch, const HogConfig& config);

/// One descriptor row per patch, with the patch provenance kept alongside.
struct FeatureMatrix {
  Eigen::MatrixXd rows;
  std::vector<PatchProvenance> provenance;

  Eigen::Index size() const noexcept { return rows.rows(); }
  Eigen::Index dimension() const noexcept { return rows.cols(); }
};

/// Content hash of a patch's intensities (FNV-1a over the raw doubles and shape).
std::uint64_t patch_hash(const Image& patch) noexcept;

/// Descriptor cache keyed by (patch hash, config hash), persisted as
/// "TDHOGC01" | u32 dimension | u64 count | count x (u64 patch, u64 config, f64[dimension]).
class DescriptorCache {
 public:
  const Eigen::VectorXd* find(std::uint64_t patch, std::uint64_t config) const;
  void insert(std::uint64_t patch, std::uint64_t config, Eigen::VectorXd descriptor);
  std::size_t size() const noexcept { return entries_.size(); }

  void save(const std::filesystem::path& path) const;
  /// Missing file yields an empty cache; a corrupt one throws Errc::data.
  static DescriptorCache load(const std::filesystem::path& path);

 private:
  struct Key {
    std::uint64_t patch;
    std::uint64_t config;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept { return k.patch ^ (k.config * 0x9e3779b97f4a7c15ULL); }
  };
  std::unordered_map<Key, Eigen::VectorXd, KeyHash> entries_;
  std::vector<Key> order_;  // insertion order, so saved files are deterministic
};

FeatureMatrix featurize(std::span<const Patch> patches, const HogConfig& config, DescriptorCache* cache = nullptr);

}  // namespace testdrive
