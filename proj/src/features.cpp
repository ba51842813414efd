#include "testdrive/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

constexpr char kCacheMagic[8] = {'T', 'D', 'H', 'O', 'G', 'C', '0', '1'};

}  // namespace

void HogConfig::validate() const {
  if (cell_size < 1) fail(Errc::invalid_argument, "HOG cell size must be positive");
  if (block_size < 1) fail(Errc::invalid_argument, "HOG block size must be positive");
  if (bins < 2) fail(Errc::invalid_argument, "HOG needs at least 2 orientation bins");
  if (!(clip > 0.0 && clip <= 1.0)) fail(Errc::invalid_argument, "HOG clip must lie in (0, 1]");
}

std::size_t HogConfig::dimension(int width, int height) const {
  validate();
  if (width % cell_size != 0 || height % cell_size != 0) {
    fail(Errc::invalid_argument, "patch " + std::to_string(width) + "x" + std::to_string(height) +
                                     " is not divisible by cell size " + std::to_string(cell_size));
  }
  const int cells_x = width / cell_size;
  const int cells_y = height / cell_size;
  if (cells_x < block_size || cells_y < block_size) {
    fail(Errc::invalid_argument, "patch is smaller than one HOG block");
  }
  const auto blocks = static_cast<std::size_t>(cells_x - block_size + 1) * (cells_y - block_size + 1);
  return blocks * block_size * block_size * bins;
}

std::uint64_t HogConfig::hash() const noexcept {
  std::uint64_t h = kFnvOffset;
  h = fnv(h, &cell_size, sizeof cell_size);
  h = fnv(h, &block_size, sizeof block_size);
  h = fnv(h, &bins, sizeof bins);
  const int sign = signed_orientation ? 1 : 0;
  h = fnv(h, &sign, sizeof sign);
  h = fnv(h, &clip, sizeof clip);
  return h;
}

Eigen::VectorXd hog(const Image& patch, const HogConfig& config) {
  const std::size_t dim = config.dimension(patch.width, patch.height);
  const int w = patch.width;
  const int h = patch.height;
  const int cs = config.cell_size;
  const int cells_x = w / cs;
  const int cells_y = h / cs;
  const int bins = config.bins;
  const double range = config.signed_orientation ? 2.0 * std::numbers::pi : std::numbers::pi;
  const double bin_width = range / bins;

  // hist[(cy * cells_x + cx) * bins + b]
  std::vector<double> hist(static_cast<std::size_t>(cells_x) * cells_y * bins, 0.0);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = patch.at(std::min(x + 1, w - 1), y) - patch.at(std::max(x - 1, 0), y);
      const double gy = patch.at(x, std::min(y + 1, h - 1)) - patch.at(x, std::max(y - 1, 0));
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double angle = std::atan2(gy, gx);
      if (angle < 0.0) angle += 2.0 * std::numbers::pi;
      if (!config.signed_orientation && angle >= std::numbers::pi) angle -= std::numbers::pi;

      // Bin b is centred at b * bin_width; orientation wraps around.
      const double fb = angle / bin_width;
      const int b0 = static_cast<int>(std::floor(fb)) % bins;
      const int b1 = (b0 + 1) % bins;
      const double tb = fb - std::floor(fb);

      // Cell centres sit at (c + 0.5) * cell_size.
      const double fx = (x + 0.5) / cs - 0.5;
      const double fy = (y + 0.5) / cs - 0.5;
      const int cx0 = static_cast<int>(std::floor(fx));
      const int cy0 = static_cast<int>(std::floor(fy));
      const double tx = fx - cx0;
      const double ty = fy - cy0;

      for (int dy = 0; dy < 2; ++dy) {
        const int cy = cy0 + dy;
        if (cy < 0 || cy >= cells_y) continue;
        const double wy = dy == 0 ? 1.0 - ty : ty;
        for (int dx = 0; dx < 2; ++dx) {
          const int cx = cx0 + dx;
          if (cx < 0 || cx >= cells_x) continue;
          const double wxy = wy * (dx == 0 ? 1.0 - tx : tx) * mag;
          double* cell = &hist[(static_cast<std::size_t>(cy) * cells_x + cx) * bins];
          cell[b0] += wxy * (1.0 - tb);
          cell[b1] += wxy * tb;
        }
      }
    }
  }

  const int bs = config.block_size;
  const int block_len = bs * bs * bins;
  Eigen::VectorXd out(static_cast<Eigen::Index>(dim));
  Eigen::Index pos = 0;
  Eigen::VectorXd block(block_len);
  for (int by = 0; by + bs <= cells_y; ++by) {
    for (int bx = 0; bx + bs <= cells_x; ++bx) {
      int k = 0;
      for (int cy = by; cy < by + bs; ++cy) {
        for (int cx = bx; cx < bx + bs; ++cx) {
          const double* cell = &hist[(static_cast<std::size_t>(cy) * cells_x + cx) * bins];
          for (int b = 0; b < bins; ++b) block[k++] = cell[b];
        }
      }
      const double norm = block.norm();
      if (norm > 0.0) {
        block /= norm;
        block = block.cwiseMin(config.clip);
        const double renorm = block.norm();
        if (renorm > 0.0) block /= renorm;
      } else {
        block.setZero();
      }
      out.segment(pos, block_len) = block;
      pos += block_len;
    }
  }
  return out;
}

std::uint64_t patch_hash(const Image& patch) noexcept {
  std::uint64_t h = kFnvOffset;
  h = fnv(h, &patch.width, sizeof patch.width);
  h = fnv(h, &patch.height, sizeof patch.height);
  return fnv(h, patch.pixels.data(), patch.pixels.size() * sizeof(double));
}

const Eigen::VectorXd* DescriptorCache::find(std::uint64_t patch, std::uint64_t config) const {
  const auto it = entries_.find({patch, config});
  return it == entries_.end() ? nullptr : &it->second;
}

void DescriptorCache::insert(std::uint64_t patch, std::uint64_t config, Eigen::VectorXd descriptor) {
  if (!entries_.empty() && entries_.begin()->second.size() != descriptor.size()) {
    fail(Errc::invalid_argument, "descriptor cache holds a single dimension");
  }
  const Key key{patch, config};
  if (entries_.insert_or_assign(key, std::move(descriptor)).second) order_.push_back(key);
}

void DescriptorCache::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  const std::uint32_t dim = entries_.empty() ? 0 : static_cast<std::uint32_t>(entries_.begin()->second.size());
  const std::uint64_t count = order_.size();
  out.write(kCacheMagic, sizeof kCacheMagic);
  out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const Key& key : order_) {
    out.write(reinterpret_cast<const char*>(&key.patch), sizeof key.patch);
    out.write(reinterpret_cast<const char*>(&key.config), sizeof key.config);
    out.write(reinterpret_cast<const char*>(entries_.at(key).data()), static_cast<std::streamsize>(dim * sizeof(double)));
  }
  if (!out) fail(Errc::io, "cannot write " + path.string());
}

DescriptorCache DescriptorCache::load(const std::filesystem::path& path) {
  DescriptorCache cache;
  if (!std::filesystem::exists(path)) return cache;
  std::ifstream in(path, std::ios::binary);
  char magic[8] = {};
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&dim), sizeof dim);
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || std::memcmp(magic, kCacheMagic, sizeof magic) != 0) {
    fail(Errc::data, "corrupt descriptor cache " + path.string());
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    Key key{};
    Eigen::VectorXd v(dim);
    in.read(reinterpret_cast<char*>(&key.patch), sizeof key.patch);
    in.read(reinterpret_cast<char*>(&key.config), sizeof key.config);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(dim * sizeof(double)));
    if (!in) fail(Errc::data, "truncated descriptor cache " + path.string());
    cache.insert(key.patch, key.config, std::move(v));
  }
  return cache;
}

FeatureMatrix featurize(std::span<const Patch> patches, const HogConfig& config, DescriptorCache* cache) {
  if (patches.empty()) fail(Errc::invalid_argument, "cannot featurize an empty patch list");
  const std::uint64_t config_hash = config.hash();
  FeatureMatrix fm;
  fm.provenance.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Patch& p = patches[i];
    Eigen::VectorXd row;
    const std::uint64_t ph = cache ? patch_hash(p.pixels) : 0;
    if (const Eigen::VectorXd* hit = cache ? cache->find(ph, config_hash) : nullptr) {
      row = *hit;
    } else {
      try {
        row = hog(p.pixels, config);
      } catch (const Error& e) {
        fail(e.code(), "patch " + std::to_string(i) + " from image '" + p.provenance.image_id + "': " + e.what());
      }
      if (cache) cache->insert(ph, config_hash, row);
    }
    if (i == 0) fm.rows.resize(static_cast<Eigen::Index>(patches.size()), row.size());
    if (row.size() != fm.rows.cols()) {
      fail(Errc::invalid_argument, "patch " + std::to_string(i) + " yields a descriptor of different length");
    }
    fm.rows.row(static_cast<Eigen::Index>(i)) = row.transpose();
    fm.provenance.push_back(p.provenance);
  }
  return fm;
}

}  // namespace testdrive
