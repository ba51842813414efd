#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "testdrive/image.hpp"
#include "testdrive/ingest.hpp"

namespace testdrive {

enum class PoolMethod { average, gradient };

const char* to_string(PoolMethod method) noexcept;
PoolMethod pool_method_from_string(const std::string& text);

struct PooledImage {
  Image pixels;
  std::vector<PatchProvenance> members;
  PoolMethod method = PoolMethod::average;
};

/// Pixelwise mean of s >= 2 equally sized patches.
PooledImage pool_average(std::span<const Patch> patches);

/// Averages the members' central-difference gradient fields, integrates the
/// mean field with Frankot-Chellappa and rescales the surface to [0, 1].
/// A flat reconstruction becomes the members' mean intensity.
PooledImage pool_gradient(std::span<const Patch> patches);

/// Least-squares integrable surface for a gradient field under periodic
/// boundaries: Z(u,v) = (-j u Gx - j v Gy) / (u^2 + v^2), Z(0,0) = 0, with u, v
/// angular frequencies in radians per pixel (0 at the Nyquist bin of an even
/// axis). Returns the real part.
Image frankot_chellappa(const Image& gx, const Image& gy);

/// (f(x+1) - f(x-1)) / 2 along each axis, replicating border pixels.
void central_gradient(const Image& image, Image& gx, Image& gy);

/// Writes `<stem>.png` and `<stem>.members.csv` (image_id,x,y,w,h).
void export_pooled(const std::filesystem::path& stem, const PooledImage& pooled);

}  // namespace testdrive
