#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace testdrive {

/// Axis-aligned box in pixel coordinates, (x, y) is the top-left corner.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double right() const noexcept { return x + w; }
  double bottom() const noexcept { return y + h; }
  double area() const noexcept { return w * h; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept;
double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Intersects the box with [0, width) x [0, height). The result may have zero area.
BoundingBox clamp_to_image(const BoundingBox& box, double width, double height) noexcept;

/// One detector output.
struct Detection {
  std::string image_id;
  BoundingBox box;
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

enum class LabelSource { human, simulated };

/// Binary answer to a yes/no question: 1 = object present, 0 = no object.
class Label {
 public:
  Label(int value, LabelSource source = LabelSource::human);

  int value() const noexcept { return value_; }
  bool positive() const noexcept { return value_ == 1; }
  LabelSource source() const noexcept { return source_; }

 private:
  int value_;
  LabelSource source_;
};

const char* to_string(LabelSource source) noexcept;
LabelSource label_source_from_string(const std::string& text);

/// Permutation of `all` ordered by (image_id, score desc, x, y, original index).
std::vector<std::size_t> canonical_order(std::span<const Detection> all);

/// Indices of detections with score >= gamma, in canonical order.
std::vector<std::size_t> filter_detections(std::span<const Detection> all, double gamma);

/// Thresholds with their nested detection sets.
struct ThresholdSweep {
  std::vector<double> gammas;                     // strictly increasing
  std::vector<std::vector<std::size_t>> members;  // members[i] = filter_detections(all, gammas[i])

  std::size_t size() const noexcept { return gammas.size(); }
  /// Index of `gamma` in the sweep (relative tolerance 1e-9), or size() if absent.
  std::size_t find(double gamma) const noexcept;
};

struct SweepStrategy {
  enum class Kind { explicit_list, quantiles };

  Kind kind = Kind::quantiles;
  std::vector<double> gammas;  // explicit_list only
  int count = 5;               // quantiles only

  static SweepStrategy explicit_list(std::vector<double> gammas);
  static SweepStrategy quantiles(int count);
};

/// Linear-interpolated quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Builds the sweep. Quantile strategy places thresholds at the (2i+1)/(2*count)
/// score quantiles and collapses thresholds that select identical sets.
ThresholdSweep build_sweep(std::span<const Detection> all, const SweepStrategy& strategy);

}  // namespace testdrive
