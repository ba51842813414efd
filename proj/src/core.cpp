#include "testdrive/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "testdrive/error.hpp"

namespace testdrive {

double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double w = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double h = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

BoundingBox clamp_to_image(const BoundingBox& box, double width, double height) noexcept {
  const double x0 = std::clamp(box.x, 0.0, width);
  const double y0 = std::clamp(box.y, 0.0, height);
  const double x1 = std::clamp(box.right(), 0.0, width);
  const double y1 = std::clamp(box.bottom(), 0.0, height);
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

Label::Label(int value, LabelSource source) : value_(value), source_(source) {
  if (value != 0 && value != 1) fail(Errc::invalid_argument, "label must be 0 or 1, got " + std::to_string(value));
}

const char* to_string(LabelSource source) noexcept {
  return source == LabelSource::human ? "human" : "simulated";
}

LabelSource label_source_from_string(const std::string& text) {
  if (text == "human") return LabelSource::human;
  if (text == "simulated") return LabelSource::simulated;
  fail(Errc::invalid_argument, "unknown label source '" + text + "'");
}

std::vector<std::size_t> canonical_order(std::span<const Detection> all) {
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Detection& da = all[a];
    const Detection& db = all[b];
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    if (da.score != db.score) return da.score > db.score;
    if (da.box.x != db.box.x) return da.box.x < db.box.x;
    if (da.box.y != db.box.y) return da.box.y < db.box.y;
    return a < b;
  });
  return order;
}

std::vector<std::size_t> filter_detections(std::span<const Detection> all, double gamma) {
  std::vector<std::size_t> out;
  for (std::size_t i : canonical_order(all)) {
    if (all[i].score >= gamma) out.push_back(i);
  }
  return out;
}

std::size_t ThresholdSweep::find(double gamma) const noexcept {
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    if (std::abs(gammas[i] - gamma) <= 1e-9 * std::max(1.0, std::abs(gamma))) return i;
  }
  return gammas.size();
}

SweepStrategy SweepStrategy::explicit_list(std::vector<double> gammas) {
  SweepStrategy s;
  s.kind = Kind::explicit_list;
  s.gammas = std::move(gammas);
  return s;
}

SweepStrategy SweepStrategy::quantiles(int count) {
  SweepStrategy s;
  s.kind = Kind::quantiles;
  s.count = count;
  return s;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) fail(Errc::invalid_argument, "quantile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

ThresholdSweep build_sweep(std::span<const Detection> all, const SweepStrategy& strategy) {
  if (all.empty()) fail(Errc::data, "no detections");
  for (const Detection& d : all) {
    if (!std::isfinite(d.score)) fail(Errc::data, "non-finite detection score in image " + d.image_id);
  }

  std::vector<double> candidates;
  if (strategy.kind == SweepStrategy::Kind::explicit_list) {
    if (strategy.gammas.empty()) fail(Errc::invalid_argument, "explicit threshold list is empty");
    candidates = strategy.gammas;
    for (double g : candidates) {
      if (std::isnan(g)) fail(Errc::invalid_argument, "threshold is NaN");
    }
  } else {
    if (strategy.count < 1) fail(Errc::invalid_argument, "quantile count must be at least 1");
    std::vector<double> scores;
    scores.reserve(all.size());
    for (const Detection& d : all) scores.push_back(d.score);
    for (int i = 0; i < strategy.count; ++i) {
      candidates.push_back(quantile(scores, (2.0 * i + 1.0) / (2.0 * strategy.count)));
    }
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  ThresholdSweep sweep;
  for (double g : candidates) {
    auto members = filter_detections(all, g);
    // Nested sets with equal size are equal; keep the lowest threshold for quantile sweeps.
    if (strategy.kind == SweepStrategy::Kind::quantiles && !sweep.members.empty() &&
        sweep.members.back().size() == members.size()) {
      continue;
    }
    sweep.gammas.push_back(g);
    sweep.members.push_back(std::move(members));
  }
  return sweep;
}

}  // namespace testdrive
