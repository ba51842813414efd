#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace testdrive {

enum class SamplerMethod { precis, random, kmedoids };

const char* to_string(SamplerMethod method) noexcept;
SamplerMethod sampler_from_string(const std::string& text);

struct PrecisConfig {
  double alpha = 0.5;  // weight of representation error; 1 - alpha rewards diversity
  std::size_t k = 8;
  int swap_passes = 50;
  std::uint64_t seed = 1;  // recorded for provenance; the search itself is deterministic
};

struct SampleSet {
  std::vector<std::size_t> indices;  // ascending, distinct
  double objective = 0.0;
  SamplerMethod method = SamplerMethod::precis;
};

/// Sum over rows of the squared distance to the nearest selected row.
double rep_cost(std::span<const std::size_t> selected, const Eigen::MatrixXd& x);

/// Scatter of the selected rows about their own mean (unit weights).
double div_cost(std::span<const std::size_t> selected, const Eigen::MatrixXd& x);

/// alpha * rep / scatter(X) - (1 - alpha) * div / scatter(X). Lower is better.
double precis_objective(std::span<const std::size_t> selected, const Eigen::MatrixXd& x, double alpha);

/// Greedy forward selection followed by best-swap local search on the
/// precis objective. Ties go to the lowest index.
SampleSet select_precis(const Eigen::MatrixXd& x, const PrecisConfig& config);

/// Uniform without replacement.
SampleSet select_random(Eigen::Index rows, std::size_t k, std::uint64_t seed);

/// PAM (BUILD + SWAP) on Euclidean distances; objective = sum of distances to
/// the nearest medoid.
SampleSet select_kmedoids(const Eigen::MatrixXd& x, std::size_t k, std::uint64_t seed);

}  // namespace testdrive
