#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "testdrive/core.hpp"
#include "testdrive/features.hpp"

namespace testdrive {

struct ComplementSet;

/// Stand-ins for labelled data: high-confidence detections play "object",
/// a subsample of the low-threshold complement plays "background".
struct ProxySets {
  std::vector<std::size_t> objects;     // indices into the detection list
  std::vector<std::size_t> background;  // indices into the complement's patches
  std::vector<std::string> warnings;
};

/// objects = detections with score >= gamma_high; background = seeded uniform
/// subsample (at most `background_cap`) of `complement_low`, the complement
/// built at gamma_low.
ProxySets build_proxy_sets(std::span<const Detection> all, const ComplementSet& complement_low, double gamma_high,
                           double gamma_low, std::size_t background_cap, std::uint64_t seed);

struct MetricConfig {
  std::optional<double> u;     // similar pairs: d <= u (default: 5th pct of pair distances)
  std::optional<double> ell;   // dissimilar pairs: d >= ell (default: 95th pct)
  double lambda = 1.0;
  int max_iterations = 300;
  double step_size = 1.0;      // initial step; adapted by backtracking
  double tolerance = 1e-9;     // relative objective decrease counted as converged
  std::size_t similar_cap = 2000;
  std::size_t dissimilar_cap = 2000;
  int reduced_dimension = 128; // PCA dimension; 0 keeps the input space
  std::uint64_t seed = 1;

  void validate() const;
};

/// Learned linear map. Input rows x are mapped to map * basis * (x - mean);
/// with an empty basis the centring and projection are skipped.
struct Transform {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;   // reduced x input, orthonormal rows; empty = identity
  Eigen::MatrixXd metric;  // M, symmetric PSD, reduced x reduced
  Eigen::MatrixXd map;     // M^{1/2}

  Eigen::Index input_dimension() const noexcept { return basis.size() ? basis.cols() : metric.rows(); }
  Eigen::Index output_dimension() const noexcept { return metric.rows(); }

  static Transform identity(Eigen::Index dimension);
  /// Wraps an arbitrary PSD metric in the input space.
  static Transform from_metric(const Eigen::MatrixXd& metric);

  /// Layout: "TDXFRM01" | u32 version=1 | u64 input | u64 reduced | mean | basis | metric (row-major f64).
  void save(const std::filesystem::path& path) const;
  static Transform load(const std::filesystem::path& path);
};

struct TrainingReport {
  std::vector<double> objective;      // objective after every accepted step (index 0 = start)
  std::vector<double> min_eigenvalue; // smallest eigenvalue of M after every projection
  int iterations = 0;
  bool converged = false;             // false = max_iterations hit; best iterate returned
  double u = 0.0;
  double ell = 0.0;
  std::size_t similar_pairs = 0;
  std::size_t dissimilar_pairs = 0;
  double satisfied_fraction = 0.0;    // constraints with zero hinge loss at the returned M
};

struct LearnedTransform {
  Transform transform;
  TrainingReport report;
};

/// Minimises ||M - I||_F^2 + lambda * (sum_sim max(0, d_M - u) + sum_dis max(0, ell - d_M))
/// by projected (sub)gradient descent with backtracking, where d_M is the squared
/// Mahalanobis distance and every iterate is projected onto the PSD cone.
/// Similar pairs are drawn within `objects`, dissimilar pairs across
/// objects x background, both capped and seeded.
LearnedTransform learn_transform(const Eigen::MatrixXd& objects, const Eigen::MatrixXd& background,
                                 const MetricConfig& config);

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues at zero.
Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m);

Eigen::MatrixXd apply_transform(const Transform& transform, const Eigen::MatrixXd& rows);
FeatureMatrix apply_transform(const Transform& transform, const FeatureMatrix& features);

}  // namespace testdrive
