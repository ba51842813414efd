#include "testdrive/homogenize.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <unordered_set>

#include "testdrive/complement.hpp"
#include "testdrive/error.hpp"

namespace testdrive {

namespace {

constexpr char kTransformMagic[8] = {'T', 'D', 'X', 'F', 'R', 'M', '0', '1'};
constexpr std::uint32_t kTransformVersion = 1;

// `count` distinct values from [0, total), ascending; all of them when count >= total.
std::vector<std::uint64_t> sample_indices(std::uint64_t total, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::uint64_t> out;
  if (count >= total) {
    out.resize(total);
    for (std::uint64_t i = 0; i < total; ++i) out[i] = i;
    return out;
  }
  // Floyd's algorithm: uniform without replacement in O(count).
  std::unordered_set<std::uint64_t> chosen;
  for (std::uint64_t j = total - count; j < total; ++j) {
    std::uniform_int_distribution<std::uint64_t> dist(0, j);
    const std::uint64_t t = dist(rng);
    chosen.insert(chosen.count(t) ? j : t);
  }
  out.assign(chosen.begin(), chosen.end());
  std::sort(out.begin(), out.end());
  return out;
}

struct Pca {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;  // k x D
};

Pca fit_pca(const Eigen::MatrixXd& rows, int reduced) {
  Pca pca;
  pca.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centred = rows.rowwise() - pca.mean.transpose();
  // Eigen-decompose the n x n Gram matrix; its eigenvectors map to the right
  // singular vectors of the centred data.
  const Eigen::MatrixXd gram = centred * centred.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double top = values.size() ? values.maxCoeff() : 0.0;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = values.size() - 1; i >= 0 && static_cast<int>(keep.size()) < reduced; --i) {
    if (values[i] > 1e-12 * top && values[i] > 0.0) keep.push_back(i);
  }
  if (keep.empty()) fail(Errc::data, "proxy features have no variance; cannot learn a transform");
  pca.basis.resize(static_cast<Eigen::Index>(keep.size()), rows.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    Eigen::VectorXd axis = centred.transpose() * eig.eigenvectors().col(keep[r]);
    axis /= axis.norm();
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis[arg] < 0.0) axis = -axis;
    pca.basis.row(static_cast<Eigen::Index>(r)) = axis.transpose();
  }
  return pca;
}

struct Constraints {
  Eigen::MatrixXd similar;     // one difference vector per row
  Eigen::MatrixXd dissimilar;
};

Eigen::VectorXd squared_distances(const Eigen::MatrixXd& diffs, const Eigen::MatrixXd& metric) {
  if (diffs.rows() == 0) return {};
  return (diffs * metric).cwiseProduct(diffs).rowwise().sum();
}

struct Objective {
  const Constraints& c;
  double u;
  double ell;
  double lambda;

  double operator()(const Eigen::MatrixXd& m) const {
    const Eigen::Index k = m.rows();
    double value = (m - Eigen::MatrixXd::Identity(k, k)).squaredNorm();
    if (lambda == 0.0) return value;
    double hinge = 0.0;
    const Eigen::VectorXd ds = squared_distances(c.similar, m);
    for (Eigen::Index i = 0; i < ds.size(); ++i) hinge += std::max(0.0, ds[i] - u);
    const Eigen::VectorXd dd = squared_distances(c.dissimilar, m);
    for (Eigen::Index i = 0; i < dd.size(); ++i) hinge += std::max(0.0, ell - dd[i]);
    return value + lambda * hinge;
  }

  // Huber-smoothed hinge of width mu: quadratic on (0, mu], linear beyond.
  static double huber(double z, double mu) {
    if (z <= 0.0) return 0.0;
    return z <= mu ? 0.5 * z * z / mu : z - 0.5 * mu;
  }

  double smoothed(const Eigen::MatrixXd& m, double mu) const {
    const Eigen::Index k = m.rows();
    double value = (m - Eigen::MatrixXd::Identity(k, k)).squaredNorm();
    if (lambda == 0.0) return value;
    double hinge = 0.0;
    const Eigen::VectorXd ds = squared_distances(c.similar, m);
    for (Eigen::Index i = 0; i < ds.size(); ++i) hinge += huber(ds[i] - u, mu);
    const Eigen::VectorXd dd = squared_distances(c.dissimilar, m);
    for (Eigen::Index i = 0; i < dd.size(); ++i) hinge += huber(ell - dd[i], mu);
    return value + lambda * hinge;
  }

  Eigen::MatrixXd smoothed_gradient(const Eigen::MatrixXd& m, double mu) const {
    const Eigen::Index k = m.rows();
    Eigen::MatrixXd g = 2.0 * (m - Eigen::MatrixXd::Identity(k, k));
    if (lambda == 0.0) return g;
    const Eigen::VectorXd ds = squared_distances(c.similar, m);
    const Eigen::VectorXd dd = squared_distances(c.dissimilar, m);
    const Eigen::VectorXd ws = ((ds.array() - u) / mu).cwiseMax(0.0).cwiseMin(1.0).matrix();
    const Eigen::VectorXd wd = ((ell - dd.array()) / mu).cwiseMax(0.0).cwiseMin(1.0).matrix();
    if (ws.size()) g += lambda * c.similar.transpose() * ws.asDiagonal() * c.similar;
    if (wd.size()) g -= lambda * c.dissimilar.transpose() * wd.asDiagonal() * c.dissimilar;
    return g;
  }

  double satisfied(const Eigen::MatrixXd& m) const {
    const Eigen::VectorXd ds = squared_distances(c.similar, m);
    const Eigen::VectorXd dd = squared_distances(c.dissimilar, m);
    const auto total = ds.size() + dd.size();
    if (total == 0) return 1.0;
    const auto ok = (ds.array() <= u).count() + (dd.array() >= ell).count();
    return static_cast<double>(ok) / static_cast<double>(total);
  }
};

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

void read_matrix(std::ifstream& in, Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      m(r, c) = v;
    }
  }
}

}  // namespace

ProxySets build_proxy_sets(std::span<const Detection> all, const ComplementSet& complement_low, double gamma_high,
                           double gamma_low, std::size_t background_cap, std::uint64_t seed) {
  if (!(gamma_high > gamma_low)) fail(Errc::invalid_argument, "gamma_high must exceed gamma_low");
  ProxySets proxy;
  proxy.objects = filter_detections(all, gamma_high);
  if (proxy.objects.empty()) {
    fail(Errc::data, "no detections at gamma_high; lower gamma_high to obtain object proxies");
  }
  if (proxy.objects.size() == all.size()) {
    proxy.warnings.push_back("gamma_high is below every score; all detections are used as object proxies");
  }
  if (complement_low.patches.empty()) {
    fail(Errc::data, "empty complement at gamma_low; raise gamma_low or use smaller tiles");
  }
  std::mt19937_64 rng(seed);
  for (std::uint64_t i : sample_indices(complement_low.patches.size(), background_cap, rng)) {
    proxy.background.push_back(static_cast<std::size_t>(i));
  }
  return proxy;
}

void MetricConfig::validate() const {
  if (!(lambda >= 0.0)) fail(Errc::invalid_argument, "metric lambda must be non-negative");
  if (u && !(*u > 0.0)) fail(Errc::invalid_argument, "metric u must be positive");
  if (u && ell && !(*u < *ell)) fail(Errc::invalid_argument, "metric bounds need 0 < u < ell");
  if (max_iterations < 0) fail(Errc::invalid_argument, "max iterations must be non-negative");
  if (!(step_size > 0.0)) fail(Errc::invalid_argument, "step size must be positive");
  if (reduced_dimension < 0) fail(Errc::invalid_argument, "reduced dimension must be non-negative");
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(0.0);
  Eigen::MatrixXd out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

LearnedTransform learn_transform(const Eigen::MatrixXd& objects, const Eigen::MatrixXd& background,
                                 const MetricConfig& config) {
  config.validate();
  if (objects.rows() == 0 || background.rows() == 0) {
    fail(Errc::invalid_argument, "both proxy sets must be nonempty");
  }
  if (objects.cols() != background.cols()) fail(Errc::invalid_argument, "proxy feature dimensions differ");

  const Eigen::Index input_dim = objects.cols();
  Transform t;
  Eigen::MatrixXd obj;
  Eigen::MatrixXd bg;
  if (config.reduced_dimension > 0 && config.reduced_dimension < input_dim) {
    Eigen::MatrixXd pooled(objects.rows() + background.rows(), input_dim);
    pooled << objects, background;
    Pca pca = fit_pca(pooled, config.reduced_dimension);
    t.mean = std::move(pca.mean);
    t.basis = std::move(pca.basis);
    obj = (objects.rowwise() - t.mean.transpose()) * t.basis.transpose();
    bg = (background.rowwise() - t.mean.transpose()) * t.basis.transpose();
  } else {
    obj = objects;
    bg = background;
  }
  const Eigen::Index k = obj.cols();

  std::mt19937_64 rng(config.seed);
  Constraints c;
  const auto n_obj = static_cast<std::uint64_t>(obj.rows());
  const auto n_bg = static_cast<std::uint64_t>(bg.rows());
  {
    const std::uint64_t total = n_obj * (n_obj - 1) / 2;
    const auto picks = sample_indices(total, config.similar_cap, rng);
    c.similar.resize(static_cast<Eigen::Index>(picks.size()), k);
    // Decode a linear pair index into (i, j), i < j, row by row.
    std::uint64_t row = 0;
    std::uint64_t row_start = 0;
    for (std::size_t p = 0; p < picks.size(); ++p) {
      while (picks[p] >= row_start + (n_obj - 1 - row)) {
        row_start += n_obj - 1 - row;
        ++row;
      }
      const std::uint64_t col = row + 1 + (picks[p] - row_start);
      c.similar.row(static_cast<Eigen::Index>(p)) =
          obj.row(static_cast<Eigen::Index>(row)) - obj.row(static_cast<Eigen::Index>(col));
    }
  }
  {
    const auto picks = sample_indices(n_obj * n_bg, config.dissimilar_cap, rng);
    c.dissimilar.resize(static_cast<Eigen::Index>(picks.size()), k);
    for (std::size_t p = 0; p < picks.size(); ++p) {
      const auto i = static_cast<Eigen::Index>(picks[p] / n_bg);
      const auto j = static_cast<Eigen::Index>(picks[p] % n_bg);
      c.dissimilar.row(static_cast<Eigen::Index>(p)) = obj.row(i) - bg.row(j);
    }
  }

  TrainingReport report;
  report.similar_pairs = static_cast<std::size_t>(c.similar.rows());
  report.dissimilar_pairs = static_cast<std::size_t>(c.dissimilar.rows());
  {
    std::vector<double> d;
    for (Eigen::Index i = 0; i < c.similar.rows(); ++i) d.push_back(c.similar.row(i).squaredNorm());
    for (Eigen::Index i = 0; i < c.dissimilar.rows(); ++i) d.push_back(c.dissimilar.row(i).squaredNorm());
    report.u = config.u ? *config.u : quantile(d, 0.05);
    report.ell = config.ell ? *config.ell : quantile(d, 0.95);
  }
  if (!(report.u > 0.0 && report.u < report.ell)) {
    fail(Errc::data, "degenerate proxy distances: need 0 < u < ell");
  }

  const Objective objective{c, report.u, report.ell, config.lambda};
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(k, k);
  double value = objective(m);
  report.objective.push_back(value);
  report.min_eigenvalue.push_back(1.0);

  // Accelerated projected gradient on the smoothed objective, shrinking the
  // smoothing width between stages; the best iterate under the exact
  // objective is kept.
  if (config.lambda == 0.0) {
    report.converged = true;
  } else {
    const double mu_final = 1e-6 * (report.ell - report.u);
    double mu = 0.1 * (report.ell - report.u);
    double lipschitz = 2.0 / config.step_size;
    const int stage_cap = std::max(20, config.max_iterations / 6);
    Eigen::MatrixXd best = m;
    double best_value = value;
    Eigen::MatrixXd y = m;
    double t = 1.0;
    int stage_iterations = 0;
    double previous = objective.smoothed(m, mu);
    for (int it = 0; it < config.max_iterations; ++it) {
      report.iterations = it + 1;
      const Eigen::MatrixXd g = objective.smoothed_gradient(y, mu);
      const double fy = objective.smoothed(y, mu);
      Eigen::MatrixXd next;
      double fnext = 0.0;
      lipschitz *= 0.7;
      for (;;) {
        next = project_psd(y - g / lipschitz);
        fnext = objective.smoothed(next, mu);
        const Eigen::MatrixXd delta = next - y;
        if (fnext <= fy + (g.cwiseProduct(delta)).sum() + 0.5 * lipschitz * delta.squaredNorm() + 1e-12 * std::abs(fy)) {
          break;
        }
        lipschitz *= 2.0;
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> check(next, Eigen::EigenvaluesOnly);
      report.min_eigenvalue.push_back(check.eigenvalues().minCoeff());
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = next + ((t - 1.0) / t_next) * (next - m);
      t = t_next;
      m = std::move(next);
      // Only iterates that lower the exact objective count as accepted.
      value = objective(m);
      if (value < best_value) {
        best_value = value;
        best = m;
        report.objective.push_back(value);
      }
      ++stage_iterations;
      const double current = objective.smoothed(m, mu);
      const bool stalled = std::abs(previous - current) <= config.tolerance * std::max(1.0, std::abs(current));
      previous = current;
      if (stalled || stage_iterations >= stage_cap) {
        if (mu <= mu_final) {
          report.converged = stalled;
          if (stalled) break;
          stage_iterations = 0;
          continue;
        }
        mu = std::max(mu_final, 0.1 * mu);
        lipschitz *= 10.0;
        y = m;
        t = 1.0;
        stage_iterations = 0;
        previous = objective.smoothed(m, mu);
      }
    }
    m = best;
  }
  report.satisfied_fraction = objective.satisfied(m);

  t.metric = m;
  t.map = psd_sqrt(m);
  if (t.basis.size() == 0) t.mean = Eigen::VectorXd::Zero(input_dim);
  return {std::move(t), std::move(report)};
}

Transform Transform::identity(Eigen::Index dimension) {
  Transform t;
  t.mean = Eigen::VectorXd::Zero(dimension);
  t.metric = Eigen::MatrixXd::Identity(dimension, dimension);
  t.map = t.metric;
  return t;
}

Transform Transform::from_metric(const Eigen::MatrixXd& metric) {
  if (metric.rows() != metric.cols()) fail(Errc::invalid_argument, "metric must be square");
  Transform t;
  t.mean = Eigen::VectorXd::Zero(metric.rows());
  t.metric = metric;
  t.map = psd_sqrt(metric);
  return t;
}

void Transform::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  const std::uint64_t input = static_cast<std::uint64_t>(input_dimension());
  const std::uint64_t reduced = static_cast<std::uint64_t>(output_dimension());
  const std::uint8_t has_basis = basis.size() ? 1 : 0;
  out.write(kTransformMagic, sizeof kTransformMagic);
  out.write(reinterpret_cast<const char*>(&kTransformVersion), sizeof kTransformVersion);
  out.write(reinterpret_cast<const char*>(&input), sizeof input);
  out.write(reinterpret_cast<const char*>(&reduced), sizeof reduced);
  out.write(reinterpret_cast<const char*>(&has_basis), sizeof has_basis);
  out.write(reinterpret_cast<const char*>(mean.data()), static_cast<std::streamsize>(mean.size() * sizeof(double)));
  if (has_basis) write_matrix(out, basis);
  write_matrix(out, metric);
  if (!out) fail(Errc::io, "cannot write " + path.string());
}

Transform Transform::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::data, "cannot read transform " + path.string());
  char magic[8] = {};
  std::uint32_t version = 0;
  std::uint64_t input = 0;
  std::uint64_t reduced = 0;
  std::uint8_t has_basis = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&input), sizeof input);
  in.read(reinterpret_cast<char*>(&reduced), sizeof reduced);
  in.read(reinterpret_cast<char*>(&has_basis), sizeof has_basis);
  if (!in || std::memcmp(magic, kTransformMagic, sizeof magic) != 0 || version != kTransformVersion) {
    fail(Errc::data, "not a transform file: " + path.string());
  }
  if (input == 0 || reduced == 0 || input > (1u << 20) || reduced > (1u << 16)) {
    fail(Errc::data, "corrupt transform dimensions in " + path.string());
  }
  Transform t;
  t.mean.resize(static_cast<Eigen::Index>(input));
  in.read(reinterpret_cast<char*>(t.mean.data()), static_cast<std::streamsize>(input * sizeof(double)));
  if (has_basis) {
    t.basis.resize(static_cast<Eigen::Index>(reduced), static_cast<Eigen::Index>(input));
    read_matrix(in, t.basis);
  }
  t.metric.resize(static_cast<Eigen::Index>(reduced), static_cast<Eigen::Index>(reduced));
  read_matrix(in, t.metric);
  if (!in) fail(Errc::data, "truncated transform file " + path.string());
  if (!t.metric.allFinite()) fail(Errc::data, "non-finite metric in " + path.string());
  t.map = psd_sqrt(t.metric);
  return t;
}

Eigen::MatrixXd apply_transform(const Transform& transform, const Eigen::MatrixXd& rows) {
  if (rows.cols() != transform.input_dimension()) {
    fail(Errc::invalid_argument, "feature dimension " + std::to_string(rows.cols()) +
                                     " does not match transform input " +
                                     std::to_string(transform.input_dimension()));
  }
  if (transform.basis.size() == 0) return rows * transform.map.transpose();
  const Eigen::MatrixXd reduced = (rows.rowwise() - transform.mean.transpose()) * transform.basis.transpose();
  return reduced * transform.map.transpose();
}

FeatureMatrix apply_transform(const Transform& transform, const FeatureMatrix& features) {
  return {apply_transform(transform, features.rows), features.provenance};
}

}  // namespace testdrive
