#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "testdrive/complement.hpp"
#include "testdrive/error.hpp"
#include "testdrive/homogenize.hpp"

using namespace testdrive;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST_CASE("mapped distances match the Mahalanobis form") {
  const Transform t = Transform::from_metric(Eigen::Vector2d(4.0, 1.0).asDiagonal());
  Eigen::MatrixXd rows(2, 2);
  rows << 0, 0, 1, 1;
  const Eigen::MatrixXd y = apply_transform(t, rows);
  CHECK((y.row(1) - y.row(0)).norm() == doctest::Approx(std::sqrt(5.0)));

  Eigen::MatrixXd a = gaussian(3, 3, 5);
  const Eigen::MatrixXd m = a * a.transpose();
  const Transform general = Transform::from_metric(m);
  const Eigen::MatrixXd x = gaussian(2, 3, 6);
  const Eigen::VectorXd d = (x.row(0) - x.row(1)).transpose();
  const Eigen::MatrixXd mapped = apply_transform(general, x);
  CHECK((mapped.row(0) - mapped.row(1)).squaredNorm() == doctest::Approx(d.dot(m * d)));

  CHECK_THROWS_AS(apply_transform(general, gaussian(2, 4, 1)), Error);
}

TEST_CASE("PSD projection clips negative eigenvalues") {
  Eigen::Matrix2d m;
  m << 1, 0, 0, -2;
  const Eigen::MatrixXd p = project_psd(m);
  CHECK(p(0, 0) == doctest::Approx(1.0));
  CHECK(p(1, 1) == doctest::Approx(0.0));
  const Eigen::MatrixXd r = project_psd(gaussian(6, 6, 2));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("lambda zero keeps the identity") {
  MetricConfig c;
  c.lambda = 0.0;
  c.reduced_dimension = 0;
  const LearnedTransform lt = learn_transform(gaussian(20, 3, 1), gaussian(30, 3, 2).array() + 4.0, c);
  CHECK(lt.transform.metric == Eigen::MatrixXd::Identity(3, 3));
  CHECK(lt.report.converged);
}

TEST_CASE("discriminative axis is stretched") {
  // Objects vary on axis 1 only; background differs from them on axis 0.
  Eigen::MatrixXd obj = gaussian(40, 2, 3);
  obj.col(0) *= 0.1;
  Eigen::MatrixXd bg = gaussian(60, 2, 4);
  bg.col(0) = bg.col(0).cwiseAbs().array() * 0.2 + 1.0;
  MetricConfig c;
  c.reduced_dimension = 0;
  c.u = 1.0;
  c.ell = 4.0;
  c.lambda = 1.0;
  const LearnedTransform lt = learn_transform(obj, bg, c);
  const Eigen::MatrixXd& m = lt.transform.metric;
  CHECK(m(0, 0) > 1.5);
  CHECK(m(0, 0) > m(1, 1));
  CHECK(m(1, 1) < 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
  for (std::size_t i = 1; i < lt.report.objective.size(); ++i) {
    CHECK(lt.report.objective[i] <= lt.report.objective[i - 1]);
  }
  CHECK((lt.transform.map * lt.transform.map - m).norm() < 1e-8);
}

TEST_CASE("separated proxies need no change") {
  Eigen::MatrixXd obj = gaussian(20, 2, 8) * 0.05;
  Eigen::MatrixXd bg = gaussian(20, 2, 9) * 0.05;
  bg.col(0).array() += 10.0;
  MetricConfig c;
  c.reduced_dimension = 0;
  c.u = 1.0;
  c.ell = 4.0;
  const LearnedTransform lt = learn_transform(obj, bg, c);
  CHECK(lt.report.satisfied_fraction == 1.0);
  CHECK(lt.report.objective.front() == 0.0);
  CHECK((lt.transform.metric - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-12);
}

TEST_CASE("PCA reduction") {
  MetricConfig c;
  c.reduced_dimension = 2;
  c.max_iterations = 20;
  const LearnedTransform lt = learn_transform(gaussian(30, 5, 11), gaussian(30, 5, 12).array() + 2.0, c);
  CHECK(lt.transform.input_dimension() == 5);
  CHECK(lt.transform.output_dimension() == 2);
  const Eigen::MatrixXd& b = lt.transform.basis;
  CHECK((b * b.transpose() - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-10);
  CHECK(apply_transform(lt.transform, gaussian(4, 5, 13)).cols() == 2);
}

TEST_CASE("invalid learner input") {
  MetricConfig c;
  c.reduced_dimension = 0;
  CHECK_THROWS_AS(learn_transform(Eigen::MatrixXd(0, 2), gaussian(3, 2, 1), c), Error);
  CHECK_THROWS_AS(learn_transform(gaussian(3, 2, 1), gaussian(3, 3, 1), c), Error);
  c.u = 2.0;
  c.ell = 1.0;
  CHECK_THROWS_AS(learn_transform(gaussian(3, 2, 1), gaussian(3, 2, 2), c), Error);
  MetricConfig neg;
  neg.lambda = -1.0;
  CHECK_THROWS_AS(neg.validate(), Error);
}

TEST_CASE("proxy sets") {
  const std::vector<Detection> d = {{"a", {0, 0, 8, 8}, 0.9}, {"a", {8, 0, 8, 8}, 0.5}, {"b", {0, 0, 8, 8}, 0.1}};
  ComplementSet comp;
  for (int i = 0; i < 10; ++i) comp.patches.push_back({"a", {8.0 * i, 16, 8, 8}});

  const ProxySets p = build_proxy_sets(d, comp, 0.8, 0.2, 4, 1);
  CHECK(p.objects == std::vector<std::size_t>{0});
  CHECK(p.background.size() == 4);
  CHECK(p.warnings.empty());
  CHECK(build_proxy_sets(d, comp, 0.8, 0.2, 4, 1).background == p.background);
  CHECK(build_proxy_sets(d, comp, 0.8, 0.2, 100, 1).background.size() == 10);

  CHECK(build_proxy_sets(d, comp, 0.05, 0.01, 4, 1).warnings.size() == 1);
  CHECK_THROWS_AS(build_proxy_sets(d, comp, 0.95, 0.2, 4, 1), Error);
  CHECK_THROWS_AS(build_proxy_sets(d, comp, 0.2, 0.8, 4, 1), Error);
  CHECK_THROWS_AS(build_proxy_sets(d, ComplementSet{}, 0.8, 0.2, 4, 1), Error);
}

TEST_CASE("transform persistence") {
  const fs::path dir = fs::temp_directory_path() / "testdrive_transform";
  fs::remove_all(dir);
  fs::create_directories(dir);
  MetricConfig c;
  c.reduced_dimension = 3;
  c.max_iterations = 10;
  const Transform t = learn_transform(gaussian(20, 6, 1), gaussian(20, 6, 2).array() + 1.0, c).transform;
  t.save(dir / "t.bin");
  const Transform back = Transform::load(dir / "t.bin");
  CHECK(back.mean == t.mean);
  CHECK(back.basis == t.basis);
  CHECK(back.metric == t.metric);
  const Eigen::MatrixXd x = gaussian(5, 6, 3);
  CHECK((apply_transform(back, x) - apply_transform(t, x)).norm() < 1e-12);

  const Transform id = Transform::identity(4);
  id.save(dir / "i.bin");
  CHECK(Transform::load(dir / "i.bin").metric == Eigen::MatrixXd::Identity(4, 4));

  std::ofstream(dir / "bad.bin") << "nonsense";
  CHECK_THROWS_AS(Transform::load(dir / "bad.bin"), Error);
  CHECK_THROWS_AS(Transform::load(dir / "missing.bin"), Error);
}
