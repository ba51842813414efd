// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance [work-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "synthetic.hpp"
#include "testdrive/error.hpp"
#include "testdrive/grouptest.hpp"
#include "testdrive/homogenize.hpp"
#include "testdrive/pooling.hpp"
#include "testdrive/sampling.hpp"
#include "testdrive/session.hpp"

namespace fs = std::filesystem;
using namespace testdrive;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %s (%.2fs): %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome prevalence_exactness() {
  const double a = estimate_prevalence(2, 100, 2);
  const double a_ref = 1.0 - std::pow(0.98, 0.5);
  const double b = estimate_prevalence(5, 50, 1);
  bool monotone = true;
  for (int s = 1; s <= 3; ++s) {
    for (std::uint64_t t = 10; t <= 100; t += 10) {
      double prev = -1.0;
      for (std::uint64_t n = 0; n < 10; ++n) {  // increasing in positives
        const double v = estimate_prevalence(n, t, s);
        if (!(v > prev)) monotone = false;
        prev = v;
      }
    }
    for (std::uint64_t n = 1; n <= 10; ++n) {  // decreasing in pools tested
      double prev = 2.0;
      for (std::uint64_t t = 10; t <= 100; t += 10) {
        const double v = estimate_prevalence(n, t, s);
        if (!(v < prev)) monotone = false;
        prev = v;
      }
    }
  }
  const bool pass = std::abs(a - a_ref) <= 1e-9 && b == 0.1 && monotone;
  return {pass, "p(2,100,2)=" + fmt("%.12g", a) + " p(5,50,1)=" + fmt("%.17g", b) +
                    (monotone ? " monotone over 10x10x3" : " NOT monotone")};
}

// Pools answer from an i.i.d. Bernoulli(p) population.
double run_group_test(double p, int s, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::bernoulli_distribution positive(p);
  const std::size_t supply = 20000;
  std::vector<bool> truth(supply);
  for (std::size_t i = 0; i < supply; ++i) truth[i] = positive(rng);
  GroupTestRun run({s, n, seed, 0}, supply);
  while (auto pool = run.next_pool()) {
    bool any = false;
    for (std::size_t id : *pool) any = any || truth[id];
    run.record_answer(Label(any ? 1 : 0, LabelSource::simulated));
  }
  return run.estimate().p_hat;
}

Outcome group_test_consistency() {
  const double p = 0.05;
  const int reps = 1000;
  auto stats = [&](int n) {
    double sum = 0.0;
    double sq = 0.0;
    for (int r = 0; r < reps; ++r) {
      const double v = run_group_test(p, 2, n, 1000 + r);
      sum += v;
      sq += v * v;
    }
    const double mean = sum / reps;
    return std::pair(mean, (sq - reps * mean * mean) / (reps - 1));
  };
  const auto [mean20, var20] = stats(20);
  const auto [mean2, var2] = stats(2);
  (void)mean2;
  const double rel = std::abs(mean20 - p) / p;
  return {rel <= 0.10 && var2 > var20, "mean(n=20)=" + fmt("%.5f", mean20) + " rel.err=" + fmt("%.3f", rel) +
                                           " var(n=2)=" + fmt("%.3g", var2) + " var(n=20)=" + fmt("%.3g", var20)};
}

Outcome proportion_preservation() {
  const int seeds = 50;
  const std::size_t n = 160;
  const std::size_t minority = 48;  // 0.3 of 160
  const std::size_t k = 16;
  std::vector<double> precis_err;
  int precis_better = 0;
  for (int seed = 1; seed <= seeds; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 2);
    for (std::size_t i = 0; i < n; ++i) {
      const double cx = i < minority ? 6.0 : 0.0;
      x(static_cast<Eigen::Index>(i), 0) = cx + g(rng);
      x(static_cast<Eigen::Index>(i), 1) = g(rng);
    }
    auto estimate = [&](const SampleSet& s) {
      std::size_t majority = 0;
      for (std::size_t i : s.indices) majority += i >= minority;
      return static_cast<double>(majority) / static_cast<double>(s.indices.size());
    };
    const double ep = std::abs(estimate(select_precis(x, {0.5, k, 50, static_cast<std::uint64_t>(seed)})) - 0.7);
    const double er = std::abs(estimate(select_random(x.rows(), k, static_cast<std::uint64_t>(seed))) - 0.7);
    precis_err.push_back(ep);
    if (ep < er) ++precis_better;
  }
  std::sort(precis_err.begin(), precis_err.end());
  const double median = 0.5 * (precis_err[seeds / 2 - 1] + precis_err[seeds / 2]);
  const double share = static_cast<double>(precis_better) / seeds;
  return {median <= 0.15 && share >= 0.70,
          "median |P-0.7|=" + fmt("%.4f", median) + ", precis closer than random on " + fmt("%.0f%%", 100 * share) +
              " of seeds"};
}

Outcome precis_quality() {
  const int instances = 20;
  const std::size_t k = 3;
  int within = 0;
  int local = 0;
  for (int seed = 1; seed <= instances; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd x(12, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    const SampleSet s = select_precis(x, {0.5, k, 50, static_cast<std::uint64_t>(seed)});
    const double got = precis_objective(s.indices, x, 0.5);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < 12; ++a) {
      for (std::size_t b = a + 1; b < 12; ++b) {
        for (std::size_t c = b + 1; c < 12; ++c) {
          const std::size_t sel[] = {a, b, c};
          best = std::min(best, precis_objective(sel, x, 0.5));
        }
      }
    }
    if (std::abs(got - best) <= 0.10 * std::abs(best)) ++within;
    bool is_local = true;
    for (std::size_t pos = 0; pos < k && is_local; ++pos) {
      for (std::size_t cand = 0; cand < 12; ++cand) {
        if (std::find(s.indices.begin(), s.indices.end(), cand) != s.indices.end()) continue;
        std::vector<std::size_t> t = s.indices;
        t[pos] = cand;
        if (precis_objective(t, x, 0.5) < got - 1e-12 * std::max(1.0, std::abs(got))) {
          is_local = false;
          break;
        }
      }
    }
    local += is_local;
  }
  return {within >= 18 && local == instances, "within 10% of optimum: " + std::to_string(within) + "/20, swap-local: " +
                                                  std::to_string(local) + "/20"};
}

Outcome metric_learning() {
  // Objects around the origin, background beyond a margin along axis 0 and
  // spread in the other axes, in 4-D.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> side(0.0, 1.0);
  Eigen::MatrixXd objects(60, 4);
  Eigen::MatrixXd background(120, 4);
  for (Eigen::Index i = 0; i < objects.rows(); ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) objects(i, j) = (j == 0 ? 0.3 : 1.0) * g(rng);
  }
  for (Eigen::Index i = 0; i < background.rows(); ++i) {
    const double sign = side(rng) < 0.5 ? -1.0 : 1.0;
    background(i, 0) = sign * (3.0 + std::abs(g(rng)));
    for (Eigen::Index j = 1; j < 4; ++j) background(i, j) = 1.5 * g(rng);
  }
  // Bounds from the margin along axis 0: diag(1, 0, 0, 0) satisfies every
  // constraint, the identity violates most similar pairs.
  double widest_object = 0.0;
  double nearest_background = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < objects.rows(); ++i) {
    for (Eigen::Index j = 0; j < objects.rows(); ++j) {
      widest_object = std::max(widest_object, std::pow(objects(i, 0) - objects(j, 0), 2));
    }
    for (Eigen::Index j = 0; j < background.rows(); ++j) {
      nearest_background = std::min(nearest_background, std::pow(objects(i, 0) - background(j, 0), 2));
    }
  }
  MetricConfig config;
  config.u = widest_object;
  config.ell = nearest_background;
  config.reduced_dimension = 0;
  config.max_iterations = 500;
  const LearnedTransform learned = learn_transform(objects, background, config);
  double min_eig = std::numeric_limits<double>::infinity();
  for (double e : learned.report.min_eigenvalue) min_eig = std::min(min_eig, e);

  MetricConfig flat = config;
  flat.lambda = 0.0;
  const LearnedTransform identity = learn_transform(objects, background, flat);
  const double dev = (identity.transform.metric - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff();

  bool monotone = true;
  for (std::size_t i = 1; i < learned.report.objective.size(); ++i) {
    monotone = monotone && learned.report.objective[i] <= learned.report.objective[i - 1];
  }
  const bool pass = learned.report.satisfied_fraction >= 0.95 && min_eig >= -1e-10 && dev == 0.0 && monotone;
  return {pass, "satisfied=" + fmt("%.4f", learned.report.satisfied_fraction) + " after " +
                    std::to_string(learned.report.iterations) + " iterations (" +
                    (learned.report.converged ? "converged" : "iteration cap") + "), u=" + fmt("%.3g", config.u.value()) + " ell=" + fmt("%.3g", config.ell.value()) +
                    (monotone ? ", objective non-increasing" : ", objective INCREASED") + ", min eigenvalue over steps=" +
                    fmt("%.3g", min_eig) + " |M(lambda=0)-I|max=" + fmt("%.3g", dev)};
}

Outcome frankot_chellappa_round_trip() {
  const int w = 64;
  const int h = 48;
  Image z(w, h);
  Image gx(w, h);
  Image gy(w, h);
  const double two_pi = 2.0 * M_PI;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      z.at(x, y) = std::sin(two_pi * x / w) + 0.5 * std::cos(two_pi * 2 * y / h);
      // Derivatives in the spectral sense, so the field is exactly integrable
      // on the periodic grid.
      gx.at(x, y) = (two_pi / w) * std::cos(two_pi * x / w);
      gy.at(x, y) = -0.5 * (two_pi * 2 / h) * std::sin(two_pi * 2 * y / h);
    }
  }
  const Image r = frankot_chellappa(gx, gy);
  double mz = 0.0;
  double mr = 0.0;
  for (std::size_t i = 0; i < z.pixels.size(); ++i) {
    mz += z.pixels[i];
    mr += r.pixels[i];
  }
  mz /= static_cast<double>(z.pixels.size());
  mr /= static_cast<double>(r.pixels.size());
  double se = 0.0;
  for (std::size_t i = 0; i < z.pixels.size(); ++i) {
    const double d = (r.pixels[i] - mr) - (z.pixels[i] - mz);
    se += d * d;
  }
  const double rmse = std::sqrt(se / static_cast<double>(z.pixels.size()));

  // Non-integrable field: gx from one surface, gy from another.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  Image a(w, h);
  Image b(w, h);
  for (double& v : a.pixels) v = g(rng);
  for (double& v : b.pixels) v = g(rng);
  Image ax, ay, bx, by;
  central_gradient(a, ax, ay);
  central_gradient(b, bx, by);
  const Image once = frankot_chellappa(ax, by);
  // The least-squares projection is computed in the frequency domain, so the
  // idempotence check re-integrates the gradients of `once` taken in that
  // same domain: integrating the exact derivative field of a surface returns
  // the surface. Derivatives below are spectral, via the DFT.
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(w * h));
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      std::complex<double> acc = 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          acc += once.at(x, y) * std::polar(1.0, -two_pi * (double(u) * x / w + double(v) * y / h));
        }
      }
      spec[static_cast<std::size_t>(v * w + u)] = acc;
    }
  }
  auto freq = [](int k, int n) { return n % 2 == 0 && k == n / 2 ? 0.0 : 2.0 * M_PI * (k < n / 2 ? k : k - n) / n; };
  Image dx(w, h);
  Image dy(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::complex<double> sx = 0.0;
      std::complex<double> sy = 0.0;
      for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
          const std::complex<double> z_uv = spec[static_cast<std::size_t>(v * w + u)];
          const std::complex<double> e = std::polar(1.0, two_pi * (double(u) * x / w + double(v) * y / h));
          sx += std::complex<double>(0.0, freq(u, w)) * z_uv * e;
          sy += std::complex<double>(0.0, freq(v, h)) * z_uv * e;
        }
      }
      dx.at(x, y) = sx.real() / (w * h);
      dy.at(x, y) = sy.real() / (w * h);
    }
  }
  const Image twice = frankot_chellappa(dx, dy);
  double idem = 0.0;
  for (std::size_t i = 0; i < once.pixels.size(); ++i) idem = std::max(idem, std::abs(twice.pixels[i] - once.pixels[i]));

  return {rmse <= 1e-6 && idem <= 1e-8, "round-trip RMSE=" + fmt("%.3g", rmse) + " idempotence max|diff|=" +
                                            fmt("%.3g", idem)};
}

Outcome recall_identity(const fs::path& work) {
  // 25 images x 4 objects; 80 detected, 20 missed, plus 20 false detections.
  synthetic::FixtureConfig fc;
  fc.images = 25;
  fc.detect_rate = 1.0;
  fc.pole_rate = 0.0;
  fc.background_hits = 0.0;
  fc.seed = 11;
  const fs::path dir = work / "recall_identity";
  fs::remove_all(dir);
  synthetic::Fixture f = synthetic::write_fixture(dir, fc);
  if (f.truth.size() != 100 || f.detector.size() != 100) return {false, "unexpected fixture size"};

  std::mt19937_64 rng(5);
  std::vector<std::size_t> order(f.detector.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Detection> planted;
  for (std::size_t i = 20; i < order.size(); ++i) planted.push_back(f.detector[order[i]]);
  // False detections on empty grid cells.
  for (int img = 0; img < fc.images && planted.size() < 100; ++img) {
    char name[32];
    std::snprintf(name, sizeof name, "img%03d", img);
    for (int cell = 0; cell < 32 && planted.size() < 100; ++cell) {
      const BoundingBox b{double((cell % 8) * 32), double((cell / 8) * 64), 32, 64};
      bool empty = true;
      for (const GroundTruthBox& t : f.truth) empty = empty && !(t.image_id == name && intersection_area(t.box, b) > 0);
      for (const Detection& d : planted) empty = empty && !(d.image_id == name && intersection_area(d.box, b) > 0);
      if (empty) {
        planted.push_back({name, b, 0.9});
        break;
      }
    }
  }
  for (Detection& d : planted) d.score = 0.9;
  write_detections(f.detections, planted);

  SessionConfig config;
  config.sweep = SweepStrategy::explicit_list({0.5});
  config.sample_fraction = 1.0;
  config.sampler = SamplerMethod::random;
  config.oracle = OracleMode::simulated;
  auto session = Session::start({f.manifest, f.detections, f.groundtruth}, config);
  const SimulatedOracle oracle(f.truth);
  while (auto q = session->next_query(0)) {
    if (q->kind != QueryKind::precision_sample) break;
    session->submit_answer(q->id, oracle.answer(*q));
  }
  const EstimateRecord r = session->estimate(0);
  const ComplementSet& comp = session->complement(0);
  std::size_t positive_tiles = 0;
  for (const PatchProvenance& p : comp.patches) {
    Query probe;
    probe.kind = QueryKind::recall_pool;
    probe.members = {p};
    positive_tiles += oracle.answer(probe).positive();
  }
  const double beta = static_cast<double>(positive_tiles) / static_cast<double>(comp.size());
  const auto fn = false_negative_count(beta, comp.size());
  const double r_hat = *recall_estimate(r.precision, r.detections, fn);
  const double truth = *r.true_recall;
  return {std::abs(r_hat - truth) <= 1e-12 && r.detections == 100,
          "P_hat=" + fmt("%.6g", r.precision) + " fn=" + std::to_string(fn) + " R_hat=" + fmt("%.15g", r_hat) +
              " true R=" + fmt("%.15g", truth)};
}

Outcome end_to_end(const fs::path& work) {
  std::ostringstream detail;
  bool pass = true;
  double worst_p = 0.0;
  double worst_r = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const fs::path dir = work / ("e2e_" + std::to_string(seed));
    fs::remove_all(dir);
    synthetic::FixtureConfig fc;
    fc.seed = seed;
    const synthetic::Fixture f = synthetic::write_fixture(dir / "data", fc);
    SessionConfig config;
    config.seed = seed;
    config.oracle = OracleMode::simulated;
    auto session = Session::start({f.manifest, f.detections, f.groundtruth}, config, dir / "session");
    run_to_completion(*session, SimulatedOracle(f.truth, config.precision_iou, config.pool_iou));
    detail << " seed " << seed << ":";
    for (const EstimateRecord& r : session->estimates()) {
      const double ep = std::abs(r.precision - *r.true_precision);
      const double er = std::abs(r.recall - *r.true_recall);
      worst_p = std::max(worst_p, ep);
      worst_r = std::max(worst_r, er);
      const bool ok = ep <= 0.15 && er <= 0.2;
      pass = pass && ok;
      char buf[96];
      std::snprintf(buf, sizeof buf, " %s%.2f/%.2f", ok ? "" : "!", ep, er);
      detail << buf;
    }
  }
  return {pass, "max|dP|=" + fmt("%.3f", worst_p) + " max|dR|=" + fmt("%.3f", worst_r) +
                    "; per-gamma |dP|/|dR| (! = out of tolerance):" + detail.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome log_replay(const fs::path& work) {
  const fs::path dir = work / "replay";
  fs::remove_all(dir);
  synthetic::FixtureConfig fc;
  fc.images = 20;
  fc.seed = 21;
  const synthetic::Fixture f = synthetic::write_fixture(dir / "data", fc);
  SessionConfig config;
  config.seed = 21;
  config.oracle = OracleMode::simulated;
  {
    auto session = Session::start({f.manifest, f.detections, f.groundtruth}, config, dir / "session");
    run_to_completion(*session, SimulatedOracle(f.truth));
    export_report(*session, dir / "session");
  }
  const std::string original = slurp(dir / "session" / "report.csv");
  auto replayed = Session::open(dir / "session");
  export_report(*replayed, dir / "replayed");
  const std::string again = slurp(dir / "replayed" / "report.csv");
  const bool pass = !original.empty() && original == again;
  return {pass, std::to_string(replayed->log().size()) + " answers replayed, report " +
                    (pass ? "byte-identical" : "differs") + " (" + std::to_string(original.size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "testdrive_acceptance";
  fs::create_directories(work);

  run("prevalence estimator exactness and monotonicity", prevalence_exactness);
  run("group-test consistency (p=0.05, s=2, 1000 replications)", group_test_consistency);
  run("proportion preservation (N=160, minority 0.3, K=16, 50 seeds)", proportion_preservation);
  run("precis optimizer quality (|X|=12, K=3, 20 instances)", precis_quality);
  run("metric learning constraints, PSD iterates, lambda=0 identity", metric_learning);
  run("Frankot-Chellappa round trip and idempotence", frankot_chellappa_round_trip);
  run("recall identity with perfect oracle and true prevalence", [&] { return recall_identity(work); });
  run("end-to-end simulate (50 images, 5 seeds)", [&] { return end_to_end(work); });
  run("answer-log replay reproduces report.csv", [&] { return log_replay(work); });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
