#include "testdrive/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_k(std::size_t k, Eigen::Index rows) {
  if (k == 0) fail(Errc::invalid_argument, "sample size must be at least 1");
  if (k > static_cast<std::size_t>(rows)) {
    fail(Errc::invalid_argument, "sample size " + std::to_string(k) + " exceeds " + std::to_string(rows) + " rows");
  }
}

Eigen::MatrixXd squared_distance_matrix(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (x.row(i) - x.row(j)).squaredNorm();
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

double total_scatter(const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const double s = (x.rowwise() - mean).squaredNorm();
  return s > 0.0 ? s : 1.0;
}

std::vector<std::size_t> all_rows(Eigen::Index n) {
  std::vector<std::size_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

bool improves(double candidate, double current) {
  return candidate < current - 1e-12 * std::max(1.0, std::abs(current));
}

// Incremental bookkeeping for the precis objective over a fixed squared
// distance matrix.
class PrecisState {
 public:
  PrecisState(const Eigen::MatrixXd& d2, double alpha, double scatter)
      : d2_(d2), alpha_(alpha), scatter_(scatter), n_(d2.rows()), in_set_(static_cast<std::size_t>(n_), false),
        nearest_(static_cast<std::size_t>(n_), kInf), second_(static_cast<std::size_t>(n_), kInf),
        nearest_idx_(static_cast<std::size_t>(n_), -1), rowsum_(static_cast<std::size_t>(n_), 0.0) {}

  const std::vector<std::size_t>& selected() const { return selected_; }
  bool contains(Eigen::Index i) const { return in_set_[static_cast<std::size_t>(i)]; }

  double value(double rep, double pairsum, std::size_t m) const {
    const double div = m ? pairsum / static_cast<double>(m) : 0.0;
    return (alpha_ * rep - (1.0 - alpha_) * div) / scatter_;
  }

  double current() const { return value(rep_, pairsum_, selected_.size()); }

  double with_added(Eigen::Index c) const {
    double rep = 0.0;
    for (Eigen::Index k = 0; k < n_; ++k) rep += std::min(nearest_[static_cast<std::size_t>(k)], d2_(k, c));
    return value(rep, pairsum_ + rowsum_[static_cast<std::size_t>(c)], selected_.size() + 1);
  }

  double with_swap(Eigen::Index out, Eigen::Index in) const {
    double rep = 0.0;
    for (Eigen::Index k = 0; k < n_; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      const double keep = nearest_idx_[kk] == out ? second_[kk] : nearest_[kk];
      rep += std::min(keep, d2_(k, in));
    }
    const double pairsum = pairsum_ - rowsum_[static_cast<std::size_t>(out)] +
                           (rowsum_[static_cast<std::size_t>(in)] - d2_(in, out));
    return value(rep, pairsum, selected_.size());
  }

  void add(Eigen::Index c) {
    selected_.push_back(static_cast<std::size_t>(c));
    rebuild();
  }

  void swap(std::size_t position, Eigen::Index in) {
    selected_[position] = static_cast<std::size_t>(in);
    rebuild();
  }

 private:
  void rebuild() {
    std::fill(in_set_.begin(), in_set_.end(), false);
    for (std::size_t s : selected_) in_set_[s] = true;
    rep_ = 0.0;
    pairsum_ = 0.0;
    for (Eigen::Index k = 0; k < n_; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      double best = kInf;
      double next = kInf;
      Eigen::Index best_idx = -1;
      double row = 0.0;
      for (std::size_t s : selected_) {
        const double v = d2_(k, static_cast<Eigen::Index>(s));
        row += v;
        if (v < best || (v == best && static_cast<Eigen::Index>(s) < best_idx)) {
          next = best;
          best = v;
          best_idx = static_cast<Eigen::Index>(s);
        } else if (v < next) {
          next = v;
        }
      }
      nearest_[kk] = best;
      second_[kk] = next;
      nearest_idx_[kk] = best_idx;
      rowsum_[kk] = row;
      rep_ += best;
    }
    for (std::size_t s : selected_) pairsum_ += rowsum_[s];
    pairsum_ *= 0.5;
  }

  const Eigen::MatrixXd& d2_;
  double alpha_;
  double scatter_;
  Eigen::Index n_;
  std::vector<std::size_t> selected_;
  std::vector<bool> in_set_;
  std::vector<double> nearest_;
  std::vector<double> second_;
  std::vector<Eigen::Index> nearest_idx_;
  std::vector<double> rowsum_;
  double rep_ = 0.0;
  double pairsum_ = 0.0;
};

}  // namespace

const char* to_string(SamplerMethod method) noexcept {
  switch (method) {
    case SamplerMethod::precis:
      return "precis";
    case SamplerMethod::random:
      return "random";
    case SamplerMethod::kmedoids:
      return "kmedoids";
  }
  return "unknown";
}

SamplerMethod sampler_from_string(const std::string& text) {
  if (text == "precis") return SamplerMethod::precis;
  if (text == "random") return SamplerMethod::random;
  if (text == "kmedoids") return SamplerMethod::kmedoids;
  fail(Errc::invalid_argument, "unknown sampler '" + text + "'");
}

double rep_cost(std::span<const std::size_t> selected, const Eigen::MatrixXd& x) {
  if (selected.empty()) fail(Errc::invalid_argument, "rep_cost needs a nonempty selection");
  double total = 0.0;
  for (Eigen::Index k = 0; k < x.rows(); ++k) {
    double best = kInf;
    for (std::size_t s : selected) best = std::min(best, (x.row(k) - x.row(static_cast<Eigen::Index>(s))).squaredNorm());
    total += best;
  }
  return total;
}

double div_cost(std::span<const std::size_t> selected, const Eigen::MatrixXd& x) {
  if (selected.empty()) fail(Errc::invalid_argument, "div_cost needs a nonempty selection");
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(x.cols());
  for (std::size_t s : selected) mean += x.row(static_cast<Eigen::Index>(s));
  mean /= static_cast<double>(selected.size());
  double total = 0.0;
  for (std::size_t s : selected) total += (x.row(static_cast<Eigen::Index>(s)) - mean).squaredNorm();
  return total;
}

double precis_objective(std::span<const std::size_t> selected, const Eigen::MatrixXd& x, double alpha) {
  const double scatter = total_scatter(x);
  return (alpha * rep_cost(selected, x) - (1.0 - alpha) * div_cost(selected, x)) / scatter;
}

SampleSet select_precis(const Eigen::MatrixXd& x, const PrecisConfig& config) {
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) fail(Errc::invalid_argument, "alpha must lie in [0, 1]");
  check_k(config.k, x.rows());
  SampleSet out;
  out.method = SamplerMethod::precis;
  const Eigen::Index n = x.rows();
  if (config.k == static_cast<std::size_t>(n)) {
    out.indices = all_rows(n);
    out.objective = precis_objective(out.indices, x, config.alpha);
    return out;
  }

  const Eigen::MatrixXd d2 = squared_distance_matrix(x);
  PrecisState state(d2, config.alpha, total_scatter(x));

  while (state.selected().size() < config.k) {
    double best = kInf;
    Eigen::Index pick = -1;
    for (Eigen::Index c = 0; c < n; ++c) {
      if (state.contains(c)) continue;
      const double v = state.with_added(c);
      if (v < best) {
        best = v;
        pick = c;
      }
    }
    state.add(pick);
  }

  for (int pass = 0; pass < config.swap_passes; ++pass) {
    bool changed = false;
    for (std::size_t pos = 0; pos < config.k; ++pos) {
      const auto out_idx = static_cast<Eigen::Index>(state.selected()[pos]);
      double best = state.current();
      Eigen::Index pick = -1;
      for (Eigen::Index c = 0; c < n; ++c) {
        if (state.contains(c)) continue;
        const double v = state.with_swap(out_idx, c);
        if (improves(v, best)) {
          best = v;
          pick = c;
        }
      }
      if (pick >= 0) {
        state.swap(pos, pick);
        changed = true;
      }
    }
    if (!changed) break;
  }

  out.indices = state.selected();
  std::sort(out.indices.begin(), out.indices.end());
  out.objective = state.current();
  return out;
}

SampleSet select_random(Eigen::Index rows, std::size_t k, std::uint64_t seed) {
  check_k(k, rows);
  std::vector<std::size_t> pool = all_rows(rows);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> dist(i, pool.size() - 1);
    std::swap(pool[i], pool[dist(rng)]);
  }
  SampleSet out;
  out.method = SamplerMethod::random;
  out.indices.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

SampleSet select_kmedoids(const Eigen::MatrixXd& x, std::size_t k, std::uint64_t /*seed*/) {
  check_k(k, x.rows());
  const Eigen::Index n = x.rows();
  const Eigen::MatrixXd dist = squared_distance_matrix(x).cwiseSqrt();
  SampleSet out;
  out.method = SamplerMethod::kmedoids;

  std::vector<std::size_t> medoids;
  std::vector<bool> is_medoid(static_cast<std::size_t>(n), false);
  std::vector<double> nearest(static_cast<std::size_t>(n), kInf);

  // BUILD
  while (medoids.size() < k) {
    double best_gain = -kInf;
    Eigen::Index pick = -1;
    for (Eigen::Index c = 0; c < n; ++c) {
      if (is_medoid[static_cast<std::size_t>(c)]) continue;
      double gain = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double cur = nearest[static_cast<std::size_t>(j)];
        gain += cur == kInf ? -dist(j, c) : std::max(0.0, cur - dist(j, c));
      }
      if (gain > best_gain) {
        best_gain = gain;
        pick = c;
      }
    }
    medoids.push_back(static_cast<std::size_t>(pick));
    is_medoid[static_cast<std::size_t>(pick)] = true;
    for (Eigen::Index j = 0; j < n; ++j) {
      nearest[static_cast<std::size_t>(j)] = std::min(nearest[static_cast<std::size_t>(j)], dist(j, pick));
    }
  }

  auto cost_of = [&](const std::vector<std::size_t>& meds) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      double best = kInf;
      for (std::size_t m : meds) best = std::min(best, dist(j, static_cast<Eigen::Index>(m)));
      total += best;
    }
    return total;
  };

  // SWAP: apply the best improving (medoid, non-medoid) exchange until none remains.
  double cost = cost_of(medoids);
  for (;;) {
    std::vector<double> first(static_cast<std::size_t>(n), kInf);
    std::vector<double> second(static_cast<std::size_t>(n), kInf);
    std::vector<std::size_t> owner(static_cast<std::size_t>(n), 0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      for (std::size_t p = 0; p < medoids.size(); ++p) {
        const double v = dist(j, static_cast<Eigen::Index>(medoids[p]));
        if (v < first[jj]) {
          second[jj] = first[jj];
          first[jj] = v;
          owner[jj] = p;
        } else if (v < second[jj]) {
          second[jj] = v;
        }
      }
    }
    double best = cost;
    std::size_t best_pos = 0;
    Eigen::Index best_in = -1;
    for (std::size_t p = 0; p < medoids.size(); ++p) {
      for (Eigen::Index c = 0; c < n; ++c) {
        if (is_medoid[static_cast<std::size_t>(c)]) continue;
        double total = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const auto jj = static_cast<std::size_t>(j);
          const double keep = owner[jj] == p ? second[jj] : first[jj];
          total += std::min(keep, dist(j, c));
        }
        if (improves(total, best)) {
          best = total;
          best_pos = p;
          best_in = c;
        }
      }
    }
    if (best_in < 0) break;
    is_medoid[medoids[best_pos]] = false;
    medoids[best_pos] = static_cast<std::size_t>(best_in);
    is_medoid[static_cast<std::size_t>(best_in)] = true;
    cost = cost_of(medoids);
  }

  out.indices = medoids;
  std::sort(out.indices.begin(), out.indices.end());
  out.objective = cost;
  return out;
}

}  // namespace testdrive
