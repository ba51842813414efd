#include "testdrive/grouptest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "testdrive/error.hpp"

namespace testdrive {

void GroupTestConfig::validate() const {
  if (pool_size < 1) fail(Errc::invalid_argument, "pool size must be at least 1");
  if (target_positives < 1) fail(Errc::invalid_argument, "target positives must be at least 1");
  if (max_pools != 0 && max_pools < static_cast<std::size_t>(target_positives)) {
    fail(Errc::invalid_argument, "max pools must be at least the target positives");
  }
}

double estimate_prevalence(std::uint64_t positives, std::uint64_t pools_tested, int pool_size) {
  if (pools_tested == 0) fail(Errc::invalid_argument, "prevalence needs at least one tested pool");
  if (positives > pools_tested) fail(Errc::invalid_argument, "more positive pools than pools tested");
  if (pool_size < 1) fail(Errc::invalid_argument, "pool size must be at least 1");
  const double ratio = static_cast<double>(positives) / static_cast<double>(pools_tested);
  if (positives == pools_tested) return 1.0;
  if (pool_size == 1) return ratio;
  // 1 - (1 - r)^(1/s), evaluated without cancellation for small r.
  return -std::expm1(std::log1p(-ratio) / pool_size);
}

GroupTestRun::GroupTestRun(GroupTestConfig config, std::size_t supply)
    : config_(config), supply_(supply), rng_(config.seed) {
  config_.validate();
  const std::size_t full = supply_ / static_cast<std::size_t>(config_.pool_size);
  max_pools_ = config_.max_pools == 0 ? full : std::min(config_.max_pools, full);
  remaining_.resize(supply_);
  std::iota(remaining_.begin(), remaining_.end(), std::size_t{0});
}

GroupTestRun::GroupTestRun(GroupTestConfig config, std::vector<std::uint64_t> draw_keys)
    : GroupTestRun(config, draw_keys.size()) {
  keyed_ = true;
  std::stable_sort(remaining_.begin(), remaining_.end(),
                   [&](std::size_t a, std::size_t b) { return draw_keys[a] < draw_keys[b]; });
}

std::optional<std::vector<std::size_t>> GroupTestRun::next_pool() {
  if (state_.pending) return state_.pending;
  if (state_.stopped) return std::nullopt;
  const auto s = static_cast<std::size_t>(config_.pool_size);
  const std::size_t available = keyed_ ? supply_ - cursor_ : remaining_.size();
  if (available < s || state_.pools_tested >= max_pools_) {
    state_.stopped = true;
    state_.exhausted = state_.positives < static_cast<std::uint64_t>(config_.target_positives);
    return std::nullopt;
  }
  std::vector<std::size_t> pool;
  pool.reserve(s);
  if (keyed_) {
    pool.assign(remaining_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                remaining_.begin() + static_cast<std::ptrdiff_t>(cursor_ + s));
    cursor_ += s;
  } else {
    for (std::size_t i = 0; i < s; ++i) {
      std::uniform_int_distribution<std::size_t> dist(0, remaining_.size() - 1);
      const std::size_t at = dist(rng_);
      pool.push_back(remaining_[at]);
      remaining_[at] = remaining_.back();
      remaining_.pop_back();
    }
  }
  state_.consumed.insert(state_.consumed.end(), pool.begin(), pool.end());
  state_.pending = pool;
  return pool;
}

void GroupTestRun::record_answer(const Label& answer) {
  if (state_.stopped) fail(Errc::conflict, "group test already stopped");
  if (!state_.pending) fail(Errc::conflict, "no pool is awaiting an answer");
  state_.pending.reset();
  ++state_.pools_tested;
  if (answer.positive()) ++state_.positives;
  if (state_.positives >= static_cast<std::uint64_t>(config_.target_positives)) {
    state_.stopped = true;
  } else if (state_.pools_tested >= max_pools_) {
    state_.stopped = true;
    state_.exhausted = true;
  }
}

PrevalenceEstimate GroupTestRun::estimate() const {
  PrevalenceEstimate e;
  e.pools_tested = state_.pools_tested;
  e.positives = state_.positives;
  e.pool_size = config_.pool_size;
  e.exhausted = state_.exhausted;
  e.low_confidence = state_.exhausted || state_.pools_tested == 0;
  e.p_hat = state_.pools_tested ? estimate_prevalence(state_.positives, state_.pools_tested, config_.pool_size) : 0.0;
  return e;
}

std::uint64_t false_negative_count(double p_hat, std::size_t complement_size) {
  if (!(p_hat >= 0.0 && p_hat <= 1.0)) fail(Errc::invalid_argument, "prevalence must lie in [0, 1]");
  return static_cast<std::uint64_t>(std::llround(p_hat * static_cast<double>(complement_size)));
}

}  // namespace testdrive
