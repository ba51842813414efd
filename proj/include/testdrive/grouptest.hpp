#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "testdrive/core.hpp"

namespace testdrive {

/// Inverse binomial pooled testing: pools of `pool_size` are tested until
/// `target_positives` positive pools have been seen.
struct GroupTestConfig {
  int pool_size = 2;         // s
  int target_positives = 2;  // n
  std::uint64_t seed = 1;
  std::size_t max_pools = 0; // 0 = the whole supply (supply / s)

  void validate() const;
};

/// Maximum-likelihood prevalence from T tested pools of size s with n positive:
/// 1 - (1 - n/T)^(1/s).
double estimate_prevalence(std::uint64_t positives, std::uint64_t pools_tested, int pool_size);

struct GroupTestState {
  std::uint64_t pools_tested = 0;  // T
  std::uint64_t positives = 0;
  std::vector<std::size_t> consumed;  // patch ids in draw order
  std::optional<std::vector<std::size_t>> pending;  // drawn, not yet answered
  bool stopped = false;
  bool exhausted = false;  // stopped before reaching the target
};

struct PrevalenceEstimate {
  double p_hat = 0.0;
  std::uint64_t pools_tested = 0;
  std::uint64_t positives = 0;
  int pool_size = 0;
  bool exhausted = false;
  bool low_confidence = false;  // exhausted, or no pool tested yet
};

/// One sequential run over a supply of `supply` patch ids [0, supply).
/// Patches are drawn uniformly without replacement across the whole run.
class GroupTestRun {
 public:
  /// Draws with a generator seeded from config.seed.
  GroupTestRun(GroupTestConfig config, std::size_t supply);

  /// Draws in ascending order of `draw_keys` (ties by id). With i.i.d. uniform
  /// keys this is uniform sampling without replacement; keys derived from patch
  /// identity let runs over overlapping supplies share their random draws.
  GroupTestRun(GroupTestConfig config, std::vector<std::uint64_t> draw_keys);

  /// Draws the next pool, or returns nullopt (and stops the run as exhausted)
  /// when fewer than s unconsumed patches remain or the pool cap is reached.
  /// Calling again while a pool is pending returns that pool.
  std::optional<std::vector<std::size_t>> next_pool();

  /// Records the answer for the pending pool.
  void record_answer(const Label& answer);

  const GroupTestState& state() const noexcept { return state_; }
  const GroupTestConfig& config() const noexcept { return config_; }
  std::size_t supply() const noexcept { return supply_; }
  std::size_t max_pools() const noexcept { return max_pools_; }
  PrevalenceEstimate estimate() const;

 private:
  GroupTestConfig config_;
  std::size_t supply_;
  std::size_t max_pools_;
  std::vector<std::size_t> remaining_;  // keyed runs: draw order, consumed from the front
  bool keyed_ = false;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
  GroupTestState state_;
};

/// round(p_hat * complement_size).
std::uint64_t false_negative_count(double p_hat, std::size_t complement_size);

}  // namespace testdrive
