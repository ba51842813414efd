#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "testdrive/complement.hpp"
#include "testdrive/core.hpp"
#include "testdrive/features.hpp"
#include "testdrive/grouptest.hpp"
#include "testdrive/homogenize.hpp"
#include "testdrive/ingest.hpp"
#include "testdrive/pooling.hpp"
#include "testdrive/sampling.hpp"

namespace testdrive {

enum class OracleMode { human, simulated };

struct SessionConfig {
  SweepStrategy sweep = SweepStrategy::quantiles(5);
  double sample_fraction = 0.10;
  std::size_t min_samples = 8;
  std::size_t max_samples = 500;
  SamplerMethod sampler = SamplerMethod::precis;
  double alpha = 0.5;
  int swap_passes = 50;
  bool homogenize = true;
  std::optional<double> gamma_high;  // default: 90th score percentile
  std::optional<double> gamma_low;   // default: 10th score percentile
  std::size_t background_cap = 500;
  MetricConfig metric;
  GroupTestConfig group;             // seed is derived from `seed`
  PoolMethod pool_method = PoolMethod::average;
  double exclusion_threshold = 0.2;
  double precision_iou = 0.5;
  double pool_iou = 0.25;
  std::uint64_t seed = 1;
  OracleMode oracle = OracleMode::human;
  std::optional<std::filesystem::path> transform;  // reuse a persisted transform

  void validate() const;
  /// Samples shown at a threshold with n detections: clamp(ceil(fraction * n), min, max), at most n.
  std::size_t samples_for(std::size_t detections) const;
};

struct SessionInputs {
  std::filesystem::path manifest;
  std::filesystem::path detections;
  std::optional<std::filesystem::path> groundtruth;
};

/// `key = value` lines, '#' comments. Input paths (manifest, detections,
/// groundtruth) may appear alongside the config keys; unknown keys are errors.
void parse_config_text(const std::string& text, SessionConfig& config, SessionInputs* inputs = nullptr);
SessionConfig parse_config_file(const std::filesystem::path& path, SessionInputs* inputs = nullptr);
/// Applies one key; throws Errc::invalid_argument for unknown keys or bad values.
void set_config_value(SessionConfig& config, SessionInputs* inputs, const std::string& key, const std::string& value);
/// Deterministic snapshot (sorted keys, round-trippable numbers).
std::string format_config(const SessionConfig& config, const SessionInputs* inputs = nullptr);

enum class QueryKind { precision_sample, recall_pool };
const char* to_string(QueryKind kind) noexcept;

struct Query {
  std::string id;
  QueryKind kind = QueryKind::precision_sample;
  double gamma = 0.0;
  std::size_t gamma_index = 0;
  std::size_t ordinal = 0;  // sample position or pool number within the threshold
  std::vector<PatchProvenance> members;
};

enum class GammaStatus { precision, recall, complete };
const char* to_string(GammaStatus status) noexcept;

struct EstimateRecord {
  double gamma = 0.0;
  std::size_t detections = 0;        // N
  std::size_t planned_samples = 0;
  std::size_t samples = 0;           // K: precision samples answered
  std::size_t false_positives = 0;   // FP
  double precision = 0.0;            // 1 - FP / K
  std::uint64_t pools_tested = 0;    // T
  std::uint64_t positives = 0;
  int pool_size = 0;
  double prevalence = 0.0;           // beta
  std::size_t complement_size = 0;
  std::uint64_t false_negatives = 0; // round(beta * |complement|)
  double recall = 0.0;
  GammaStatus status = GammaStatus::precision;
  std::vector<std::string> flags;
  std::optional<double> true_precision;
  std::optional<double> true_recall;
};

/// P N / (P N + fn); nullopt when both terms vanish.
std::optional<double> recall_estimate(double precision, std::size_t detections, std::uint64_t false_negatives);

struct GroundTruthScore {
  double precision = 0.0;
  double recall = 0.0;
};

/// Standard evaluation: per image, detections in descending score greedily
/// claim the unmatched ground-truth box of highest IoU >= iou_threshold;
/// duplicates count as false positives.
GroundTruthScore score_against_groundtruth(std::span<const Detection> all, std::span<const std::size_t> members,
                                           std::span<const GroundTruthBox> groundtruth, double iou_threshold);

/// Ground-truth-driven stand-in for the human.
class SimulatedOracle {
 public:
  SimulatedOracle(std::vector<GroundTruthBox> groundtruth, double precision_iou = 0.5, double pool_iou = 0.25);

  /// Precision sample: 1 iff its box has IoU >= precision_iou with some
  /// ground-truth box (so duplicates count as objects). Pool: 1 iff any member
  /// has IoU >= pool_iou with some ground-truth box.
  Label answer(const Query& query) const;

 private:
  std::map<std::string, std::vector<BoundingBox>> boxes_;
  double precision_iou_;
  double pool_iou_;
};

struct LogEntry {
  std::string query_id;
  QueryKind kind = QueryKind::precision_sample;
  double gamma = 0.0;
  int label = 0;
  std::string timestamp;
  LabelSource source = LabelSource::human;
};

/// One full estimation run. Not thread-safe; callers serialise access.
class Session {
 public:
  /// Builds the sweep, learns (or loads) the transform, draws the precision
  /// samples and prepares one group test per threshold. When `directory` is
  /// given it receives the config snapshot, transform and answer log.
  static std::unique_ptr<Session> start(const SessionInputs& inputs, const SessionConfig& config,
                                        const std::optional<std::filesystem::path>& directory = std::nullopt);

  /// Rebuilds a session from its directory and replays answers.log. A final
  /// line without its newline is treated as a torn write and skipped with a
  /// warning; any other malformed line throws Errc::data naming the line.
  static std::unique_ptr<Session> open(const std::filesystem::path& directory);

  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const SessionConfig& config() const noexcept;
  const SessionInputs& inputs() const noexcept;
  const ThresholdSweep& sweep() const noexcept;
  std::span<const Detection> detections() const noexcept;
  const DatasetManifest& manifest() const noexcept;
  const std::optional<std::filesystem::path>& directory() const noexcept;
  const std::vector<std::string>& warnings() const noexcept;
  const std::vector<LogEntry>& log() const noexcept;
  const TrainingReport* training() const noexcept;  // nullptr if loaded or not homogenised

  /// Index of gamma in the sweep; throws Errc::not_found.
  std::size_t gamma_index(double gamma) const;
  /// Lowest threshold that is not complete, if any.
  std::optional<std::size_t> first_incomplete() const;

  /// Precision samples first (lowest unanswered position), then the pending or
  /// next recall pool. nullopt once the threshold is complete.
  std::optional<Query> next_query(std::size_t gamma_index);
  std::optional<Query> next_query_for(double gamma) { return next_query(gamma_index(gamma)); }

  /// Records an answer for an outstanding query. The log line is written before
  /// any state changes. Errc::not_found for unknown ids, Errc::conflict for
  /// answered ones.
  EstimateRecord submit_answer(const std::string& query_id, const Label& label);

  EstimateRecord estimate(std::size_t gamma_index) const;
  std::vector<EstimateRecord> estimates() const;

  /// Image for the UI: the detection crop for a sample, the pooled tiles for a pool.
  Image render_query(const Query& query);

  /// Precision sample set for a threshold (indices into sweep().members[i]).
  const SampleSet& samples(std::size_t gamma_index) const;
  const ComplementSet& complement(std::size_t gamma_index) const;

 private:
  struct Impl;
  explicit Session(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

/// report.csv for complete thresholds:
/// gamma,N,K,fp_hat,p_hat,T,positives,beta_hat,fn_hat,recall_hat,flags[,true_p,true_r]
std::string format_report(const std::vector<EstimateRecord>& records);
/// Writes report.csv (and report.svg when `plot`) into `directory`. Errc::invalid_argument
/// when no threshold is complete.
void export_report(const Session& session, const std::filesystem::path& directory, bool plot = false);
std::string render_plot_svg(const std::vector<EstimateRecord>& records);

/// Drives every threshold to completion with the oracle.
void run_to_completion(Session& session, const SimulatedOracle& oracle);

}  // namespace testdrive
