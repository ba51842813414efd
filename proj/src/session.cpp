#include "testdrive/session.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "testdrive/error.hpp"

namespace testdrive {

namespace {

constexpr const char* kConfigFile = "config";
constexpr const char* kLogFile = "answers.log";
constexpr const char* kTransformFile = "transform.bin";
constexpr const char* kDescriptorFile = "descriptors.bin";

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string number(double v, const char* fmt = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    fail(Errc::invalid_argument, "config key '" + key + "' expects a number, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    fail(Errc::invalid_argument, "config key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return v;
}

int parse_int(const std::string& key, const std::string& value) {
  const std::uint64_t v = parse_unsigned(key, value);
  if (v > 1'000'000'000ULL) fail(Errc::invalid_argument, "config key '" + key + "' is out of range");
  return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail(Errc::invalid_argument, "config key '" + key + "' expects true/false, got '" + value + "'");
}

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

QueryKind kind_from_string(const std::string& text) {
  if (text == "precision-sample") return QueryKind::precision_sample;
  if (text == "recall-pool") return QueryKind::recall_pool;
  fail(Errc::data, "unknown query kind '" + text + "'");
}

struct QueryRef {
  std::size_t gamma_index = 0;
  QueryKind kind = QueryKind::precision_sample;
  std::size_t ordinal = 0;
};

std::string make_query_id(std::size_t gamma_index, QueryKind kind, std::size_t ordinal) {
  return "g" + std::to_string(gamma_index) + (kind == QueryKind::precision_sample ? "-s" : "-p") +
         std::to_string(ordinal);
}

std::optional<QueryRef> parse_query_id(const std::string& id) {
  // g<gamma>-s<ordinal> | g<gamma>-p<ordinal>
  if (id.size() < 5 || id[0] != 'g') return std::nullopt;
  const auto dash = id.find('-');
  if (dash == std::string::npos || dash + 2 >= id.size() + 1) return std::nullopt;
  QueryRef ref;
  const char* begin = id.data() + 1;
  const char* mid = id.data() + dash;
  auto r1 = std::from_chars(begin, mid, ref.gamma_index);
  if (r1.ec != std::errc() || r1.ptr != mid || begin == mid) return std::nullopt;
  if (dash + 1 >= id.size()) return std::nullopt;
  const char tag = id[dash + 1];
  if (tag == 's') {
    ref.kind = QueryKind::precision_sample;
  } else if (tag == 'p') {
    ref.kind = QueryKind::recall_pool;
  } else {
    return std::nullopt;
  }
  const char* num = id.data() + dash + 2;
  const char* end = id.data() + id.size();
  auto r2 = std::from_chars(num, end, ref.ordinal);
  if (r2.ec != std::errc() || r2.ptr != end || num == end) return std::nullopt;
  return ref;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void SessionConfig::validate() const {
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
    fail(Errc::invalid_argument, "sample fraction must lie in (0, 1]");
  }
  if (min_samples < 1 || max_samples < min_samples) {
    fail(Errc::invalid_argument, "sample clamp needs 1 <= min_samples <= max_samples");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail(Errc::invalid_argument, "alpha must lie in [0, 1]");
  if (swap_passes < 0) fail(Errc::invalid_argument, "swap passes must be non-negative");
  if (gamma_high && gamma_low && !(*gamma_high > *gamma_low)) {
    fail(Errc::invalid_argument, "gamma_high must exceed gamma_low");
  }
  if (background_cap < 1) fail(Errc::invalid_argument, "background cap must be positive");
  metric.validate();
  group.validate();
  if (!(exclusion_threshold >= 0.0 && exclusion_threshold <= 1.0)) {
    fail(Errc::invalid_argument, "exclusion threshold must lie in [0, 1]");
  }
  if (!(precision_iou > 0.0 && precision_iou <= 1.0) || !(pool_iou > 0.0 && pool_iou <= 1.0)) {
    fail(Errc::invalid_argument, "IoU thresholds must lie in (0, 1]");
  }
  if (sweep.kind == SweepStrategy::Kind::quantiles && sweep.count < 1) {
    fail(Errc::invalid_argument, "quantile count must be at least 1");
  }
  if (sweep.kind == SweepStrategy::Kind::explicit_list && sweep.gammas.empty()) {
    fail(Errc::invalid_argument, "explicit threshold list is empty");
  }
}

std::size_t SessionConfig::samples_for(std::size_t detections) const {
  const double raw = std::ceil(sample_fraction * static_cast<double>(detections) - 1e-9);
  std::size_t k = static_cast<std::size_t>(std::max(0.0, raw));
  k = std::clamp(k, min_samples, max_samples);
  return std::min(k, detections);
}

void set_config_value(SessionConfig& c, SessionInputs* inputs, const std::string& key, const std::string& value) {
  if (key == "manifest" || key == "detections" || key == "groundtruth") {
    if (!inputs) fail(Errc::invalid_argument, "input path '" + key + "' is not accepted here");
    if (key == "manifest") inputs->manifest = value;
    if (key == "detections") inputs->detections = value;
    if (key == "groundtruth") {
      if (value.empty()) {
        inputs->groundtruth.reset();
      } else {
        inputs->groundtruth = value;
      }
    }
  } else if (key == "gammas") {
    if (value.empty()) {
      if (c.sweep.kind == SweepStrategy::Kind::explicit_list) c.sweep = SweepStrategy::quantiles(5);
      return;
    }
    std::vector<double> gammas;
    for (const std::string& field : split_csv_line(value)) gammas.push_back(parse_double(key, field));
    c.sweep = SweepStrategy::explicit_list(std::move(gammas));
  } else if (key == "sweep_quantiles") {
    c.sweep = SweepStrategy::quantiles(parse_int(key, value));
  } else if (key == "sample_fraction") {
    c.sample_fraction = parse_double(key, value);
  } else if (key == "min_samples") {
    c.min_samples = parse_unsigned(key, value);
  } else if (key == "max_samples") {
    c.max_samples = parse_unsigned(key, value);
  } else if (key == "sampler") {
    c.sampler = sampler_from_string(value);
  } else if (key == "alpha") {
    c.alpha = parse_double(key, value);
  } else if (key == "swap_passes") {
    c.swap_passes = parse_int(key, value);
  } else if (key == "homogenize") {
    c.homogenize = parse_bool(key, value);
  } else if (key == "gamma_high") {
    if (value.empty()) {
      c.gamma_high.reset();
    } else {
      c.gamma_high = parse_double(key, value);
    }
  } else if (key == "gamma_low") {
    if (value.empty()) {
      c.gamma_low.reset();
    } else {
      c.gamma_low = parse_double(key, value);
    }
  } else if (key == "background_cap") {
    c.background_cap = parse_unsigned(key, value);
  } else if (key == "metric_lambda") {
    c.metric.lambda = parse_double(key, value);
  } else if (key == "metric_u") {
    if (value.empty()) {
      c.metric.u.reset();
    } else {
      c.metric.u = parse_double(key, value);
    }
  } else if (key == "metric_ell") {
    if (value.empty()) {
      c.metric.ell.reset();
    } else {
      c.metric.ell = parse_double(key, value);
    }
  } else if (key == "metric_iterations") {
    c.metric.max_iterations = parse_int(key, value);
  } else if (key == "metric_step") {
    c.metric.step_size = parse_double(key, value);
  } else if (key == "metric_similar_cap") {
    c.metric.similar_cap = parse_unsigned(key, value);
  } else if (key == "metric_dissimilar_cap") {
    c.metric.dissimilar_cap = parse_unsigned(key, value);
  } else if (key == "pca_dimension") {
    c.metric.reduced_dimension = parse_int(key, value);
  } else if (key == "pool_size") {
    c.group.pool_size = parse_int(key, value);
  } else if (key == "target_positives") {
    c.group.target_positives = parse_int(key, value);
  } else if (key == "max_pools") {
    c.group.max_pools = parse_unsigned(key, value);
  } else if (key == "pool_method") {
    c.pool_method = pool_method_from_string(value);
  } else if (key == "exclusion_threshold") {
    c.exclusion_threshold = parse_double(key, value);
  } else if (key == "precision_iou") {
    c.precision_iou = parse_double(key, value);
  } else if (key == "pool_iou") {
    c.pool_iou = parse_double(key, value);
  } else if (key == "seed") {
    c.seed = parse_unsigned(key, value);
  } else if (key == "oracle") {
    if (value == "human") {
      c.oracle = OracleMode::human;
    } else if (value == "simulated") {
      c.oracle = OracleMode::simulated;
    } else {
      fail(Errc::invalid_argument, "oracle must be human or simulated");
    }
  } else if (key == "transform") {
    if (value.empty()) {
      c.transform.reset();
    } else {
      c.transform = value;
    }
  } else {
    fail(Errc::invalid_argument, "unknown config key '" + key + "'");
  }
}

void parse_config_text(const std::string& text, SessionConfig& config, SessionInputs* inputs) {
  std::istringstream in(text);
  std::string line;
  std::size_t number_of_line = 0;
  while (std::getline(in, line)) {
    ++number_of_line;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(Errc::invalid_argument, "config line " + std::to_string(number_of_line) + ": expected key = value");
    }
    set_config_value(config, inputs, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

SessionConfig parse_config_file(const std::filesystem::path& path, SessionInputs* inputs) {
  std::ifstream in(path);
  if (!in) fail(Errc::data, "cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  SessionConfig config;
  parse_config_text(buf.str(), config, inputs);
  return config;
}

std::string format_config(const SessionConfig& c, const SessionInputs* inputs) {
  std::map<std::string, std::string> kv;
  if (inputs) {
    kv["manifest"] = inputs->manifest.string();
    kv["detections"] = inputs->detections.string();
    kv["groundtruth"] = inputs->groundtruth ? inputs->groundtruth->string() : "";
  }
  if (c.sweep.kind == SweepStrategy::Kind::explicit_list) {
    std::string list;
    for (std::size_t i = 0; i < c.sweep.gammas.size(); ++i) list += (i ? "," : "") + number(c.sweep.gammas[i]);
    kv["gammas"] = list;
  } else {
    kv["sweep_quantiles"] = std::to_string(c.sweep.count);
  }
  kv["sample_fraction"] = number(c.sample_fraction);
  kv["min_samples"] = std::to_string(c.min_samples);
  kv["max_samples"] = std::to_string(c.max_samples);
  kv["sampler"] = to_string(c.sampler);
  kv["alpha"] = number(c.alpha);
  kv["swap_passes"] = std::to_string(c.swap_passes);
  kv["homogenize"] = c.homogenize ? "true" : "false";
  kv["gamma_high"] = c.gamma_high ? number(*c.gamma_high) : "";
  kv["gamma_low"] = c.gamma_low ? number(*c.gamma_low) : "";
  kv["background_cap"] = std::to_string(c.background_cap);
  kv["metric_lambda"] = number(c.metric.lambda);
  kv["metric_u"] = c.metric.u ? number(*c.metric.u) : "";
  kv["metric_ell"] = c.metric.ell ? number(*c.metric.ell) : "";
  kv["metric_iterations"] = std::to_string(c.metric.max_iterations);
  kv["metric_step"] = number(c.metric.step_size);
  kv["metric_similar_cap"] = std::to_string(c.metric.similar_cap);
  kv["metric_dissimilar_cap"] = std::to_string(c.metric.dissimilar_cap);
  kv["pca_dimension"] = std::to_string(c.metric.reduced_dimension);
  kv["pool_size"] = std::to_string(c.group.pool_size);
  kv["target_positives"] = std::to_string(c.group.target_positives);
  kv["max_pools"] = std::to_string(c.group.max_pools);
  kv["pool_method"] = to_string(c.pool_method);
  kv["exclusion_threshold"] = number(c.exclusion_threshold);
  kv["precision_iou"] = number(c.precision_iou);
  kv["pool_iou"] = number(c.pool_iou);
  kv["seed"] = std::to_string(c.seed);
  kv["oracle"] = c.oracle == OracleMode::human ? "human" : "simulated";
  kv["transform"] = c.transform ? c.transform->string() : "";
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Estimates and ground truth

const char* to_string(QueryKind kind) noexcept {
  return kind == QueryKind::precision_sample ? "precision-sample" : "recall-pool";
}

const char* to_string(GammaStatus status) noexcept {
  switch (status) {
    case GammaStatus::precision:
      return "precision";
    case GammaStatus::recall:
      return "recall";
    case GammaStatus::complete:
      return "complete";
  }
  return "unknown";
}

std::optional<double> recall_estimate(double precision, std::size_t detections, std::uint64_t false_negatives) {
  if (!(precision >= 0.0 && precision <= 1.0)) fail(Errc::invalid_argument, "precision must lie in [0, 1]");
  const double found = precision * static_cast<double>(detections);
  const double total = found + static_cast<double>(false_negatives);
  if (total == 0.0) return std::nullopt;
  return found / total;
}

GroundTruthScore score_against_groundtruth(std::span<const Detection> all, std::span<const std::size_t> members,
                                           std::span<const GroundTruthBox> groundtruth, double iou_threshold) {
  std::map<std::string, std::vector<BoundingBox>> truth;
  for (const GroundTruthBox& g : groundtruth) truth[g.image_id].push_back(g.box);
  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, boxes] : truth) used[id].assign(boxes.size(), false);

  std::vector<std::size_t> order(members.begin(), members.end());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (all[a].image_id != all[b].image_id) return all[a].image_id < all[b].image_id;
    return all[a].score > all[b].score;
  });
  std::size_t tp = 0;
  for (std::size_t i : order) {
    const auto it = truth.find(all[i].image_id);
    if (it == truth.end()) continue;
    std::vector<bool>& taken = used[all[i].image_id];
    double best = iou_threshold;
    std::ptrdiff_t pick = -1;
    for (std::size_t g = 0; g < it->second.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(all[i].box, it->second[g]);
      if (v >= best) {
        best = v;
        pick = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (pick >= 0) {
      taken[static_cast<std::size_t>(pick)] = true;
      ++tp;
    }
  }
  GroundTruthScore s;
  s.precision = members.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(members.size());
  s.recall = groundtruth.empty() ? 1.0 : static_cast<double>(tp) / static_cast<double>(groundtruth.size());
  return s;
}

SimulatedOracle::SimulatedOracle(std::vector<GroundTruthBox> groundtruth, double precision_iou, double pool_iou)
    : precision_iou_(precision_iou), pool_iou_(pool_iou) {
  for (GroundTruthBox& g : groundtruth) boxes_[g.image_id].push_back(g.box);
}

Label SimulatedOracle::answer(const Query& query) const {
  const double threshold = query.kind == QueryKind::precision_sample ? precision_iou_ : pool_iou_;
  for (const PatchProvenance& m : query.members) {
    const auto it = boxes_.find(m.image_id);
    if (it == boxes_.end()) continue;
    for (const BoundingBox& g : it->second) {
      if (iou(m.box, g) >= threshold) return Label(1, LabelSource::simulated);
    }
  }
  return Label(0, LabelSource::simulated);
}

// ---------------------------------------------------------------------------
// Session

struct GammaRun {
  SampleSet samples;
  std::vector<int> answers;  // -1 = unanswered
  ComplementSet complement;
  std::unique_ptr<GroupTestRun> group;
};

struct Session::Impl {
  SessionConfig config;
  SessionInputs inputs;
  std::optional<std::filesystem::path> directory;
  DatasetManifest manifest;
  std::vector<Detection> detections;
  std::optional<std::vector<GroundTruthBox>> groundtruth;
  ThresholdSweep sweep;
  std::optional<Transform> transform;
  std::optional<TrainingReport> training;
  std::vector<GammaRun> runs;
  std::map<std::string, Image> images;
  std::vector<std::string> warnings;
  std::vector<LogEntry> log;

  const Image& image(const std::string& id) {
    auto it = images.find(id);
    if (it != images.end()) return it->second;
    const ManifestEntry* e = manifest.find(id);
    if (!e) fail(Errc::data, "unknown image '" + id + "'");
    return images.emplace(id, read_image(manifest.resolve(*e))).first->second;
  }

  Patch patch(const PatchProvenance& p, int w, int h) { return extract_patch(image(p.image_id), p.image_id, p.box, w, h); }

  void initialise(bool resuming);
  Transform obtain_transform(const FeatureMatrix& features, DescriptorCache* cache, bool resuming);
  void apply(const QueryRef& ref, const Label& label);
  void validate_outstanding(const QueryRef& ref, const std::string& id) const;
  void append_log(const LogEntry& entry);
  EstimateRecord estimate(std::size_t g) const;
  Query make_query(std::size_t g, QueryKind kind, std::size_t ordinal, std::vector<PatchProvenance> members) const;
};

Session::Session(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Session::~Session() = default;

void Session::Impl::initialise(bool resuming) {
  config.validate();
  manifest = load_manifest(inputs.manifest);
  DetectionLoad loaded = load_detections(inputs.detections, manifest);
  detections = std::move(loaded.detections);
  warnings.insert(warnings.end(), loaded.warnings.begin(), loaded.warnings.end());
  if (inputs.groundtruth) groundtruth = load_groundtruth(*inputs.groundtruth, manifest);

  sweep = build_sweep(detections, config.sweep);
  for (std::size_t g = 0; g < sweep.size(); ++g) {
    if (sweep.members[g].empty()) fail(Errc::data, "no detections at gamma " + number(sweep.gammas[g], "%g"));
  }

  if (directory) {
    std::filesystem::create_directories(*directory);
    if (!resuming) {
      const auto log_path = *directory / kLogFile;
      if (std::filesystem::exists(log_path) && std::filesystem::file_size(log_path) > 0) {
        fail(Errc::invalid_argument, "session directory " + directory->string() + " already holds answers");
      }
      std::ofstream(*directory / kConfigFile) << format_config(config, &inputs);
      std::ofstream(log_path, std::ios::trunc);
    }
  }

  // Homogenised descriptors for the samplers that need geometry.
  Eigen::MatrixXd features;
  if (config.sampler != SamplerMethod::random) {
    DescriptorCache cache;
    const auto cache_path = directory ? std::optional(*directory / kDescriptorFile) : std::nullopt;
    if (cache_path) cache = DescriptorCache::load(*cache_path);
    const HogConfig hog_config;
    std::vector<Patch> patches;
    patches.reserve(detections.size());
    for (const Detection& d : detections) patches.push_back(patch({d.image_id, d.box}, kPatchWidth, kPatchHeight));
    FeatureMatrix fm = featurize(patches, hog_config, &cache);
    if (config.homogenize) {
      transform = obtain_transform(fm, &cache, resuming);
      features = apply_transform(*transform, fm.rows);
    } else {
      features = std::move(fm.rows);
    }
    if (cache_path) cache.save(*cache_path);
  }

  runs.resize(sweep.size());
  for (std::size_t g = 0; g < sweep.size(); ++g) {
    const std::vector<std::size_t>& members = sweep.members[g];
    GammaRun& run = runs[g];
    const std::size_t k = config.samples_for(members.size());
    const std::uint64_t sample_seed = derive_seed(config.seed, 1, g);
    switch (config.sampler) {
      case SamplerMethod::random:
        run.samples = select_random(static_cast<Eigen::Index>(members.size()), k, sample_seed);
        break;
      case SamplerMethod::precis:
      case SamplerMethod::kmedoids: {
        Eigen::MatrixXd x(static_cast<Eigen::Index>(members.size()), features.cols());
        for (std::size_t i = 0; i < members.size(); ++i) {
          x.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(members[i]));
        }
        if (config.sampler == SamplerMethod::precis) {
          run.samples = select_precis(x, {config.alpha, k, config.swap_passes, sample_seed});
        } else {
          run.samples = select_kmedoids(x, k, sample_seed);
        }
        break;
      }
    }
    run.answers.assign(run.samples.indices.size(), -1);

    run.complement = build_complement(manifest, detections, members, average_box(detections, members),
                                      config.exclusion_threshold);
    warnings.insert(warnings.end(), run.complement.warnings.begin(), run.complement.warnings.end());
    // Draw keys depend only on tile identity, so every threshold walks its
    // complement in the same random order.
    std::vector<std::uint64_t> keys;
    keys.reserve(run.complement.size());
    const std::uint64_t pool_seed = derive_seed(config.seed, 2);
    for (const PatchProvenance& p : run.complement.patches) {
      std::uint64_t h = splitmix64(pool_seed ^ fnv1a(p.image_id));
      h = splitmix64(h ^ static_cast<std::uint64_t>(p.box.x));
      h = splitmix64(h ^ static_cast<std::uint64_t>(p.box.y) ^ (static_cast<std::uint64_t>(p.box.w) << 32));
      keys.push_back(h);
    }
    GroupTestConfig gc = config.group;
    gc.seed = pool_seed;
    run.group = std::make_unique<GroupTestRun>(gc, std::move(keys));
  }
}

Transform Session::Impl::obtain_transform(const FeatureMatrix& fm, DescriptorCache* cache, bool resuming) {
  if (config.transform) {
    Transform t = Transform::load(*config.transform);
    if (t.input_dimension() != fm.dimension()) fail(Errc::data, "transform dimension does not match descriptors");
    return t;
  }
  const auto stored = directory ? std::optional(*directory / kTransformFile) : std::nullopt;
  if (resuming && stored && std::filesystem::exists(*stored)) return Transform::load(*stored);

  std::vector<double> scores;
  for (const Detection& d : detections) scores.push_back(d.score);
  const double gamma_high = config.gamma_high ? *config.gamma_high : quantile(scores, 0.9);
  const double gamma_low = config.gamma_low ? *config.gamma_low : quantile(scores, 0.1);
  if (!(gamma_high > gamma_low)) {
    warnings.push_back("scores do not separate gamma_high from gamma_low; homogenisation skipped");
    return Transform::identity(fm.dimension());
  }
  const auto low_members = filter_detections(detections, gamma_low);
  const ComplementSet low = build_complement(manifest, detections, low_members,
                                             average_box(detections, low_members), config.exclusion_threshold);
  const ProxySets proxy =
      build_proxy_sets(detections, low, gamma_high, gamma_low, config.background_cap, derive_seed(config.seed, 3));
  warnings.insert(warnings.end(), proxy.warnings.begin(), proxy.warnings.end());

  Eigen::MatrixXd objects(static_cast<Eigen::Index>(proxy.objects.size()), fm.dimension());
  for (std::size_t i = 0; i < proxy.objects.size(); ++i) {
    objects.row(static_cast<Eigen::Index>(i)) = fm.rows.row(static_cast<Eigen::Index>(proxy.objects[i]));
  }
  std::vector<Patch> bg_patches;
  for (std::size_t i : proxy.background) bg_patches.push_back(patch(low.patches[i], kPatchWidth, kPatchHeight));
  const FeatureMatrix background = featurize(bg_patches, HogConfig{}, cache);

  MetricConfig mc = config.metric;
  mc.seed = derive_seed(config.seed, 4);
  LearnedTransform learned = learn_transform(objects, background.rows, mc);
  if (!learned.report.converged) warnings.push_back("metric learning hit its iteration cap; best iterate kept");
  training = learned.report;
  if (stored) learned.transform.save(*stored);
  return std::move(learned.transform);
}

Query Session::Impl::make_query(std::size_t g, QueryKind kind, std::size_t ordinal,
                                std::vector<PatchProvenance> members) const {
  Query q;
  q.id = make_query_id(g, kind, ordinal);
  q.kind = kind;
  q.gamma = sweep.gammas[g];
  q.gamma_index = g;
  q.ordinal = ordinal;
  q.members = std::move(members);
  return q;
}

void Session::Impl::validate_outstanding(const QueryRef& ref, const std::string& id) const {
  if (ref.gamma_index >= runs.size()) fail(Errc::not_found, "unknown query '" + id + "'");
  const GammaRun& run = runs[ref.gamma_index];
  if (ref.kind == QueryKind::precision_sample) {
    if (ref.ordinal >= run.answers.size()) fail(Errc::not_found, "unknown query '" + id + "'");
    if (run.answers[ref.ordinal] >= 0) fail(Errc::conflict, "query '" + id + "' is already answered");
    return;
  }
  const GroupTestState& st = run.group->state();
  if (ref.ordinal < st.pools_tested) fail(Errc::conflict, "query '" + id + "' is already answered");
  if (ref.ordinal != st.pools_tested || !st.pending) fail(Errc::not_found, "unknown query '" + id + "'");
}

void Session::Impl::apply(const QueryRef& ref, const Label& label) {
  GammaRun& run = runs[ref.gamma_index];
  if (ref.kind == QueryKind::precision_sample) {
    run.answers[ref.ordinal] = label.value();
  } else {
    run.group->record_answer(label);
  }
}

void Session::Impl::append_log(const LogEntry& e) {
  if (directory) {
    std::ofstream out(*directory / kLogFile, std::ios::app);
    out << e.query_id << '\t' << to_string(e.kind) << '\t' << number(e.gamma) << '\t' << e.label << '\t'
        << e.timestamp << '\t' << to_string(e.source) << '\n';
    out.flush();
    if (!out) fail(Errc::io, "cannot append to answer log in " + directory->string());
  }
  log.push_back(e);
}

EstimateRecord Session::Impl::estimate(std::size_t g) const {
  const GammaRun& run = runs[g];
  const auto& members = sweep.members[g];
  EstimateRecord r;
  r.gamma = sweep.gammas[g];
  r.detections = members.size();
  r.planned_samples = run.answers.size();
  for (int a : run.answers) {
    if (a < 0) continue;
    ++r.samples;
    if (a == 0) ++r.false_positives;
  }
  r.precision = r.samples ? 1.0 - static_cast<double>(r.false_positives) / static_cast<double>(r.samples) : 0.0;

  const GroupTestState& st = run.group->state();
  const PrevalenceEstimate pe = run.group->estimate();
  r.pools_tested = pe.pools_tested;
  r.positives = pe.positives;
  r.pool_size = pe.pool_size;
  r.prevalence = pe.p_hat;
  r.complement_size = run.complement.size();
  r.false_negatives = false_negative_count(pe.p_hat, r.complement_size);
  const auto recall = recall_estimate(r.precision, r.detections, r.false_negatives);
  r.recall = recall.value_or(0.0);

  if (r.samples < r.planned_samples) {
    r.status = GammaStatus::precision;
    r.flags.push_back("precision_pending");
  } else if (!st.stopped) {
    r.status = GammaStatus::recall;
  } else {
    r.status = GammaStatus::complete;
  }
  if (!st.stopped) r.flags.push_back("recall_pending");
  if (st.stopped && pe.low_confidence) r.flags.push_back("low_confidence");
  if (r.complement_size == 0) r.flags.push_back("empty_complement");
  if (!recall) r.flags.push_back("recall_undefined");

  if (groundtruth) {
    const GroundTruthScore truth = score_against_groundtruth(detections, members, *groundtruth, config.precision_iou);
    r.true_precision = truth.precision;
    r.true_recall = truth.recall;
  }
  return r;
}

std::unique_ptr<Session> Session::start(const SessionInputs& inputs, const SessionConfig& config,
                                        const std::optional<std::filesystem::path>& directory) {
  auto impl = std::make_unique<Impl>();
  impl->config = config;
  impl->inputs = inputs;
  impl->inputs.manifest = std::filesystem::absolute(inputs.manifest);
  impl->inputs.detections = std::filesystem::absolute(inputs.detections);
  if (inputs.groundtruth) impl->inputs.groundtruth = std::filesystem::absolute(*inputs.groundtruth);
  if (config.transform) impl->config.transform = std::filesystem::absolute(*config.transform);
  impl->directory = directory;
  impl->initialise(false);
  return std::unique_ptr<Session>(new Session(std::move(impl)));
}

std::unique_ptr<Session> Session::open(const std::filesystem::path& directory) {
  if (!std::filesystem::is_directory(directory)) fail(Errc::data, "no session directory at " + directory.string());
  auto impl = std::make_unique<Impl>();
  impl->config = parse_config_file(directory / kConfigFile, &impl->inputs);
  impl->directory = directory;
  impl->initialise(true);
  auto session = std::unique_ptr<Session>(new Session(std::move(impl)));

  const auto log_path = directory / kLogFile;
  if (!std::filesystem::exists(log_path)) return session;
  std::ifstream in(log_path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  std::size_t pos = 0;
  std::size_t line_no = 0;
  Impl& s = *session->impl_;
  while (pos < text.size()) {
    ++line_no;
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      s.warnings.push_back("answers.log line " + std::to_string(line_no) +
                           " is incomplete (torn write); replay stopped before it");
      break;
    }
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    const std::string where = log_path.string() + ":" + std::to_string(line_no);

    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 6) fail(Errc::data, where + ": expected 6 tab-separated fields");
    LogEntry e;
    e.query_id = fields[0];
    try {
      e.kind = kind_from_string(fields[1]);
      e.gamma = parse_double("gamma", fields[2]);
      if (fields[3] != "0" && fields[3] != "1") fail(Errc::data, "label must be 0 or 1");
      e.label = fields[3] == "1" ? 1 : 0;
      e.timestamp = fields[4];
      e.source = label_source_from_string(fields[5]);
    } catch (const Error& err) {
      fail(Errc::data, where + ": " + err.what());
    }
    const auto ref = parse_query_id(e.query_id);
    if (!ref || ref->kind != e.kind || ref->gamma_index >= s.runs.size() ||
        s.sweep.gammas[ref->gamma_index] != e.gamma) {
      fail(Errc::data, where + ": query '" + e.query_id + "' does not belong to this session");
    }
    if (ref->kind == QueryKind::recall_pool) session->next_query(ref->gamma_index);
    try {
      s.validate_outstanding(*ref, e.query_id);
    } catch (const Error& err) {
      fail(Errc::data, where + ": " + err.what());
    }
    s.apply(*ref, Label(e.label, e.source));
    s.log.push_back(std::move(e));
  }
  return session;
}

const SessionConfig& Session::config() const noexcept { return impl_->config; }
const SessionInputs& Session::inputs() const noexcept { return impl_->inputs; }
const ThresholdSweep& Session::sweep() const noexcept { return impl_->sweep; }
std::span<const Detection> Session::detections() const noexcept { return impl_->detections; }
const DatasetManifest& Session::manifest() const noexcept { return impl_->manifest; }
const std::optional<std::filesystem::path>& Session::directory() const noexcept { return impl_->directory; }
const std::vector<std::string>& Session::warnings() const noexcept { return impl_->warnings; }
const std::vector<LogEntry>& Session::log() const noexcept { return impl_->log; }
const TrainingReport* Session::training() const noexcept {
  return impl_->training ? &*impl_->training : nullptr;
}

std::size_t Session::gamma_index(double gamma) const {
  const std::size_t i = impl_->sweep.find(gamma);
  if (i == impl_->sweep.size()) fail(Errc::not_found, "unknown gamma " + number(gamma, "%g"));
  return i;
}

std::optional<std::size_t> Session::first_incomplete() const {
  for (std::size_t g = 0; g < impl_->runs.size(); ++g) {
    if (impl_->estimate(g).status != GammaStatus::complete) return g;
  }
  return std::nullopt;
}

std::optional<Query> Session::next_query(std::size_t g) {
  if (g >= impl_->runs.size()) fail(Errc::not_found, "unknown gamma index " + std::to_string(g));
  GammaRun& run = impl_->runs[g];
  const auto& members = impl_->sweep.members[g];
  for (std::size_t j = 0; j < run.answers.size(); ++j) {
    if (run.answers[j] >= 0) continue;
    const Detection& d = impl_->detections[members[run.samples.indices[j]]];
    return impl_->make_query(g, QueryKind::precision_sample, j, {{d.image_id, d.box}});
  }
  const auto pool = run.group->next_pool();
  if (!pool) return std::nullopt;
  std::vector<PatchProvenance> tiles;
  for (std::size_t id : *pool) tiles.push_back(run.complement.patches[id]);
  return impl_->make_query(g, QueryKind::recall_pool, run.group->state().pools_tested, std::move(tiles));
}

EstimateRecord Session::submit_answer(const std::string& query_id, const Label& label) {
  const auto ref = parse_query_id(query_id);
  if (!ref) fail(Errc::not_found, "unknown query '" + query_id + "'");
  impl_->validate_outstanding(*ref, query_id);
  LogEntry e;
  e.query_id = query_id;
  e.kind = ref->kind;
  e.gamma = impl_->sweep.gammas[ref->gamma_index];
  e.label = label.value();
  e.timestamp = timestamp_now();
  e.source = label.source();
  impl_->append_log(e);
  impl_->apply(*ref, label);
  return impl_->estimate(ref->gamma_index);
}

EstimateRecord Session::estimate(std::size_t g) const {
  if (g >= impl_->runs.size()) fail(Errc::not_found, "unknown gamma index " + std::to_string(g));
  return impl_->estimate(g);
}

std::vector<EstimateRecord> Session::estimates() const {
  std::vector<EstimateRecord> out;
  for (std::size_t g = 0; g < impl_->runs.size(); ++g) out.push_back(impl_->estimate(g));
  return out;
}

Image Session::render_query(const Query& query) {
  if (query.kind == QueryKind::precision_sample) {
    const PatchProvenance& m = query.members.front();
    const int w = std::max(1, static_cast<int>(std::lround(m.box.w)));
    const int h = std::max(1, static_cast<int>(std::lround(m.box.h)));
    return impl_->patch(m, w, h).pixels;
  }
  const TileSize tile = impl_->runs[query.gamma_index].complement.tile;
  std::vector<Patch> patches;
  for (const PatchProvenance& m : query.members) patches.push_back(impl_->patch(m, tile.width, tile.height));
  if (patches.size() == 1) return patches.front().pixels;
  return impl_->config.pool_method == PoolMethod::average ? pool_average(patches).pixels
                                                           : pool_gradient(patches).pixels;
}

const SampleSet& Session::samples(std::size_t g) const { return impl_->runs.at(g).samples; }
const ComplementSet& Session::complement(std::size_t g) const { return impl_->runs.at(g).complement; }

// ---------------------------------------------------------------------------
// Reports

std::string format_report(const std::vector<EstimateRecord>& records) {
  const bool truth = std::any_of(records.begin(), records.end(),
                                 [](const EstimateRecord& r) { return r.true_precision.has_value(); });
  std::string out = "gamma,N,K,fp_hat,p_hat,T,positives,beta_hat,fn_hat,recall_hat,flags";
  if (truth) out += ",true_p,true_r";
  out += "\n";
  for (const EstimateRecord& r : records) {
    if (r.status != GammaStatus::complete) continue;
    std::string flags;
    for (std::size_t i = 0; i < r.flags.size(); ++i) flags += (i ? "|" : "") + r.flags[i];
    out += number(r.gamma, "%.10g") + "," + std::to_string(r.detections) + "," + std::to_string(r.samples) + "," +
           std::to_string(r.false_positives) + "," + number(r.precision, "%.10g") + "," +
           std::to_string(r.pools_tested) + "," + std::to_string(r.positives) + "," +
           number(r.prevalence, "%.10g") + "," + std::to_string(r.false_negatives) + "," +
           number(r.recall, "%.10g") + "," + flags;
    if (truth) {
      out += "," + (r.true_precision ? number(*r.true_precision, "%.10g") : std::string()) + "," +
             (r.true_recall ? number(*r.true_recall, "%.10g") : std::string());
    }
    out += "\n";
  }
  return out;
}

std::string render_plot_svg(const std::vector<EstimateRecord>& records) {
  constexpr double kW = 640;
  constexpr double kH = 400;
  constexpr double kLeft = 60;
  constexpr double kRight = 20;
  constexpr double kTop = 30;
  constexpr double kBottom = 50;
  std::vector<const EstimateRecord*> done;
  for (const EstimateRecord& r : records) {
    if (r.status == GammaStatus::complete) done.push_back(&r);
  }
  double lo = done.empty() ? 0.0 : done.front()->gamma;
  double hi = done.empty() ? 1.0 : done.back()->gamma;
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  auto px = [&](double g) { return kLeft + (g - lo) / (hi - lo) * (kW - kLeft - kRight); };
  auto py = [&](double v) { return kTop + (1.0 - v) * (kH - kTop - kBottom); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kW - kRight << "\" y2=\"" << py(0)
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft << "\" y2=\"" << py(1)
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
        << number(v, "%.2f") << "</text>\n";
  }
  for (const EstimateRecord* r : done) {
    svg << "<text x=\"" << px(r->gamma) << "\" y=\"" << kH - kBottom + 16
        << "\" font-size=\"11\" text-anchor=\"middle\">" << number(r->gamma, "%.3g") << "</text>\n";
  }
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 10 << "\" font-size=\"12\" text-anchor=\"middle\">gamma</text>\n";

  struct Series {
    const char* name;
    const char* colour;
    const char* dash;
    std::optional<double> (*value)(const EstimateRecord&);
  };
  const Series series[] = {
      {"precision (estimated)", "#1f77b4", "", [](const EstimateRecord& r) -> std::optional<double> { return r.precision; }},
      {"recall (estimated)", "#d62728", "", [](const EstimateRecord& r) -> std::optional<double> { return r.recall; }},
      {"precision (ground truth)", "#1f77b4", "6,4", [](const EstimateRecord& r) { return r.true_precision; }},
      {"recall (ground truth)", "#d62728", "6,4", [](const EstimateRecord& r) { return r.true_recall; }},
  };
  int legend = 0;
  for (const Series& s : series) {
    std::string points;
    for (const EstimateRecord* r : done) {
      const auto v = s.value(*r);
      if (!v) continue;
      points += number(px(r->gamma), "%.2f") + "," + number(py(*v), "%.2f") + " ";
    }
    if (points.empty()) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"2\"";
    if (*s.dash) svg << " stroke-dasharray=\"" << s.dash << "\"";
    svg << " points=\"" << points << "\"/>\n";
    svg << "<text x=\"" << kLeft + 10 << "\" y=\"" << kTop + 14 * legend << "\" font-size=\"11\" fill=\"" << s.colour
        << "\">" << s.name << "</text>\n";
    ++legend;
  }
  svg << "</svg>\n";
  return svg.str();
}

void export_report(const Session& session, const std::filesystem::path& directory, bool plot) {
  const auto records = session.estimates();
  if (std::none_of(records.begin(), records.end(),
                   [](const EstimateRecord& r) { return r.status == GammaStatus::complete; })) {
    fail(Errc::invalid_argument, "no threshold is complete yet; nothing to report");
  }
  std::filesystem::create_directories(directory);
  {
    std::ofstream out(directory / "report.csv", std::ios::binary | std::ios::trunc);
    out << format_report(records);
    if (!out) fail(Errc::io, "cannot write report in " + directory.string());
  }
  if (plot) {
    std::ofstream out(directory / "report.svg", std::ios::binary | std::ios::trunc);
    out << render_plot_svg(records);
    if (!out) fail(Errc::io, "cannot write plot in " + directory.string());
  }
}

void run_to_completion(Session& session, const SimulatedOracle& oracle) {
  for (std::size_t g = 0; g < session.sweep().size(); ++g) {
    while (auto q = session.next_query(g)) session.submit_answer(q->id, oracle.answer(*q));
  }
}

}  // namespace testdrive
