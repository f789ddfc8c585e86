#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "authcode/events.hpp"
#include "authcode/features.hpp"
#include "authcode/models.hpp"
#include "authcode/pipeline.hpp"
#include "authcode/service.hpp"

namespace authcode::experiment {

// 2021-01-04, a Monday.
inline constexpr std::int64_t kDefaultStartDay = 18631;

struct CorpusOptions {
  int users = 5;
  int days = 20;
  std::uint64_t seed = 7;
  std::int64_t start_day = kDefaultStartDay;  // days since the epoch (UTC)
};

struct Corpus {
  std::vector<features::MinuteFeatureVector> pc;
  std::vector<features::MinuteFeatureVector> mobile;
  std::size_t event_count = 0;
};

Corpus synthetic_corpus(const CorpusOptions& options);
Corpus corpus_from_events(std::span<const events::RawEvent> events, double window_s = 60.0);

// Raw single-device datasets (Datasets 1-3 before preprocessing).
pipeline::LabeledDataset pc_dataset(const Corpus& corpus);
pipeline::LabeledDataset mobile_app_dataset(const Corpus& corpus);
pipeline::LabeledDataset sensor_dataset(const Corpus& corpus);

struct PreprocessOptions {
  double importance_threshold = 0.95;
  std::size_t importance_trees = 50;
  std::size_t importance_rows = 5000;  // row sample used to rank features
  bool minute_of_day = false;
  std::uint64_t seed = 7;
};

struct ReducedBlock {
  std::string name;  // "pc", "app" or "sensor"
  pipeline::LabeledDataset dataset;
  pipeline::BlockProjection projection;
  pipeline::RemovalReport removed;
  pipeline::SelectionReport selection;
};

// Constant drop, one-hot encoding and importance selection capped at the
// block width.
ReducedBlock reduce_block(const std::string& name, const pipeline::LabeledDataset& raw,
                          std::span<const std::string> categorical, std::size_t block_width,
                          const PreprocessOptions& options);

struct ReducedCorpus {
  ReducedBlock pc, app, sensor;
  pipeline::LabeledDataset fused;
};

ReducedCorpus reduce_corpus(const Corpus& corpus, const PreprocessOptions& options);

// Dataset 5 for one window size.
pipeline::LabeledDataset derived_usage_dataset(const Corpus& corpus, int window_minutes);

// Per-user dense fused timelines spanning each user's first to last day.
std::vector<std::shared_ptr<const pipeline::FusedTimeline>> fused_timelines(const pipeline::LabeledDataset& fused);

// ---------------------------------------------------------------------------
// Experiments

enum class DatasetKind { pc = 1, mobile_app = 2, sensor = 3, fused = 4, derived = 5, sequence = 6 };
std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view text);

struct SearchConfig {
  models::Family family = models::Family::knn;
  models::SearchSpace space;
  std::size_t budget = 10;
  std::map<std::string, double> fixed;
};

struct SequenceConfig {
  std::vector<int> lengths = {5, 60};
  double train_share = 0.7;
  double val_share = 0.15;
  std::size_t max_train_windows = 4000;
  std::size_t max_eval_windows = 2000;
  models::ModelSpec model;
};

struct ExperimentConfig {
  std::optional<CorpusOptions> corpus;    // synthetic profiles
  std::optional<std::string> event_log;  // or a recorded event log
  PreprocessOptions preprocess;
  std::vector<DatasetKind> datasets = {DatasetKind::fused};
  std::vector<models::ModelSpec> models;  // flat datasets
  std::optional<SearchConfig> search;     // replaces `models` when present
  pipeline::SplitOptions split;
  std::vector<int> derived_windows = {1440};
  SequenceConfig sequence;
  std::string output_dir;
  std::uint64_t seed = 7;

  void validate() const;
  static ExperimentConfig from_json(const std::string& text);
};

struct RunResult {
  std::string name;
  DatasetKind dataset = DatasetKind::fused;
  int window = 0;  // derived window or sequence length
  models::ModelSpec spec;
  std::size_t train_rows = 0, validation_rows = 0, test_rows = 0;
  models::Evaluation evaluation;
  double train_seconds = 0.0;
  std::string model_path;
};

struct ExperimentReport {
  std::vector<RunResult> runs;
  std::vector<std::string> artifacts;
  std::optional<std::string> bundle_path;
  double seconds = 0.0;

  const RunResult* find(std::string_view name) const;
  std::string summary_csv() const;  // no timings: byte-stable for a seed
  std::string to_json() const;
};

// Runs extract -> preprocess -> (fuse | derive | sequence) -> split -> train
// -> evaluate. Failures name the stage; files written so far are removed.
ExperimentReport run_experiment(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Deployment bundle and replay

struct Bundle {
  pipeline::BlockProjection pc, app, sensor;
  struct Model {
    std::string name;
    std::string path;
    double weight = 0.0;
  };
  std::vector<Model> models;

  std::string to_json() const;
  static Bundle from_json(const std::string& text);
  void save(const std::string& path) const;
  static Bundle load(const std::string& path);
  // Service configuration JSON that loads the bundle's models.
  std::string service_config_json() const;
};

// One envelope per (device, minute), ordered by (minute, device).
std::vector<service::IngestEnvelope> envelopes_from_vectors(std::span<const features::MinuteFeatureVector> vectors,
                                                            const Bundle& bundle);
std::vector<service::IngestEnvelope> envelopes_from_events(std::span<const events::RawEvent> events,
                                                           const Bundle& bundle, double window_s = 60.0);

struct ReplaySummary {
  std::size_t envelopes_sent = 0;
  std::size_t ingest_errors = 0;
  std::size_t decisions = 0;
  std::size_t decision_errors = 0;
  std::map<std::string, std::size_t> actions;  // action -> count
  std::vector<double> latencies_s;             // last ingest of a minute -> decision
  std::vector<std::string> errors;

  bool ok() const { return ingest_errors == 0 && decision_errors == 0; }
  std::string to_json() const;
};

struct ReplayOptions {
  std::string endpoint = "http://127.0.0.1:8080";
  std::string token;
  double speed = events::EventFeed::kInstant;  // minutes are paced at 60 s / speed
  bool register_devices = false;
  std::string tier = "standard";
  int connect_retries = 3;
};

ReplaySummary replay_to_service(std::span<const service::IngestEnvelope> envelopes, const ReplayOptions& options);

}  // namespace authcode::experiment
