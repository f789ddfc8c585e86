#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "authcode/common.hpp"
#include "authcode/features.hpp"

namespace authcode::pipeline {

struct LabeledDataset {
  std::vector<std::string> feature_names;
  Matrix rows;
  std::vector<std::string> labels;
  std::vector<std::int64_t> minute_index;
  std::vector<std::string> provenance;  // device kind, or the fused device mix

  std::size_t size() const { return rows.rows; }
  std::size_t width() const { return feature_names.size(); }
  void validate() const;
  std::optional<std::size_t> column(std::string_view name) const;

  void append(std::span<const double> values, std::string label, std::int64_t minute, std::string source);
  LabeledDataset select_rows(std::span<const std::size_t> indices) const;
  LabeledDataset select_columns(std::span<const std::size_t> indices) const;
  LabeledDataset select_columns(std::span<const std::string> names) const;
  std::vector<std::string> classes() const;  // sorted distinct labels
};

// Densifies minute vectors against a schema. PC digraphs become columns for
// every pair observed in the input (the full 128x128 space is mostly empty).
LabeledDataset dataset_from_vectors(std::span<const features::MinuteFeatureVector> vectors,
                                    const features::FeatureSchema& schema);
// Same, restricted to the named dense features.
LabeledDataset dataset_from_vectors(std::span<const features::MinuteFeatureVector> vectors,
                                    std::span<const std::string> names);

void write_dataset_csv(std::ostream& out, const LabeledDataset& ds);
LabeledDataset read_dataset_csv(std::istream& in);
void write_dataset_file(const std::string& path, const LabeledDataset& ds);
LabeledDataset read_dataset_file(const std::string& path);

// ---------------------------------------------------------------------------
// Preprocessing

struct RemovalReport {
  std::vector<std::string> dropped;
};

LabeledDataset drop_constant_features(const LabeledDataset& ds, RemovalReport* report = nullptr);

// Categorical columns of the single-device schemas (integer app ids).
const std::vector<std::string>& pc_categorical_columns();
const std::vector<std::string>& mobile_categorical_columns();

// One binary column per category seen at fit time plus "<col>=unknown",
// placed where the original column was.
class OneHotEncoder {
 public:
  struct Column {
    std::string name;
    std::vector<long long> categories;  // ascending
  };

  static OneHotEncoder fit(const LabeledDataset& ds, std::span<const std::string> columns);
  LabeledDataset transform(const LabeledDataset& ds) const;

  const std::vector<Column>& columns() const { return columns_; }
  const Column* find(std::string_view name) const;

  static std::string category_name(std::string_view column, long long code);
  static std::string unknown_name(std::string_view column);

  std::string to_json() const;
  static OneHotEncoder from_json(const std::string& text);

 private:
  std::vector<Column> columns_;
};

LabeledDataset one_hot_encode(const LabeledDataset& ds, std::span<const std::string> columns,
                              OneHotEncoder* fitted = nullptr);

struct SelectionMode {
  enum Kind { cumulative, top_k } kind = cumulative;
  double threshold = 0.95;
  std::size_t k = 0;

  static SelectionMode cumulative_share(double threshold) { return {cumulative, threshold, 0}; }
  static SelectionMode top(std::size_t k) { return {top_k, 0.0, k}; }
};

struct SelectionReport {
  std::vector<std::string> kept;  // original column order
  double kept_weight = 0.0;
  double total_weight = 0.0;
};

// Names kept by the selection rule, in the order of `names`.
std::vector<std::string> select_by_importance(std::span<const std::string> names,
                                              const std::map<std::string, double>& importances,
                                              const SelectionMode& mode, SelectionReport* report = nullptr);

LabeledDataset importance_select(const LabeledDataset& ds, const std::map<std::string, double>& importances,
                                 const SelectionMode& mode, SelectionReport* report = nullptr);

// Appends the minute of day as a numeric feature.
LabeledDataset add_minute_of_day(const LabeledDataset& ds);

// ---------------------------------------------------------------------------
// Splits

struct SplitOptions {
  std::int64_t segment_minutes = 10;
  double test_fraction = 0.10;
  double val_fraction = 0.10;
  std::uint64_t seed = 0;
};

struct SplitManifest {
  SplitOptions options;
  // user -> segment ids (minute_index / segment_minutes)
  std::map<std::string, std::vector<std::int64_t>> train, validation, test, discarded;

  std::string to_json() const;
  static SplitManifest from_json(const std::string& text);
};

struct Split {
  LabeledDataset train, validation, test;
  SplitManifest manifest;
};

Split segment_split(const LabeledDataset& ds, const SplitOptions& options);
// Rebuilds the partitions recorded in a manifest.
Split apply_manifest(const LabeledDataset& ds, const SplitManifest& manifest);

// Number of (train, held-out) row pairs of one user whose segments coincide
// or touch. Zero for every split produced by segment_split.
std::size_t count_leaking_pairs(const Split& split);

// ---------------------------------------------------------------------------
// Multi-device fusion

inline constexpr std::size_t kPcBlock = 150;
inline constexpr std::size_t kMobileAppBlock = 50;
inline constexpr std::size_t kSensorBlock = 40;
inline constexpr std::size_t kFusedWidth = kPcBlock + kMobileAppBlock + kSensorBlock;

// A single-device vector already reduced to its selected block features.
struct BlockInput {
  std::string user_id;
  std::int64_t minute_index = 0;
  std::vector<double> values;  // shorter blocks are zero padded
};

struct FusedVector {
  std::int64_t minute_index = 0;
  std::string user_id;
  std::array<double, kPcBlock> pc_block{};
  std::array<double, kMobileAppBlock> mobile_app_block{};
  std::array<double, kSensorBlock> sensor_block{};
  bool pc_active = false;
  bool mobile_app_active = false;
  bool sensor_active = false;

  std::vector<double> values() const;
  std::string source() const;  // "pc", "mobile" or "pc+mobile"
};

std::optional<FusedVector> fuse_minute_vectors(const BlockInput* pc, const BlockInput* mobile_app,
                                               const BlockInput* sensor);

// Fused column names; unused block slots are named "<block>:pad<k>".
std::vector<std::string> fused_feature_names(std::span<const std::string> pc_names,
                                             std::span<const std::string> app_names,
                                             std::span<const std::string> sensor_names);

// Joins three reduced single-device datasets on (user, minute).
LabeledDataset fuse_datasets(const LabeledDataset* pc, const LabeledDataset* mobile_app,
                             const LabeledDataset* sensor);

// Maps a raw minute vector to one block: plain names read the feature,
// "<col>=<code>" and "<col>=unknown" re-apply the one-hot encoding.
struct BlockProjection {
  std::vector<std::string> names;
  OneHotEncoder encoder;

  std::vector<double> project(const features::MinuteFeatureVector& vector) const;
};

// ---------------------------------------------------------------------------
// Derived usage features

enum class ActivityState { none, pc, mobile, both };

struct ActivityTimeline {
  std::string user_id;
  std::int64_t start_minute = 0;
  std::vector<ActivityState> states;
};

// Per-user activity grid spanning the first to the last active minute.
std::map<std::string, ActivityTimeline> activity_from_vectors(std::span<const features::MinuteFeatureVector> vectors);

inline constexpr std::size_t kDerivedFeatureCount = 32;
inline constexpr std::array<int, 5> kDerivedWindows = {60, 180, 360, 720, 1440};

struct DerivedUsageVector {
  std::int64_t window_start = 0;  // minute index
  std::string user_id;
  std::array<double, kDerivedFeatureCount> values{};
};

const std::vector<std::string>& derived_feature_names();

// Tumbling windows aligned to multiples of the window size (UTC).
std::vector<DerivedUsageVector> derive_usage_features(const ActivityTimeline& activity, int window_minutes);

LabeledDataset derived_dataset(std::span<const DerivedUsageVector> vectors);

// ---------------------------------------------------------------------------
// Sequence windows

inline constexpr double kInactiveFill = -1.0;
inline constexpr std::array<int, 11> kSequenceLengths = {2, 5, 10, 20, 30, 60, 90, 120, 180, 240, 360};

// Dense minute grid of fused rows for one user; inactive minutes hold -1.
struct FusedTimeline {
  std::string user_id;
  std::int64_t start_minute = 0;
  Matrix values;  // N x width
  std::vector<bool> active;

  std::size_t length() const { return values.rows; }
};

FusedTimeline make_timeline(const std::string& user_id, std::int64_t start_minute, std::int64_t end_minute,
                            std::span<const FusedVector> vectors);
// Same from a fused dataset restricted to one user.
FusedTimeline make_timeline(const LabeledDataset& fused, const std::string& user_id, std::int64_t start_minute,
                            std::int64_t end_minute);

struct SequenceWindow {
  std::shared_ptr<const FusedTimeline> timeline;
  std::size_t offset = 0;
  std::size_t length = 0;

  const std::string& user_id() const { return timeline->user_id; }
  std::int64_t start_minute() const { return timeline->start_minute + static_cast<std::int64_t>(offset); }
  std::span<const double> row(std::size_t t) const { return timeline->values.row(offset + t); }
  std::size_t width() const { return timeline->values.cols; }
  bool has_activity() const;
};

struct SequenceSet {
  std::vector<SequenceWindow> windows;  // usable windows only
  std::size_t total = 0;                // N - T + 1
  std::size_t excluded = 0;             // windows without any active minute
};

SequenceSet build_sequences(std::shared_ptr<const FusedTimeline> timeline, std::size_t window_length);

struct SequenceDataset {
  std::vector<SequenceWindow> windows;
  std::vector<std::string> labels;
  std::size_t window_length = 0;
  std::size_t width = 0;

  std::size_t size() const { return windows.size(); }
};

struct SequenceSplit {
  SequenceDataset train, validation, test;
};

// Chronological split of each user's timeline by whole days; windows that
// straddle two partitions are dropped.
SequenceSplit split_sequences_by_day(std::span<const std::shared_ptr<const FusedTimeline>> timelines,
                                     std::size_t window_length, double train_share, double val_share);

void write_sidecar(const std::string& path, const std::string& schema, const std::vector<std::string>& feature_names,
                   int window, double fill_value);

}  // namespace authcode::pipeline
