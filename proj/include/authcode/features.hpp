#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "authcode/events.hpp"

namespace authcode::features {

enum class DeviceKind { pc, mobile };

std::string_view to_string(DeviceKind kind);
DeviceKind parse_device_kind(std::string_view text);

struct MinuteWindow {
  std::string user_id;
  std::string device_id;
  DeviceKind device_kind = DeviceKind::pc;
  std::int64_t minute_index = 0;
  std::vector<events::RawEvent> events;
};

// Explicit device kinds for streams whose payloads alone are ambiguous.
using DeviceKindHints = std::map<std::string, DeviceKind>;

// Key/mouse payloads mark a PC, sensor payloads a mobile device; a stream with
// only application samples falls back to the hint, then to a device id ending
// in "mobile". Mixed PC and sensor payloads are rejected.
DeviceKind infer_device_kind(const std::string& device_id, std::span<const events::RawEvent> device_events,
                             const DeviceKindHints& hints = {});

// Partitions events into half-open windows [k*w, (k+1)*w) per (user, device).
// Empty windows are omitted. Output ordered by (minute_index, user_id, device_id).
std::vector<MinuteWindow> windowize(std::span<const events::RawEvent> events, double window_s = 60.0,
                                    const DeviceKindHints& hints = {});

// ---------------------------------------------------------------------------
// Feature groups

struct DigraphStat {
  std::uint32_t count = 0;
  double mean_ms = 0.0;
  bool operator==(const DigraphStat&) const = default;
};

using DigraphKey = std::pair<int, int>;
using DigraphMap = std::map<DigraphKey, DigraphStat>;

inline constexpr std::size_t kWordLengthBins = 21;  // lengths 1..20 and 21+

struct KeyboardFeatures {
  std::vector<double> dense;  // aligned with keyboard_feature_names()
  DigraphMap digraphs;        // sparse block of the 128x128 digraph space
};

// Daily running state for the mobile application counters.
struct DayContext {
  std::string user_id;
  std::string device_id;
  std::int64_t day_index = -1;
  std::map<int, std::uint32_t> app_counts;
  std::uint32_t total = 0;
  int last_app = 0;
  int previous_app = 0;
  std::map<std::pair<int, int>, std::uint32_t> transitions;
};

const std::vector<std::string>& keyboard_feature_names();
const std::vector<std::string>& mouse_feature_names();
const std::vector<std::string>& app_resource_feature_names();
const std::vector<std::string>& mobile_app_feature_names();
const std::vector<std::string>& sensor_feature_names();

std::string digraph_count_name(int first, int second);
std::string digraph_time_name(int first, int second);
// Parses a digraph feature name; returns (first, second, is_time).
std::optional<std::tuple<int, int, bool>> parse_digraph_name(std::string_view name);

KeyboardFeatures extract_keyboard_features(const MinuteWindow& window);
std::vector<double> extract_mouse_features(const MinuteWindow& window);
std::vector<double> extract_app_resource_features(const MinuteWindow& window);
std::vector<double> extract_mobile_app_features(const MinuteWindow& window, DayContext& day);
std::vector<double> extract_sensor_features(const MinuteWindow& window);

// Movement-length histogram edges (px) and mouse thresholds.
inline constexpr double kMovementBins[] = {10.0, 50.0, 150.0, 400.0};
inline constexpr std::int64_t kDoubleClickGapMs = 500;
inline constexpr std::int64_t kMovementGapMs = 500;

// Direction sector of a displacement: floor(angle / 45deg) with angle in
// [0, 360); a vector on a boundary belongs to the counter-clockwise sector.
int direction_sector(double dx, double dy);

// ---------------------------------------------------------------------------
// Minute feature vectors and schemas

inline constexpr std::string_view kPcSchemaId = "pc.v1";
inline constexpr std::string_view kMobileSchemaId = "mobile.v1";

struct FeatureSchema {
  std::string id;
  DeviceKind kind;
  std::vector<std::string> dense_names;
  bool has_digraphs = false;

  // Width once the sparse digraph block is densified.
  std::size_t full_width() const;
  std::vector<std::string> full_names() const;
};

const FeatureSchema& pc_schema();
const FeatureSchema& mobile_schema();
const FeatureSchema& schema_for(DeviceKind kind);

enum GroupFlag : unsigned {
  kKeyboardGroup = 1u << 0,
  kMouseGroup = 1u << 1,
  kAppResourceGroup = 1u << 2,
  kMobileAppGroup = 1u << 3,
  kSensorGroup = 1u << 4,
};

struct MinuteFeatureVector {
  std::string user_id;
  std::string device_id;
  DeviceKind device_kind = DeviceKind::pc;
  std::int64_t minute_index = 0;
  std::string schema_id;
  std::vector<double> dense;  // aligned with the schema's dense names
  DigraphMap digraphs;
  unsigned active_groups = 0;  // groups that saw at least one event

  double value(std::string_view name) const;
  // Ordered name -> value view (dense names, then present digraphs).
  std::vector<std::pair<std::string, double>> named() const;
};

// Stateful extractor: keeps one DayContext per mobile device. Windows of one
// device must be fed in chronological order.
class FeatureExtractor {
 public:
  MinuteFeatureVector extract(const MinuteWindow& window);
  std::vector<MinuteFeatureVector> extract_all(std::span<const MinuteWindow> windows);

 private:
  std::map<std::string, DayContext> days_;
};

// Feature CSV: user_id, device_kind, minute_index, then features in schema
// order. For PC vectors the digraph columns are the union observed in the file.
void write_feature_csv(std::ostream& out, std::span<const MinuteFeatureVector> vectors, const FeatureSchema& schema);

}  // namespace authcode::features
