#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace authcode::events {

// Key codes live in [0, 128); application ids in [0, 512) with 0 reserved as
// the "no application" sentinel.
inline constexpr int kKeyAlphabet = 128;
inline constexpr int kAppVocabulary = 512;

namespace keys {
inline constexpr int kBackspace = 8;
inline constexpr int kTab = 9;
inline constexpr int kEnter = 13;
inline constexpr int kSpace = 32;
inline constexpr int kDelete = 127;
}  // namespace keys

bool is_erasing_key(int key_code);
bool is_word_separator(int key_code);

enum class KeyAction { press, release };
enum class MouseKind { move, press, release };
enum class MouseButton { left, right, middle, none };
enum class SensorKind { accelerometer, gyroscope };

struct KeyEvent {
  int key_code = 0;
  KeyAction action = KeyAction::press;
  bool operator==(const KeyEvent&) const = default;
};

struct MouseEvent {
  MouseKind kind = MouseKind::move;
  MouseButton button = MouseButton::none;
  double x = 0.0;
  double y = 0.0;
  bool operator==(const MouseEvent&) const = default;
};

struct AppSample {
  int foreground_app_id = 0;
  double cpu_pct = 0.0;
  double ram_pct = 0.0;
  std::uint64_t net_tx_bytes = 0;
  std::uint64_t net_rx_bytes = 0;
  bool operator==(const AppSample&) const = default;
};

struct SensorSample {
  SensorKind sensor = SensorKind::accelerometer;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  bool operator==(const SensorSample&) const = default;
};

using Payload = std::variant<KeyEvent, MouseEvent, AppSample, SensorSample>;

struct RawEvent {
  std::int64_t timestamp_ms = 0;
  std::string device_id;
  std::string user_id;
  Payload payload;
  bool operator==(const RawEvent&) const = default;
};

// Throws Error(validation) naming the offending field.
void validate(const RawEvent& event);

std::string_view payload_kind(const Payload& payload);

// ---------------------------------------------------------------------------
// Synthetic behaviour profiles

struct WeightedCode {
  int code = 0;
  double weight = 0.0;
};

struct TypingProfile {
  double mean_hold_ms = 95.0;
  double mean_flight_ms = 180.0;
  double jitter_ms = 30.0;
  double erase_rate = 0.05;
  std::vector<WeightedCode> vocabulary;
  double keys_per_burst = 14.0;
};

struct MouseProfile {
  double mean_speed_px_s = 700.0;
  double click_rate_per_min = 8.0;
  std::array<double, 8> direction_bias{};
  double mean_segment_px = 180.0;
};

struct AxisStats {
  double mean = 0.0;
  double stddev = 1.0;
};

struct SensorProfile {
  std::array<AxisStats, 3> accelerometer{};
  std::array<AxisStats, 3> gyroscope{};
  // Stddev of a per-session offset added to every axis mean.
  double session_drift = 0.0;
};

struct ResourceProfile {
  double cpu_mean = 0.2;
  double ram_mean = 0.5;
  double net_tx_per_sample = 2000.0;
  double net_rx_per_sample = 8000.0;
};

struct UserProfile {
  std::string user_id;
  TypingProfile typing;
  MouseProfile mouse;
  double typing_share = 0.5;  // fraction of PC bursts that are typing
  std::vector<WeightedCode> pc_apps;
  std::vector<WeightedCode> mobile_apps;
  double app_stickiness = 0.8;
  SensorProfile sensors;
  ResourceProfile resources;         // PC application samples
  ResourceProfile mobile_resources;  // mobile application samples
  std::array<double, 24> pc_schedule{};
  std::array<double, 24> mobile_schedule{};
  double mean_session_minutes = 15.0;

  std::string pc_device_id() const { return user_id + "-pc"; }
  std::string mobile_device_id() const { return user_id + "-mobile"; }
};

// Throws Error(validation) naming the first invalid field.
void validate(const UserProfile& profile);

// Deterministic synthetic event stream for one user over [start, start + duration).
// Per-device activity is a two-state Markov chain whose stationary activity
// probability equals the hourly schedule value.
std::vector<RawEvent> generate_stream(const UserProfile& profile, std::int64_t start_ms,
                                      int duration_minutes, std::uint64_t seed);

// A panel of profiles with controlled overlap: each single device confuses some
// pairs of users while the combination of devices separates all of them.
std::vector<UserProfile> make_synthetic_profiles(int user_count, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Replay

// Timed feed over a sorted event sequence. Events are released in order; with
// a finite speed multiplier the gap between consecutive releases equals the
// timestamp gap divided by speed. Single consumer.
class EventFeed {
 public:
  static constexpr double kInstant = std::numeric_limits<double>::infinity();

  EventFeed(std::vector<RawEvent> events, double speed);

  std::optional<RawEvent> next();
  bool done() const { return cursor_ >= events_.size(); }
  std::size_t size() const { return events_.size(); }

 private:
  std::vector<RawEvent> events_;
  double speed_;
  std::size_t cursor_ = 0;
  std::chrono::steady_clock::time_point started_;
  bool started_flag_ = false;
};

// Rejects unsorted input with the index of the first inversion.
EventFeed replay(std::vector<RawEvent> events, double speed);

// Index of the first i with events[i].timestamp < events[i-1].timestamp, if any.
std::optional<std::size_t> first_inversion(std::span<const RawEvent> events);

// ---------------------------------------------------------------------------
// Event log file: header line, then one comma-separated event per line:
// timestamp,user_id,device_id,payload_kind,<payload fields in declared order>

void write_event_log(std::ostream& out, std::span<const RawEvent> events);
std::vector<RawEvent> read_event_log(std::istream& in);
void write_event_log_file(const std::string& path, std::span<const RawEvent> events);
std::vector<RawEvent> read_event_log_file(const std::string& path);

}  // namespace authcode::events
