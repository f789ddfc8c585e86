#include "authcode/events.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <thread>

#include "authcode/common.hpp"

namespace authcode::events {

bool is_erasing_key(int key_code) { return key_code == keys::kBackspace || key_code == keys::kDelete; }

bool is_word_separator(int key_code) {
  return key_code == keys::kSpace || key_code == keys::kEnter || key_code == keys::kTab;
}

std::string_view payload_kind(const Payload& payload) {
  switch (payload.index()) {
    case 0: return "key";
    case 1: return "mouse";
    case 2: return "app";
    default: return "sensor";
  }
}

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::validation, "invalid " + field + ": " + why, field);
}

void check_unit(double v, const std::string& field) {
  if (!(v >= 0.0 && v <= 1.0)) invalid(field, "must lie in [0,1], got " + format_double(v));
}

void check_distribution(const std::vector<WeightedCode>& dist, const std::string& field, int alphabet,
                        bool allow_empty) {
  if (dist.empty()) {
    if (allow_empty) return;
    invalid(field, "distribution is empty");
  }
  double sum = 0.0;
  for (const auto& w : dist) {
    if (w.code < 0 || w.code >= alphabet) invalid(field, "code " + std::to_string(w.code) + " outside alphabet");
    if (!(w.weight >= 0.0)) invalid(field, "negative weight");
    sum += w.weight;
  }
  if (std::abs(sum - 1.0) > 1e-9) invalid(field, "weights sum to " + format_double(sum) + ", expected 1");
}

}  // namespace

void validate(const RawEvent& event) {
  if (event.timestamp_ms < 0) invalid("timestamp", "must be >= 0");
  std::visit(
      [](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, KeyEvent>) {
          if (p.key_code < 0 || p.key_code >= kKeyAlphabet) invalid("key_code", std::to_string(p.key_code));
        } else if constexpr (std::is_same_v<T, MouseEvent>) {
          if (p.kind != MouseKind::move && p.button == MouseButton::none) {
            invalid("button", "press/release requires a button");
          }
          if (!std::isfinite(p.x) || !std::isfinite(p.y)) invalid("mouse position", "non-finite");
        } else if constexpr (std::is_same_v<T, AppSample>) {
          if (p.foreground_app_id < 0 || p.foreground_app_id >= kAppVocabulary) {
            invalid("foreground_app_id", std::to_string(p.foreground_app_id));
          }
          check_unit(p.cpu_pct, "cpu_pct");
          check_unit(p.ram_pct, "ram_pct");
        } else {
          if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
            invalid("sensor sample", "non-finite");
          }
        }
      },
      event.payload);
}

void validate(const UserProfile& profile) {
  if (profile.user_id.empty()) invalid("user_id", "empty");
  const auto& t = profile.typing;
  if (!(t.mean_hold_ms >= 0)) invalid("typing.mean_hold_ms", "must be >= 0");
  if (!(t.mean_flight_ms >= 0)) invalid("typing.mean_flight_ms", "must be >= 0");
  if (!(t.jitter_ms >= 0)) invalid("typing.jitter_ms", "must be >= 0");
  if (!(t.keys_per_burst >= 1)) invalid("typing.keys_per_burst", "must be >= 1");
  check_unit(t.erase_rate, "typing.erase_rate");
  check_distribution(t.vocabulary, "typing.vocabulary", kKeyAlphabet, false);
  const auto& m = profile.mouse;
  if (!(m.mean_speed_px_s > 0)) invalid("mouse.mean_speed_px_s", "must be > 0");
  if (!(m.click_rate_per_min >= 0)) invalid("mouse.click_rate_per_min", "must be >= 0");
  if (!(m.mean_segment_px > 0)) invalid("mouse.mean_segment_px", "must be > 0");
  double bias = 0.0;
  for (double w : m.direction_bias) {
    if (!(w >= 0)) invalid("mouse.direction_bias", "negative weight");
    bias += w;
  }
  if (std::abs(bias - 1.0) > 1e-9) invalid("mouse.direction_bias", "weights sum to " + format_double(bias));
  check_unit(profile.typing_share, "typing_share");
  check_unit(profile.app_stickiness, "app_stickiness");
  check_distribution(profile.pc_apps, "pc_apps", kAppVocabulary, false);
  check_distribution(profile.mobile_apps, "mobile_apps", kAppVocabulary, false);
  for (const auto& a : profile.sensors.accelerometer) {
    if (!(a.stddev >= 0)) invalid("sensors.accelerometer", "negative stddev");
  }
  for (const auto& a : profile.sensors.gyroscope) {
    if (!(a.stddev >= 0)) invalid("sensors.gyroscope", "negative stddev");
  }
  if (!(profile.sensors.session_drift >= 0)) invalid("sensors.session_drift", "must be >= 0");
  check_unit(profile.resources.cpu_mean, "resources.cpu_mean");
  check_unit(profile.resources.ram_mean, "resources.ram_mean");
  if (!(profile.resources.net_tx_per_sample >= 0)) invalid("resources.net_tx_per_sample", "must be >= 0");
  if (!(profile.resources.net_rx_per_sample >= 0)) invalid("resources.net_rx_per_sample", "must be >= 0");
  check_unit(profile.mobile_resources.cpu_mean, "mobile_resources.cpu_mean");
  check_unit(profile.mobile_resources.ram_mean, "mobile_resources.ram_mean");
  if (!(profile.mobile_resources.net_tx_per_sample >= 0)) invalid("mobile_resources.net_tx_per_sample", "must be >= 0");
  if (!(profile.mobile_resources.net_rx_per_sample >= 0)) invalid("mobile_resources.net_rx_per_sample", "must be >= 0");
  for (double p : profile.pc_schedule) check_unit(p, "pc_schedule");
  for (double p : profile.mobile_schedule) check_unit(p, "mobile_schedule");
  if (!(profile.mean_session_minutes >= 1)) invalid("mean_session_minutes", "must be >= 1");
}

// ---------------------------------------------------------------------------
// Generator

namespace {

constexpr std::int64_t kMinuteMs = 60'000;

int hour_of(std::int64_t ts_ms) {
  auto hours = ts_ms / 3'600'000;
  return static_cast<int>(((hours % 24) + 24) % 24);
}

class DeviceGenerator {
 public:
  DeviceGenerator(const UserProfile& profile, std::string device_id, std::uint64_t seed)
      : profile_(profile), device_id_(std::move(device_id)), rng_(seed) {}

  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  bool chance(double p) { return p >= 1.0 || (p > 0.0 && uniform(0.0, 1.0) < p); }
  double normal(double mean, double sd) {
    if (sd <= 0.0) return mean;
    return std::normal_distribution<double>(mean, sd)(rng_);
  }
  // Gaussian truncated at 0 by rejection.
  double positive_normal(double mean, double sd) {
    if (sd <= 0.0) return std::max(0.0, mean);
    for (int i = 0; i < 64; ++i) {
      double v = normal(mean, sd);
      if (v >= 0.0) return v;
    }
    return std::max(0.0, mean);
  }
  int draw(const std::vector<WeightedCode>& dist) {
    std::vector<double> w;
    w.reserve(dist.size());
    for (const auto& d : dist) w.push_back(d.weight);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    return dist[pick(rng_)].code;
  }

  // Per-minute activity flags: a two-state chain with stationary activity
  // probability equal to the schedule value of the minute's hour.
  std::vector<bool> activity(const std::array<double, 24>& schedule, std::int64_t start_ms, int minutes) {
    std::vector<bool> active(static_cast<std::size_t>(minutes), false);
    const double leave = 1.0 / profile_.mean_session_minutes;
    bool state = false;
    for (int m = 0; m < minutes; ++m) {
      double p = schedule[hour_of(start_ms + m * kMinuteMs)];
      if (p <= 0.0) {
        state = false;
      } else if (p >= 1.0) {
        state = true;
      } else if (m == 0) {
        state = chance(p);
      } else if (state) {
        state = !chance(leave);
      } else {
        state = chance(std::min(1.0, p * leave / (1.0 - p)));
      }
      active[static_cast<std::size_t>(m)] = state;
    }
    return active;
  }

  void emit(std::int64_t ts, Payload payload) {
    out_.push_back(RawEvent{ts, device_id_, profile_.user_id, std::move(payload)});
  }

  int sticky_app(const std::vector<WeightedCode>& dist) {
    if (current_app_ == 0 || !chance(profile_.app_stickiness)) current_app_ = draw(dist);
    return current_app_;
  }

  AppSample app_sample(const std::vector<WeightedCode>& dist, const ResourceProfile& r) {
    int app = sticky_app(dist);
    // Each application shifts the resource baseline a little.
    double app_shift = static_cast<double>((app * 37) % 11) / 100.0 - 0.05;
    AppSample s;
    s.foreground_app_id = app;
    s.cpu_pct = std::clamp(normal(r.cpu_mean + app_shift, 0.05), 0.0, 1.0);
    s.ram_pct = std::clamp(normal(r.ram_mean + app_shift / 2, 0.02), 0.0, 1.0);
    s.net_tx_bytes = static_cast<std::uint64_t>(std::llround(positive_normal(r.net_tx_per_sample, r.net_tx_per_sample * 0.3)));
    s.net_rx_bytes = static_cast<std::uint64_t>(std::llround(positive_normal(r.net_rx_per_sample, r.net_rx_per_sample * 0.3)));
    return s;
  }

  void pc_minute(std::int64_t t0) {
    for (int k = 0; k < 12; ++k) emit(t0 + 2500 + 5000 * k, app_sample(profile_.pc_apps, profile_.resources));
    const std::int64_t end = t0 + 59'000;
    double cursor = static_cast<double>(t0) + uniform(0.0, 1500.0);
    while (cursor < static_cast<double>(end)) {
      if (chance(profile_.typing_share)) {
        cursor = typing_burst(cursor, end);
      } else {
        cursor = mouse_burst(cursor, end);
      }
      cursor += uniform(2000.0, 5000.0);
    }
  }

  double typing_burst(double cursor, std::int64_t end) {
    const auto& t = profile_.typing;
    int n = static_cast<int>(std::lround(uniform(0.5, 1.5) * t.keys_per_burst));
    for (int i = 0; i < std::max(1, n); ++i) {
      int key;
      if (chance(t.erase_rate)) {
        key = chance(0.9) ? keys::kBackspace : keys::kDelete;
      } else {
        key = draw(t.vocabulary);
      }
      std::int64_t press = std::llround(cursor);
      std::int64_t release = press + std::llround(positive_normal(t.mean_hold_ms, t.jitter_ms));
      if (release >= end) break;
      emit(press, KeyEvent{key, KeyAction::press});
      emit(release, KeyEvent{key, KeyAction::release});
      // Flight is press to press; long holds overlap the next key (rollover).
      cursor = static_cast<double>(press + std::max<std::int64_t>(1, std::llround(positive_normal(t.mean_flight_ms, t.jitter_ms))));
    }
    return cursor;
  }

  double mouse_burst(double cursor, std::int64_t end) {
    const auto& m = profile_.mouse;
    std::vector<WeightedCode> sectors;
    for (int s = 0; s < 8; ++s) sectors.push_back({s, m.direction_bias[static_cast<std::size_t>(s)]});
    int segments = 1 + static_cast<int>(uniform(0.0, 4.0));
    for (int seg = 0; seg < segments; ++seg) {
      int sector = draw(sectors);
      double angle = (sector + uniform(0.05, 0.95)) * std::numbers::pi / 4.0;
      const double sigma = 0.6;
      double length = std::exp(normal(std::log(m.mean_segment_px) - sigma * sigma / 2.0, sigma));
      double speed = std::max(50.0, positive_normal(m.mean_speed_px_s, 0.25 * m.mean_speed_px_s));
      double duration = length / speed * 1000.0;
      if (cursor + duration + 400.0 >= static_cast<double>(end)) break;
      int steps = std::max(1, static_cast<int>(std::ceil(duration / 20.0)));
      double x0 = x_, y0 = y_;
      double dx = length * std::cos(angle), dy = length * std::sin(angle);
      emit(std::llround(cursor), MouseEvent{MouseKind::move, MouseButton::none, x0, y0});
      for (int s = 1; s <= steps; ++s) {
        double f = static_cast<double>(s) / steps;
        emit(std::llround(cursor + duration * f), MouseEvent{MouseKind::move, MouseButton::none, x0 + dx * f, y0 + dy * f});
      }
      x_ = x0 + dx;
      y_ = y0 + dy;
      cursor += duration;
      if (chance(std::min(1.0, m.click_rate_per_min / 12.0))) {
        cursor = click(cursor + uniform(80.0, 200.0), MouseButton::left, end);
      }
      cursor += uniform(600.0, 1200.0);
    }
    return cursor;
  }

  double click(double cursor, MouseButton preferred, std::int64_t end) {
    MouseButton button = preferred;
    double r = uniform(0.0, 1.0);
    if (r > 0.97) {
      button = MouseButton::middle;
    } else if (r > 0.85) {
      button = MouseButton::right;
    }
    int clicks = (button == MouseButton::left && chance(0.2)) ? 2 : 1;
    for (int c = 0; c < clicks; ++c) {
      std::int64_t press = std::llround(cursor);
      std::int64_t release = press + std::llround(std::max(20.0, normal(110.0, 25.0)));
      if (release >= end) break;
      emit(press, MouseEvent{MouseKind::press, button, x_, y_});
      emit(release, MouseEvent{MouseKind::release, button, x_, y_});
      cursor = static_cast<double>(release) + uniform(60.0, 180.0);
    }
    return cursor;
  }

  void mobile_minute(std::int64_t t0, bool session_start) {
    const auto& s = profile_.sensors;
    if (session_start) {
      for (auto& o : drift_) o = normal(0.0, s.session_drift);
    }
    for (int k = 0; k < 6; ++k) emit(t0 + 5000 + 10'000 * k, app_sample(profile_.mobile_apps, profile_.mobile_resources));
    for (int i = 0; i < 300; ++i) {
      std::int64_t ts = t0 + 100 + 200 * i;
      const auto& a = s.accelerometer;
      emit(ts, SensorSample{SensorKind::accelerometer, normal(a[0].mean + drift_[0], a[0].stddev),
                            normal(a[1].mean + drift_[1], a[1].stddev), normal(a[2].mean + drift_[2], a[2].stddev)});
      const auto& g = s.gyroscope;
      emit(ts, SensorSample{SensorKind::gyroscope, normal(g[0].mean + drift_[3] * 0.1, g[0].stddev),
                            normal(g[1].mean + drift_[4] * 0.1, g[1].stddev),
                            normal(g[2].mean + drift_[5] * 0.1, g[2].stddev)});
    }
  }

  std::vector<RawEvent> take() {
    std::stable_sort(out_.begin(), out_.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.timestamp_ms < b.timestamp_ms; });
    return std::move(out_);
  }

 private:
  const UserProfile& profile_;
  std::string device_id_;
  std::mt19937_64 rng_;
  std::vector<RawEvent> out_;
  int current_app_ = 0;
  double x_ = 960.0;
  double y_ = 540.0;
  std::array<double, 6> drift_{};
};

}  // namespace

std::vector<RawEvent> generate_stream(const UserProfile& profile, std::int64_t start_ms, int duration_minutes,
                                      std::uint64_t seed) {
  if (duration_minutes <= 0) invalid("duration", "must be >= 1 minute");
  if (start_ms < 0) invalid("start", "must be >= 0");
  validate(profile);
  // Minutes are aligned to the minute grid.
  const std::int64_t start = (start_ms / kMinuteMs) * kMinuteMs;

  DeviceGenerator pc(profile, profile.pc_device_id(), mix_seed(seed, stable_hash(profile.pc_device_id())));
  auto pc_active = pc.activity(profile.pc_schedule, start, duration_minutes);
  for (int m = 0; m < duration_minutes; ++m) {
    if (pc_active[static_cast<std::size_t>(m)]) pc.pc_minute(start + m * kMinuteMs);
  }

  DeviceGenerator mobile(profile, profile.mobile_device_id(),
                         mix_seed(seed, stable_hash(profile.mobile_device_id())));
  auto mobile_active = mobile.activity(profile.mobile_schedule, start, duration_minutes);
  for (int m = 0; m < duration_minutes; ++m) {
    auto idx = static_cast<std::size_t>(m);
    if (mobile_active[idx]) mobile.mobile_minute(start + m * kMinuteMs, m == 0 || !mobile_active[idx - 1]);
  }

  auto a = pc.take();
  auto b = mobile.take();
  std::vector<RawEvent> merged;
  merged.reserve(a.size() + b.size());
  std::merge(std::make_move_iterator(a.begin()), std::make_move_iterator(a.end()), std::make_move_iterator(b.begin()),
             std::make_move_iterator(b.end()), std::back_inserter(merged),
             [](const RawEvent& x, const RawEvent& y) { return x.timestamp_ms < y.timestamp_ms; });
  return merged;
}

namespace {

std::vector<WeightedCode> random_distribution(std::mt19937_64& rng, std::vector<int> codes, double concentration) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<WeightedCode> out;
  double sum = 0.0;
  for (int c : codes) {
    double w = gamma(rng) + 1e-3;
    out.push_back({c, w});
    sum += w;
  }
  for (auto& w : out) w.weight /= sum;
  // Renormalize the last weight so the sum is exact to rounding.
  double partial = 0.0;
  for (std::size_t i = 0; i + 1 < out.size(); ++i) partial += out[i].weight;
  out.back().weight = 1.0 - partial;
  return out;
}

std::vector<WeightedCode> perturb(std::mt19937_64& rng, std::vector<WeightedCode> dist, double scale) {
  std::lognormal_distribution<double> noise(0.0, scale);
  double sum = 0.0;
  for (auto& w : dist) {
    w.weight *= noise(rng);
    sum += w.weight;
  }
  double partial = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    dist[i].weight /= sum;
    if (i + 1 < dist.size()) partial += dist[i].weight;
  }
  dist.back().weight = 1.0 - partial;
  return dist;
}

std::vector<int> sample_codes(std::mt19937_64& rng, int lo, int hi, int count) {
  std::vector<int> all;
  for (int c = lo; c < hi; ++c) all.push_back(c);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

struct PcArchetype {
  TypingProfile typing;
  MouseProfile mouse;
  double typing_share;
  std::vector<WeightedCode> apps;
  ResourceProfile resources;
};

struct MobileArchetype {
  std::vector<WeightedCode> apps;
  double stickiness;
  ResourceProfile resources;
  // Daily routine; the PC features do not depend on it.
  int day_start;
  int day_length;
  double mobile_work;
  double mobile_evening;
};

PcArchetype make_pc_archetype(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  PcArchetype a;
  a.typing.mean_hold_ms = u(70, 140);
  a.typing.mean_flight_ms = u(120, 300);
  a.typing.jitter_ms = u(20, 45);
  a.typing.erase_rate = u(0.02, 0.1);
  a.typing.keys_per_burst = u(8, 20);
  // letters a-z (97..122), digits and space
  std::vector<int> letters = sample_codes(rng, 97, 123, 14);
  letters.push_back(keys::kSpace);
  a.typing.vocabulary = random_distribution(rng, letters, 1.5);
  a.mouse.mean_speed_px_s = u(400, 1200);
  a.mouse.click_rate_per_min = u(4, 15);
  a.mouse.mean_segment_px = u(80, 300);
  std::gamma_distribution<double> gamma(2.0, 1.0);
  double sum = 0.0;
  for (auto& w : a.mouse.direction_bias) {
    w = gamma(rng) + 0.05;
    sum += w;
  }
  double partial = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    a.mouse.direction_bias[i] /= sum;
    if (i < 7) partial += a.mouse.direction_bias[i];
  }
  a.mouse.direction_bias[7] = 1.0 - partial;
  a.typing_share = u(0.3, 0.7);
  a.apps = random_distribution(rng, sample_codes(rng, 1, 40, 8), 1.0);
  a.resources.cpu_mean = u(0.1, 0.5);
  a.resources.ram_mean = u(0.3, 0.8);
  a.resources.net_tx_per_sample = u(500, 5000);
  a.resources.net_rx_per_sample = u(2000, 20000);
  return a;
}

MobileArchetype make_mobile_archetype(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MobileArchetype a;
  a.apps = random_distribution(rng, sample_codes(rng, 100, 140, 8), 1.0);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  a.stickiness = u(0.6, 0.85);
  a.resources.cpu_mean = u(0.1, 0.5);
  a.resources.ram_mean = u(0.3, 0.8);
  a.resources.net_tx_per_sample = u(200, 3000);
  a.resources.net_rx_per_sample = u(1000, 15000);
  a.day_start = 7 + static_cast<int>(u(0.0, 4.0));
  a.day_length = 8 + static_cast<int>(u(0.0, 2.0));
  a.mobile_work = u(0.15, 0.3);
  a.mobile_evening = u(0.2, 0.45);
  return a;
}

SensorProfile make_sensor_archetype(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  SensorProfile s;
  s.accelerometer = {AxisStats{u(-1.5, 1.5), u(0.2, 0.8)}, AxisStats{u(3.0, 8.0), u(0.2, 0.8)},
                     AxisStats{u(-2.0, 5.0), u(0.2, 0.8)}};
  s.gyroscope = {AxisStats{u(-0.1, 0.1), u(0.05, 0.3)}, AxisStats{u(-0.1, 0.1), u(0.05, 0.3)},
                 AxisStats{u(-0.1, 0.1), u(0.05, 0.3)}};
  s.session_drift = u(0.8, 1.5);
  return s;
}

}  // namespace

std::vector<UserProfile> make_synthetic_profiles(int user_count, std::uint64_t seed) {
  if (user_count < 1) invalid("user_count", "must be >= 1");
  // Archetype groupings: PC pairs (0,1),(2,3)..; mobile-app pairs (1,2),(3,4)..;
  // sensor pairs over the even-then-odd ordering. Users sharing an archetype
  // differ only by small individual perturbations.
  std::vector<int> sensor_group(static_cast<std::size_t>(user_count));
  {
    std::vector<int> order;
    for (int i = 0; i < user_count; i += 2) order.push_back(i);
    for (int i = 1; i < user_count; i += 2) order.push_back(i);
    for (std::size_t pos = 0; pos < order.size(); ++pos) sensor_group[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos / 2);
  }
  std::vector<UserProfile> out;
  for (int i = 0; i < user_count; ++i) {
    std::mt19937_64 rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto jitter = [&](double v, double rel) { return v * (1.0 + u(-rel, rel)); };

    UserProfile p;
    p.user_id = "user" + std::to_string(i + 1);
    auto pc = make_pc_archetype(mix_seed(seed, 10 + static_cast<std::uint64_t>(i / 2)));
    p.typing = pc.typing;
    p.typing.mean_hold_ms = jitter(pc.typing.mean_hold_ms, 0.04);
    p.typing.mean_flight_ms = jitter(pc.typing.mean_flight_ms, 0.04);
    p.typing.vocabulary = perturb(rng, pc.typing.vocabulary, 0.1);
    p.mouse = pc.mouse;
    p.mouse.mean_speed_px_s = jitter(pc.mouse.mean_speed_px_s, 0.04);
    p.typing_share = pc.typing_share;
    p.pc_apps = perturb(rng, pc.apps, 0.15);
    p.resources = pc.resources;
    p.resources.cpu_mean = jitter(pc.resources.cpu_mean, 0.05);

    auto mob = make_mobile_archetype(mix_seed(seed, 20 + static_cast<std::uint64_t>((i + 1) / 2)));
    p.mobile_apps = perturb(rng, mob.apps, 0.15);
    p.app_stickiness = mob.stickiness;
    p.mobile_resources = mob.resources;
    p.sensors = make_sensor_archetype(mix_seed(seed, 30 + static_cast<std::uint64_t>(sensor_group[static_cast<std::size_t>(i)])));
    for (auto& a : p.sensors.accelerometer) a.mean += u(-0.1, 0.1);

    // Office routine: start between 7h and 10h, 8-9 working hours.
    const int start = mob.day_start;
    const int length = mob.day_length;
    const double pc_work = u(0.45, 0.7);
    const double mobile_work = mob.mobile_work;
    const double mobile_evening = mob.mobile_evening;
    for (int h = 0; h < 24; ++h) {
      bool work = h >= start && h < start + length;
      bool lunch = h == start + length / 2;
      bool evening = h >= start + length && h < 23;
      p.pc_schedule[static_cast<std::size_t>(h)] = work ? (lunch ? 0.15 : pc_work) : (evening ? 0.08 : 0.0);
      p.mobile_schedule[static_cast<std::size_t>(h)] = work ? (lunch ? 0.5 : mobile_work) : (evening ? mobile_evening : 0.0);
    }
    p.mean_session_minutes = u(10.0, 25.0);
    validate(p);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replay

std::optional<std::size_t> first_inversion(std::span<const RawEvent> events) {
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i].timestamp_ms < events[i - 1].timestamp_ms) return i;
  }
  return std::nullopt;
}

EventFeed::EventFeed(std::vector<RawEvent> events, double speed) : events_(std::move(events)), speed_(speed) {
  if (!(speed > 0.0)) throw Error(ErrorCode::invalid_argument, "replay speed must be > 0");
  if (auto inv = first_inversion(events_)) {
    throw Error(ErrorCode::validation, "events are not sorted by timestamp; first inversion at index " +
                                           std::to_string(*inv),
                std::to_string(*inv));
  }
}

std::optional<RawEvent> EventFeed::next() {
  if (done()) return std::nullopt;
  if (!started_flag_) {
    started_ = std::chrono::steady_clock::now();
    started_flag_ = true;
  }
  const auto& ev = events_[cursor_];
  if (std::isfinite(speed_)) {
    double offset_ms = static_cast<double>(ev.timestamp_ms - events_.front().timestamp_ms) / speed_;
    auto due = started_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                              std::chrono::duration<double, std::milli>(offset_ms));
    std::this_thread::sleep_until(due);
  }
  return std::move(events_[cursor_++]);
}

EventFeed replay(std::vector<RawEvent> events, double speed) { return EventFeed(std::move(events), speed); }

}  // namespace authcode::events
