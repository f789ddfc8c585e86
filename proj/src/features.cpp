#include "authcode/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <ostream>
#include <set>
#include <unordered_map>

#include "authcode/common.hpp"

namespace authcode::features {

using events::AppSample;
using events::KeyAction;
using events::KeyEvent;
using events::MouseButton;
using events::MouseEvent;
using events::MouseKind;
using events::RawEvent;
using events::SensorKind;
using events::SensorSample;

std::string_view to_string(DeviceKind kind) { return kind == DeviceKind::pc ? "pc" : "mobile"; }

DeviceKind parse_device_kind(std::string_view text) {
  if (text == "pc") return DeviceKind::pc;
  if (text == "mobile") return DeviceKind::mobile;
  throw Error(ErrorCode::validation, "unknown device kind '" + std::string(text) + "'");
}

DeviceKind infer_device_kind(const std::string& device_id, std::span<const RawEvent> device_events,
                             const DeviceKindHints& hints) {
  bool pc_payload = false;
  bool sensor_payload = false;
  for (const auto& e : device_events) {
    if (std::holds_alternative<KeyEvent>(e.payload) || std::holds_alternative<MouseEvent>(e.payload)) {
      pc_payload = true;
    } else if (std::holds_alternative<SensorSample>(e.payload)) {
      sensor_payload = true;
    }
  }
  if (pc_payload && sensor_payload) {
    throw Error(ErrorCode::validation, "device " + device_id + " mixes keyboard/mouse and sensor events", device_id);
  }
  if (auto it = hints.find(device_id); it != hints.end()) {
    if ((it->second == DeviceKind::pc && sensor_payload) || (it->second == DeviceKind::mobile && pc_payload)) {
      throw Error(ErrorCode::validation, "device kind hint for " + device_id + " contradicts its payloads", device_id);
    }
    return it->second;
  }
  if (pc_payload) return DeviceKind::pc;
  if (sensor_payload) return DeviceKind::mobile;
  const std::string_view suffix = "mobile";
  if (device_id.size() >= suffix.size() && device_id.compare(device_id.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return DeviceKind::mobile;
  }
  return DeviceKind::pc;
}

std::vector<MinuteWindow> windowize(std::span<const RawEvent> events, double window_s, const DeviceKindHints& hints) {
  if (!(window_s > 0.0)) throw Error(ErrorCode::invalid_argument, "window_s must be > 0");
  const double window_ms = window_s * 1000.0;

  // Per-device streams keep their input order.
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> by_device;
  for (std::size_t i = 0; i < events.size(); ++i) by_device[{events[i].user_id, events[i].device_id}].push_back(i);

  std::vector<MinuteWindow> out;
  for (const auto& [key, idx] : by_device) {
    std::vector<RawEvent> stream;
    stream.reserve(idx.size());
    for (auto i : idx) stream.push_back(events[i]);
    for (std::size_t i = 1; i < stream.size(); ++i) {
      if (stream[i].timestamp_ms < stream[i - 1].timestamp_ms) {
        throw Error(ErrorCode::validation, "events of device " + key.second + " are not sorted (index " +
                                               std::to_string(idx[i]) + ")");
      }
    }
    DeviceKind kind = infer_device_kind(key.second, stream, hints);
    MinuteWindow* current = nullptr;
    for (auto& e : stream) {
      auto index = static_cast<std::int64_t>(std::floor(static_cast<double>(e.timestamp_ms) / window_ms));
      if (current == nullptr || current->minute_index != index) {
        out.push_back(MinuteWindow{key.first, key.second, kind, index, {}});
        current = &out.back();
      }
      current->events.push_back(std::move(e));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const MinuteWindow& a, const MinuteWindow& b) {
    return std::tie(a.minute_index, a.user_id, a.device_id) < std::tie(b.minute_index, b.user_id, b.device_id);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Names

namespace {

std::vector<std::string> make_keyboard_names() {
  std::vector<std::string> n{"keystrokes", "words", "erase_pct"};
  for (int k = 0; k < events::kKeyAlphabet; ++k) n.push_back("key_hist_" + std::to_string(k));
  n.insert(n.end(), {"hold_mean", "hold_std", "interval_mean", "interval_std"});
  for (int l = 1; l <= 20; ++l) n.push_back("word_len_" + std::to_string(l));
  n.push_back("word_len_21p");
  return n;
}

constexpr const char* kButtons[] = {"left", "right", "middle"};

std::vector<std::string> make_mouse_names() {
  std::vector<std::string> n;
  for (auto b : kButtons) n.push_back(std::string("click_count_") + b);
  for (auto b : kButtons) {
    n.push_back(std::string("click_dur_mean_") + b);
    n.push_back(std::string("click_dur_std_") + b);
  }
  n.insert(n.end(), {"dblclick_count", "dblclick_gap_mean", "dblclick_gap_std"});
  for (int d = 0; d < 8; ++d) n.push_back("speed_mean_dir" + std::to_string(d));
  for (int d = 0; d < 8; ++d) n.push_back("speed_std_dir" + std::to_string(d));
  for (int d = 0; d < 8; ++d) n.push_back("move_count_dir" + std::to_string(d));
  for (int b = 0; b < 5; ++b) n.push_back("len_hist_" + std::to_string(b));
  n.insert(n.end(), {"movement_count", "total_distance", "movement_duration_mean", "move_event_count"});
  return n;
}

std::vector<std::string> make_sensor_names() {
  std::vector<std::string> n;
  for (auto s : {"acc", "gyro"}) {
    for (auto c : {"x", "y", "z", "mag"}) {
      for (auto stat : {"mean", "max", "min", "var", "ptp"}) n.push_back(std::string(s) + "_" + c + "_" + stat);
    }
  }
  return n;
}

}  // namespace

const std::vector<std::string>& keyboard_feature_names() {
  static const auto names = make_keyboard_names();
  return names;
}

const std::vector<std::string>& mouse_feature_names() {
  static const auto names = make_mouse_names();
  return names;
}

const std::vector<std::string>& app_resource_feature_names() {
  static const std::vector<std::string> names{
      "last_app",      "penultimate_app", "active_app_mean", "app_changes", "cpu_mean",   "cpu_std",
      "ram_mean",      "ram_std",         "net_tx_total",    "net_rx_total", "sample_count", "distinct_apps",
      "cpu_max",       "ram_max",         "net_tx_mean",     "net_rx_mean", "last_app_share"};
  return names;
}

const std::vector<std::string>& mobile_app_feature_names() {
  static const std::vector<std::string> names{
      "min_distinct_apps", "min_total_apps", "day_distinct_apps", "day_total_apps", "min_top_app",
      "min_top_app_count", "day_top_app",    "day_top_app_count", "current_app",    "previous_app",
      "predecessor_app",   "net_tx",         "net_rx"};
  return names;
}

const std::vector<std::string>& sensor_feature_names() {
  static const auto names = make_sensor_names();
  return names;
}

std::string digraph_count_name(int first, int second) {
  return "dg_count_" + std::to_string(first) + "_" + std::to_string(second);
}

std::string digraph_time_name(int first, int second) {
  return "dg_time_" + std::to_string(first) + "_" + std::to_string(second);
}

std::optional<std::tuple<int, int, bool>> parse_digraph_name(std::string_view name) {
  bool is_time;
  if (name.rfind("dg_count_", 0) == 0) {
    is_time = false;
    name.remove_prefix(9);
  } else if (name.rfind("dg_time_", 0) == 0) {
    is_time = true;
    name.remove_prefix(8);
  } else {
    return std::nullopt;
  }
  auto sep = name.find('_');
  if (sep == std::string_view::npos) return std::nullopt;
  int a = -1, b = -1;
  auto r1 = std::from_chars(name.data(), name.data() + sep, a);
  auto r2 = std::from_chars(name.data() + sep + 1, name.data() + name.size(), b);
  if (r1.ec != std::errc() || r1.ptr != name.data() + sep || r2.ec != std::errc() ||
      r2.ptr != name.data() + name.size()) {
    return std::nullopt;
  }
  if (a < 0 || a >= events::kKeyAlphabet || b < 0 || b >= events::kKeyAlphabet) return std::nullopt;
  return std::make_tuple(a, b, is_time);
}

// ---------------------------------------------------------------------------
// Extractors

namespace {

void require_kind(const MinuteWindow& w, DeviceKind kind, std::string_view group) {
  if (w.device_kind != kind) {
    throw Error(ErrorCode::invalid_argument, std::string(group) + " features require a " +
                                                 std::string(to_string(kind)) + " window, got " +
                                                 std::string(to_string(w.device_kind)));
  }
}

void put_summary(std::vector<double>& out, const std::vector<double>& values) {
  auto s = summarize(values);
  out.push_back(s.mean);
  out.push_back(s.stddev);
}

}  // namespace

KeyboardFeatures extract_keyboard_features(const MinuteWindow& window) {
  require_kind(window, DeviceKind::pc, "keyboard");
  struct Press {
    std::int64_t t;
    int key;
  };
  std::vector<Press> presses;
  std::vector<double> holds;
  std::map<int, std::deque<std::int64_t>> open;
  for (const auto& e : window.events) {
    const auto* k = std::get_if<KeyEvent>(&e.payload);
    if (k == nullptr) continue;
    if (k->action == KeyAction::press) {
      presses.push_back({e.timestamp_ms, k->key_code});
      open[k->key_code].push_back(e.timestamp_ms);
    } else {
      auto it = open.find(k->key_code);
      if (it != open.end() && !it->second.empty()) {
        holds.push_back(static_cast<double>(e.timestamp_ms - it->second.front()));
        it->second.pop_front();
      }
    }
  }

  KeyboardFeatures f;
  std::vector<double> hist(events::kKeyAlphabet, 0.0);
  std::vector<double> intervals;
  std::vector<double> word_hist(kWordLengthBins, 0.0);
  double erasing = 0.0;
  double words = 0.0;
  int word_len = 0;
  auto close_word = [&] {
    if (word_len > 0) {
      words += 1.0;
      word_hist[static_cast<std::size_t>(std::min(word_len, 21) - 1)] += 1.0;
    }
    word_len = 0;
  };
  std::map<DigraphKey, std::pair<std::uint32_t, double>> dg;
  for (std::size_t i = 0; i < presses.size(); ++i) {
    int key = presses[i].key;
    hist[static_cast<std::size_t>(key)] += 1.0;
    if (events::is_erasing_key(key)) {
      erasing += 1.0;
    } else if (events::is_word_separator(key)) {
      close_word();
    } else {
      ++word_len;
    }
    if (i > 0) {
      double dt = static_cast<double>(presses[i].t - presses[i - 1].t);
      intervals.push_back(dt);
      auto& slot = dg[{presses[i - 1].key, key}];
      slot.first += 1;
      slot.second += dt;
    }
  }
  close_word();

  const double n = static_cast<double>(presses.size());
  f.dense.push_back(n);
  f.dense.push_back(words);
  f.dense.push_back(presses.empty() ? 0.0 : erasing / n);
  f.dense.insert(f.dense.end(), hist.begin(), hist.end());
  put_summary(f.dense, holds);
  put_summary(f.dense, intervals);
  f.dense.insert(f.dense.end(), word_hist.begin(), word_hist.end());
  for (const auto& [key, acc] : dg) f.digraphs[key] = DigraphStat{acc.first, acc.second / acc.first};
  return f;
}

int direction_sector(double dx, double dy) {
  if (dx == 0.0 && dy == 0.0) return 0;
  if (dy == 0.0) return dx > 0.0 ? 0 : 4;
  if (dy > 0.0) {
    if (dx > 0.0) return dy < dx ? 0 : 1;
    return dy > -dx ? 2 : 3;
  }
  if (dx < 0.0) return -dy < -dx ? 4 : 5;
  return dx < -dy ? 6 : 7;
}

std::vector<double> extract_mouse_features(const MinuteWindow& window) {
  require_kind(window, DeviceKind::pc, "mouse");
  std::array<double, 3> click_count{};
  std::array<std::vector<double>, 3> click_dur;
  std::array<std::optional<std::int64_t>, 3> pending;
  std::vector<std::int64_t> left_presses;
  std::array<std::vector<double>, 8> speeds;
  std::array<double, 8> dir_count{};
  std::array<double, 5> len_hist{};
  double movements = 0.0, total_distance = 0.0, move_events = 0.0;
  std::vector<double> durations;

  struct Point {
    std::int64_t t;
    double x, y;
  };
  std::vector<Point> path;
  auto close_movement = [&] {
    if (path.size() >= 2) {
      double length = 0.0;
      for (std::size_t i = 1; i < path.size(); ++i) length += std::hypot(path[i].x - path[i - 1].x, path[i].y - path[i - 1].y);
      if (length > 0.0) {
        movements += 1.0;
        total_distance += length;
        double duration = static_cast<double>(path.back().t - path.front().t);
        durations.push_back(duration);
        int sector = direction_sector(path.back().x - path.front().x, path.back().y - path.front().y);
        dir_count[static_cast<std::size_t>(sector)] += 1.0;
        if (duration > 0.0) speeds[static_cast<std::size_t>(sector)].push_back(length / (duration / 1000.0));
        std::size_t bin = 0;
        while (bin < 4 && length >= kMovementBins[bin]) ++bin;
        len_hist[bin] += 1.0;
      }
    }
    path.clear();
  };

  for (const auto& e : window.events) {
    const auto* m = std::get_if<MouseEvent>(&e.payload);
    if (m == nullptr) continue;
    if (m->kind == MouseKind::move) {
      move_events += 1.0;
      if (!path.empty() && e.timestamp_ms - path.back().t > kMovementGapMs) close_movement();
      path.push_back({e.timestamp_ms, m->x, m->y});
      continue;
    }
    close_movement();
    if (m->button == MouseButton::none) continue;
    auto b = static_cast<std::size_t>(m->button);
    if (m->kind == MouseKind::press) {
      click_count[b] += 1.0;
      pending[b] = e.timestamp_ms;
      if (m->button == MouseButton::left) left_presses.push_back(e.timestamp_ms);
    } else if (pending[b]) {
      click_dur[b].push_back(static_cast<double>(e.timestamp_ms - *pending[b]));
      pending[b].reset();
    }
  }
  close_movement();

  std::vector<double> dbl_gaps;
  for (std::size_t i = 0; i + 1 < left_presses.size();) {
    auto gap = left_presses[i + 1] - left_presses[i];
    if (gap <= kDoubleClickGapMs) {
      dbl_gaps.push_back(static_cast<double>(gap));
      i += 2;
    } else {
      i += 1;
    }
  }

  std::vector<double> out;
  out.reserve(45);
  out.insert(out.end(), click_count.begin(), click_count.end());
  for (const auto& d : click_dur) put_summary(out, d);
  out.push_back(static_cast<double>(dbl_gaps.size()));
  put_summary(out, dbl_gaps);
  for (const auto& s : speeds) out.push_back(summarize(s).mean);
  for (const auto& s : speeds) out.push_back(summarize(s).stddev);
  out.insert(out.end(), dir_count.begin(), dir_count.end());
  out.insert(out.end(), len_hist.begin(), len_hist.end());
  out.push_back(movements);
  out.push_back(total_distance);
  out.push_back(summarize(durations).mean);
  out.push_back(move_events);
  return out;
}

std::vector<double> extract_app_resource_features(const MinuteWindow& window) {
  require_kind(window, DeviceKind::pc, "application/resource");
  std::vector<int> ids;
  std::vector<double> cpu, ram, tx, rx;
  for (const auto& e : window.events) {
    const auto* a = std::get_if<AppSample>(&e.payload);
    if (a == nullptr) continue;
    ids.push_back(a->foreground_app_id);
    cpu.push_back(a->cpu_pct);
    ram.push_back(a->ram_pct);
    tx.push_back(static_cast<double>(a->net_tx_bytes));
    rx.push_back(static_cast<double>(a->net_rx_bytes));
  }
  std::vector<double> out;
  out.reserve(17);
  int last = ids.empty() ? 0 : ids.back();
  int penultimate = 0;
  for (auto it = ids.rbegin(); it != ids.rend(); ++it) {
    if (*it != last) {
      penultimate = *it;
      break;
    }
  }
  double changes = 0.0;
  double running_distinct_sum = 0.0;
  std::set<int> seen;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0 && ids[i] != ids[i - 1]) changes += 1.0;
    seen.insert(ids[i]);
    running_distinct_sum += static_cast<double>(seen.size());
  }
  const double n = static_cast<double>(ids.size());
  out.push_back(last);
  out.push_back(penultimate);
  out.push_back(ids.empty() ? 0.0 : running_distinct_sum / n);
  out.push_back(changes);
  auto c = summarize(cpu), r = summarize(ram), t = summarize(tx), x = summarize(rx);
  out.push_back(c.mean);
  out.push_back(c.stddev);
  out.push_back(r.mean);
  out.push_back(r.stddev);
  out.push_back(t.mean * n);
  out.push_back(x.mean * n);
  out.push_back(n);
  out.push_back(static_cast<double>(seen.size()));
  out.push_back(c.max);
  out.push_back(r.max);
  out.push_back(t.mean);
  out.push_back(x.mean);
  out.push_back(ids.empty() ? 0.0 : static_cast<double>(std::count(ids.begin(), ids.end(), last)) / n);
  return out;
}

namespace {

std::int64_t window_day(const MinuteWindow& w) {
  if (!w.events.empty()) return w.events.front().timestamp_ms / 86'400'000;
  return w.minute_index / 1440;
}

std::pair<int, std::uint32_t> top_app(const std::map<int, std::uint32_t>& counts) {
  std::pair<int, std::uint32_t> best{0, 0};
  for (const auto& [id, n] : counts) {
    if (n > best.second) best = {id, n};  // ascending ids: ties keep the lowest
  }
  return best;
}

}  // namespace

std::vector<double> extract_mobile_app_features(const MinuteWindow& window, DayContext& day) {
  require_kind(window, DeviceKind::mobile, "mobile application");
  if (day.day_index >= 0 && (day.user_id != window.user_id || day.device_id != window.device_id)) {
    throw Error(ErrorCode::invalid_argument, "day context belongs to " + day.user_id + "/" + day.device_id +
                                                 ", not " + window.user_id + "/" + window.device_id);
  }
  std::vector<int> ids;
  double tx = 0.0, rx = 0.0;
  for (const auto& e : window.events) {
    const auto* a = std::get_if<AppSample>(&e.payload);
    if (a == nullptr) continue;
    ids.push_back(a->foreground_app_id);
    tx += static_cast<double>(a->net_tx_bytes);
    rx += static_cast<double>(a->net_rx_bytes);
  }
  const std::int64_t today = window_day(window);
  std::vector<double> out;
  out.reserve(13);
  std::map<int, std::uint32_t> minute_counts;
  for (int id : ids) ++minute_counts[id];

  if (!ids.empty()) {
    if (day.day_index != today) {
      day = DayContext{window.user_id, window.device_id, today, {}, 0, 0, 0, {}};
    }
    for (int id : ids) {
      ++day.app_counts[id];
      ++day.total;
      if (day.last_app == 0) {
        day.last_app = id;
      } else if (id != day.last_app) {
        day.previous_app = day.last_app;
        ++day.transitions[{day.last_app, id}];
        day.last_app = id;
      }
    }
  }
  const bool same_day = day.day_index == today;
  auto minute_top = top_app(minute_counts);
  auto day_top = same_day ? top_app(day.app_counts) : std::pair<int, std::uint32_t>{0, 0};
  int current = ids.empty() ? 0 : day.last_app;
  int previous = ids.empty() ? 0 : day.previous_app;
  int predecessor = 0;
  if (current != 0) {
    std::uint32_t best = 0;
    for (const auto& [pair, n] : day.transitions) {
      if (pair.second == current && n > best) {
        best = n;
        predecessor = pair.first;
      }
    }
  }
  out.push_back(static_cast<double>(minute_counts.size()));
  out.push_back(static_cast<double>(ids.size()));
  out.push_back(same_day ? static_cast<double>(day.app_counts.size()) : 0.0);
  out.push_back(same_day ? static_cast<double>(day.total) : 0.0);
  out.push_back(minute_top.first);
  out.push_back(minute_top.second);
  out.push_back(day_top.first);
  out.push_back(day_top.second);
  out.push_back(current);
  out.push_back(previous);
  out.push_back(predecessor);
  out.push_back(tx);
  out.push_back(rx);
  return out;
}

std::vector<double> extract_sensor_features(const MinuteWindow& window) {
  require_kind(window, DeviceKind::mobile, "sensor");
  // [sensor][channel] -> samples
  std::array<std::array<std::vector<double>, 4>, 2> ch;
  for (const auto& e : window.events) {
    const auto* s = std::get_if<SensorSample>(&e.payload);
    if (s == nullptr) continue;
    auto& c = ch[s->sensor == SensorKind::accelerometer ? 0 : 1];
    c[0].push_back(s->x);
    c[1].push_back(s->y);
    c[2].push_back(s->z);
    c[3].push_back(std::sqrt(s->x * s->x + s->y * s->y + s->z * s->z));
  }
  std::vector<double> out;
  out.reserve(40);
  for (const auto& sensor : ch) {
    for (const auto& values : sensor) {
      auto s = summarize(values);
      out.insert(out.end(), {s.mean, s.max, s.min, s.variance, s.max - s.min});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schemas and vectors

std::size_t FeatureSchema::full_width() const {
  return dense_names.size() + (has_digraphs ? 2u * events::kKeyAlphabet * events::kKeyAlphabet : 0u);
}

std::vector<std::string> FeatureSchema::full_names() const {
  std::vector<std::string> names = dense_names;
  if (has_digraphs) {
    for (int a = 0; a < events::kKeyAlphabet; ++a) {
      for (int b = 0; b < events::kKeyAlphabet; ++b) {
        names.push_back(digraph_count_name(a, b));
        names.push_back(digraph_time_name(a, b));
      }
    }
  }
  return names;
}

const FeatureSchema& pc_schema() {
  static const FeatureSchema schema = [] {
    FeatureSchema s{std::string(kPcSchemaId), DeviceKind::pc, {}, true};
    for (const auto* group : {&keyboard_feature_names(), &mouse_feature_names(), &app_resource_feature_names()}) {
      s.dense_names.insert(s.dense_names.end(), group->begin(), group->end());
    }
    return s;
  }();
  return schema;
}

const FeatureSchema& mobile_schema() {
  static const FeatureSchema schema = [] {
    FeatureSchema s{std::string(kMobileSchemaId), DeviceKind::mobile, {}, false};
    for (const auto* group : {&mobile_app_feature_names(), &sensor_feature_names()}) {
      s.dense_names.insert(s.dense_names.end(), group->begin(), group->end());
    }
    return s;
  }();
  return schema;
}

const FeatureSchema& schema_for(DeviceKind kind) { return kind == DeviceKind::pc ? pc_schema() : mobile_schema(); }

namespace {

const std::unordered_map<std::string, std::size_t>& dense_index(DeviceKind kind) {
  static const auto build = [](const FeatureSchema& s) {
    std::unordered_map<std::string, std::size_t> m;
    for (std::size_t i = 0; i < s.dense_names.size(); ++i) m.emplace(s.dense_names[i], i);
    return m;
  };
  static const auto pc = build(pc_schema());
  static const auto mobile = build(mobile_schema());
  return kind == DeviceKind::pc ? pc : mobile;
}

}  // namespace

double MinuteFeatureVector::value(std::string_view name) const {
  const auto& idx = dense_index(device_kind);
  if (auto it = idx.find(std::string(name)); it != idx.end()) return dense.at(it->second);
  if (device_kind == DeviceKind::pc) {
    if (auto dg = parse_digraph_name(name)) {
      auto [a, b, is_time] = *dg;
      auto it = digraphs.find({a, b});
      if (it == digraphs.end()) return 0.0;
      return is_time ? it->second.mean_ms : static_cast<double>(it->second.count);
    }
  }
  throw Error(ErrorCode::schema_mismatch, "feature '" + std::string(name) + "' is not part of schema " + schema_id);
}

std::vector<std::pair<std::string, double>> MinuteFeatureVector::named() const {
  const auto& names = schema_for(device_kind).dense_names;
  std::vector<std::pair<std::string, double>> out;
  out.reserve(names.size() + 2 * digraphs.size());
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], dense[i]);
  for (const auto& [key, st] : digraphs) {
    out.emplace_back(digraph_count_name(key.first, key.second), st.count);
    out.emplace_back(digraph_time_name(key.first, key.second), st.mean_ms);
  }
  return out;
}

MinuteFeatureVector FeatureExtractor::extract(const MinuteWindow& window) {
  MinuteFeatureVector v;
  v.user_id = window.user_id;
  v.device_id = window.device_id;
  v.device_kind = window.device_kind;
  v.minute_index = window.minute_index;
  v.schema_id = schema_for(window.device_kind).id;
  for (const auto& e : window.events) {
    switch (e.payload.index()) {
      case 0: v.active_groups |= kKeyboardGroup; break;
      case 1: v.active_groups |= kMouseGroup; break;
      case 2: v.active_groups |= window.device_kind == DeviceKind::pc ? kAppResourceGroup : kMobileAppGroup; break;
      default: v.active_groups |= kSensorGroup; break;
    }
  }
  if (window.device_kind == DeviceKind::pc) {
    if (v.active_groups & kSensorGroup) {
      throw Error(ErrorCode::validation, "pc window of " + window.device_id + " contains sensor events");
    }
    auto kb = extract_keyboard_features(window);
    v.dense = std::move(kb.dense);
    v.digraphs = std::move(kb.digraphs);
    auto mouse = extract_mouse_features(window);
    v.dense.insert(v.dense.end(), mouse.begin(), mouse.end());
    auto app = extract_app_resource_features(window);
    v.dense.insert(v.dense.end(), app.begin(), app.end());
  } else {
    if (v.active_groups & (kKeyboardGroup | kMouseGroup)) {
      throw Error(ErrorCode::validation, "mobile window of " + window.device_id + " contains keyboard/mouse events");
    }
    auto& day = days_[window.user_id + "\x1f" + window.device_id];
    v.dense = extract_mobile_app_features(window, day);
    auto sensors = extract_sensor_features(window);
    v.dense.insert(v.dense.end(), sensors.begin(), sensors.end());
  }
  return v;
}

std::vector<MinuteFeatureVector> FeatureExtractor::extract_all(std::span<const MinuteWindow> windows) {
  std::vector<MinuteFeatureVector> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(extract(w));
  return out;
}

void write_feature_csv(std::ostream& out, std::span<const MinuteFeatureVector> vectors, const FeatureSchema& schema) {
  std::set<DigraphKey> digraph_union;
  if (schema.has_digraphs) {
    for (const auto& v : vectors) {
      for (const auto& [key, st] : v.digraphs) digraph_union.insert(key);
    }
  }
  out << "user_id,device_kind,minute_index";
  for (const auto& n : schema.dense_names) out << ',' << n;
  for (const auto& k : digraph_union) {
    out << ',' << digraph_count_name(k.first, k.second) << ',' << digraph_time_name(k.first, k.second);
  }
  out << '\n';
  for (const auto& v : vectors) {
    if (v.schema_id != schema.id) {
      throw Error(ErrorCode::schema_mismatch, "vector schema " + v.schema_id + " does not match " + schema.id);
    }
    out << csv_field(v.user_id) << ',' << to_string(v.device_kind) << ',' << v.minute_index;
    for (double x : v.dense) out << ',' << format_double(x);
    for (const auto& k : digraph_union) {
      auto it = v.digraphs.find(k);
      if (it == v.digraphs.end()) {
        out << ",0,0";
      } else {
        out << ',' << it->second.count << ',' << format_double(it->second.mean_ms);
      }
    }
    out << '\n';
  }
}

}  // namespace authcode::features
