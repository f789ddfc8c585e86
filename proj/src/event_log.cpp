#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "authcode/common.hpp"
#include "authcode/events.hpp"

namespace authcode::events {

namespace {

constexpr std::string_view kHeader = "timestamp,user_id,device_id,payload_kind,f1,f2,f3,f4,f5";

std::string_view to_string(KeyAction a) { return a == KeyAction::press ? "press" : "release"; }

std::string_view to_string(MouseKind k) {
  switch (k) {
    case MouseKind::move: return "move";
    case MouseKind::press: return "press";
    default: return "release";
  }
}

std::string_view to_string(MouseButton b) {
  switch (b) {
    case MouseButton::left: return "left";
    case MouseButton::right: return "right";
    case MouseButton::middle: return "middle";
    default: return "none";
  }
}

std::string_view to_string(SensorKind s) { return s == SensorKind::accelerometer ? "accelerometer" : "gyroscope"; }

[[noreturn]] void parse_error(std::size_t line, const std::string& why) {
  throw Error(ErrorCode::validation, "event log line " + std::to_string(line) + ": " + why, std::to_string(line));
}

}  // namespace

void write_event_log(std::ostream& out, std::span<const RawEvent> events) {
  out << kHeader << '\n';
  for (const auto& e : events) {
    out << e.timestamp_ms << ',' << csv_field(e.user_id) << ',' << csv_field(e.device_id) << ','
        << payload_kind(e.payload);
    std::visit(
        [&out](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, KeyEvent>) {
            out << ',' << p.key_code << ',' << to_string(p.action);
          } else if constexpr (std::is_same_v<T, MouseEvent>) {
            out << ',' << to_string(p.kind) << ',' << to_string(p.button) << ',' << format_double(p.x) << ','
                << format_double(p.y);
          } else if constexpr (std::is_same_v<T, AppSample>) {
            out << ',' << p.foreground_app_id << ',' << format_double(p.cpu_pct) << ',' << format_double(p.ram_pct)
                << ',' << p.net_tx_bytes << ',' << p.net_rx_bytes;
          } else {
            out << ',' << to_string(p.sensor) << ',' << format_double(p.x) << ',' << format_double(p.y) << ','
                << format_double(p.z);
          }
        },
        e.payload);
    out << '\n';
  }
}

std::vector<RawEvent> read_event_log(std::istream& in) {
  std::vector<RawEvent> out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) return out;  // an empty file is an empty log
  ++lineno;
  if (line.rfind("timestamp,", 0) != 0) parse_error(1, "header must start with 'timestamp,'");
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() < 4) parse_error(lineno, "expected at least 4 fields");
    RawEvent e;
    try {
      e.timestamp_ms = parse_integer(f[0], "timestamp");
      e.user_id = f[1];
      e.device_id = f[2];
      const std::string& kind = f[3];
      auto need = [&](std::size_t n) {
        if (f.size() != 4 + n) {
          parse_error(lineno, kind + " payload expects " + std::to_string(n) + " fields, got " +
                                  std::to_string(f.size() - 4));
        }
      };
      if (kind == "key") {
        need(2);
        KeyEvent k;
        k.key_code = static_cast<int>(parse_integer(f[4], "key_code"));
        if (f[5] == "press") {
          k.action = KeyAction::press;
        } else if (f[5] == "release") {
          k.action = KeyAction::release;
        } else {
          parse_error(lineno, "unknown key action '" + f[5] + "'");
        }
        e.payload = k;
      } else if (kind == "mouse") {
        need(4);
        MouseEvent m;
        if (f[4] == "move") {
          m.kind = MouseKind::move;
        } else if (f[4] == "press") {
          m.kind = MouseKind::press;
        } else if (f[4] == "release") {
          m.kind = MouseKind::release;
        } else {
          parse_error(lineno, "unknown mouse kind '" + f[4] + "'");
        }
        if (f[5] == "left") {
          m.button = MouseButton::left;
        } else if (f[5] == "right") {
          m.button = MouseButton::right;
        } else if (f[5] == "middle") {
          m.button = MouseButton::middle;
        } else if (f[5] == "none") {
          m.button = MouseButton::none;
        } else {
          parse_error(lineno, "unknown mouse button '" + f[5] + "'");
        }
        m.x = parse_double(f[6], "x");
        m.y = parse_double(f[7], "y");
        e.payload = m;
      } else if (kind == "app") {
        need(5);
        AppSample a;
        a.foreground_app_id = static_cast<int>(parse_integer(f[4], "foreground_app_id"));
        a.cpu_pct = parse_double(f[5], "cpu_pct");
        a.ram_pct = parse_double(f[6], "ram_pct");
        a.net_tx_bytes = static_cast<std::uint64_t>(parse_integer(f[7], "net_tx_bytes"));
        a.net_rx_bytes = static_cast<std::uint64_t>(parse_integer(f[8], "net_rx_bytes"));
        e.payload = a;
      } else if (kind == "sensor") {
        need(4);
        SensorSample s;
        if (f[4] == "accelerometer") {
          s.sensor = SensorKind::accelerometer;
        } else if (f[4] == "gyroscope") {
          s.sensor = SensorKind::gyroscope;
        } else {
          parse_error(lineno, "unknown sensor '" + f[4] + "'");
        }
        s.x = parse_double(f[5], "x");
        s.y = parse_double(f[6], "y");
        s.z = parse_double(f[7], "z");
        e.payload = s;
      } else {
        parse_error(lineno, "unknown payload kind '" + kind + "'");
      }
      validate(e);
    } catch (const Error& err) {
      if (std::string(err.what()).rfind("event log line", 0) == 0) throw;
      parse_error(lineno, err.what());
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_event_log_file(const std::string& path, std::span<const RawEvent> events) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  write_event_log(out, events);
  if (!out) throw Error(ErrorCode::io, "failed writing " + path);
}

std::vector<RawEvent> read_event_log_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open event log " + path);
  return read_event_log(in);
}

}  // namespace authcode::events
