#include <chrono>
#include <cmath>
#include <regex>
#include <set>
#include <thread>

#include "authcode/experiment.hpp"
#include "httplib.h"
#include "json.hpp"

namespace authcode::experiment {

using json = nlohmann::json;

std::string ReplaySummary::to_json() const {
  std::vector<double> sorted = latencies_s;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
  return json{{"envelopes_sent", envelopes_sent},
              {"ingest_errors", ingest_errors},
              {"decisions", decisions},
              {"decision_errors", decision_errors},
              {"actions", actions},
              {"median_latency_s", median},
              {"errors", errors}}
      .dump(2);
}

namespace {

using Clock = std::chrono::steady_clock;

std::string describe_failure(const httplib::Result& res) {
  if (!res) return "connection failed: " + httplib::to_string(res.error());
  try {
    auto j = json::parse(res->body);
    return std::to_string(res->status) + " " + j.value("code", std::string()) + ": " + j.value("message", res->body);
  } catch (const json::exception&) {
    return std::to_string(res->status) + " " + res->body;
  }
}

}  // namespace

ReplaySummary replay_to_service(std::span<const service::IngestEnvelope> envelopes, const ReplayOptions& options) {
  static const std::regex url_re(R"(^(https?://[^/]+)/?$)");
  if (!std::regex_match(options.endpoint, url_re)) {
    throw Error(ErrorCode::invalid_argument, "endpoint '" + options.endpoint + "' is not an http base url");
  }
  if (!(options.speed > 0.0)) throw Error(ErrorCode::invalid_argument, "speed must be positive");
  ReplaySummary summary;
  if (envelopes.empty()) return summary;

  httplib::Client client(options.endpoint);
  client.set_connection_timeout(std::chrono::seconds(5));
  client.set_read_timeout(std::chrono::seconds(30));
  if (!options.token.empty()) client.set_bearer_token_auth(options.token);

  // Retries only connection failures; HTTP errors are returned as is.
  auto call = [&](auto&& request) {
    httplib::Result res = request();
    for (int attempt = 1; !res && attempt <= options.connect_retries; ++attempt) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100 << attempt));
      res = request();
    }
    if (!res) {
      throw Error(ErrorCode::unavailable, "cannot reach " + options.endpoint + " after " +
                                              std::to_string(options.connect_retries + 1) +
                                              " attempts: " + httplib::to_string(res.error()));
    }
    return res;
  };

  if (options.register_devices) {
    std::map<std::string, std::string> devices;
    for (const auto& e : envelopes) devices.emplace(e.device_id, e.user_id);
    for (const auto& [device, user] : devices) {
      json body{{"device_id", device}, {"user_id", user}, {"tier", options.tier}};
      auto res = call([&] { return client.Post("/v1/devices", body.dump(), "application/json"); });
      if (res->status != 201) summary.errors.push_back("register " + device + ": " + describe_failure(res));
    }
  }

  std::size_t i = 0;
  std::optional<std::int64_t> previous_minute;
  while (i < envelopes.size()) {
    const std::int64_t minute = envelopes[i].minute_index;
    if (previous_minute && std::isfinite(options.speed)) {
      const double gap_s = static_cast<double>(minute - *previous_minute) * 60.0 / options.speed;
      std::this_thread::sleep_for(std::chrono::duration<double>(gap_s));
    }
    previous_minute = minute;
    std::map<std::string, Clock::time_point> users;  // user -> last accepted ingest
    for (; i < envelopes.size() && envelopes[i].minute_index == minute; ++i) {
      const auto& e = envelopes[i];
      const auto sent = Clock::now();
      auto res = call([&] { return client.Post("/v1/vectors", service::envelope_to_json(e), "application/json"); });
      ++summary.envelopes_sent;
      if (res->status != 202) {
        ++summary.ingest_errors;
        summary.errors.push_back("ingest " + e.device_id + "@" + std::to_string(minute) + ": " + describe_failure(res));
        continue;
      }
      users[e.user_id] = sent;
    }
    for (const auto& [user, sent] : users) {
      auto res = call([&] { return client.Get("/v1/scores/" + user + "/" + std::to_string(minute)); });
      if (res->status != 200) {
        ++summary.decision_errors;
        summary.errors.push_back("score " + user + "@" + std::to_string(minute) + ": " + describe_failure(res));
        continue;
      }
      summary.latencies_s.push_back(std::chrono::duration<double>(Clock::now() - sent).count());
      ++summary.decisions;
      for (const auto& a : service::decision_from_json(res->body).actions) {
        ++summary.actions[std::string(service::to_string(a.decision.action))];
      }
    }
  }
  return summary;
}

}  // namespace authcode::experiment
