#include <regex>
#include <thread>

#include "authcode/service.hpp"
#include "httplib.h"
#include "json.hpp"

namespace authcode::service {

using json = nlohmann::json;

namespace {

template <typename F>
auto parse_body(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_argument, "malformed " + what + ": " + e.what());
  }
}

json rule_json(const PolicyRule& r) {
  return {{"id", r.id},
          {"lo", r.lo},
          {"hi", r.hi},
          {"lo_closed", r.lo_closed},
          {"hi_closed", r.hi_closed},
          {"tiers", r.tiers},
          {"action", std::string(to_string(r.action))},
          {"priority", r.priority}};
}

PolicyRule rule_from(const json& j) {
  PolicyRule r;
  r.id = j.at("id").get<std::string>();
  r.lo = j.value("lo", 0.0);
  r.hi = j.value("hi", 1.0);
  r.lo_closed = j.value("lo_closed", true);
  r.hi_closed = j.value("hi_closed", true);
  r.tiers = j.value("tiers", std::vector<std::string>{});
  r.action = parse_action(j.at("action").get<std::string>());
  r.priority = j.at("priority").get<int>();
  return r;
}

json score_json(const AuthScore& s) {
  json models = json::array();
  for (const auto& m : s.per_model) models.push_back({{"name", m.name}, {"score", m.score}, {"weight", m.weight}});
  return {{"user_id", s.user_id},
          {"minute_index", s.minute_index},
          {"models", models},
          {"aggregate", s.aggregate},
          {"config_version", s.config_version}};
}

AuthScore score_from(const json& j) {
  AuthScore s;
  s.user_id = j.at("user_id").get<std::string>();
  s.minute_index = j.at("minute_index").get<std::int64_t>();
  s.aggregate = j.at("aggregate").get<double>();
  s.config_version = j.at("config_version").get<std::uint64_t>();
  for (const auto& m : j.at("models")) {
    s.per_model.push_back({m.at("name").get<std::string>(), m.at("score").get<double>(), m.at("weight").get<double>()});
  }
  return s;
}

std::string bearer_token(const httplib::Request& req) {
  const auto h = req.get_header_value("Authorization");
  const std::string prefix = "Bearer ";
  if (h.rfind(prefix, 0) == 0) return h.substr(prefix.size());
  return {};
}

}  // namespace

std::string envelope_to_json(const IngestEnvelope& e) {
  json j{{"user_id", e.user_id},
         {"device_id", e.device_id},
         {"device_kind", e.device_kind},
         {"minute_index", e.minute_index},
         {"schema_id", e.schema_id},
         {"features", e.features}};
  if (e.active_blocks) j["active_blocks"] = *e.active_blocks;
  return j.dump();
}

IngestEnvelope envelope_from_json(const std::string& body) {
  return parse_body("envelope", [&] {
    auto j = json::parse(body);
    IngestEnvelope e;
    e.user_id = j.at("user_id").get<std::string>();
    e.device_id = j.at("device_id").get<std::string>();
    e.device_kind = j.at("device_kind").get<std::string>();
    e.minute_index = j.at("minute_index").get<std::int64_t>();
    e.schema_id = j.at("schema_id").get<std::string>();
    e.features = j.at("features").get<std::vector<double>>();
    if (j.contains("active_blocks")) e.active_blocks = j.at("active_blocks").get<std::vector<std::string>>();
    return e;
  });
}

std::string score_to_json(const AuthScore& score) { return score_json(score).dump(); }

std::string decision_to_json(const DecisionEntry& entry) {
  json actions = json::array();
  for (const auto& a : entry.actions) {
    actions.push_back({{"device_id", a.device_id},
                       {"tier", a.tier},
                       {"action", std::string(to_string(a.decision.action))},
                       {"rule_id", a.decision.rule_id}});
  }
  json j = score_json(entry.score);
  j["schema_id"] = "decision.v1";
  j["actions"] = actions;
  j["revision"] = entry.revision;
  return j.dump();
}

DecisionEntry decision_from_json(const std::string& body) {
  return parse_body("decision", [&] {
    auto j = json::parse(body);
    DecisionEntry e;
    e.score = score_from(j);
    e.revision = j.value("revision", std::uint64_t{1});
    for (const auto& a : j.at("actions")) {
      e.actions.push_back({a.at("device_id").get<std::string>(), a.at("tier").get<std::string>(),
                           {parse_action(a.at("action").get<std::string>()), a.at("rule_id").get<std::string>()}});
    }
    return e;
  });
}

std::vector<PolicyRule> rules_from_json(const std::string& body) {
  return parse_body("rules", [&] {
    std::vector<PolicyRule> rules;
    for (const auto& r : json::parse(body)) rules.push_back(rule_from(r));
    return rules;
  });
}

std::string rules_to_json(const std::vector<PolicyRule>& rules) {
  json j = json::array();
  for (const auto& r : rules) j.push_back(rule_json(r));
  return j.dump();
}

ServiceConfig config_from_json(const std::string& body) {
  return parse_body("configuration", [&] {
    auto j = json::parse(body);
    ServiceConfig c;
    c.window_s = j.value("window_s", 60.0);
    if (j.contains("rules")) c.rules = rules_from_json(j.at("rules").dump());
    if (j.contains("tiers")) c.tiers = j.at("tiers").get<std::vector<std::string>>();
    c.default_tier = j.value("default_tier", c.tiers.empty() ? std::string("standard") : c.tiers.front());
    for (const auto& m : j.value("models", json::array())) {
      ScoringModel s;
      s.name = m.at("name").get<std::string>();
      s.weight = m.value("weight", 0.0);
      s.model = std::make_shared<const models::TrainedModel>(
          models::TrainedModel::load(m.at("path").get<std::string>()));
      c.models.push_back(std::move(s));
    }
    return c;
  });
}

DeviceRegistration registration_from_json(const std::string& body) {
  return parse_body("device registration", [&] {
    auto j = json::parse(body);
    DeviceRegistration d;
    d.device_id = j.at("device_id").get<std::string>();
    d.user_id = j.at("user_id").get<std::string>();
    d.tier = j.value("tier", std::string("standard"));
    d.callback_url = j.value("callback_url", std::string());
    return d;
  });
}

std::string error_to_json(const Error& error) {
  return json{{"code", std::string(to_string(error.code()))}, {"message", error.what()}, {"detail", error.detail()}}
      .dump();
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::validation:
    case ErrorCode::schema_mismatch: return 400;
    case ErrorCode::unauthorized: return 401;
    case ErrorCode::not_found: return 404;
    case ErrorCode::config: return 422;
    case ErrorCode::unavailable: return 503;
    default: return 500;
  }
}

bool HttpTransport::deliver(const DeviceRegistration& device, const std::string& body) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(device.callback_url, m, url_re)) {
    throw Error(ErrorCode::config, "callback url '" + device.callback_url + "' is not an http url", device.device_id);
  }
  httplib::Client client(m[1].str());
  const auto ms = static_cast<long>(timeout_s_ * 1000.0);
  client.set_connection_timeout(std::chrono::milliseconds(ms));
  client.set_read_timeout(std::chrono::milliseconds(ms));
  auto res = client.Post(m[2].matched ? m[2].str() : "/", body, "application/json");
  if (!res) throw Error(ErrorCode::unavailable, "callback failed: " + httplib::to_string(res.error()));
  return res->status >= 200 && res->status < 300;
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  AuthService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(AuthService& s) : service(s) {}

  template <typename F>
  void guarded(const httplib::Request& req, httplib::Response& res, bool auth, F&& f) {
    try {
      if (auth) service.check_token(bearer_token(req));
      f();
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(error_to_json(e), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_to_json(Error(ErrorCode::io, e.what())), "application/json");
    }
  }

  void routes() {
    server.Get("/v1/health", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, false, [&] {
        res.set_content(json{{"status", "ok"}, {"config_version", service.config()->version}}.dump(),
                        "application/json");
      });
    });
    server.Post("/v1/vectors", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, true, [&] {
        auto ack = service.ingest(envelope_from_json(req.body));
        res.status = 202;
        res.set_content(json{{"schema_id", "ack.v1"},
                             {"sequence", ack.sequence},
                             {"config_version", ack.config_version},
                             {"replaced", ack.replaced}}
                            .dump(),
                        "application/json");
      });
    });
    server.Get(R"(/v1/scores/([^/]+)/(-?\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, true, [&] {
        const auto minute = parse_integer(req.matches[2].str(), "minute");
        auto entry = service.decide(req.matches[1].str(), minute);
        res.set_content(decision_to_json(entry), "application/json");
      });
    });
    server.Post("/v1/config", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, true, [&] {
        auto version = service.configure(config_from_json(req.body));
        res.set_content(json{{"schema_id", "config.v1"}, {"config_version", version}}.dump(), "application/json");
      });
    });
    server.Post("/v1/devices", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, true, [&] {
        auto d = registration_from_json(req.body);
        service.register_device(d);
        res.status = 201;
        res.set_content(json{{"schema_id", "device.v1"},
                             {"device_id", d.device_id},
                             {"config_version", service.config()->version}}
                            .dump(),
                        "application/json");
      });
    });
  }
};

HttpServer::HttpServer(AuthService& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error(ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace authcode::service
