#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "authcode/common.hpp"
#include "authcode/models.hpp"
#include "authcode/pipeline.hpp"

namespace authcode::service {

// Wire schemas accepted by ingest.
inline constexpr std::string_view kPcSchema = "pc.block.v1";          // 150 values
inline constexpr std::string_view kMobileSchema = "mobile.block.v1";  // 50 app + 40 sensor values
inline constexpr std::string_view kFusedSchema = "fused.v1";          // 240 values

std::size_t schema_width(std::string_view schema_id);  // throws with the schema list
std::vector<std::string> known_schemas();

struct IngestEnvelope {
  std::string user_id;
  std::string device_id;
  std::string device_kind;  // "pc" or "mobile"
  std::int64_t minute_index = 0;
  std::string schema_id;
  std::vector<double> features;
  // Mobile envelopes may mark a block as absent ("app", "sensor").
  std::optional<std::vector<std::string>> active_blocks;

  void validate() const;
};

struct IngestAck {
  std::uint64_t sequence = 0;
  std::uint64_t config_version = 0;
  bool replaced = false;
};

struct ModelScore {
  std::string name;
  double score = 0.0;
  double weight = 0.0;
};

struct AuthScore {
  std::string user_id;
  std::int64_t minute_index = 0;
  std::vector<ModelScore> per_model;  // contributing models only
  double aggregate = 0.0;
  std::uint64_t config_version = 0;
};

// ---------------------------------------------------------------------------
// Policy

enum class Action { allow, reauthenticate, lock };
std::string_view to_string(Action action);
Action parse_action(std::string_view text);

struct PolicyRule {
  std::string id;
  double lo = 0.0, hi = 1.0;
  bool lo_closed = true, hi_closed = true;
  std::vector<std::string> tiers;  // empty: every tier
  Action action = Action::allow;
  int priority = 0;  // lower wins

  bool applies_to(const std::string& tier) const;
  bool contains(double score) const;
};

struct PolicyDecision {
  Action action = Action::allow;
  std::string rule_id;
};

// Checks unique ids and priorities and that every tier is covered on [0,1].
// Errors name the first uncovered interval, e.g. "(0.4,0.5)".
void validate_rules(const std::vector<PolicyRule>& rules, const std::vector<std::string>& tiers);
PolicyDecision apply_policy(double aggregate, const std::vector<PolicyRule>& rules, const std::string& tier);
std::vector<PolicyRule> default_rules();

// ---------------------------------------------------------------------------
// Configuration

struct ScoringModel {
  std::string name;
  std::shared_ptr<const models::TrainedModel> model;
  double weight = 0.0;
};

struct ServiceConfig {
  double window_s = 60.0;
  std::vector<ScoringModel> models;  // empty weights are filled equally by configure
  std::vector<PolicyRule> rules = default_rules();
  std::vector<std::string> tiers = {"standard"};
  std::string default_tier = "standard";
  std::uint64_t version = 0;  // assigned by configure
};

// ---------------------------------------------------------------------------
// Device notification

struct DeviceRegistration {
  std::string device_id;
  std::string user_id;
  std::string tier = "standard";
  std::string callback_url;  // empty: decisions are logged, not pushed
};

class DeviceTransport {
 public:
  virtual ~DeviceTransport() = default;
  // Returns false or throws on a failed attempt.
  virtual bool deliver(const DeviceRegistration& device, const std::string& body) = 0;
};

// POSTs to the callback URL.
class HttpTransport : public DeviceTransport {
 public:
  explicit HttpTransport(double timeout_s = 2.0) : timeout_s_(timeout_s) {}
  bool deliver(const DeviceRegistration& device, const std::string& body) override;

 private:
  double timeout_s_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{100};  // doubled after every failure
};

enum class DeliveryStatus { delivered, dead_letter, no_endpoint };
std::string_view to_string(DeliveryStatus status);

struct DeliveryRecord {
  std::string device_id;
  Action action = Action::allow;
  std::string rule_id;
  DeliveryStatus status = DeliveryStatus::delivered;
  int attempts = 0;
  std::string last_error;
};

// ---------------------------------------------------------------------------
// Decisions

struct DeviceAction {
  std::string device_id;  // empty for the default-tier decision
  std::string tier;
  PolicyDecision decision;
};

struct DecisionEntry {
  AuthScore score;
  std::vector<DeviceAction> actions;
  std::uint64_t revision = 1;  // bumped when a minute is rescored
};

struct ServiceOptions {
  std::string api_token;
  bool require_registration = true;
  std::int64_t retention_minutes = 2880;
  RetryPolicy retry;
  std::shared_ptr<DeviceTransport> transport;  // defaults to HttpTransport
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to sleep_for
};

class AuthService {
 public:
  explicit AuthService(ServiceOptions options);
  ~AuthService();
  AuthService(const AuthService&) = delete;
  AuthService& operator=(const AuthService&) = delete;

  void check_token(const std::string& token) const;

  std::uint64_t configure(ServiceConfig config);
  std::shared_ptr<const ServiceConfig> config() const;

  void register_device(DeviceRegistration device);
  std::optional<DeviceRegistration> device(const std::string& device_id) const;

  IngestAck ingest(const IngestEnvelope& envelope);

  // Fused view of everything buffered for the minute.
  pipeline::FusedVector fused_minute(const std::string& user_id, std::int64_t minute_index) const;
  AuthScore score_minute(const std::string& user_id, std::int64_t minute_index) const;
  // Scores, applies the policy for every registered device of the user (or
  // the default tier), logs the decision and notifies devices.
  DecisionEntry decide(const std::string& user_id, std::int64_t minute_index);

  DeliveryRecord notify_device(const std::string& device_id, const PolicyDecision& decision, const AuthScore& score);

  std::vector<DecisionEntry> decisions() const;
  std::optional<DecisionEntry> decision(const std::string& user_id, std::int64_t minute_index) const;
  std::vector<DeliveryRecord> deliveries() const;
  std::vector<DeliveryRecord> dead_letters() const;

 private:
  struct UserState;
  UserState& user_state(const std::string& user_id);
  const UserState* find_user(const std::string& user_id) const;
  AuthScore score_with(const ServiceConfig& config, const std::string& user_id, std::int64_t minute_index) const;

  ServiceOptions options_;
  mutable std::mutex config_mutex_;
  std::shared_ptr<const ServiceConfig> config_;
  std::uint64_t next_version_ = 1;
  std::atomic<std::uint64_t> next_sequence_{1};

  mutable std::mutex devices_mutex_;
  std::map<std::string, DeviceRegistration> devices_;

  mutable std::mutex users_mutex_;
  std::map<std::string, std::unique_ptr<UserState>> users_;

  mutable std::mutex log_mutex_;
  std::map<std::pair<std::string, std::int64_t>, DecisionEntry> decisions_;
  std::vector<DeliveryRecord> deliveries_;
};

// ---------------------------------------------------------------------------
// JSON mapping shared by the server and its clients.

std::string envelope_to_json(const IngestEnvelope& envelope);
IngestEnvelope envelope_from_json(const std::string& body);
std::string score_to_json(const AuthScore& score);
std::string decision_to_json(const DecisionEntry& entry);
DecisionEntry decision_from_json(const std::string& body);
std::vector<PolicyRule> rules_from_json(const std::string& body);
std::string rules_to_json(const std::vector<PolicyRule>& rules);
// {"window_s", "models": [{"name", "path", "weight"}], "rules", "tiers",
//  "default_tier"}; model paths are loaded from disk.
ServiceConfig config_from_json(const std::string& body);
DeviceRegistration registration_from_json(const std::string& body);
std::string error_to_json(const Error& error);
int http_status(ErrorCode code);

// ---------------------------------------------------------------------------
// HTTP server

class HttpServer {
 public:
  explicit HttpServer(AuthService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host, int port);
  // Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace authcode::service
