#include "authcode/service.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

#include "json.hpp"

namespace authcode::service {

namespace {

bool is_block_active(const std::optional<std::vector<std::string>>& blocks, const char* name) {
  if (!blocks) return true;
  return std::find(blocks->begin(), blocks->end(), name) != blocks->end();
}

std::string bracket_interval(double lo, bool lo_closed, double hi, bool hi_closed) {
  return std::string(lo_closed ? "[" : "(") + format_double(lo) + "," + format_double(hi) + (hi_closed ? "]" : ")");
}

}  // namespace

std::vector<std::string> known_schemas() {
  return {std::string(kPcSchema), std::string(kMobileSchema), std::string(kFusedSchema)};
}

std::size_t schema_width(std::string_view schema_id) {
  if (schema_id == kPcSchema) return pipeline::kPcBlock;
  if (schema_id == kMobileSchema) return pipeline::kMobileAppBlock + pipeline::kSensorBlock;
  if (schema_id == kFusedSchema) return pipeline::kFusedWidth;
  std::string list;
  for (const auto& s : known_schemas()) list += (list.empty() ? "" : ", ") + s;
  throw Error(ErrorCode::schema_mismatch, "unknown schema '" + std::string(schema_id) + "'; known schemas: " + list,
              list);
}

void IngestEnvelope::validate() const {
  if (user_id.empty()) throw Error(ErrorCode::validation, "envelope has no user_id");
  if (device_id.empty()) throw Error(ErrorCode::validation, "envelope has no device_id");
  const std::size_t width = schema_width(schema_id);
  if (features.size() != width) {
    throw Error(ErrorCode::validation, "schema " + schema_id + " expects " + std::to_string(width) + " values, got " +
                                           std::to_string(features.size()),
                std::to_string(width));
  }
  if (schema_id == kPcSchema && device_kind != "pc") {
    throw Error(ErrorCode::validation, "schema " + schema_id + " requires device_kind pc, got '" + device_kind + "'");
  }
  if (schema_id == kMobileSchema && device_kind != "mobile") {
    throw Error(ErrorCode::validation, "schema " + schema_id + " requires device_kind mobile, got '" + device_kind + "'");
  }
  if (device_kind != "pc" && device_kind != "mobile") {
    throw Error(ErrorCode::validation, "device_kind must be pc or mobile, got '" + device_kind + "'");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) {
      throw Error(ErrorCode::validation, "feature " + std::to_string(i) + " is not finite");
    }
  }
  if (active_blocks) {
    for (const auto& b : *active_blocks) {
      if (b != "app" && b != "sensor" && b != "pc") {
        throw Error(ErrorCode::validation, "unknown block '" + b + "' (expected pc, app or sensor)");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Policy

std::string_view to_string(Action action) {
  switch (action) {
    case Action::allow: return "allow";
    case Action::reauthenticate: return "reauthenticate";
    case Action::lock: return "lock";
  }
  return "unknown";
}

Action parse_action(std::string_view text) {
  if (text == "allow") return Action::allow;
  if (text == "reauthenticate") return Action::reauthenticate;
  if (text == "lock") return Action::lock;
  throw Error(ErrorCode::validation, "unknown action '" + std::string(text) + "' (expected allow, reauthenticate or lock)");
}

bool PolicyRule::applies_to(const std::string& tier) const {
  return tiers.empty() || std::find(tiers.begin(), tiers.end(), tier) != tiers.end();
}

bool PolicyRule::contains(double score) const {
  const bool above = lo_closed ? score >= lo : score > lo;
  const bool below = hi_closed ? score <= hi : score < hi;
  return above && below;
}

void validate_rules(const std::vector<PolicyRule>& rules, const std::vector<std::string>& tiers) {
  if (tiers.empty()) throw Error(ErrorCode::config, "no device tiers configured");
  std::set<std::string> ids;
  std::set<int> priorities;
  for (const auto& r : rules) {
    if (r.id.empty()) throw Error(ErrorCode::config, "policy rule without id");
    if (!ids.insert(r.id).second) throw Error(ErrorCode::config, "duplicate rule id '" + r.id + "'", r.id);
    if (!priorities.insert(r.priority).second) {
      throw Error(ErrorCode::config, "duplicate rule priority " + std::to_string(r.priority), r.id);
    }
    if (!(r.lo <= r.hi) || r.lo < 0.0 || r.hi > 1.0 || (r.lo == r.hi && !(r.lo_closed && r.hi_closed))) {
      throw Error(ErrorCode::config, "rule '" + r.id + "' has an empty or out-of-range interval " +
                                         bracket_interval(r.lo, r.lo_closed, r.hi, r.hi_closed),
                  r.id);
    }
    for (const auto& t : r.tiers) {
      if (std::find(tiers.begin(), tiers.end(), t) == tiers.end()) {
        throw Error(ErrorCode::config, "rule '" + r.id + "' names unknown tier '" + t + "'", r.id);
      }
    }
  }
  for (const auto& tier : tiers) {
    std::vector<const PolicyRule*> applicable;
    for (const auto& r : rules) {
      if (r.applies_to(tier)) applicable.push_back(&r);
    }
    std::sort(applicable.begin(), applicable.end(), [](const PolicyRule* a, const PolicyRule* b) {
      if (a->lo != b->lo) return a->lo < b->lo;
      return a->lo_closed && !b->lo_closed;
    });
    // Covered prefix is [0, reach) or [0, reach].
    double reach = 0.0;
    bool reach_closed = false;
    auto gap = [&](double lo, bool lo_closed, double hi, bool hi_closed) {
      const std::string interval = bracket_interval(lo, lo_closed, hi, hi_closed);
      throw Error(ErrorCode::config, "policy rules leave " + interval + " uncovered for tier '" + tier + "'", interval);
    };
    for (const auto* r : applicable) {
      if (r->lo > reach || (r->lo == reach && !reach_closed && !r->lo_closed)) {
        gap(reach, !reach_closed, r->lo, !r->lo_closed);
      }
      if (r->hi > reach) {
        reach = r->hi;
        reach_closed = r->hi_closed;
      } else if (r->hi == reach) {
        reach_closed = reach_closed || r->hi_closed;
      }
    }
    if (reach < 1.0 || !reach_closed) gap(reach, !reach_closed, 1.0, true);
  }
}

PolicyDecision apply_policy(double aggregate, const std::vector<PolicyRule>& rules, const std::string& tier) {
  const PolicyRule* best = nullptr;
  for (const auto& r : rules) {
    if (r.applies_to(tier) && r.contains(aggregate) && (best == nullptr || r.priority < best->priority)) best = &r;
  }
  if (best == nullptr) {
    throw Error(ErrorCode::config, "no policy rule matches score " + format_double(aggregate) + " for tier '" + tier + "'");
  }
  return {best->action, best->id};
}

std::vector<PolicyRule> default_rules() {
  return {
      {"allow", 0.9, 1.0, true, true, {}, Action::allow, 1},
      {"reauthenticate", 0.5, 0.9, true, false, {}, Action::reauthenticate, 2},
      {"lock", 0.0, 0.5, true, false, {}, Action::lock, 3},
  };
}

std::string_view to_string(DeliveryStatus status) {
  switch (status) {
    case DeliveryStatus::delivered: return "delivered";
    case DeliveryStatus::dead_letter: return "dead_letter";
    case DeliveryStatus::no_endpoint: return "no_endpoint";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Service

struct AuthService::UserState {
  mutable std::mutex mutex;
  std::int64_t first_minute = std::numeric_limits<std::int64_t>::max();
  std::int64_t last_minute = std::numeric_limits<std::int64_t>::min();
  // minute -> device_id -> latest envelope
  std::map<std::int64_t, std::map<std::string, IngestEnvelope>> minutes;
};

AuthService::AuthService(ServiceOptions options) : options_(std::move(options)) {
  if (!options_.transport) options_.transport = std::make_shared<HttpTransport>();
  if (!options_.sleep) options_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  if (options_.retry.attempts < 1) throw Error(ErrorCode::config, "retry attempts must be >= 1");
  if (options_.retention_minutes < 1) throw Error(ErrorCode::config, "retention must be at least one minute");
  ServiceConfig initial;
  validate_rules(initial.rules, initial.tiers);
  configure(std::move(initial));
}

AuthService::~AuthService() = default;

void AuthService::check_token(const std::string& token) const {
  if (options_.api_token.empty()) return;
  if (token != options_.api_token) {
    throw Error(ErrorCode::unauthorized, token.empty() ? "missing API token" : "invalid API token");
  }
}

std::uint64_t AuthService::configure(ServiceConfig config) {
  if (!(config.window_s > 0.0) || !std::isfinite(config.window_s)) {
    throw Error(ErrorCode::config, "window_s must be positive");
  }
  if (std::find(config.tiers.begin(), config.tiers.end(), config.default_tier) == config.tiers.end()) {
    throw Error(ErrorCode::config, "default tier '" + config.default_tier + "' is not a configured tier");
  }
  validate_rules(config.rules, config.tiers);
  std::set<std::string> names;
  bool any_weight = false;
  for (const auto& m : config.models) {
    if (!m.model) throw Error(ErrorCode::config, "model '" + m.name + "' is not loaded");
    if (!names.insert(m.name).second) throw Error(ErrorCode::config, "duplicate model name '" + m.name + "'");
    if (m.model->feature_names.size() != pipeline::kFusedWidth) {
      throw Error(ErrorCode::config, "model '" + m.name + "' takes " + std::to_string(m.model->feature_names.size()) +
                                         " features; the service scores " + std::to_string(pipeline::kFusedWidth) +
                                         "-value fused vectors");
    }
    if (m.weight != 0.0) any_weight = true;
  }
  if (!config.models.empty()) {
    if (!any_weight) {
      for (auto& m : config.models) m.weight = 1.0 / static_cast<double>(config.models.size());
    }
    double sum = 0.0;
    for (const auto& m : config.models) {
      if (!(m.weight >= 0.0) || !std::isfinite(m.weight)) {
        throw Error(ErrorCode::config, "weight of model '" + m.name + "' must be >= 0");
      }
      sum += m.weight;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
      throw Error(ErrorCode::config, "model weights sum to " + format_double(sum) + ", expected 1");
    }
  }
  std::lock_guard lock(config_mutex_);
  config.version = next_version_++;
  config_ = std::make_shared<const ServiceConfig>(std::move(config));
  return config_->version;
}

std::shared_ptr<const ServiceConfig> AuthService::config() const {
  std::lock_guard lock(config_mutex_);
  return config_;
}

void AuthService::register_device(DeviceRegistration device) {
  if (device.device_id.empty() || device.user_id.empty()) {
    throw Error(ErrorCode::validation, "device registration needs device_id and user_id");
  }
  auto cfg = config();
  if (std::find(cfg->tiers.begin(), cfg->tiers.end(), device.tier) == cfg->tiers.end()) {
    throw Error(ErrorCode::validation, "unknown tier '" + device.tier + "'", device.tier);
  }
  std::lock_guard lock(devices_mutex_);
  devices_[device.device_id] = std::move(device);
}

std::optional<DeviceRegistration> AuthService::device(const std::string& device_id) const {
  std::lock_guard lock(devices_mutex_);
  auto it = devices_.find(device_id);
  if (it == devices_.end()) return std::nullopt;
  return it->second;
}

AuthService::UserState& AuthService::user_state(const std::string& user_id) {
  std::lock_guard lock(users_mutex_);
  auto& slot = users_[user_id];
  if (!slot) slot = std::make_unique<UserState>();
  return *slot;
}

const AuthService::UserState* AuthService::find_user(const std::string& user_id) const {
  std::lock_guard lock(users_mutex_);
  auto it = users_.find(user_id);
  return it == users_.end() ? nullptr : it->second.get();
}

IngestAck AuthService::ingest(const IngestEnvelope& envelope) {
  envelope.validate();
  if (options_.require_registration) {
    auto reg = device(envelope.device_id);
    if (!reg) throw Error(ErrorCode::not_found, "device '" + envelope.device_id + "' is not registered", envelope.device_id);
    if (reg->user_id != envelope.user_id) {
      throw Error(ErrorCode::unauthorized, "device '" + envelope.device_id + "' is registered to another user",
                  envelope.device_id);
    }
  }
  IngestAck ack;
  auto& state = user_state(envelope.user_id);
  {
    std::lock_guard lock(state.mutex);
    const std::int64_t horizon = std::max(state.last_minute, envelope.minute_index) - options_.retention_minutes;
    if (envelope.minute_index < horizon) {
      throw Error(ErrorCode::validation, "minute " + std::to_string(envelope.minute_index) +
                                             " is older than the retention window");
    }
    auto& slot = state.minutes[envelope.minute_index];
    ack.replaced = slot.count(envelope.device_id) > 0;
    slot[envelope.device_id] = envelope;
    state.first_minute = std::min(state.first_minute, envelope.minute_index);
    state.last_minute = std::max(state.last_minute, envelope.minute_index);
    state.minutes.erase(state.minutes.begin(), state.minutes.lower_bound(horizon));
    ack.sequence = next_sequence_++;
  }
  ack.config_version = config()->version;
  return ack;
}

namespace {

// Per block, the envelope of the smallest device id supplying it wins; this
// keeps the result independent of ingest order.
std::optional<pipeline::FusedVector> merge_minute(const std::string& user_id, std::int64_t minute,
                                                  const std::map<std::string, IngestEnvelope>& devices) {
  const std::vector<double>* pc = nullptr;
  const std::vector<double>* app = nullptr;
  const std::vector<double>* sensor = nullptr;
  std::size_t app_off = 0, sensor_off = 0;
  for (const auto& [id, e] : devices) {
    if (e.schema_id == kPcSchema && pc == nullptr) pc = &e.features;
    if (e.schema_id == kMobileSchema) {
      if (app == nullptr && is_block_active(e.active_blocks, "app")) {
        app = &e.features;
        app_off = 0;
      }
      if (sensor == nullptr && is_block_active(e.active_blocks, "sensor")) {
        sensor = &e.features;
        sensor_off = pipeline::kMobileAppBlock;
      }
    }
    if (e.schema_id == kFusedSchema) {
      if (pc == nullptr && is_block_active(e.active_blocks, "pc")) pc = &e.features;
      if (app == nullptr && is_block_active(e.active_blocks, "app")) {
        app = &e.features;
        app_off = pipeline::kPcBlock;
      }
      if (sensor == nullptr && is_block_active(e.active_blocks, "sensor")) {
        sensor = &e.features;
        sensor_off = pipeline::kPcBlock + pipeline::kMobileAppBlock;
      }
    }
  }
  auto block = [&](const std::vector<double>* src, std::size_t off, std::size_t width) {
    std::optional<pipeline::BlockInput> b;
    if (src == nullptr) return b;
    b.emplace();
    b->user_id = user_id;
    b->minute_index = minute;
    b->values.assign(src->begin() + static_cast<std::ptrdiff_t>(off),
                     src->begin() + static_cast<std::ptrdiff_t>(off + width));
    return b;
  };
  auto bpc = block(pc, 0, pipeline::kPcBlock);
  auto bapp = block(app, app_off, pipeline::kMobileAppBlock);
  auto bsen = block(sensor, sensor_off, pipeline::kSensorBlock);
  return pipeline::fuse_minute_vectors(bpc ? &*bpc : nullptr, bapp ? &*bapp : nullptr, bsen ? &*bsen : nullptr);
}

}  // namespace

pipeline::FusedVector AuthService::fused_minute(const std::string& user_id, std::int64_t minute_index) const {
  const auto* state = find_user(user_id);
  std::optional<pipeline::FusedVector> fused;
  if (state != nullptr) {
    std::lock_guard lock(state->mutex);
    auto it = state->minutes.find(minute_index);
    if (it != state->minutes.end()) fused = merge_minute(user_id, minute_index, it->second);
  }
  if (!fused) {
    throw Error(ErrorCode::not_found, "no data for user '" + user_id + "' at minute " + std::to_string(minute_index),
                user_id);
  }
  return *fused;
}

AuthScore AuthService::score_minute(const std::string& user_id, std::int64_t minute_index) const {
  auto cfg = config();
  return score_with(*cfg, user_id, minute_index);
}

AuthScore AuthService::score_with(const ServiceConfig& cfg, const std::string& user_id,
                                  std::int64_t minute_index) const {
  const auto* state = find_user(user_id);
  std::optional<pipeline::FusedVector> current;
  std::vector<pipeline::FusedVector> history;
  std::int64_t first_minute = 0;
  std::size_t longest = 0;
  for (const auto& m : cfg.models) longest = std::max(longest, m.model->window_length);
  if (state != nullptr) {
    std::lock_guard lock(state->mutex);
    auto it = state->minutes.find(minute_index);
    if (it != state->minutes.end()) {
      current = merge_minute(user_id, minute_index, it->second);
      first_minute = state->first_minute;
      if (longest > 0) {
        auto from = state->minutes.lower_bound(minute_index - static_cast<std::int64_t>(longest) + 1);
        for (auto h = from; h != std::next(it); ++h) {
          if (auto v = merge_minute(user_id, h->first, h->second)) history.push_back(std::move(*v));
        }
      }
    }
  }
  if (!current) {
    throw Error(ErrorCode::not_found, "no data for user '" + user_id + "' at minute " + std::to_string(minute_index),
                user_id);
  }
  if (cfg.models.empty()) throw Error(ErrorCode::unavailable, "no models are configured");

  AuthScore score;
  score.user_id = user_id;
  score.minute_index = minute_index;
  score.config_version = cfg.version;
  const auto values = current->values();
  double weight_sum = 0.0, weighted = 0.0;
  for (const auto& m : cfg.models) {
    const auto& model = *m.model;
    models::Prediction p;
    if (model.is_sequence()) {
      const auto T = static_cast<std::int64_t>(model.window_length);
      if (minute_index - first_minute + 1 < T) continue;
      auto timeline = std::make_shared<pipeline::FusedTimeline>(
          pipeline::make_timeline(user_id, minute_index - T + 1, minute_index + 1, history));
      p = model.predict(pipeline::SequenceWindow{timeline, 0, model.window_length});
    } else {
      p = model.predict(values);
    }
    auto cls = std::lower_bound(model.classes.begin(), model.classes.end(), user_id);
    const double s = (cls != model.classes.end() && *cls == user_id)
                         ? p.scores[static_cast<std::size_t>(cls - model.classes.begin())]
                         : 0.0;
    score.per_model.push_back({m.name, s, m.weight});
    weighted += m.weight * s;
    weight_sum += m.weight;
  }
  if (score.per_model.empty()) {
    throw Error(ErrorCode::unavailable, "no configured model can score minute " + std::to_string(minute_index) +
                                            " yet (sequence models need more history)");
  }
  if (weight_sum > 0.0) {
    score.aggregate = weighted / weight_sum;
  } else {
    double sum = 0.0;
    for (const auto& s : score.per_model) sum += s.score;
    score.aggregate = sum / static_cast<double>(score.per_model.size());
  }
  score.aggregate = std::clamp(score.aggregate, 0.0, 1.0);
  return score;
}

DecisionEntry AuthService::decide(const std::string& user_id, std::int64_t minute_index) {
  auto cfg = config();
  DecisionEntry entry;
  entry.score = score_with(*cfg, user_id, minute_index);
  std::vector<DeviceRegistration> targets;
  {
    std::lock_guard lock(devices_mutex_);
    for (const auto& [id, d] : devices_) {
      if (d.user_id == user_id) targets.push_back(d);
    }
  }
  for (const auto& d : targets) {
    const std::string tier =
        std::find(cfg->tiers.begin(), cfg->tiers.end(), d.tier) != cfg->tiers.end() ? d.tier : cfg->default_tier;
    entry.actions.push_back({d.device_id, tier, apply_policy(entry.score.aggregate, cfg->rules, tier)});
  }
  if (targets.empty()) {
    entry.actions.push_back({"", cfg->default_tier, apply_policy(entry.score.aggregate, cfg->rules, cfg->default_tier)});
  }
  {
    std::lock_guard lock(log_mutex_);
    auto key = std::make_pair(user_id, minute_index);
    auto it = decisions_.find(key);
    if (it != decisions_.end()) entry.revision = it->second.revision + 1;
    decisions_[key] = entry;
  }
  for (const auto& a : entry.actions) {
    if (!a.device_id.empty()) notify_device(a.device_id, a.decision, entry.score);
  }
  return entry;
}

DeliveryRecord AuthService::notify_device(const std::string& device_id, const PolicyDecision& decision,
                                          const AuthScore& score) {
  auto reg = device(device_id);
  if (!reg) throw Error(ErrorCode::not_found, "device '" + device_id + "' is not registered", device_id);
  DeliveryRecord rec;
  rec.device_id = device_id;
  rec.action = decision.action;
  rec.rule_id = decision.rule_id;
  if (reg->callback_url.empty()) {
    rec.status = DeliveryStatus::no_endpoint;
  } else {
    nlohmann::json body{{"schema_id", "action.v1"},
                        {"config_version", score.config_version},
                        {"device_id", device_id},
                        {"user_id", score.user_id},
                        {"minute_index", score.minute_index},
                        {"action", std::string(to_string(decision.action))},
                        {"score", score.aggregate},
                        {"rule_id", decision.rule_id}};
    const std::string text = body.dump();
    rec.status = DeliveryStatus::dead_letter;
    auto delay = options_.retry.base_delay;
    for (int attempt = 1; attempt <= options_.retry.attempts; ++attempt) {
      rec.attempts = attempt;
      try {
        if (options_.transport->deliver(*reg, text)) {
          rec.status = DeliveryStatus::delivered;
          rec.last_error.clear();
          break;
        }
        rec.last_error = "endpoint rejected the delivery";
      } catch (const std::exception& e) {
        rec.last_error = e.what();
      }
      if (attempt < options_.retry.attempts) {
        options_.sleep(delay);
        delay *= 2;
      }
    }
  }
  std::lock_guard lock(log_mutex_);
  deliveries_.push_back(rec);
  return rec;
}

std::vector<DecisionEntry> AuthService::decisions() const {
  std::lock_guard lock(log_mutex_);
  std::vector<DecisionEntry> out;
  for (const auto& [k, v] : decisions_) out.push_back(v);
  return out;
}

std::optional<DecisionEntry> AuthService::decision(const std::string& user_id, std::int64_t minute_index) const {
  std::lock_guard lock(log_mutex_);
  auto it = decisions_.find({user_id, minute_index});
  if (it == decisions_.end()) return std::nullopt;
  return it->second;
}

std::vector<DeliveryRecord> AuthService::deliveries() const {
  std::lock_guard lock(log_mutex_);
  return deliveries_;
}

std::vector<DeliveryRecord> AuthService::dead_letters() const {
  std::lock_guard lock(log_mutex_);
  std::vector<DeliveryRecord> out;
  for (const auto& d : deliveries_) {
    if (d.status == DeliveryStatus::dead_letter) out.push_back(d);
  }
  return out;
}

}  // namespace authcode::service
