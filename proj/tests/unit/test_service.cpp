#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

#include "authcode/experiment.hpp"
#include "authcode/service.hpp"
#include "doctest.h"
#include "httplib.h"

using namespace authcode;
using namespace authcode::service;

namespace {

pipeline::LabeledDataset fused_rows() {
  pipeline::LabeledDataset ds;
  for (std::size_t j = 0; j < pipeline::kFusedWidth; ++j) ds.feature_names.push_back("x" + std::to_string(j));
  ds.rows = Matrix(0, pipeline::kFusedWidth);
  return ds;
}

// Naive Bayes over identical rows: the score is the class prior.
std::shared_ptr<const models::TrainedModel> prior_model(int alice, int bob) {
  auto ds = fused_rows();
  std::vector<double> zero(pipeline::kFusedWidth, 0.0);
  for (int i = 0; i < alice; ++i) ds.append(zero, "alice", i, "fused");
  for (int i = 0; i < bob; ++i) ds.append(zero, "bob", 100 + i, "fused");
  models::ModelSpec spec;
  spec.family = models::Family::naive_bayes;
  return std::make_shared<const models::TrainedModel>(models::train(spec, ds));
}

// 1-nn that gives alice probability 1 near `alice_at` and 0 near `bob_at`.
std::shared_ptr<const models::TrainedModel> nn_model(double alice_at, double bob_at) {
  auto ds = fused_rows();
  ds.append(std::vector<double>(pipeline::kFusedWidth, alice_at), "alice", 0, "fused");
  ds.append(std::vector<double>(pipeline::kFusedWidth, bob_at), "bob", 1, "fused");
  models::ModelSpec spec;
  spec.family = models::Family::knn;
  spec.hyper = {{"k", 1}};
  return std::make_shared<const models::TrainedModel>(models::train(spec, ds));
}

IngestEnvelope pc_envelope(const std::string& user, std::int64_t minute, double fill, const std::string& device = "pc1") {
  return {user, device, "pc", minute, std::string(kPcSchema), std::vector<double>(pipeline::kPcBlock, fill), std::nullopt};
}

struct FakeTransport : DeviceTransport {
  int failures_left = 0;
  int calls = 0;
  bool deliver(const DeviceRegistration&, const std::string&) override {
    ++calls;
    if (failures_left > 0) {
      --failures_left;
      throw std::runtime_error("connection refused");
    }
    return true;
  }
};

ServiceOptions options_with(std::shared_ptr<DeviceTransport> transport = nullptr) {
  ServiceOptions o;
  o.transport = transport ? transport : std::make_shared<FakeTransport>();
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

ServiceConfig config_of(std::vector<ScoringModel> models) {
  ServiceConfig c;
  c.models = std::move(models);
  return c;
}

}  // namespace

TEST_CASE("ingest validation and replacement") {
  AuthService svc(options_with());
  svc.register_device({"pc1", "alice", "standard", ""});
  auto ack = svc.ingest(pc_envelope("alice", 10, 0.25));
  CHECK(ack.sequence > 0);
  CHECK_FALSE(ack.replaced);

  auto short_env = pc_envelope("alice", 10, 0.25);
  short_env.schema_id = std::string(kFusedSchema);
  short_env.features.assign(239, 0.0);
  try {
    svc.ingest(short_env);
    FAIL("expected a validation error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("240") != std::string::npos);
  }
  auto bad_schema = pc_envelope("alice", 10, 0.25);
  bad_schema.schema_id = "pc.block.v0";
  try {
    svc.ingest(bad_schema);
    FAIL("expected a schema error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(std::string(kPcSchema)) != std::string::npos);
  }
  CHECK_THROWS_AS(svc.ingest(pc_envelope("alice", 10, 0.25, "unknown-device")), Error);

  auto second = svc.ingest(pc_envelope("alice", 10, 0.75));
  CHECK(second.replaced);
  CHECK(second.sequence > ack.sequence);
  auto fused = svc.fused_minute("alice", 10).values();
  CHECK(fused[0] == 0.75);
  CHECK(fused[pipeline::kPcBlock] == 0.0);
}

TEST_CASE("score aggregation") {
  AuthService svc(options_with());
  svc.register_device({"pc1", "alice", "standard", ""});
  svc.ingest(pc_envelope("alice", 1, 0.0));
  CHECK_THROWS_AS(svc.score_minute("alice", 1), Error);  // no models yet
  svc.configure(config_of({{"nb", prior_model(9, 1), 1.0}}));
  CHECK(svc.score_minute("alice", 1).aggregate == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(svc.score_minute("alice", 1).per_model.size() == 1);

  svc.configure(config_of({{"near", nn_model(0.0, 5.0), 0.5}, {"far", nn_model(5.0, 0.0), 0.5}}));
  auto s = svc.score_minute("alice", 1);
  CHECK(s.per_model.at(0).score == 1.0);
  CHECK(s.per_model.at(1).score == 0.0);
  CHECK(s.aggregate == 0.5);
  CHECK_THROWS_AS(svc.score_minute("alice", 2), Error);
}

TEST_CASE("policy") {
  auto rules = default_rules();
  CHECK(apply_policy(0.95, rules, "standard").action == Action::allow);
  CHECK(apply_policy(0.9, rules, "standard").action == Action::allow);
  CHECK(apply_policy(0.7, rules, "standard").action == Action::reauthenticate);
  CHECK(apply_policy(0.1, rules, "standard").action == Action::lock);
  CHECK(apply_policy(0.0, rules, "standard").action == Action::lock);
  CHECK(apply_policy(1.0, rules, "standard").action == Action::allow);

  auto overlapping = rules;
  overlapping.push_back({"strict", 0.0, 1.0, true, true, {"critical"}, Action::lock, 0});
  validate_rules(overlapping, {"standard", "critical"});
  auto d = apply_policy(0.95, overlapping, "critical");
  CHECK(d.action == Action::lock);
  CHECK(d.rule_id == "strict");
  CHECK(apply_policy(0.95, overlapping, "standard").rule_id == "allow");

  std::vector<PolicyRule> gapped{{"allow", 0.9, 1.0, true, true, {}, Action::allow, 1},
                                 {"reauthenticate", 0.5, 0.9, true, false, {}, Action::reauthenticate, 2},
                                 {"lock", 0.0, 0.4, true, true, {}, Action::lock, 3}};
  try {
    validate_rules(gapped, {"standard"});
    FAIL("expected a coverage error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("(0.4,0.5)") != std::string::npos);
  }
  auto dup = rules;
  dup[1].priority = 1;
  CHECK_THROWS_AS(validate_rules(dup, {"standard"}), Error);
}

TEST_CASE("configuration versions") {
  AuthService svc(options_with());
  const auto v1 = svc.configure(config_of({{"a", prior_model(9, 1), 0.6}, {"b", prior_model(1, 1), 0.4}}));
  const auto v2 = svc.configure(config_of({{"a", prior_model(9, 1), 0.6}, {"b", prior_model(1, 1), 0.4}}));
  CHECK(v2 == v1 + 1);
  CHECK_THROWS_AS(svc.configure(config_of({{"a", prior_model(9, 1), 0.6}, {"b", prior_model(1, 1), 0.6}})), Error);
  CHECK_THROWS_AS(svc.configure(config_of({{"a", prior_model(9, 1), -0.5}, {"b", prior_model(1, 1), 1.5}})), Error);
  auto gapped = config_of({{"a", prior_model(9, 1), 1.0}});
  gapped.rules.pop_back();
  CHECK_THROWS_AS(svc.configure(gapped), Error);
  CHECK(svc.config()->version == v2);
  auto equal = svc.configure(config_of({{"a", prior_model(9, 1), 0.0}, {"b", prior_model(1, 1), 0.0}}));
  CHECK(svc.config()->models.at(0).weight == 0.5);
  CHECK(equal == v2 + 1);
}

TEST_CASE("concurrent configure and score see one version") {
  AuthService svc(options_with());
  svc.register_device({"pc1", "alice", "standard", ""});
  svc.ingest(pc_envelope("alice", 3, 0.0));
  auto high = config_of({{"a", prior_model(9, 1), 0.5}, {"b", prior_model(9, 1), 0.5}});
  auto low = config_of({{"a", prior_model(1, 3), 0.5}, {"b", prior_model(1, 3), 0.5}});
  std::mutex m;
  std::map<std::uint64_t, double> expected;
  expected[svc.configure(high)] = 0.9;
  std::atomic<bool> done{false};
  std::thread writer([&] {
    for (int i = 0; i < 300; ++i) {
      const bool h = i % 2 == 1;
      auto v = svc.configure(h ? high : low);
      std::lock_guard lock(m);
      expected[v] = h ? 0.9 : 0.25;
    }
    done = true;
  });
  std::vector<AuthScore> seen;
  while (!done || seen.size() < 100) seen.push_back(svc.score_minute("alice", 3));
  writer.join();
  for (const auto& s : seen) {
    REQUIRE(expected.count(s.config_version) == 1);
    CHECK(s.aggregate == doctest::Approx(expected[s.config_version]).epsilon(1e-12));
    CHECK(s.per_model[0].score == s.per_model[1].score);
  }
}

TEST_CASE("device notification") {
  auto transport = std::make_shared<FakeTransport>();
  AuthService svc(options_with(transport));
  svc.register_device({"phone", "alice", "standard", "http://127.0.0.1:1/cb"});
  PolicyDecision d{Action::lock, "lock"};
  AuthScore score;
  score.user_id = "alice";

  auto ok = svc.notify_device("phone", d, score);
  CHECK(ok.status == DeliveryStatus::delivered);
  CHECK(ok.attempts == 1);

  try {
    svc.notify_device("ghost", d, score);
    FAIL("expected not_found");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("ghost") != std::string::npos);
    CHECK(e.detail() == "ghost");
  }

  transport->failures_left = 2;
  auto retried = svc.notify_device("phone", d, score);
  CHECK(retried.status == DeliveryStatus::delivered);
  CHECK(retried.attempts == 3);

  transport->failures_left = 5;
  auto dead = svc.notify_device("phone", d, score);
  CHECK(dead.status == DeliveryStatus::dead_letter);
  CHECK(dead.attempts == 3);
  CHECK(svc.dead_letters().size() == 1);
  CHECK(svc.deliveries().size() == 3);
}

TEST_CASE("http token and status codes") {
  auto opts = options_with();
  opts.api_token = "s3cret";
  AuthService svc(opts);
  svc.configure(config_of({{"nb", prior_model(9, 1), 1.0}}));
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client client("127.0.0.1", port);
  const auto body = envelope_to_json(pc_envelope("alice", 7, 0.0));
  CHECK(client.Get("/v1/health")->status == 200);
  CHECK(client.Post("/v1/vectors", body, "application/json")->status == 401);
  client.set_bearer_token_auth("s3cret");
  CHECK(client.Post("/v1/vectors", body, "application/json")->status == 404);  // device not registered
  CHECK(client.Post("/v1/devices", R"({"device_id":"pc1","user_id":"alice"})", "application/json")->status == 201);
  CHECK(client.Post("/v1/vectors", body, "application/json")->status == 202);
  CHECK(client.Post("/v1/vectors", "{not json", "application/json")->status == 400);
  auto res = client.Get("/v1/scores/alice/7");
  REQUIRE(res->status == 200);
  auto entry = decision_from_json(res->body);
  CHECK(entry.score.aggregate == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(entry.actions.at(0).decision.action == Action::allow);
  CHECK(client.Get("/v1/scores/alice/8")->status == 404);
  server.stop();
}

TEST_CASE("claimed identity scores higher for the true user") {
  experiment::CorpusOptions co{3, 3, 11, experiment::kDefaultStartDay};
  auto corpus = experiment::synthetic_corpus(co);
  const std::int64_t cutoff = (experiment::kDefaultStartDay + 2) * 1440;
  experiment::Corpus train_part;
  std::vector<features::MinuteFeatureVector> held;
  for (auto* part : {&corpus.pc, &corpus.mobile}) {
    for (const auto& v : *part) {
      if (v.minute_index < cutoff) {
        (part == &corpus.pc ? train_part.pc : train_part.mobile).push_back(v);
      } else {
        held.push_back(v);
      }
    }
  }
  auto reduced = experiment::reduce_corpus(train_part, experiment::PreprocessOptions{});
  auto spec = models::default_spec(models::Family::gbt, 3);
  spec.hyper["rounds"] = 30;
  auto model = std::make_shared<const models::TrainedModel>(models::train(spec, reduced.fused));
  experiment::Bundle bundle;
  bundle.pc = reduced.pc.projection;
  bundle.app = reduced.app.projection;
  bundle.sensor = reduced.sensor.projection;
  auto users = reduced.fused.classes();
  REQUIRE(users.size() == 3);
  const std::string a = users[0], b = users[1];

  std::vector<features::MinuteFeatureVector> of_a;
  std::copy_if(held.begin(), held.end(), std::back_inserter(of_a), [&](const auto& v) { return v.user_id == a; });
  auto envelopes = experiment::envelopes_from_vectors(of_a, bundle);
  REQUIRE(!envelopes.empty());

  auto mean_score = [&](const std::string& claim) {
    AuthService svc(options_with());
    svc.configure(config_of({{"gbt", model, 1.0}}));
    std::set<std::string> devices;
    std::set<std::int64_t> minutes;
    for (auto e : envelopes) {
      if (devices.insert(e.device_id).second) svc.register_device({e.device_id, claim, "standard", ""});
      e.user_id = claim;
      svc.ingest(e);
      minutes.insert(e.minute_index);
    }
    double sum = 0.0;
    for (auto m : minutes) sum += svc.score_minute(claim, m).aggregate;
    return sum / static_cast<double>(minutes.size());
  };
  const double own = mean_score(a), other = mean_score(b);
  MESSAGE("claim " << a << ": " << own << ", claim " << b << ": " << other);
  CHECK(own > other);
}
