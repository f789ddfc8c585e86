#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "authcode/experiment.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace authcode;

namespace {

struct Run {
  int status = -1;
  std::string output;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(AUTHCODE_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) r.output += buf.data();
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// One small experiment shared by the cases below.
struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / "authcode_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    for (const char* name : {"a", "b"}) {
      write(root / (std::string(name) + ".json"),
            R"({"corpus":{"users":3,"days":2,"seed":5},"datasets":["fused","pc"],)"
            R"("model":{"family":"gbt","hyper":{"rounds":8}},"seed":3,"output_dir":")" +
                (root / name).string() + "\"}");
      auto r = cli("experiment --config " + (root / (std::string(name) + ".json")).string());
      REQUIRE_MESSAGE(r.status == 0, r.output);
    }
  }
  ~Workspace() { fs::remove_all(root); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("experiment output is byte-identical for a seed") {
  auto& w = workspace();
  for (const char* f : {"summary.csv", "metrics_fused_gbt.csv", "metrics_pc_gbt.csv", "split_fused.json"}) {
    INFO(f);
    const auto a = slurp(w.root / "a" / f);
    CHECK(!a.empty());
    CHECK(a == slurp(w.root / "b" / f));
  }
}

TEST_CASE("evaluate reproduces the report from saved artifacts") {
  auto& w = workspace();
  const auto out = w.root / "a";
  auto r = cli("evaluate --model " + (out / "model_fused_gbt.json").string() + " --dataset " +
               (out / "dataset_fused.csv").string() + " --manifest " + (out / "split_fused.json").string() + " --out " +
               (w.root / "eval.csv").string());
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK(slurp(w.root / "eval.csv") == slurp(out / "metrics_fused_gbt.csv"));
}

TEST_CASE("failures exit nonzero and name the cause") {
  auto& w = workspace();
  auto missing = cli("experiment --config " + (w.root / "nope.json").string());
  CHECK(missing.status != 0);
  CHECK(missing.output.find("nope.json") != std::string::npos);

  write(w.root / "bad_window.json", R"({"datasets":["derived"],"derived_windows":[45],"model":{"family":"knn"},"output_dir":")" +
                                        (w.root / "c").string() + "\"}");
  auto bad = cli("experiment --config " + (w.root / "bad_window.json").string());
  CHECK(bad.status != 0);
  CHECK(bad.output.find("45") != std::string::npos);
  CHECK(!fs::exists(w.root / "c" / "summary.csv"));

  write(w.root / "broken.log", "timestamp,user_id,device_id,payload_kind,f1,f2,f3,f4,f5\n1,u,d,key,10,press\nzzz\n");
  auto parse = cli("replay --events " + (w.root / "broken.log").string() + " --bundle " + (w.root / "a" / "bundle.json").string());
  CHECK(parse.status != 0);
  CHECK(parse.output.find("line 3") != std::string::npos);
}

TEST_CASE("replay of an empty log sends nothing") {
  auto& w = workspace();
  write(w.root / "empty.log", "");
  auto r = cli("replay --events " + (w.root / "empty.log").string() + " --bundle " +
               (w.root / "a" / "bundle.json").string() + " --endpoint http://127.0.0.1:9");
  REQUIRE_MESSAGE(r.status == 0, r.output);
  auto j = nlohmann::json::parse(r.output);
  CHECK(j.at("envelopes_sent") == 0);
  CHECK(j.at("decisions") == 0);
}

TEST_CASE("replay against unregistered devices reports ingest errors") {
  auto& w = workspace();
  auto gen = cli("generate --users 1 --minutes 30 --start-hour 10 --profile-seed 5 --out " + (w.root / "g.log").string());
  REQUIRE_MESSAGE(gen.status == 0, gen.output);

  auto bundle = experiment::Bundle::load((w.root / "a" / "bundle.json").string());
  service::ServiceOptions opts;
  opts.api_token = "t";
  service::AuthService svc(opts);
  svc.configure(service::config_from_json(bundle.service_config_json()));
  service::HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  const std::string common = "replay --events " + (w.root / "g.log").string() + " --bundle " +
                             (w.root / "a" / "bundle.json").string() + " --token t --endpoint http://127.0.0.1:" +
                             std::to_string(port);

  auto unregistered = cli(common);
  CHECK(unregistered.status != 0);
  CHECK(unregistered.output.find("not registered") != std::string::npos);

  auto registered = cli(common + " --register");
  CHECK_MESSAGE(registered.status == 0, registered.output);
  auto j = nlohmann::json::parse(registered.output.substr(registered.output.find('{')));
  CHECK(j.at("ingest_errors") == 0);
  CHECK(j.at("decisions").get<std::size_t>() > 0);
  server.stop();
}
