// Operator entry point: one subcommand per pipeline stage plus serve/replay.
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"
#include "authcode/experiment.hpp"
#include "json.hpp"

using namespace authcode;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Source {
  std::string events;
  int users = 5;
  int days = 20;
  std::int64_t start_day = experiment::kDefaultStartDay;
  double window_s = 60.0;

  void add(CLI::App* app) {
    app->add_option("--events", events, "event log file (default: synthetic profiles)");
    app->add_option("--users", users, "synthetic users")->check(CLI::Range(2, 1000));
    app->add_option("--days", days, "synthetic days")->check(CLI::Range(1, 3650));
    app->add_option("--start-day", start_day, "first synthetic day, days since 1970-01-01");
    app->add_option("--window-s", window_s, "feature window length in seconds");
  }

  experiment::Corpus load(std::uint64_t seed) const {
    if (!events.empty()) {
      auto ev = events::read_event_log_file(events);
      return experiment::corpus_from_events(ev, window_s);
    }
    return experiment::synthetic_corpus({users, days, seed, start_day});
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::io, "failed writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::map<std::string, double> parse_hyper(const std::vector<std::string>& items) {
  std::map<std::string, double> out;
  for (const auto& item : items) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::invalid_argument, "expected name=value, got '" + item + "'");
    out[item.substr(0, eq)] = parse_double(item.substr(eq + 1), item.substr(0, eq));
  }
  return out;
}

models::SearchSpace parse_space(const std::vector<std::string>& items) {
  models::SearchSpace out;
  for (const auto& item : items) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::invalid_argument, "expected name=v1,v2,..., got '" + item + "'");
    auto& values = out[item.substr(0, eq)];
    for (const auto& v : split_csv_line(item.substr(eq + 1))) values.push_back(parse_double(v, item.substr(0, eq)));
  }
  return out;
}

pipeline::SequenceSplit sequence_split(const std::string& fused_path, int window, double train_share,
                                       double val_share) {
  auto fused = pipeline::read_dataset_file(fused_path);
  auto timelines = experiment::fused_timelines(fused);
  return pipeline::split_sequences_by_day(timelines, static_cast<std::size_t>(window), train_share, val_share);
}

void print_metrics(const models::Evaluation& ev) { std::cout << models::metrics_csv(ev.metrics); }

service::HttpServer* g_server_for_signal = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-device continuous authentication toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 7;
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic event log");
  int gen_users = 5, gen_days = 1;
  std::int64_t gen_start = experiment::kDefaultStartDay;
  int gen_minutes = 0;
  int gen_hour = 0;
  std::uint64_t gen_profile_seed = 7;
  std::string gen_user, gen_out;
  gen->add_option("--users", gen_users, "number of profiles")->check(CLI::Range(1, 1000));
  gen->add_option("--days", gen_days, "days per user")->check(CLI::Range(1, 3650));
  gen->add_option("--minutes", gen_minutes, "override: minutes per user");
  gen->add_option("--start-day", gen_start, "first day, days since 1970-01-01");
  gen->add_option("--start-hour", gen_hour, "hour of the first day to start at (UTC)")->check(CLI::Range(0, 23));
  gen->add_option("--profile-seed", gen_profile_seed, "seed of the profile panel (experiments use their corpus seed)");
  gen->add_option("--user", gen_user, "only this user id");
  gen->add_option("--out", gen_out, "event log path")->required();

  // extract
  auto* ext = app.add_subcommand("extract", "per-minute feature vectors from an event log");
  Source ext_src;
  std::string ext_pc, ext_mobile;
  ext_src.add(ext);
  ext->add_option("--pc-out", ext_pc, "PC feature CSV")->required();
  ext->add_option("--mobile-out", ext_mobile, "mobile feature CSV")->required();

  // fuse
  auto* fuse = app.add_subcommand("fuse", "preprocess the single-device datasets and fuse them");
  Source fuse_src;
  std::string fuse_dir;
  double fuse_threshold = 0.95;
  fuse_src.add(fuse);
  fuse->add_option("--out-dir", fuse_dir, "output directory")->required();
  fuse->add_option("--threshold", fuse_threshold, "cumulative importance kept")->check(CLI::Range(0.0, 1.0));

  // derive
  auto* der = app.add_subcommand("derive", "derived usage features over tumbling windows");
  Source der_src;
  int der_window = 1440;
  std::string der_out;
  der_src.add(der);
  der->add_option("--window", der_window, "window minutes: 60, 180, 360, 720 or 1440");
  der->add_option("--out", der_out, "dataset CSV")->required();

  // sequence
  auto* seq = app.add_subcommand("sequence", "dense -1 filled timelines for sliding windows");
  std::string seq_fused, seq_out;
  int seq_window = 60;
  seq->add_option("--fused", seq_fused, "fused dataset CSV")->required();
  seq->add_option("--window", seq_window, "window length T in minutes");
  seq->add_option("--out", seq_out, "timeline CSV; a .json sidecar is written next to it")->required();

  // split
  auto* spl = app.add_subcommand("split", "leakage-safe segment split");
  std::string spl_ds, spl_dir;
  pipeline::SplitOptions spl_opts;
  spl->add_option("--dataset", spl_ds, "dataset CSV")->required();
  spl->add_option("--out-dir", spl_dir, "output directory")->required();
  spl->add_option("--segment-minutes", spl_opts.segment_minutes, "segment length");
  spl->add_option("--test-fraction", spl_opts.test_fraction, "test share of segments");
  spl->add_option("--val-fraction", spl_opts.val_fraction, "validation share of segments");

  // train
  auto* trn = app.add_subcommand("train", "train one model");
  std::string trn_family, trn_train, trn_val, trn_out, trn_fused;
  std::vector<std::string> trn_hyper;
  int trn_window = 60;
  double trn_share = 0.7, trn_val_share = 0.15;
  trn->add_option("--family", trn_family, "naive_bayes, knn, random_forest, gbt, mlp or lstm")->required();
  trn->add_option("--hyper", trn_hyper, "name=value, repeatable");
  trn->add_option("--train", trn_train, "training dataset CSV (flat models)");
  trn->add_option("--validation", trn_val, "validation dataset CSV (flat models)");
  trn->add_option("--fused", trn_fused, "fused dataset CSV (lstm)");
  trn->add_option("--window", trn_window, "sequence length (lstm)");
  trn->add_option("--train-share", trn_share, "share of days used for training (lstm)");
  trn->add_option("--val-share", trn_val_share, "share of days used for validation (lstm)");
  trn->add_option("--out", trn_out, "model file")->required();

  // search
  auto* sea = app.add_subcommand("search", "grid search over hyperparameters");
  std::string sea_family, sea_train, sea_val, sea_out, sea_model;
  std::vector<std::string> sea_space, sea_fixed;
  std::size_t sea_budget = 10;
  sea->add_option("--family", sea_family, "model family")->required();
  sea->add_option("--space", sea_space, "name=v1,v2,..., repeatable");
  sea->add_option("--fixed", sea_fixed, "name=value held constant, repeatable");
  sea->add_option("--train", sea_train, "training dataset CSV")->required();
  sea->add_option("--validation", sea_val, "validation dataset CSV")->required();
  sea->add_option("--budget", sea_budget, "maximum configurations");
  sea->add_option("--out", sea_out, "leaderboard CSV")->required();
  sea->add_option("--model-out", sea_model, "retrain the winner and save it here");

  // evaluate
  auto* eva = app.add_subcommand("evaluate", "evaluate a saved model");
  std::string eva_model, eva_ds, eva_manifest, eva_out, eva_fused;
  double eva_share = 0.7, eva_val_share = 0.15;
  eva->add_option("--model", eva_model, "model file")->required();
  eva->add_option("--dataset", eva_ds, "dataset CSV (flat models)");
  eva->add_option("--manifest", eva_manifest, "split manifest; evaluates its test partition");
  eva->add_option("--fused", eva_fused, "fused dataset CSV (lstm; evaluates the test days)");
  eva->add_option("--train-share", eva_share, "share of training days (lstm)");
  eva->add_option("--val-share", eva_val_share, "share of validation days (lstm)");
  eva->add_option("--out", eva_out, "metrics CSV (default: stdout)");

  // replay
  auto* rep = app.add_subcommand("replay", "stream an event log to a running service");
  std::string rep_events, rep_bundle;
  experiment::ReplayOptions rep_opts;
  std::string rep_speed = "inf";
  rep->add_option("--events", rep_events, "event log")->required();
  rep->add_option("--bundle", rep_bundle, "deployment bundle")->required();
  rep->add_option("--endpoint", rep_opts.endpoint, "service base url");
  rep->add_option("--token", rep_opts.token, "API token");
  rep->add_option("--speed", rep_speed, "time multiplier or inf");
  rep->add_flag("--register", rep_opts.register_devices, "register the log's devices first");
  rep->add_option("--tier", rep_opts.tier, "tier used with --register");

  // serve
  auto* srv = app.add_subcommand("serve", "run the scoring service");
  std::string srv_host = "127.0.0.1", srv_token, srv_bundle, srv_config;
  int srv_port = 8080;
  bool srv_open = false;
  srv->add_option("--host", srv_host, "bind address");
  srv->add_option("--port", srv_port, "port");
  srv->add_option("--token", srv_token, "API token required from clients");
  srv->add_option("--bundle", srv_bundle, "deployment bundle whose models are loaded");
  srv->add_option("--config", srv_config, "service configuration JSON");
  srv->add_flag("--open-registration", srv_open, "accept vectors from unregistered devices");

  // experiment
  auto* exp = app.add_subcommand("experiment", "run a full experiment from a JSON config");
  std::string exp_config;
  exp->add_option("--config", exp_config, "experiment config")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto profiles = events::make_synthetic_profiles(gen_users, gen_profile_seed);
      std::vector<events::RawEvent> all;
      const int minutes = gen_minutes > 0 ? gen_minutes : gen_days * 1440;
      for (const auto& p : profiles) {
        if (!gen_user.empty() && p.user_id != gen_user) continue;
        auto ev = events::generate_stream(p, gen_start * 86'400'000 + gen_hour * 3'600'000LL, minutes, mix_seed(seed, stable_hash(p.user_id)));
        all.insert(all.end(), ev.begin(), ev.end());
      }
      if (!gen_user.empty() && all.empty()) throw Error(ErrorCode::not_found, "no profile named " + gen_user, gen_user);
      std::stable_sort(all.begin(), all.end(),
                       [](const auto& a, const auto& b) { return a.timestamp_ms < b.timestamp_ms; });
      events::write_event_log_file(gen_out, all);
      std::cout << json{{"events", all.size()}, {"out", gen_out}}.dump() << '\n';
    } else if (*ext) {
      auto corpus = ext_src.load(seed);
      std::ofstream pc(ext_pc), mob(ext_mobile);
      if (!pc || !mob) throw Error(ErrorCode::io, "cannot open the output files");
      features::write_feature_csv(pc, corpus.pc, features::pc_schema());
      features::write_feature_csv(mob, corpus.mobile, features::mobile_schema());
      std::cout << json{{"events", corpus.event_count}, {"pc_vectors", corpus.pc.size()},
                        {"mobile_vectors", corpus.mobile.size()}}
                       .dump()
                << '\n';
    } else if (*fuse) {
      auto corpus = fuse_src.load(seed);
      experiment::PreprocessOptions opts;
      opts.importance_threshold = fuse_threshold;
      opts.seed = seed;
      auto reduced = experiment::reduce_corpus(corpus, opts);
      fs::create_directories(fuse_dir);
      const fs::path dir(fuse_dir);
      pipeline::write_dataset_file((dir / "pc.csv").string(), reduced.pc.dataset);
      pipeline::write_dataset_file((dir / "mobile_app.csv").string(), reduced.app.dataset);
      pipeline::write_dataset_file((dir / "sensor.csv").string(), reduced.sensor.dataset);
      pipeline::write_dataset_file((dir / "fused.csv").string(), reduced.fused);
      experiment::Bundle bundle{reduced.pc.projection, reduced.app.projection, reduced.sensor.projection, {}};
      bundle.save((dir / "bundle.json").string());
      std::cout << json{{"pc_features", reduced.pc.dataset.width()},
                        {"mobile_app_features", reduced.app.dataset.width()},
                        {"sensor_features", reduced.sensor.dataset.width()},
                        {"fused_rows", reduced.fused.size()},
                        {"dropped_constant", reduced.pc.removed.dropped.size() + reduced.app.removed.dropped.size() +
                                                 reduced.sensor.removed.dropped.size()}}
                       .dump()
                << '\n';
    } else if (*der) {
      auto corpus = der_src.load(seed);
      auto ds = experiment::derived_usage_dataset(corpus, der_window);
      pipeline::write_dataset_file(der_out, ds);
      pipeline::write_sidecar(der_out + ".json", "derived.v1", ds.feature_names, der_window, 0.0);
      std::cout << json{{"rows", ds.size()}, {"window", der_window}}.dump() << '\n';
    } else if (*seq) {
      auto fused = pipeline::read_dataset_file(seq_fused);
      auto timelines = experiment::fused_timelines(fused);
      pipeline::LabeledDataset grid;
      grid.feature_names = fused.feature_names;
      grid.rows = Matrix(0, fused.width());
      std::size_t total = 0, usable = 0;
      for (const auto& t : timelines) {
        auto set = pipeline::build_sequences(t, static_cast<std::size_t>(seq_window));
        total += set.total;
        usable += set.windows.size();
        for (std::size_t r = 0; r < t->length(); ++r) {
          grid.append(t->values.row(r), t->user_id, t->start_minute + static_cast<std::int64_t>(r),
                      t->active[r] ? "active" : "inactive");
        }
      }
      pipeline::write_dataset_file(seq_out, grid);
      pipeline::write_sidecar(seq_out + ".json", "sequence.v1", fused.feature_names, seq_window,
                              pipeline::kInactiveFill);
      std::cout << json{{"timeline_rows", grid.size()}, {"windows", total}, {"usable_windows", usable}}.dump() << '\n';
    } else if (*spl) {
      spl_opts.seed = seed;
      auto ds = pipeline::read_dataset_file(spl_ds);
      auto split = pipeline::segment_split(ds, spl_opts);
      fs::create_directories(spl_dir);
      const fs::path dir(spl_dir);
      pipeline::write_dataset_file((dir / "train.csv").string(), split.train);
      pipeline::write_dataset_file((dir / "validation.csv").string(), split.validation);
      pipeline::write_dataset_file((dir / "test.csv").string(), split.test);
      write_text((dir / "manifest.json").string(), split.manifest.to_json());
      std::cout << json{{"train", split.train.size()}, {"validation", split.validation.size()},
                        {"test", split.test.size()}, {"leaking_pairs", pipeline::count_leaking_pairs(split)}}
                       .dump()
                << '\n';
    } else if (*trn) {
      models::ModelSpec spec;
      spec.family = models::parse_family(trn_family);
      spec.hyper = parse_hyper(trn_hyper);
      spec.seed = seed;
      models::TrainedModel model;
      if (spec.family == models::Family::lstm) {
        if (trn_fused.empty()) throw Error(ErrorCode::invalid_argument, "lstm training needs --fused");
        auto parts = sequence_split(trn_fused, trn_window, trn_share, trn_val_share);
        model = models::train(spec, parts.train, &parts.validation);
      } else {
        if (trn_train.empty()) throw Error(ErrorCode::invalid_argument, "--train is required");
        auto train = pipeline::read_dataset_file(trn_train);
        std::optional<pipeline::LabeledDataset> val;
        if (!trn_val.empty()) val = pipeline::read_dataset_file(trn_val);
        model = models::train(spec, train, val ? &*val : nullptr);
      }
      model.save(trn_out);
      std::cout << json{{"model", trn_out}, {"spec", model.spec.describe()}, {"iterations", model.report.iterations},
                        {"seconds", model.report.seconds}}
                       .dump()
                << '\n';
    } else if (*sea) {
      const auto family = models::parse_family(sea_family);
      auto train = pipeline::read_dataset_file(sea_train);
      auto val = pipeline::read_dataset_file(sea_val);
      auto result = models::grid_search(family, parse_space(sea_space), train, val, sea_budget, seed,
                                        parse_hyper(sea_fixed));
      write_text(sea_out, models::leaderboard_csv(result));
      if (!sea_model.empty()) models::train(result.best, train, &val).save(sea_model);
      std::cout << json{{"best", result.best.describe()}, {"macro_f1", result.leaderboard.front().macro_f1}}.dump()
                << '\n';
    } else if (*eva) {
      auto model = models::TrainedModel::load(eva_model);
      models::Evaluation ev;
      if (model.is_sequence()) {
        if (eva_fused.empty()) throw Error(ErrorCode::invalid_argument, "lstm evaluation needs --fused");
        auto parts = sequence_split(eva_fused, static_cast<int>(model.window_length), eva_share, eva_val_share);
        ev = models::evaluate(model, parts.test);
      } else {
        if (eva_ds.empty()) throw Error(ErrorCode::invalid_argument, "--dataset is required");
        auto ds = pipeline::read_dataset_file(eva_ds);
        if (!eva_manifest.empty()) {
          ds = pipeline::apply_manifest(ds, pipeline::SplitManifest::from_json(read_text(eva_manifest))).test;
        }
        ev = models::evaluate(model, ds);
      }
      if (eva_out.empty()) {
        print_metrics(ev);
      } else {
        write_text(eva_out, models::metrics_csv(ev.metrics));
      }
    } else if (*rep) {
      rep_opts.speed = rep_speed == "inf" ? std::numeric_limits<double>::infinity()
                                          : parse_double(rep_speed, "speed");
      auto bundle = experiment::Bundle::load(rep_bundle);
      std::vector<events::RawEvent> ev;
      ev = events::read_event_log_file(rep_events);
      auto envelopes = experiment::envelopes_from_events(ev, bundle);
      auto summary = experiment::replay_to_service(envelopes, rep_opts);
      std::cout << summary.to_json() << '\n';
      if (!summary.ok()) return 1;
    } else if (*srv) {
      service::ServiceOptions opts;
      opts.api_token = srv_token;
      opts.require_registration = !srv_open;
      service::AuthService svc(opts);
      if (!srv_config.empty()) {
        svc.configure(service::config_from_json(read_text(srv_config)));
      } else if (!srv_bundle.empty()) {
        svc.configure(service::config_from_json(experiment::Bundle::load(srv_bundle).service_config_json()));
      }
      service::HttpServer server(svc);
      g_server_for_signal = &server;
      std::signal(SIGINT, [](int) {
        if (g_server_for_signal) g_server_for_signal->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (g_server_for_signal) g_server_for_signal->stop();
      });
      std::cerr << "serving on " << srv_host << ":" << srv_port << " (config version " << svc.config()->version
                << ")\n";
      server.listen(srv_host, srv_port);
    } else if (*exp) {
      auto config = experiment::ExperimentConfig::from_json(read_text(exp_config));
      if (app.get_option("--seed")->count() > 0) {
        config.seed = seed;
        config.split.seed = seed;
        config.preprocess.seed = seed;
        if (config.corpus) config.corpus->seed = seed;
      }
      auto report = experiment::run_experiment(config);
      std::cout << report.summary_csv();
    }
  } catch (const Error& e) {
    std::cerr << service::error_to_json(e) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << service::error_to_json(Error(ErrorCode::io, e.what())) << '\n';
    return 1;
  }
  return 0;
}
