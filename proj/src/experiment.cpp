#include "authcode/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace authcode::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kMsPerDay = 86'400'000;
constexpr std::int64_t kMinutesPerDay = 1440;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

void extract_into(Corpus& corpus, std::span<const events::RawEvent> events, features::FeatureExtractor& fx,
                  double window_s) {
  auto windows = features::windowize(events, window_s);
  for (auto& v : fx.extract_all(windows)) {
    (v.device_kind == features::DeviceKind::pc ? corpus.pc : corpus.mobile).push_back(std::move(v));
  }
}

void sort_vectors(std::vector<features::MinuteFeatureVector>& v) {
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    return std::tie(a.minute_index, a.user_id, a.device_id) < std::tie(b.minute_index, b.user_id, b.device_id);
  });
}

std::vector<features::MinuteFeatureVector> with_group(const std::vector<features::MinuteFeatureVector>& vectors,
                                                      unsigned group) {
  std::vector<features::MinuteFeatureVector> out;
  for (const auto& v : vectors) {
    if (v.active_groups & group) out.push_back(v);
  }
  return out;
}

models::ModelSpec spec_from(const json& j, std::uint64_t default_seed) {
  models::ModelSpec s;
  s.family = models::parse_family(j.at("family").get<std::string>());
  s.hyper = j.value("hyper", std::map<std::string, double>{});
  s.seed = j.value("seed", default_seed);
  s.validate();
  return s;
}

json spec_to(const models::ModelSpec& s) {
  return {{"family", std::string(models::to_string(s.family))}, {"hyper", s.hyper}, {"seed", s.seed}};
}

json projection_to(const pipeline::BlockProjection& p) {
  return {{"names", p.names}, {"encoder", json::parse(p.encoder.to_json())}};
}

pipeline::BlockProjection projection_from(const json& j) {
  pipeline::BlockProjection p;
  p.names = j.at("names").get<std::vector<std::string>>();
  p.encoder = pipeline::OneHotEncoder::from_json(j.at("encoder").dump());
  return p;
}

// Runs `f`, prefixing failures with the stage name.
template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), "stage " + name + ": " + e.what(), e.detail());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "stage " + name + ": " + e.what());
  } catch (const fs::filesystem_error& e) {
    throw Error(ErrorCode::io, "stage " + name + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Sorted random subset of at most n indices out of [0, total).
std::vector<std::size_t> sample_indices(std::size_t total, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  if (n >= total) return idx;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (total - i))]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

pipeline::SequenceDataset subsample(const pipeline::SequenceDataset& ds, std::size_t n, std::uint64_t seed) {
  if (ds.size() <= n) return ds;
  pipeline::SequenceDataset out;
  out.window_length = ds.window_length;
  out.width = ds.width;
  for (auto i : sample_indices(ds.size(), n, seed)) {
    out.windows.push_back(ds.windows[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpus

Corpus synthetic_corpus(const CorpusOptions& options) {
  if (options.users < 2) throw Error(ErrorCode::invalid_argument, "a corpus needs at least 2 users");
  if (options.days < 1) throw Error(ErrorCode::invalid_argument, "a corpus needs at least 1 day");
  Corpus corpus;
  const auto profiles = events::make_synthetic_profiles(options.users, options.seed);
  for (const auto& p : profiles) {
    features::FeatureExtractor fx;
    for (int d = 0; d < options.days; ++d) {
      const std::int64_t start = (options.start_day + d) * kMsPerDay;
      const auto seed = mix_seed(mix_seed(options.seed, stable_hash(p.user_id)), static_cast<std::uint64_t>(d));
      auto events = events::generate_stream(p, start, static_cast<int>(kMinutesPerDay), seed);
      corpus.event_count += events.size();
      extract_into(corpus, events, fx, 60.0);
    }
  }
  sort_vectors(corpus.pc);
  sort_vectors(corpus.mobile);
  return corpus;
}

Corpus corpus_from_events(std::span<const events::RawEvent> events, double window_s) {
  Corpus corpus;
  corpus.event_count = events.size();
  features::FeatureExtractor fx;
  extract_into(corpus, events, fx, window_s);
  sort_vectors(corpus.pc);
  sort_vectors(corpus.mobile);
  return corpus;
}

pipeline::LabeledDataset pc_dataset(const Corpus& corpus) {
  return pipeline::dataset_from_vectors(corpus.pc, features::pc_schema());
}

pipeline::LabeledDataset mobile_app_dataset(const Corpus& corpus) {
  return pipeline::dataset_from_vectors(with_group(corpus.mobile, features::kMobileAppGroup),
                                        features::mobile_app_feature_names());
}

pipeline::LabeledDataset sensor_dataset(const Corpus& corpus) {
  return pipeline::dataset_from_vectors(with_group(corpus.mobile, features::kSensorGroup),
                                        features::sensor_feature_names());
}

// ---------------------------------------------------------------------------
// Preprocessing

ReducedBlock reduce_block(const std::string& name, const pipeline::LabeledDataset& raw,
                          std::span<const std::string> categorical, std::size_t block_width,
                          const PreprocessOptions& options) {
  ReducedBlock block;
  block.name = name;
  if (raw.size() == 0) {
    block.dataset.feature_names = {};
    return block;
  }
  auto ds = pipeline::drop_constant_features(raw, &block.removed);
  std::vector<std::string> cats;
  for (const auto& c : categorical) {
    if (ds.column(c)) cats.push_back(c);
  }
  ds = pipeline::one_hot_encode(ds, cats, &block.projection.encoder);
  if (options.minute_of_day) ds = pipeline::add_minute_of_day(ds);
  if (ds.classes().size() < 2) throw Error(ErrorCode::validation, name + " data holds fewer than 2 users");

  auto sample = ds.select_rows(sample_indices(ds.size(), options.importance_rows, mix_seed(options.seed, 0x1a)));
  models::ModelSpec rf;
  rf.family = models::Family::random_forest;
  rf.hyper = {{"number_of_trees", static_cast<double>(options.importance_trees)}};
  rf.seed = mix_seed(options.seed, stable_hash(name));
  const auto importances = models::train(rf, sample).feature_importances();

  std::vector<std::string> kept;
  if (std::all_of(importances.begin(), importances.end(), [](const auto& kv) { return kv.second == 0.0; })) {
    kept.assign(ds.feature_names.begin(),
                ds.feature_names.begin() + static_cast<std::ptrdiff_t>(std::min(block_width, ds.width())));
  } else {
    kept = pipeline::select_by_importance(ds.feature_names, importances,
                                          pipeline::SelectionMode::cumulative_share(options.importance_threshold),
                                          &block.selection);
    if (kept.size() > block_width) {
      kept = pipeline::select_by_importance(ds.feature_names, importances, pipeline::SelectionMode::top(block_width),
                                            &block.selection);
    }
  }
  block.dataset = ds.select_columns(std::span<const std::string>(kept));
  block.projection.names = kept;
  return block;
}

ReducedCorpus reduce_corpus(const Corpus& corpus, const PreprocessOptions& options) {
  ReducedCorpus r;
  r.pc = reduce_block("pc", pc_dataset(corpus), pipeline::pc_categorical_columns(), pipeline::kPcBlock, options);
  r.app = reduce_block("app", mobile_app_dataset(corpus), pipeline::mobile_categorical_columns(),
                       pipeline::kMobileAppBlock, options);
  r.sensor = reduce_block("sensor", sensor_dataset(corpus), {}, pipeline::kSensorBlock, options);
  auto ptr = [](const ReducedBlock& b) { return b.dataset.size() > 0 ? &b.dataset : nullptr; };
  r.fused = pipeline::fuse_datasets(ptr(r.pc), ptr(r.app), ptr(r.sensor));
  return r;
}

pipeline::LabeledDataset derived_usage_dataset(const Corpus& corpus, int window_minutes) {
  std::vector<features::MinuteFeatureVector> all = corpus.pc;
  all.insert(all.end(), corpus.mobile.begin(), corpus.mobile.end());
  std::vector<pipeline::DerivedUsageVector> rows;
  for (const auto& [user, timeline] : pipeline::activity_from_vectors(all)) {
    auto v = pipeline::derive_usage_features(timeline, window_minutes);
    rows.insert(rows.end(), v.begin(), v.end());
  }
  return pipeline::derived_dataset(rows);
}

std::vector<std::shared_ptr<const pipeline::FusedTimeline>> fused_timelines(const pipeline::LabeledDataset& fused) {
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> span;
  for (std::size_t r = 0; r < fused.size(); ++r) {
    auto [it, fresh] = span.try_emplace(fused.labels[r], fused.minute_index[r], fused.minute_index[r]);
    if (!fresh) {
      it->second.first = std::min(it->second.first, fused.minute_index[r]);
      it->second.second = std::max(it->second.second, fused.minute_index[r]);
    }
  }
  std::vector<std::shared_ptr<const pipeline::FusedTimeline>> out;
  for (const auto& [user, range] : span) {
    const auto start = floor_div(range.first, kMinutesPerDay) * kMinutesPerDay;
    const auto end = (floor_div(range.second, kMinutesPerDay) + 1) * kMinutesPerDay;
    out.push_back(std::make_shared<const pipeline::FusedTimeline>(pipeline::make_timeline(fused, user, start, end)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::pc: return "pc";
    case DatasetKind::mobile_app: return "mobile_app";
    case DatasetKind::sensor: return "sensor";
    case DatasetKind::fused: return "fused";
    case DatasetKind::derived: return "derived";
    case DatasetKind::sequence: return "sequence";
  }
  return "unknown";
}

DatasetKind parse_dataset_kind(std::string_view text) {
  static const std::map<std::string, DatasetKind, std::less<>> names{
      {"1", DatasetKind::pc},         {"pc", DatasetKind::pc},
      {"2", DatasetKind::mobile_app}, {"mobile_app", DatasetKind::mobile_app},
      {"3", DatasetKind::sensor},     {"sensor", DatasetKind::sensor},
      {"4", DatasetKind::fused},      {"fused", DatasetKind::fused},
      {"5", DatasetKind::derived},    {"derived", DatasetKind::derived},
      {"sequence", DatasetKind::sequence},
  };
  auto it = names.find(text);
  if (it == names.end()) {
    throw Error(ErrorCode::config, "unknown dataset '" + std::string(text) +
                                       "' (expected 1-5, pc, mobile_app, sensor, fused, derived or sequence)");
  }
  return it->second;
}

void ExperimentConfig::validate() const {
  if (corpus && event_log) throw Error(ErrorCode::config, "choose either a synthetic corpus or an event log");
  if (event_log && !fs::exists(*event_log)) throw Error(ErrorCode::config, "event log " + *event_log + " does not exist");
  if (datasets.empty()) throw Error(ErrorCode::config, "no datasets selected");
  if (output_dir.empty()) throw Error(ErrorCode::config, "output_dir is required");
  if (!(preprocess.importance_threshold > 0.0 && preprocess.importance_threshold <= 1.0)) {
    throw Error(ErrorCode::config, "importance_threshold must lie in (0,1]");
  }
  for (int w : derived_windows) {
    if (std::find(pipeline::kDerivedWindows.begin(), pipeline::kDerivedWindows.end(), w) ==
        pipeline::kDerivedWindows.end()) {
      throw Error(ErrorCode::config, "derived window " + std::to_string(w) + " is not one of 60, 180, 360, 720, 1440");
    }
  }
  for (int t : sequence.lengths) {
    if (std::find(pipeline::kSequenceLengths.begin(), pipeline::kSequenceLengths.end(), t) ==
        pipeline::kSequenceLengths.end()) {
      throw Error(ErrorCode::config, "sequence length " + std::to_string(t) + " is not a supported window");
    }
  }
  const bool flat = std::any_of(datasets.begin(), datasets.end(), [](DatasetKind k) { return k != DatasetKind::sequence; });
  if (flat && models.empty() && !search) throw Error(ErrorCode::config, "no model or search space given");
  for (const auto& m : models) {
    if (m.family == models::Family::lstm) throw Error(ErrorCode::config, "lstm runs belong in the sequence section");
    m.validate();
  }
  if (sequence.model.family != models::Family::lstm) throw Error(ErrorCode::config, "sequence model must be lstm");
  sequence.model.validate();
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ExperimentConfig c;
  try {
    const auto j = json::parse(text);
    c.seed = j.value("seed", std::uint64_t{7});
    c.output_dir = j.value("output_dir", std::string());
    if (j.contains("event_log")) c.event_log = j.at("event_log").get<std::string>();
    if (j.contains("corpus") || !c.event_log) {
      CorpusOptions o;
      o.seed = c.seed;
      if (j.contains("corpus")) {
        const auto& k = j.at("corpus");
        o.users = k.value("users", o.users);
        o.days = k.value("days", o.days);
        o.seed = k.value("seed", o.seed);
        o.start_day = k.value("start_day", o.start_day);
      }
      c.corpus = o;
    }
    c.preprocess.seed = c.seed;
    if (j.contains("preprocess")) {
      const auto& p = j.at("preprocess");
      c.preprocess.importance_threshold = p.value("importance_threshold", c.preprocess.importance_threshold);
      c.preprocess.importance_trees = p.value("importance_trees", c.preprocess.importance_trees);
      c.preprocess.importance_rows = p.value("importance_rows", c.preprocess.importance_rows);
      c.preprocess.minute_of_day = p.value("minute_of_day", c.preprocess.minute_of_day);
    }
    if (j.contains("datasets")) {
      c.datasets.clear();
      for (const auto& d : j.at("datasets")) {
        c.datasets.push_back(parse_dataset_kind(d.is_number() ? std::to_string(d.get<int>()) : d.get<std::string>()));
      }
    }
    if (j.contains("model")) c.models.push_back(spec_from(j.at("model"), c.seed));
    for (const auto& m : j.value("models", json::array())) c.models.push_back(spec_from(m, c.seed));
    if (j.contains("search")) {
      const auto& s = j.at("search");
      SearchConfig sc;
      sc.family = models::parse_family(s.at("family").get<std::string>());
      sc.space = s.at("space").get<models::SearchSpace>();
      sc.budget = s.value("budget", sc.budget);
      sc.fixed = s.value("fixed", std::map<std::string, double>{});
      c.search = sc;
    }
    c.split.seed = c.seed;
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split.segment_minutes = s.value("segment_minutes", c.split.segment_minutes);
      c.split.test_fraction = s.value("test_fraction", c.split.test_fraction);
      c.split.val_fraction = s.value("val_fraction", c.split.val_fraction);
      c.split.seed = s.value("seed", c.split.seed);
    }
    if (j.contains("derived_windows")) c.derived_windows = j.at("derived_windows").get<std::vector<int>>();
    c.sequence.model = models::default_spec(models::Family::lstm, c.seed);
    if (j.contains("sequence")) {
      const auto& s = j.at("sequence");
      c.sequence.lengths = s.value("lengths", c.sequence.lengths);
      c.sequence.train_share = s.value("train_share", c.sequence.train_share);
      c.sequence.val_share = s.value("val_share", c.sequence.val_share);
      c.sequence.max_train_windows = s.value("max_train_windows", c.sequence.max_train_windows);
      c.sequence.max_eval_windows = s.value("max_eval_windows", c.sequence.max_eval_windows);
      if (s.contains("model")) c.sequence.model = spec_from(s.at("model"), c.seed);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Report

const RunResult* ExperimentReport::find(std::string_view name) const {
  for (const auto& r : runs) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string ExperimentReport::summary_csv() const {
  std::ostringstream out;
  out << "run,dataset,window,spec,train_rows,validation_rows,test_rows,macro_precision,macro_recall,macro_f1\n";
  for (const auto& r : runs) {
    const auto& m = r.evaluation.metrics;
    out << r.name << ',' << to_string(r.dataset) << ',' << r.window << ',' << csv_field(r.spec.describe()) << ','
        << r.train_rows << ',' << r.validation_rows << ',' << r.test_rows << ',' << format_double(m.macro_precision)
        << ',' << format_double(m.macro_recall) << ',' << format_double(m.macro_f1) << '\n';
  }
  return out.str();
}

std::string ExperimentReport::to_json() const {
  json runs_j = json::array();
  for (const auto& r : runs) {
    json per_class = json::array();
    for (const auto& c : r.evaluation.metrics.per_class) {
      per_class.push_back(
          {{"class", c.label}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
    }
    runs_j.push_back({{"name", r.name},
                      {"dataset", std::string(to_string(r.dataset))},
                      {"window", r.window},
                      {"spec", spec_to(r.spec)},
                      {"train_rows", r.train_rows},
                      {"validation_rows", r.validation_rows},
                      {"test_rows", r.test_rows},
                      {"macro_precision", r.evaluation.metrics.macro_precision},
                      {"macro_recall", r.evaluation.metrics.macro_recall},
                      {"macro_f1", r.evaluation.metrics.macro_f1},
                      {"per_class", per_class},
                      {"train_seconds", r.train_seconds},
                      {"model_path", r.model_path}});
  }
  json j{{"runs", runs_j}, {"artifacts", artifacts}, {"seconds", seconds}};
  if (bundle_path) j["bundle"] = *bundle_path;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Experiment runner

namespace {

class Staging {
 public:
  explicit Staging(const std::string& out) : out_(out), dir_(fs::path(out) / ".staging") {
    fs::create_directories(out_);
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }

  fs::path file(const std::string& name) {
    names_.push_back(name);
    return dir_ / name;
  }
  fs::path final_path(const std::string& name) const { return fs::absolute(out_ / name); }

  std::vector<std::string> commit() {
    std::vector<std::string> out;
    for (const auto& n : names_) {
      fs::rename(dir_ / n, out_ / n);
      out.push_back((out_ / n).string());
    }
    return out;
  }

 private:
  fs::path out_, dir_;
  std::vector<std::string> names_;
};

struct FlatJob {
  DatasetKind kind;
  int window = 0;
  std::string label;
  pipeline::LabeledDataset data;
};

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  Staging staging(config.output_dir);

  Corpus corpus = stage("extract", [&] {
    if (config.event_log) {
      auto events = events::read_event_log_file(*config.event_log);
      return corpus_from_events(events);
    }
    return synthetic_corpus(*config.corpus);
  });

  auto wants = [&](DatasetKind k) {
    return std::find(config.datasets.begin(), config.datasets.end(), k) != config.datasets.end();
  };
  const bool need_reduced = wants(DatasetKind::pc) || wants(DatasetKind::mobile_app) || wants(DatasetKind::sensor) ||
                            wants(DatasetKind::fused) || wants(DatasetKind::sequence);
  std::optional<ReducedCorpus> reduced;
  if (need_reduced) {
    reduced = stage("preprocess", [&] {
      PreprocessOptions p = config.preprocess;
      return reduce_corpus(corpus, p);
    });
  }

  std::vector<FlatJob> jobs;
  for (auto kind : config.datasets) {
    switch (kind) {
      case DatasetKind::pc: jobs.push_back({kind, 0, "pc", reduced->pc.dataset}); break;
      case DatasetKind::mobile_app: jobs.push_back({kind, 0, "mobile_app", reduced->app.dataset}); break;
      case DatasetKind::sensor: jobs.push_back({kind, 0, "sensor", reduced->sensor.dataset}); break;
      case DatasetKind::fused: jobs.push_back({kind, 0, "fused", reduced->fused}); break;
      case DatasetKind::derived:
        for (int w : config.derived_windows) {
          jobs.push_back({kind, w, "derived_w" + std::to_string(w),
                          stage("derive", [&] { return derived_usage_dataset(corpus, w); })});
        }
        break;
      case DatasetKind::sequence: break;
    }
  }

  std::vector<std::string> bundle_models;
  for (auto& job : jobs) {
    auto opts = config.split;
    if (job.kind == DatasetKind::derived) opts.segment_minutes = job.window;
    auto split = stage("split " + job.label, [&] { return pipeline::segment_split(job.data, opts); });
    stage("write", [&] {
      pipeline::write_dataset_file(staging.file("dataset_" + job.label + ".csv").string(), job.data);
      write_text(staging.file("split_" + job.label + ".json"), split.manifest.to_json());
      return 0;
    });

    std::vector<models::ModelSpec> specs = config.models;
    if (config.search) {
      auto result = stage("search " + job.label, [&] {
        return models::grid_search(config.search->family, config.search->space, split.train, split.validation,
                                   config.search->budget, config.seed, config.search->fixed);
      });
      stage("write", [&] {
        write_text(staging.file("leaderboard_" + job.label + ".csv"), models::leaderboard_csv(result));
        return 0;
      });
      specs = {result.best};
    }
    std::map<std::string, int> seen;
    for (const auto& spec : specs) {
      RunResult run;
      run.dataset = job.kind;
      run.window = job.window;
      run.spec = spec;
      run.name = job.label + "_" + std::string(models::to_string(spec.family));
      if (int n = seen[run.name]++; n > 0) run.name += "_" + std::to_string(n + 1);
      run.train_rows = split.train.size();
      run.validation_rows = split.validation.size();
      run.test_rows = split.test.size();
      auto model = stage("train " + run.name, [&] { return models::train(spec, split.train, &split.validation); });
      run.train_seconds = model.report.seconds;
      run.evaluation = stage("evaluate " + run.name, [&] { return models::evaluate(model, split.test); });
      stage("write", [&] {
        model.save(staging.file("model_" + run.name + ".json").string());
        write_text(staging.file("metrics_" + run.name + ".csv"), models::metrics_csv(run.evaluation.metrics));
        return 0;
      });
      run.model_path = staging.final_path("model_" + run.name + ".json").string();
      if (job.kind == DatasetKind::fused) bundle_models.push_back(run.name);
      report.runs.push_back(std::move(run));
    }
  }

  if (wants(DatasetKind::sequence)) {
    auto timelines = stage("sequence", [&] { return fused_timelines(reduced->fused); });
    for (int T : config.sequence.lengths) {
      const std::string label = "sequence_t" + std::to_string(T);
      auto parts = stage("sequence " + label, [&] {
        return pipeline::split_sequences_by_day(timelines, static_cast<std::size_t>(T), config.sequence.train_share,
                                                config.sequence.val_share);
      });
      const auto seed = mix_seed(config.seed, static_cast<std::uint64_t>(T));
      auto train_ds = subsample(parts.train, config.sequence.max_train_windows, mix_seed(seed, 1));
      auto val_ds = subsample(parts.validation, config.sequence.max_eval_windows, mix_seed(seed, 2));
      auto test_ds = subsample(parts.test, config.sequence.max_eval_windows, mix_seed(seed, 3));
      RunResult run;
      run.dataset = DatasetKind::sequence;
      run.window = T;
      run.spec = config.sequence.model;
      run.name = label + "_lstm";
      run.train_rows = train_ds.size();
      run.validation_rows = val_ds.size();
      run.test_rows = test_ds.size();
      auto model = stage("train " + run.name, [&] { return models::train(run.spec, train_ds, &val_ds); });
      run.train_seconds = model.report.seconds;
      run.evaluation = stage("evaluate " + run.name, [&] { return models::evaluate(model, test_ds); });
      stage("write", [&] {
        model.save(staging.file("model_" + run.name + ".json").string());
        write_text(staging.file("metrics_" + run.name + ".csv"), models::metrics_csv(run.evaluation.metrics));
        return 0;
      });
      run.model_path = staging.final_path("model_" + run.name + ".json").string();
      bundle_models.push_back(run.name);
      report.runs.push_back(std::move(run));
    }
  }

  stage("write", [&] {
    if (reduced) {
      Bundle bundle;
      bundle.pc = reduced->pc.projection;
      bundle.app = reduced->app.projection;
      bundle.sensor = reduced->sensor.projection;
      for (const auto& name : bundle_models) {
        const auto* run = report.find(name);
        bundle.models.push_back({name, run->model_path, 1.0 / static_cast<double>(bundle_models.size())});
      }
      write_text(staging.file("bundle.json"), bundle.to_json());
      report.bundle_path = staging.final_path("bundle.json").string();
    }
    write_text(staging.file("summary.csv"), report.summary_csv());
    return 0;
  });
  report.artifacts = staging.commit();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(fs::path(config.output_dir) / "report.json", report.to_json());
  report.artifacts.push_back((fs::path(config.output_dir) / "report.json").string());
  return report;
}

// ---------------------------------------------------------------------------
// Bundle

std::string Bundle::to_json() const {
  json m = json::array();
  for (const auto& x : models) m.push_back({{"name", x.name}, {"path", x.path}, {"weight", x.weight}});
  return json{{"format", "authcode.bundle.v1"},
              {"pc", projection_to(pc)},
              {"app", projection_to(app)},
              {"sensor", projection_to(sensor)},
              {"models", m}}
      .dump(2);
}

Bundle Bundle::from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    if (j.value("format", std::string()) != "authcode.bundle.v1") {
      throw Error(ErrorCode::validation, "not a deployment bundle (format authcode.bundle.v1 expected)");
    }
    Bundle b;
    b.pc = projection_from(j.at("pc"));
    b.app = projection_from(j.at("app"));
    b.sensor = projection_from(j.at("sensor"));
    for (const auto& m : j.at("models")) {
      b.models.push_back({m.at("name").get<std::string>(), m.at("path").get<std::string>(), m.value("weight", 0.0)});
    }
    return b;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed bundle: ") + e.what());
  }
}

void Bundle::save(const std::string& path) const { write_text(path, to_json()); }

Bundle Bundle::load(const std::string& path) { return from_json(read_text(path)); }

std::string Bundle::service_config_json() const {
  json m = json::array();
  for (const auto& x : models) m.push_back({{"name", x.name}, {"path", x.path}, {"weight", x.weight}});
  return json{{"window_s", 60.0}, {"models", m}}.dump();
}

std::vector<service::IngestEnvelope> envelopes_from_vectors(std::span<const features::MinuteFeatureVector> vectors,
                                                            const Bundle& bundle) {
  std::vector<service::IngestEnvelope> out;
  for (const auto& v : vectors) {
    service::IngestEnvelope e;
    e.user_id = v.user_id;
    e.device_id = v.device_id;
    e.minute_index = v.minute_index;
    if (v.device_kind == features::DeviceKind::pc) {
      e.device_kind = "pc";
      e.schema_id = std::string(service::kPcSchema);
      e.features = bundle.pc.project(v);
      e.features.resize(pipeline::kPcBlock, 0.0);
    } else {
      e.device_kind = "mobile";
      e.schema_id = std::string(service::kMobileSchema);
      e.features.assign(pipeline::kMobileAppBlock + pipeline::kSensorBlock, 0.0);
      std::vector<std::string> active;
      if (v.active_groups & features::kMobileAppGroup) {
        auto a = bundle.app.project(v);
        std::copy(a.begin(), a.end(), e.features.begin());
        active.push_back("app");
      }
      if (v.active_groups & features::kSensorGroup) {
        auto s = bundle.sensor.project(v);
        std::copy(s.begin(), s.end(), e.features.begin() + pipeline::kMobileAppBlock);
        active.push_back("sensor");
      }
      if (active.empty()) continue;
      e.active_blocks = active;
    }
    out.push_back(std::move(e));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.minute_index, a.device_id) < std::tie(b.minute_index, b.device_id);
  });
  return out;
}

std::vector<service::IngestEnvelope> envelopes_from_events(std::span<const events::RawEvent> events,
                                                           const Bundle& bundle, double window_s) {
  auto corpus = corpus_from_events(events, window_s);
  auto all = corpus.pc;
  all.insert(all.end(), corpus.mobile.begin(), corpus.mobile.end());
  return envelopes_from_vectors(all, bundle);
}

}  // namespace authcode::experiment
