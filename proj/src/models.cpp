#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "model_impl.hpp"

namespace authcode::models {

namespace {

constexpr std::string_view kModelFormat = "authcode.model.v1";

struct Bound {
  std::string name;
  double lo, hi;
  bool integer;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

// Structural limits checked by ModelSpec::validate. The searchable ranges are
// narrower; small values (k = 1, a single tree) stay legal for direct use.
const std::vector<Bound>& bounds(Family f) {
  static const std::map<Family, std::vector<Bound>> table{
      {Family::naive_bayes, {}},
      {Family::knn, {{"k", 1, kInf, true}}},
      {Family::random_forest,
       {{"number_of_trees", 1, kInf, true},
        {"max_features", 0, kInf, false},
        {"bootstrap", 0, 1, true},
        {"max_depth", -1, kInf, true},
        {"min_samples_split", 2, kInf, true}}},
      {Family::gbt,
       {{"lr", 1e-6, 1, false},
        {"max_depth", 1, 64, true},
        {"min_child_weight", 0, kInf, false},
        {"gamma", 0, kInf, false},
        {"colsample_bytree", 1e-6, 1, false},
        {"rounds", 1, kInf, true},
        {"lambda", 0, kInf, false}}},
      {Family::mlp,
       {{"layers", 0, 16, true},
        {"neurons_per_layer", 1, kInf, true},
        {"max_epochs", 1, kInf, true},
        {"batch_size", 1, kInf, true},
        {"learning_rate", 1e-9, 1, false},
        {"patience", 1, kInf, true}}},
      {Family::lstm,
       {{"lstm_layers", 1, 8, true},
        {"nodes_per_layer", 1, kInf, true},
        {"dropout", 0, 0.95, false},
        {"max_epochs", 1, kInf, true},
        {"batch_size", 1, kInf, true},
        {"learning_rate", 1e-9, 1, false},
        {"patience", 1, kInf, true}}},
  };
  return table.at(f);
}

std::vector<int> encode_labels(std::span<const std::string> labels, const std::vector<std::string>& classes,
                               bool strict) {
  std::vector<int> y;
  y.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = std::lower_bound(classes.begin(), classes.end(), l);
    if (it == classes.end() || *it != l) {
      if (strict) throw Error(ErrorCode::validation, "label '" + l + "' is not a known class", l);
      y.push_back(-1);
      continue;
    }
    y.push_back(static_cast<int>(it - classes.begin()));
  }
  return y;
}

void check_finite_rows(const pipeline::LabeledDataset& ds, const char* what) {
  for (std::size_t i = 0; i < ds.rows.data.size(); ++i) {
    if (!std::isfinite(ds.rows.data[i])) {
      const std::size_t r = i / ds.width(), c = i % ds.width();
      throw Error(ErrorCode::validation, std::string(what) + " row " + std::to_string(r) + " feature '" +
                                             ds.feature_names[c] + "' is not finite");
    }
  }
}

Prediction make_prediction(const std::vector<std::string>& classes, std::vector<double> scores) {
  double sum = 0.0;
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0) throw Error(ErrorCode::numeric, "model produced an invalid class score");
    sum += s;
  }
  if (!(sum > 0.0)) throw Error(ErrorCode::numeric, "model produced all-zero class scores");
  for (double& s : scores) s /= sum;
  Prediction p;
  p.label_index = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  p.label = classes[p.label_index];
  p.scores = std::move(scores);
  return p;
}

json spec_json(const ModelSpec& s) {
  return {{"family", std::string(to_string(s.family))}, {"hyper", s.hyper}, {"seed", s.seed}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.family = parse_family(j.at("family").get<std::string>());
  s.hyper = j.value("hyper", std::map<std::string, double>{});
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const MlpNet* as_mlp(const TrainedModel& m) { return dynamic_cast<const MlpNet*>(m.estimator.get()); }
const LstmNet* as_lstm(const TrainedModel& m) { return dynamic_cast<const LstmNet*>(m.estimator.get()); }

}  // namespace

std::string_view to_string(Family family) {
  switch (family) {
    case Family::naive_bayes: return "naive_bayes";
    case Family::knn: return "knn";
    case Family::random_forest: return "random_forest";
    case Family::gbt: return "gbt";
    case Family::mlp: return "mlp";
    case Family::lstm: return "lstm";
  }
  return "unknown";
}

Family parse_family(std::string_view text) {
  for (auto f : {Family::naive_bayes, Family::knn, Family::random_forest, Family::gbt, Family::mlp, Family::lstm}) {
    if (to_string(f) == text) return f;
  }
  throw Error(ErrorCode::invalid_argument, "unknown model family '" + std::string(text) +
                                               "' (expected naive_bayes, knn, random_forest, gbt, mlp or lstm)");
}

const std::vector<HyperRange>& hyper_ranges(Family family) {
  static const std::map<Family, std::vector<HyperRange>> table{
      {Family::naive_bayes, {}},
      {Family::knn, {{"k", 3, 20, true}}},
      {Family::random_forest, {{"number_of_trees", 50, 1000, true}}},
      {Family::gbt,
       {{"lr", 0.01, 0.30, false},
        {"max_depth", 3, 15, true},
        {"min_child_weight", 1, 7, false},
        {"gamma", 0, 0.5, false},
        {"colsample_bytree", 0.3, 0.7, false}}},
      {Family::mlp, {{"layers", 1, 5, true}, {"neurons_per_layer", 50, 1000, true}}},
      {Family::lstm, {{"lstm_layers", 1, 4, true}, {"nodes_per_layer", 16, 256, true}, {"dropout", 0, 0.5, false}}},
  };
  return table.at(family);
}

double ModelSpec::get(const std::string& name, double fallback) const {
  auto it = hyper.find(name);
  return it == hyper.end() ? fallback : it->second;
}

void ModelSpec::validate() const {
  const auto& b = bounds(family);
  for (const auto& [name, value] : hyper) {
    const Bound* bound = nullptr;
    for (const auto& x : b) {
      if (x.name == name) bound = &x;
    }
    if (bound == nullptr && family == Family::lstm && name.rfind("nodes_layer_", 0) == 0) {
      static const Bound per_layer{"nodes_layer", 1, kInf, true};
      bound = &per_layer;
    }
    if (bound == nullptr) {
      throw Error(ErrorCode::invalid_argument, "hyperparameter '" + name + "' does not apply to " +
                                                   std::string(to_string(family)), name);
    }
    if (!std::isfinite(value) || value < bound->lo || value > bound->hi ||
        (bound->integer && value != std::floor(value))) {
      throw Error(ErrorCode::invalid_argument, std::string(to_string(family)) + " hyperparameter " + name + "=" +
                                                   format_double(value) + " is out of range", name);
    }
  }
}

std::string ModelSpec::describe() const {
  std::string s(to_string(family));
  s += "(";
  bool first = true;
  for (const auto& [k, v] : hyper) {
    if (!first) s += ",";
    s += k + "=" + format_double(v);
    first = false;
  }
  return s + ")";
}

ModelSpec default_spec(Family family, std::uint64_t seed) {
  ModelSpec s;
  s.family = family;
  s.seed = seed;
  if (family == Family::lstm) {
    s.hyper = {{"lstm_layers", 2}, {"nodes_layer_1", 64}, {"nodes_layer_2", 32}, {"dropout", 0.2}};
    return s;
  }
  for (const auto& r : hyper_ranges(family)) {
    double mid = (r.lo + r.hi) / 2.0;
    s.hyper[r.name] = r.integer ? std::floor(mid) : mid;
  }
  return s;
}

// ---------------------------------------------------------------------------
// TrainedModel

Prediction TrainedModel::predict(std::span<const double> x) const {
  if (is_sequence()) throw Error(ErrorCode::schema_mismatch, "lstm models take sequence windows");
  if (x.size() != feature_names.size()) {
    throw Error(ErrorCode::schema_mismatch, "input has " + std::to_string(x.size()) + " features, model expects " +
                                                std::to_string(feature_names.size()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw Error(ErrorCode::validation, "input vector contains a non-finite value");
  }
  return make_prediction(classes, estimator->predict_proba(x));
}

Prediction TrainedModel::predict(const pipeline::SequenceWindow& window) const {
  if (!is_sequence()) throw Error(ErrorCode::schema_mismatch, "flat models take feature vectors, not sequence windows");
  if (window.length != window_length || window.width() != feature_names.size()) {
    throw Error(ErrorCode::schema_mismatch, "sequence window is " + std::to_string(window.length) + "x" +
                                                std::to_string(window.width()) + ", model expects " +
                                                std::to_string(window_length) + "x" +
                                                std::to_string(feature_names.size()));
  }
  return make_prediction(classes, estimator->predict_sequence(window));
}

std::vector<Prediction> TrainedModel::predict_all(const pipeline::LabeledDataset& ds) const {
  if (ds.feature_names != feature_names) {
    std::size_t i = 0;
    while (i < ds.feature_names.size() && i < feature_names.size() && ds.feature_names[i] == feature_names[i]) ++i;
    throw Error(ErrorCode::schema_mismatch, "dataset schema differs from the model schema at column " + std::to_string(i) +
                                                " (" + std::to_string(ds.width()) + " vs " +
                                                std::to_string(feature_names.size()) + " features)");
  }
  std::vector<Prediction> out;
  out.reserve(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) out.push_back(predict(ds.rows.row(r)));
  return out;
}

std::vector<Prediction> TrainedModel::predict_all(const pipeline::SequenceDataset& ds) const {
  std::vector<Prediction> out;
  out.reserve(ds.size());
  const auto* lstm = as_lstm(*this);
  if (lstm == nullptr) throw Error(ErrorCode::schema_mismatch, "flat models take feature vectors, not sequence windows");
  // Batched inference; each window is validated like a single prediction.
  const std::size_t chunk = 256;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    const std::size_t e = std::min(ds.size(), s + chunk);
    for (std::size_t i = s; i < e; ++i) {
      const auto& w = ds.windows[i];
      if (w.length != window_length || w.width() != feature_names.size()) {
        throw Error(ErrorCode::schema_mismatch, "sequence window shape does not match the model");
      }
      if (!w.has_activity()) throw Error(ErrorCode::validation, "sequence window has no active minute");
    }
    Mat p = lstm->forward(lstm->scale_batch(std::span<const pipeline::SequenceWindow>(ds.windows.data() + s, e - s)));
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      out.push_back(make_prediction(classes, std::vector<double>(p.col(c).data(), p.col(c).data() + p.rows())));
    }
  }
  return out;
}

std::map<std::string, double> TrainedModel::feature_importances() const {
  if (spec.family != Family::random_forest && spec.family != Family::gbt) {
    throw Error(ErrorCode::unsupported, "feature importances are available for random_forest and gbt only, not " +
                                            std::string(to_string(spec.family)));
  }
  auto raw = estimator->importances().value();
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < feature_names.size(); ++i) out[feature_names[i]] = total > 0.0 ? raw[i] / total : 0.0;
  return out;
}

std::string TrainedModel::to_json() const {
  json j;
  j["format"] = kModelFormat;
  j["spec"] = spec_json(spec);
  j["classes"] = classes;
  j["feature_names"] = feature_names;
  j["window_length"] = window_length;
  j["report"] = {{"iterations", report.iterations},
                 {"train_loss", report.train_loss},
                 {"validation_loss", report.validation_loss},
                 {"seconds", report.seconds}};
  j["estimator"] = estimator->to_json();
  return j.dump();
}

TrainedModel TrainedModel::from_json(const std::string& text) {
  TrainedModel m;
  try {
    auto j = json::parse(text);
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw Error(ErrorCode::validation, "unsupported model format '" + j.at("format").get<std::string>() + "'");
    }
    m.spec = spec_from_json(j.at("spec"));
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.window_length = j.at("window_length").get<std::size_t>();
    const auto& r = j.at("report");
    m.report.iterations = r.at("iterations").get<std::size_t>();
    m.report.train_loss = r.at("train_loss").get<std::vector<double>>();
    m.report.validation_loss = r.at("validation_loss").get<std::vector<double>>();
    m.report.seconds = r.at("seconds").get<double>();
    const auto& e = j.at("estimator");
    switch (m.spec.family) {
      case Family::naive_bayes: m.estimator = naive_bayes_from_json(e); break;
      case Family::knn: m.estimator = knn_from_json(e); break;
      case Family::random_forest: m.estimator = forest_from_json(e); break;
      case Family::gbt: m.estimator = gbt_from_json(e); break;
      case Family::mlp: m.estimator = MlpNet::from_json(e); break;
      case Family::lstm: m.estimator = LstmNet::from_json(e); break;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed model file: ") + e.what());
  }
  if (m.classes.empty()) throw Error(ErrorCode::validation, "model file has an empty class list");
  return m;
}

void TrainedModel::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  out << to_json() << '\n';
  if (!out) throw Error(ErrorCode::io, "failed writing " + path);
}

TrainedModel TrainedModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open model file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

// ---------------------------------------------------------------------------
// Training

TrainedModel train(const ModelSpec& spec, const pipeline::LabeledDataset& train_ds,
                   const pipeline::LabeledDataset* validation) {
  spec.validate();
  if (spec.family == Family::lstm) {
    throw Error(ErrorCode::invalid_argument, "lstm needs sequence windows, got a flat dataset");
  }
  train_ds.validate();
  if (train_ds.size() == 0) throw Error(ErrorCode::invalid_argument, "training set is empty");
  check_finite_rows(train_ds, "training");
  TrainedModel m;
  m.spec = spec;
  m.classes = train_ds.classes();
  m.feature_names = train_ds.feature_names;
  if (m.classes.size() < 2) throw Error(ErrorCode::invalid_argument, "training set needs at least 2 classes");
  const auto y = encode_labels(train_ds.labels, m.classes, true);
  const int k = static_cast<int>(m.classes.size());

  pipeline::LabeledDataset val;
  std::vector<int> yval;
  if (validation != nullptr && validation->size() > 0) {
    if (validation->feature_names != train_ds.feature_names) {
      throw Error(ErrorCode::schema_mismatch, "validation schema differs from the training schema");
    }
    check_finite_rows(*validation, "validation");
    auto enc = encode_labels(validation->labels, m.classes, false);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < enc.size(); ++i) {
      if (enc[i] >= 0) {
        keep.push_back(i);
        yval.push_back(enc[i]);
      }
    }
    val = validation->select_rows(keep);
  }

  const auto t0 = std::chrono::steady_clock::now();
  switch (spec.family) {
    case Family::naive_bayes: m.estimator = fit_naive_bayes(train_ds.rows, y, k); break;
    case Family::knn:
      m.estimator = fit_knn(train_ds.rows, y, k, static_cast<std::size_t>(spec.get("k", 11)));
      break;
    case Family::random_forest: m.estimator = fit_forest(train_ds.rows, y, k, spec, m.report); break;
    case Family::gbt: m.estimator = fit_gbt_estimator(train_ds.rows, y, k, spec, m.report); break;
    case Family::mlp:
      m.estimator = fit_mlp(train_ds, y, val.size() > 0 ? &val : nullptr, yval, k, spec, m.report);
      break;
    case Family::lstm: break;
  }
  m.report.seconds = seconds_since(t0);
  return m;
}

TrainedModel train(const ModelSpec& spec, const pipeline::SequenceDataset& train_ds,
                   const pipeline::SequenceDataset* validation) {
  spec.validate();
  if (spec.family != Family::lstm) {
    throw Error(ErrorCode::invalid_argument, std::string(to_string(spec.family)) +
                                                 " needs flat feature vectors, got sequence windows");
  }
  if (train_ds.size() == 0) throw Error(ErrorCode::invalid_argument, "training set is empty");
  const std::size_t T = train_ds.windows.front().length;
  const std::size_t width = train_ds.windows.front().width();
  for (const auto& w : train_ds.windows) {
    if (w.length != T || w.width() != width) throw Error(ErrorCode::validation, "training windows differ in shape");
    if (!w.has_activity()) throw Error(ErrorCode::validation, "training set contains a window without activity");
  }
  TrainedModel m;
  m.spec = spec;
  std::set<std::string> cls(train_ds.labels.begin(), train_ds.labels.end());
  m.classes.assign(cls.begin(), cls.end());
  if (m.classes.size() < 2) throw Error(ErrorCode::invalid_argument, "training set needs at least 2 classes");
  m.window_length = T;
  for (std::size_t j = 0; j < width; ++j) m.feature_names.push_back("f" + std::to_string(j));
  const auto y = encode_labels(train_ds.labels, m.classes, true);

  pipeline::SequenceDataset val;
  std::vector<int> yval;
  if (validation != nullptr) {
    auto enc = encode_labels(validation->labels, m.classes, false);
    for (std::size_t i = 0; i < enc.size(); ++i) {
      const auto& w = validation->windows[i];
      if (enc[i] < 0 || w.length != T || w.width() != width || !w.has_activity()) continue;
      val.windows.push_back(w);
      val.labels.push_back(validation->labels[i]);
      yval.push_back(enc[i]);
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  m.estimator = fit_lstm(train_ds, y, val.size() > 0 ? &val : nullptr, yval, static_cast<int>(m.classes.size()), spec,
                         m.report);
  m.report.seconds = seconds_since(t0);
  return m;
}

// ---------------------------------------------------------------------------
// Network utilities

TrainedModel untrained_network(const ModelSpec& spec, std::vector<std::string> feature_names,
                               std::vector<std::string> classes, std::size_t window_length) {
  if (classes.empty()) throw Error(ErrorCode::invalid_argument, "class list is empty");
  std::sort(classes.begin(), classes.end());
  TrainedModel m;
  m.spec = spec;
  m.classes = std::move(classes);
  m.feature_names = std::move(feature_names);
  std::mt19937_64 rng(mix_seed(spec.seed, 0x1417));
  if (spec.family == Family::mlp) {
    auto net = std::make_shared<MlpNet>(m.feature_names.size(), mlp_hidden_layers(spec), m.classes.size());
    net->init(rng);
    m.estimator = net;
  } else if (spec.family == Family::lstm) {
    if (window_length < 1) throw Error(ErrorCode::invalid_argument, "lstm needs a window length");
    m.window_length = window_length;
    auto net = std::make_shared<LstmNet>(m.feature_names.size(), lstm_layer_sizes(spec), m.classes.size(),
                                         spec.get("dropout", 0.2));
    net->init(rng);
    m.estimator = net;
  } else {
    throw Error(ErrorCode::unsupported, "only mlp and lstm are networks");
  }
  return m;
}

std::vector<double> network_parameters(const TrainedModel& model) {
  if (const auto* mlp = as_mlp(model)) return mlp->params;
  if (const auto* lstm = as_lstm(model)) return lstm->params;
  throw Error(ErrorCode::unsupported, "model is not a network");
}

TrainedModel with_parameters(const TrainedModel& model, std::vector<double> params) {
  TrainedModel out = model;
  if (const auto* mlp = as_mlp(model)) {
    auto net = std::make_shared<MlpNet>(*mlp);
    if (params.size() != net->params.size()) throw Error(ErrorCode::validation, "parameter count mismatch");
    net->params = std::move(params);
    out.estimator = net;
  } else if (const auto* lstm = as_lstm(model)) {
    auto net = std::make_shared<LstmNet>(*lstm);
    if (params.size() != net->params.size()) throw Error(ErrorCode::validation, "parameter count mismatch");
    net->params = std::move(params);
    out.estimator = net;
  } else {
    throw Error(ErrorCode::unsupported, "model is not a network");
  }
  return out;
}

double network_loss(const TrainedModel& model, const pipeline::LabeledDataset& batch, std::vector<double>* grad) {
  const auto* mlp = as_mlp(model);
  if (mlp == nullptr) throw Error(ErrorCode::unsupported, "model is not an mlp");
  if (batch.size() == 0) throw Error(ErrorCode::invalid_argument, "batch is empty");
  if (batch.width() != mlp->inputs) throw Error(ErrorCode::schema_mismatch, "batch width does not match the network");
  auto y = encode_labels(batch.labels, model.classes, true);
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  const double l = mlp->loss(mlp->scale_batch(batch.rows, idx), y, grad);
  if (!std::isfinite(l)) throw Error(ErrorCode::numeric, "network loss is not finite");
  return l;
}

double network_loss(const TrainedModel& model, const pipeline::SequenceDataset& batch, std::vector<double>* grad) {
  const auto* lstm = as_lstm(model);
  if (lstm == nullptr) throw Error(ErrorCode::unsupported, "model is not an lstm");
  if (batch.size() == 0) throw Error(ErrorCode::invalid_argument, "batch is empty");
  auto y = encode_labels(batch.labels, model.classes, true);
  const double l = lstm->loss(lstm->scale_batch(batch.windows), y, grad, nullptr);
  if (!std::isfinite(l)) throw Error(ErrorCode::numeric, "network loss is not finite");
  return l;
}

namespace {

template <typename Batch>
GradientCheck check_gradients(const TrainedModel& model, const Batch& batch, std::size_t min_parameters,
                              std::uint64_t seed) {
  std::vector<double> analytic;
  network_loss(model, batch, &analytic);
  auto params = network_parameters(model);
  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng() % i)]);
  idx.resize(std::min(idx.size(), std::max<std::size_t>(min_parameters, 1)));
  GradientCheck out;
  for (auto i : idx) {
    const double step = 1e-5 * std::max(1.0, std::fabs(params[i]));
    auto p = params;
    p[i] = params[i] + step;
    const double up = network_loss(with_parameters(model, p), batch, nullptr);
    p[i] = params[i] - step;
    const double down = network_loss(with_parameters(model, p), batch, nullptr);
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-4});
    out.max_relative_error = std::max(out.max_relative_error, std::fabs(analytic[i] - numeric) / denom);
    ++out.checked;
  }
  return out;
}

}  // namespace

GradientCheck gradient_check(const TrainedModel& model, const pipeline::LabeledDataset& batch,
                             std::size_t min_parameters, std::uint64_t seed) {
  return check_gradients(model, batch, min_parameters, seed);
}

GradientCheck gradient_check(const TrainedModel& model, const pipeline::SequenceDataset& batch,
                             std::size_t min_parameters, std::uint64_t seed) {
  return check_gradients(model, batch, min_parameters, seed);
}

// ---------------------------------------------------------------------------
// Metrics

ClassCounts ConfusionMatrix::for_class(std::size_t c) const {
  ClassCounts k;
  std::size_t total = 0, row = 0, col = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t j = 0; j < counts.size(); ++j) {
      total += counts[i][j];
      if (i == c) row += counts[i][j];
      if (j == c) col += counts[i][j];
    }
  }
  k.tp = counts[c][c];
  k.fn = row - k.tp;
  k.fp = col - k.tp;
  k.tn = total - k.tp - k.fn - k.fp;
  return k;
}

double f1_score(double precision, double recall) {
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

Evaluation evaluate(std::span<const std::string> predictions, std::span<const std::string> truth) {
  if (predictions.size() != truth.size()) {
    throw Error(ErrorCode::invalid_argument, "predictions (" + std::to_string(predictions.size()) + ") and truth (" +
                                                 std::to_string(truth.size()) + ") differ in length");
  }
  if (truth.empty()) throw Error(ErrorCode::invalid_argument, "cannot evaluate zero predictions");
  std::set<std::string> cls(truth.begin(), truth.end());
  cls.insert(predictions.begin(), predictions.end());
  Evaluation ev;
  ev.confusion.classes.assign(cls.begin(), cls.end());
  const auto& classes = ev.confusion.classes;
  ev.confusion.counts.assign(classes.size(), std::vector<std::size_t>(classes.size(), 0));
  auto index = [&](const std::string& s) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), s) - classes.begin());
  };
  for (std::size_t i = 0; i < truth.size(); ++i) ++ev.confusion.counts[index(truth[i])][index(predictions[i])];

  std::size_t present = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto k = ev.confusion.for_class(c);
    ClassMetrics m;
    m.label = classes[c];
    m.support = k.tp + k.fn;
    m.precision = k.tp + k.fp == 0 ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    m.recall = k.tp + k.fn == 0 ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    // Same value as the harmonic mean, computed from counts to avoid rounding.
    m.f1 = k.tp == 0 ? 0.0 : 2.0 * static_cast<double>(k.tp) / static_cast<double>(2 * k.tp + k.fp + k.fn);
    if (m.support > 0) {
      ++present;
      ev.metrics.macro_precision += m.precision;
      ev.metrics.macro_recall += m.recall;
      ev.metrics.macro_f1 += m.f1;
    }
    ev.metrics.per_class.push_back(m);
  }
  ev.metrics.macro_precision /= static_cast<double>(present);
  ev.metrics.macro_recall /= static_cast<double>(present);
  ev.metrics.macro_f1 /= static_cast<double>(present);
  return ev;
}

Evaluation evaluate(const TrainedModel& model, const pipeline::LabeledDataset& ds) {
  auto preds = model.predict_all(ds);
  std::vector<std::string> labels;
  for (auto& p : preds) labels.push_back(std::move(p.label));
  return evaluate(labels, ds.labels);
}

Evaluation evaluate(const TrainedModel& model, const pipeline::SequenceDataset& ds) {
  auto preds = model.predict_all(ds);
  std::vector<std::string> labels;
  for (auto& p : preds) labels.push_back(std::move(p.label));
  return evaluate(labels, ds.labels);
}

std::string metrics_csv(const Metrics& metrics) {
  std::ostringstream out;
  out << "class,precision,recall,f1,support\n";
  std::size_t total = 0;
  for (const auto& c : metrics.per_class) {
    out << csv_field(c.label) << ',' << format_double(c.precision) << ',' << format_double(c.recall) << ','
        << format_double(c.f1) << ',' << c.support << '\n';
    total += c.support;
  }
  out << "macro," << format_double(metrics.macro_precision) << ',' << format_double(metrics.macro_recall) << ','
      << format_double(metrics.macro_f1) << ',' << total << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Search

namespace {

std::vector<ModelSpec> enumerate_grid(Family family, const SearchSpace& space, std::size_t budget, std::uint64_t seed,
                                      const std::map<std::string, double>& fixed, std::vector<std::size_t>& order) {
  if (budget < 1) throw Error(ErrorCode::invalid_argument, "search budget must be >= 1");
  if (space.empty() && family != Family::naive_bayes) {
    throw Error(ErrorCode::invalid_argument, "search space is empty");
  }
  const auto& ranges = hyper_ranges(family);
  std::size_t total = 1;
  for (const auto& [name, values] : space) {
    if (values.empty()) throw Error(ErrorCode::invalid_argument, "search space for '" + name + "' is empty", name);
    for (const auto& r : ranges) {
      if (r.name != name) continue;
      for (double v : values) {
        if (v < r.lo || v > r.hi || (r.integer && v != std::floor(v))) {
          throw Error(ErrorCode::invalid_argument, name + "=" + format_double(v) + " lies outside the searchable range [" +
                                                       format_double(r.lo) + ", " + format_double(r.hi) + "]",
                      name);
        }
      }
    }
    total *= values.size();
  }
  std::vector<std::size_t> chosen(total);
  std::iota(chosen.begin(), chosen.end(), 0);
  if (total > budget) {
    std::mt19937_64 rng(mix_seed(seed, 0x5ea7c4));
    for (std::size_t i = 0; i < budget; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng() % (total - i));
      std::swap(chosen[i], chosen[j]);
    }
    chosen.resize(budget);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<ModelSpec> specs;
  for (auto flat : chosen) {
    ModelSpec s;
    s.family = family;
    s.seed = seed;
    s.hyper = fixed;
    // Last key varies fastest.
    std::size_t rest = flat;
    std::vector<std::pair<std::string, double>> picks;
    for (auto it = space.rbegin(); it != space.rend(); ++it) {
      picks.emplace_back(it->first, it->second[rest % it->second.size()]);
      rest /= it->second.size();
    }
    for (const auto& [k, v] : picks) s.hyper[k] = v;
    specs.push_back(std::move(s));
  }
  order = std::move(chosen);
  return specs;
}

template <typename Data>
SearchResult run_search(Family family, const SearchSpace& space, const Data& train_ds, const Data& validation,
                        std::size_t budget, std::uint64_t seed, const std::map<std::string, double>& fixed) {
  std::vector<std::size_t> order;
  auto specs = enumerate_grid(family, space, budget, seed, fixed, order);
  SearchResult result;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto model = train(specs[i], train_ds, &validation);
    auto ev = evaluate(model, validation);
    result.leaderboard.push_back(LeaderboardEntry{specs[i], ev.metrics.macro_f1, model.report.seconds, order[i]});
  }
  std::stable_sort(result.leaderboard.begin(), result.leaderboard.end(),
                   [](const LeaderboardEntry& a, const LeaderboardEntry& b) {
                     if (a.macro_f1 != b.macro_f1) return a.macro_f1 > b.macro_f1;
                     return a.order < b.order;
                   });
  result.best = result.leaderboard.front().spec;
  return result;
}

}  // namespace

SearchResult grid_search(Family family, const SearchSpace& space, const pipeline::LabeledDataset& train_ds,
                         const pipeline::LabeledDataset& validation, std::size_t budget, std::uint64_t seed,
                         const std::map<std::string, double>& fixed) {
  if (family == Family::lstm) throw Error(ErrorCode::invalid_argument, "lstm search needs sequence data");
  return run_search(family, space, train_ds, validation, budget, seed, fixed);
}

SearchResult grid_search(Family family, const SearchSpace& space, const pipeline::SequenceDataset& train_ds,
                         const pipeline::SequenceDataset& validation, std::size_t budget, std::uint64_t seed,
                         const std::map<std::string, double>& fixed) {
  if (family != Family::lstm) throw Error(ErrorCode::invalid_argument, "sequence search supports lstm only");
  return run_search(family, space, train_ds, validation, budget, seed, fixed);
}

std::string leaderboard_csv(const SearchResult& result) {
  std::ostringstream out;
  out << "rank,grid_index,spec,macro_f1,train_seconds\n";
  for (std::size_t i = 0; i < result.leaderboard.size(); ++i) {
    const auto& e = result.leaderboard[i];
    out << i + 1 << ',' << e.order << ',' << csv_field(e.spec.describe()) << ',' << format_double(e.macro_f1) << ','
        << format_double(e.seconds) << '\n';
  }
  return out.str();
}

}  // namespace authcode::models
