#include "authcode/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <unordered_map>

#include "json.hpp"

namespace authcode::pipeline {

using features::MinuteFeatureVector;
using json = nlohmann::json;

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

bool is_integer(double v) { return std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 9e15; }

}  // namespace

// ---------------------------------------------------------------------------
// LabeledDataset

void LabeledDataset::validate() const {
  if (rows.cols != feature_names.size() && rows.rows > 0) {
    throw Error(ErrorCode::validation, "dataset has " + std::to_string(rows.cols) + " columns but " +
                                           std::to_string(feature_names.size()) + " feature names");
  }
  if (labels.size() != rows.rows || minute_index.size() != rows.rows || provenance.size() != rows.rows) {
    throw Error(ErrorCode::validation, "dataset row metadata does not match the row count");
  }
  std::set<std::string> seen;
  for (const auto& n : feature_names) {
    if (!seen.insert(n).second) throw Error(ErrorCode::validation, "duplicate feature name '" + n + "'");
  }
}

std::optional<std::size_t> LabeledDataset::column(std::string_view name) const {
  for (std::size_t i = 0; i < feature_names.size(); ++i) {
    if (feature_names[i] == name) return i;
  }
  return std::nullopt;
}

void LabeledDataset::append(std::span<const double> values, std::string label, std::int64_t minute,
                            std::string source) {
  if (values.size() != feature_names.size()) {
    throw Error(ErrorCode::validation, "row has " + std::to_string(values.size()) + " values, expected " +
                                           std::to_string(feature_names.size()));
  }
  if (rows.rows == 0) rows.cols = feature_names.size();
  rows.push_row(values);
  labels.push_back(std::move(label));
  minute_index.push_back(minute);
  provenance.push_back(std::move(source));
}

LabeledDataset LabeledDataset::select_rows(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.feature_names = feature_names;
  out.rows = Matrix(0, width());
  out.rows.data.reserve(indices.size() * width());
  for (auto i : indices) {
    out.rows.data.insert(out.rows.data.end(), rows.row(i).begin(), rows.row(i).end());
    ++out.rows.rows;
    out.labels.push_back(labels[i]);
    out.minute_index.push_back(minute_index[i]);
    out.provenance.push_back(provenance[i]);
  }
  return out;
}

LabeledDataset LabeledDataset::select_columns(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  for (auto c : indices) out.feature_names.push_back(feature_names.at(c));
  out.rows = Matrix(rows.rows, indices.size());
  for (std::size_t r = 0; r < rows.rows; ++r) {
    for (std::size_t j = 0; j < indices.size(); ++j) out.rows(r, j) = rows(r, indices[j]);
  }
  out.labels = labels;
  out.minute_index = minute_index;
  out.provenance = provenance;
  return out;
}

LabeledDataset LabeledDataset::select_columns(std::span<const std::string> names) const {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < feature_names.size(); ++i) index.emplace(feature_names[i], i);
  std::vector<std::size_t> cols;
  for (const auto& n : names) {
    auto it = index.find(n);
    if (it == index.end()) throw Error(ErrorCode::schema_mismatch, "dataset has no feature '" + n + "'", n);
    cols.push_back(it->second);
  }
  return select_columns(std::span<const std::size_t>(cols));
}

std::vector<std::string> LabeledDataset::classes() const {
  std::set<std::string> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

LabeledDataset dataset_from_vectors(std::span<const MinuteFeatureVector> vectors,
                                    const features::FeatureSchema& schema) {
  std::set<features::DigraphKey> digraphs;
  for (const auto& v : vectors) {
    if (v.schema_id != schema.id) {
      throw Error(ErrorCode::schema_mismatch, "vector schema " + v.schema_id + " does not match " + schema.id);
    }
    if (schema.has_digraphs) {
      for (const auto& [k, st] : v.digraphs) digraphs.insert(k);
    }
  }
  LabeledDataset ds;
  ds.feature_names = schema.dense_names;
  for (const auto& k : digraphs) {
    ds.feature_names.push_back(features::digraph_count_name(k.first, k.second));
    ds.feature_names.push_back(features::digraph_time_name(k.first, k.second));
  }
  ds.rows = Matrix(0, ds.feature_names.size());
  std::vector<double> row;
  for (const auto& v : vectors) {
    row = v.dense;
    for (const auto& k : digraphs) {
      auto it = v.digraphs.find(k);
      row.push_back(it == v.digraphs.end() ? 0.0 : it->second.count);
      row.push_back(it == v.digraphs.end() ? 0.0 : it->second.mean_ms);
    }
    ds.append(row, v.user_id, v.minute_index, std::string(features::to_string(v.device_kind)));
  }
  return ds;
}

LabeledDataset dataset_from_vectors(std::span<const MinuteFeatureVector> vectors, std::span<const std::string> names) {
  LabeledDataset ds;
  ds.feature_names.assign(names.begin(), names.end());
  ds.rows = Matrix(0, names.size());
  std::vector<double> row(names.size());
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < names.size(); ++i) row[i] = v.value(names[i]);
    ds.append(row, v.user_id, v.minute_index, std::string(features::to_string(v.device_kind)));
  }
  return ds;
}

void write_dataset_csv(std::ostream& out, const LabeledDataset& ds) {
  ds.validate();
  out << "user_id,device_kind,minute_index";
  for (const auto& n : ds.feature_names) out << ',' << csv_field(n);
  out << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    out << csv_field(ds.labels[r]) << ',' << csv_field(ds.provenance[r]) << ',' << ds.minute_index[r];
    for (double v : ds.rows.row(r)) out << ',' << format_double(v);
    out << '\n';
  }
}

LabeledDataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::validation, "dataset csv is empty");
  auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "user_id" || header[1] != "device_kind" || header[2] != "minute_index") {
    throw Error(ErrorCode::validation, "dataset csv header must start with user_id,device_kind,minute_index");
  }
  LabeledDataset ds;
  ds.feature_names.assign(header.begin() + 3, header.end());
  ds.rows = Matrix(0, ds.feature_names.size());
  std::size_t lineno = 1;
  std::vector<double> row(ds.feature_names.size());
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw Error(ErrorCode::validation, "dataset csv line " + std::to_string(lineno) + ": expected " +
                                             std::to_string(header.size()) + " fields, got " +
                                             std::to_string(f.size()));
    }
    try {
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = parse_double(f[i + 3], ds.feature_names[i]);
      ds.append(row, f[0], parse_integer(f[2], "minute_index"), f[1]);
    } catch (const Error& e) {
      throw Error(ErrorCode::validation, "dataset csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  ds.validate();
  return ds;
}

void write_dataset_file(const std::string& path, const LabeledDataset& ds) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  write_dataset_csv(out, ds);
  if (!out) throw Error(ErrorCode::io, "failed writing " + path);
}

LabeledDataset read_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open dataset " + path);
  return read_dataset_csv(in);
}

// ---------------------------------------------------------------------------
// Preprocessing

LabeledDataset drop_constant_features(const LabeledDataset& ds, RemovalReport* report) {
  if (ds.size() == 0) throw Error(ErrorCode::invalid_argument, "cannot drop constant features of an empty dataset");
  std::vector<std::size_t> keep;
  RemovalReport local;
  for (std::size_t c = 0; c < ds.width(); ++c) {
    const double first = ds.rows(0, c);
    bool constant = true;
    for (std::size_t r = 1; r < ds.size() && constant; ++r) constant = ds.rows(r, c) == first;
    if (constant) {
      local.dropped.push_back(ds.feature_names[c]);
    } else {
      keep.push_back(c);
    }
  }
  if (report != nullptr) *report = std::move(local);
  return ds.select_columns(std::span<const std::size_t>(keep));
}

const std::vector<std::string>& pc_categorical_columns() {
  static const std::vector<std::string> cols{"last_app", "penultimate_app"};
  return cols;
}

const std::vector<std::string>& mobile_categorical_columns() {
  static const std::vector<std::string> cols{"min_top_app", "day_top_app", "current_app", "previous_app",
                                             "predecessor_app"};
  return cols;
}

std::string OneHotEncoder::category_name(std::string_view column, long long code) {
  return std::string(column) + "=" + std::to_string(code);
}

std::string OneHotEncoder::unknown_name(std::string_view column) { return std::string(column) + "=unknown"; }

const OneHotEncoder::Column* OneHotEncoder::find(std::string_view name) const {
  for (const auto& c : columns_) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

OneHotEncoder OneHotEncoder::fit(const LabeledDataset& ds, std::span<const std::string> columns) {
  OneHotEncoder enc;
  for (const auto& name : columns) {
    auto c = ds.column(name);
    if (!c) throw Error(ErrorCode::invalid_argument, "unknown categorical column '" + name + "'", name);
    std::set<long long> cats;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      double v = ds.rows(r, *c);
      if (!is_integer(v)) {
        throw Error(ErrorCode::validation, "categorical column '" + name + "' holds non-integer value " +
                                               format_double(v));
      }
      cats.insert(static_cast<long long>(v));
    }
    enc.columns_.push_back(Column{name, {cats.begin(), cats.end()}});
  }
  return enc;
}

LabeledDataset OneHotEncoder::transform(const LabeledDataset& ds) const {
  for (const auto& c : columns_) {
    if (!ds.column(c.name)) throw Error(ErrorCode::schema_mismatch, "dataset lacks categorical column '" + c.name + "'");
  }
  struct Slot {
    std::size_t source;
    const Column* encoded;
  };
  std::vector<Slot> slots;
  LabeledDataset out;
  for (std::size_t i = 0; i < ds.width(); ++i) {
    const Column* enc = find(ds.feature_names[i]);
    slots.push_back({i, enc});
    if (enc == nullptr) {
      out.feature_names.push_back(ds.feature_names[i]);
    } else {
      for (auto code : enc->categories) out.feature_names.push_back(category_name(enc->name, code));
      out.feature_names.push_back(unknown_name(enc->name));
    }
  }
  out.rows = Matrix(0, out.feature_names.size());
  std::vector<double> row;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    row.clear();
    for (const auto& s : slots) {
      double v = ds.rows(r, s.source);
      if (s.encoded == nullptr) {
        row.push_back(v);
        continue;
      }
      const auto& cats = s.encoded->categories;
      bool hit = false;
      for (auto code : cats) {
        bool match = is_integer(v) && static_cast<long long>(v) == code;
        hit = hit || match;
        row.push_back(match ? 1.0 : 0.0);
      }
      row.push_back(hit ? 0.0 : 1.0);
    }
    out.append(row, ds.labels[r], ds.minute_index[r], ds.provenance[r]);
  }
  return out;
}

std::string OneHotEncoder::to_json() const {
  json j = json::array();
  for (const auto& c : columns_) j.push_back({{"name", c.name}, {"categories", c.categories}});
  return j.dump();
}

OneHotEncoder OneHotEncoder::from_json(const std::string& text) {
  OneHotEncoder enc;
  try {
    for (const auto& c : json::parse(text)) {
      enc.columns_.push_back(Column{c.at("name").get<std::string>(), c.at("categories").get<std::vector<long long>>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed encoder description: ") + e.what());
  }
  return enc;
}

LabeledDataset one_hot_encode(const LabeledDataset& ds, std::span<const std::string> columns, OneHotEncoder* fitted) {
  auto enc = OneHotEncoder::fit(ds, columns);
  auto out = enc.transform(ds);
  if (fitted != nullptr) *fitted = std::move(enc);
  return out;
}

std::vector<std::string> select_by_importance(std::span<const std::string> names,
                                              const std::map<std::string, double>& importances,
                                              const SelectionMode& mode, SelectionReport* report) {
  std::vector<std::pair<std::string, double>> ranked;
  double total = 0.0;
  for (const auto& n : names) {
    auto it = importances.find(n);
    if (it == importances.end()) throw Error(ErrorCode::invalid_argument, "no importance for feature '" + n + "'", n);
    if (!(it->second >= 0.0) || !std::isfinite(it->second)) {
      throw Error(ErrorCode::invalid_argument, "importance of '" + n + "' must be a finite value >= 0", n);
    }
    ranked.emplace_back(n, it->second);
    total += it->second;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::invalid_argument, "importances are all zero");
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::size_t take = 0;
  if (mode.kind == SelectionMode::cumulative) {
    if (!(mode.threshold > 0.0 && mode.threshold <= 1.0)) {
      throw Error(ErrorCode::invalid_argument, "cumulative threshold must lie in (0,1], got " + format_double(mode.threshold));
    }
    const double target = mode.threshold * total * (1.0 - 1e-12);
    double acc = 0.0;
    while (take < ranked.size() && acc < target) acc += ranked[take++].second;
  } else {
    if (mode.k == 0 || mode.k > ranked.size()) {
      throw Error(ErrorCode::invalid_argument, "top_k k=" + std::to_string(mode.k) + " must lie in [1, " +
                                                   std::to_string(ranked.size()) + "]");
    }
    take = mode.k;
  }
  std::set<std::string> chosen;
  double kept_weight = 0.0;
  for (std::size_t i = 0; i < take; ++i) {
    chosen.insert(ranked[i].first);
    kept_weight += ranked[i].second;
  }
  std::vector<std::string> kept;
  for (const auto& n : names) {
    if (chosen.count(n) != 0) kept.push_back(n);
  }
  if (report != nullptr) *report = SelectionReport{kept, kept_weight, total};
  return kept;
}

LabeledDataset importance_select(const LabeledDataset& ds, const std::map<std::string, double>& importances,
                                 const SelectionMode& mode, SelectionReport* report) {
  auto kept = select_by_importance(ds.feature_names, importances, mode, report);
  return ds.select_columns(std::span<const std::string>(kept));
}

LabeledDataset add_minute_of_day(const LabeledDataset& ds) {
  if (ds.column("minute_of_day")) return ds;
  LabeledDataset out;
  out.feature_names = ds.feature_names;
  out.feature_names.push_back("minute_of_day");
  out.rows = Matrix(0, out.feature_names.size());
  std::vector<double> row;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    row.assign(ds.rows.row(r).begin(), ds.rows.row(r).end());
    row.push_back(static_cast<double>(ds.minute_index[r] - floor_div(ds.minute_index[r], 1440) * 1440));
    out.append(row, ds.labels[r], ds.minute_index[r], ds.provenance[r]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

json segments_json(const std::map<std::string, std::vector<std::int64_t>>& m) {
  json j = json::object();
  for (const auto& [user, ids] : m) j[user] = ids;
  return j;
}

std::map<std::string, std::vector<std::int64_t>> segments_from_json(const json& j) {
  std::map<std::string, std::vector<std::int64_t>> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = it.value().get<std::vector<std::int64_t>>();
  return m;
}

Split partition(const LabeledDataset& ds, const SplitManifest& manifest) {
  const auto seg = manifest.options.segment_minutes;
  auto lookup = [](const std::map<std::string, std::vector<std::int64_t>>& m) {
    std::map<std::string, std::set<std::int64_t>> out;
    for (const auto& [u, ids] : m) out[u].insert(ids.begin(), ids.end());
    return out;
  };
  auto train = lookup(manifest.train), val = lookup(manifest.validation), test = lookup(manifest.test);
  std::vector<std::size_t> tr, va, te;
  auto has = [](const std::map<std::string, std::set<std::int64_t>>& m, const std::string& u, std::int64_t id) {
    auto it = m.find(u);
    return it != m.end() && it->second.count(id) != 0;
  };
  for (std::size_t r = 0; r < ds.size(); ++r) {
    auto id = floor_div(ds.minute_index[r], seg);
    const auto& u = ds.labels[r];
    if (has(test, u, id)) {
      te.push_back(r);
    } else if (has(val, u, id)) {
      va.push_back(r);
    } else if (has(train, u, id)) {
      tr.push_back(r);
    }
  }
  return Split{ds.select_rows(tr), ds.select_rows(va), ds.select_rows(te), manifest};
}

}  // namespace

std::string SplitManifest::to_json() const {
  json j;
  j["format"] = "authcode.split.v1";
  j["segment_minutes"] = options.segment_minutes;
  j["test_fraction"] = options.test_fraction;
  j["val_fraction"] = options.val_fraction;
  j["seed"] = options.seed;
  j["train"] = segments_json(train);
  j["validation"] = segments_json(validation);
  j["test"] = segments_json(test);
  j["discarded"] = segments_json(discarded);
  return j.dump(2);
}

SplitManifest SplitManifest::from_json(const std::string& text) {
  SplitManifest m;
  try {
    auto j = json::parse(text);
    m.options.segment_minutes = j.at("segment_minutes").get<std::int64_t>();
    m.options.test_fraction = j.at("test_fraction").get<double>();
    m.options.val_fraction = j.at("val_fraction").get<double>();
    m.options.seed = j.at("seed").get<std::uint64_t>();
    m.train = segments_from_json(j.at("train"));
    m.validation = segments_from_json(j.at("validation"));
    m.test = segments_from_json(j.at("test"));
    m.discarded = segments_from_json(j.value("discarded", json::object()));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed split manifest: ") + e.what());
  }
  if (m.options.segment_minutes <= 0) throw Error(ErrorCode::validation, "split manifest segment_minutes must be > 0");
  return m;
}

Split segment_split(const LabeledDataset& ds, const SplitOptions& options) {
  ds.validate();
  if (options.segment_minutes <= 0) throw Error(ErrorCode::invalid_argument, "segment_minutes must be > 0");
  if (!(options.test_fraction > 0.0 && options.test_fraction < 0.5)) {
    throw Error(ErrorCode::invalid_argument, "test_fraction must lie in (0, 0.5)");
  }
  if (!(options.val_fraction >= 0.0 && options.val_fraction < 0.5)) {
    throw Error(ErrorCode::invalid_argument, "val_fraction must lie in [0, 0.5)");
  }
  std::map<std::string, std::set<std::int64_t>> segments;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    segments[ds.labels[r]].insert(floor_div(ds.minute_index[r], options.segment_minutes));
  }
  SplitManifest manifest;
  manifest.options = options;
  for (const auto& [user, ids_set] : segments) {
    std::vector<std::int64_t> ids(ids_set.begin(), ids_set.end());
    const double n = static_cast<double>(ids.size());
    auto n_test = static_cast<std::size_t>(std::llround(options.test_fraction * n));
    auto n_val = static_cast<std::size_t>(std::llround(options.val_fraction * n));
    if (n_test == 0) {
      throw Error(ErrorCode::validation, "test_fraction " + format_double(options.test_fraction) + " selects no test segment out of " +
                                             std::to_string(ids.size()) + " for user " + user,
                  user);
    }
    if (n_test + n_val >= ids.size()) {
      throw Error(ErrorCode::validation, "user " + user + " has " + std::to_string(ids.size()) +
                                             " segments, too few for the requested fractions",
                  user);
    }
    std::mt19937_64 rng(mix_seed(options.seed, stable_hash(user)));
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[rng() % (i + 1)]);
    std::set<std::int64_t> test(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::set<std::int64_t> val(ids.begin() + static_cast<std::ptrdiff_t>(n_test),
                               ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    std::set<std::int64_t> blocked;
    for (const auto* held : {&test, &val}) {
      for (auto id : *held) blocked.insert({id - 1, id, id + 1});
    }
    auto& tr = manifest.train[user];
    auto& dc = manifest.discarded[user];
    for (auto id : ids_set) {
      if (test.count(id) || val.count(id)) continue;
      (blocked.count(id) ? dc : tr).push_back(id);
    }
    if (tr.empty()) {
      throw Error(ErrorCode::validation, "user " + user + " keeps no training segment after neighbour exclusion", user);
    }
    manifest.test[user].assign(test.begin(), test.end());
    if (!val.empty()) manifest.validation[user].assign(val.begin(), val.end());
  }
  return partition(ds, manifest);
}

Split apply_manifest(const LabeledDataset& ds, const SplitManifest& manifest) { return partition(ds, manifest); }

std::size_t count_leaking_pairs(const Split& split) {
  const auto seg = split.manifest.options.segment_minutes;
  auto counts = [seg](const LabeledDataset& d) {
    std::map<std::pair<std::string, std::int64_t>, std::size_t> m;
    for (std::size_t r = 0; r < d.size(); ++r) ++m[{d.labels[r], floor_div(d.minute_index[r], seg)}];
    return m;
  };
  auto train = counts(split.train);
  std::size_t pairs = 0;
  for (const auto* held : {&split.test, &split.validation}) {
    auto h = counts(*held);
    for (const auto& [key, n] : train) {
      for (std::int64_t d = -1; d <= 1; ++d) {
        auto it = h.find({key.first, key.second + d});
        if (it != h.end()) pairs += n * it->second;
      }
    }
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Fusion

std::vector<double> FusedVector::values() const {
  std::vector<double> v;
  v.reserve(kFusedWidth);
  v.insert(v.end(), pc_block.begin(), pc_block.end());
  v.insert(v.end(), mobile_app_block.begin(), mobile_app_block.end());
  v.insert(v.end(), sensor_block.begin(), sensor_block.end());
  return v;
}

std::string FusedVector::source() const {
  const bool mobile = mobile_app_active || sensor_active;
  if (pc_active && mobile) return "pc+mobile";
  return pc_active ? "pc" : "mobile";
}

std::optional<FusedVector> fuse_minute_vectors(const BlockInput* pc, const BlockInput* mobile_app,
                                               const BlockInput* sensor) {
  const BlockInput* first = pc != nullptr ? pc : (mobile_app != nullptr ? mobile_app : sensor);
  if (first == nullptr) return std::nullopt;
  FusedVector f;
  f.user_id = first->user_id;
  f.minute_index = first->minute_index;
  auto place = [&](const BlockInput* in, auto& block, bool& active, const char* name) {
    if (in == nullptr) return;
    if (in->user_id != f.user_id || in->minute_index != f.minute_index) {
      throw Error(ErrorCode::validation, std::string(name) + " block belongs to " + in->user_id + "@" +
                                             std::to_string(in->minute_index) + ", expected " + f.user_id + "@" +
                                             std::to_string(f.minute_index));
    }
    if (in->values.size() > block.size()) {
      throw Error(ErrorCode::validation, std::string(name) + " block has " + std::to_string(in->values.size()) +
                                             " values, at most " + std::to_string(block.size()) + " allowed");
    }
    std::copy(in->values.begin(), in->values.end(), block.begin());
    active = true;
  };
  place(pc, f.pc_block, f.pc_active, "pc");
  place(mobile_app, f.mobile_app_block, f.mobile_app_active, "mobile app");
  place(sensor, f.sensor_block, f.sensor_active, "sensor");
  return f;
}

std::vector<std::string> fused_feature_names(std::span<const std::string> pc_names,
                                             std::span<const std::string> app_names,
                                             std::span<const std::string> sensor_names) {
  std::vector<std::string> out;
  out.reserve(kFusedWidth);
  auto add = [&out](std::span<const std::string> names, std::size_t width, const std::string& prefix) {
    if (names.size() > width) {
      throw Error(ErrorCode::validation, prefix + " block takes at most " + std::to_string(width) + " features");
    }
    for (const auto& n : names) out.push_back(prefix + ":" + n);
    for (std::size_t k = names.size(); k < width; ++k) out.push_back(prefix + ":pad" + std::to_string(k));
  };
  add(pc_names, kPcBlock, "pc");
  add(app_names, kMobileAppBlock, "app");
  add(sensor_names, kSensorBlock, "sensor");
  return out;
}

LabeledDataset fuse_datasets(const LabeledDataset* pc, const LabeledDataset* mobile_app, const LabeledDataset* sensor) {
  using Key = std::pair<std::string, std::int64_t>;
  std::map<Key, std::array<std::optional<std::size_t>, 3>> joined;
  const LabeledDataset* parts[3] = {pc, mobile_app, sensor};
  const char* part_names[3] = {"pc", "mobile app", "sensor"};
  for (int p = 0; p < 3; ++p) {
    if (parts[p] == nullptr) continue;
    parts[p]->validate();
    for (std::size_t r = 0; r < parts[p]->size(); ++r) {
      auto& slot = joined[{parts[p]->labels[r], parts[p]->minute_index[r]}][static_cast<std::size_t>(p)];
      if (slot) {
        throw Error(ErrorCode::validation, std::string(part_names[p]) + " dataset has two rows for " +
                                               parts[p]->labels[r] + "@" + std::to_string(parts[p]->minute_index[r]));
      }
      slot = r;
    }
  }
  static const std::vector<std::string> none;
  LabeledDataset out;
  out.feature_names = fused_feature_names(pc ? pc->feature_names : none, mobile_app ? mobile_app->feature_names : none,
                                          sensor ? sensor->feature_names : none);
  out.rows = Matrix(0, kFusedWidth);
  for (const auto& [key, slots] : joined) {
    BlockInput inputs[3];
    const BlockInput* ptr[3] = {nullptr, nullptr, nullptr};
    for (int p = 0; p < 3; ++p) {
      if (!slots[static_cast<std::size_t>(p)]) continue;
      auto row = parts[p]->rows.row(*slots[static_cast<std::size_t>(p)]);
      inputs[p] = BlockInput{key.first, key.second, {row.begin(), row.end()}};
      ptr[p] = &inputs[p];
    }
    auto fused = fuse_minute_vectors(ptr[0], ptr[1], ptr[2]);
    out.append(fused->values(), key.first, key.second, fused->source());
  }
  return out;
}

std::vector<double> BlockProjection::project(const MinuteFeatureVector& vector) const {
  std::vector<double> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    if (n == "minute_of_day") {
      out.push_back(static_cast<double>(vector.minute_index - floor_div(vector.minute_index, 1440) * 1440));
      continue;
    }
    auto eq = n.find('=');
    if (eq == std::string::npos) {
      out.push_back(vector.value(n));
      continue;
    }
    const std::string col = n.substr(0, eq);
    const std::string code = n.substr(eq + 1);
    const double v = vector.value(col);
    if (code == "unknown") {
      bool known = false;
      if (const auto* c = encoder.find(col); c != nullptr && is_integer(v)) {
        known = std::binary_search(c->categories.begin(), c->categories.end(), static_cast<long long>(v));
      }
      out.push_back(known ? 0.0 : 1.0);
    } else {
      out.push_back(is_integer(v) && static_cast<long long>(v) == parse_integer(code, col) ? 1.0 : 0.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Derived usage features

std::map<std::string, ActivityTimeline> activity_from_vectors(std::span<const MinuteFeatureVector> vectors) {
  std::map<std::string, std::map<std::int64_t, unsigned>> marks;
  for (const auto& v : vectors) marks[v.user_id][v.minute_index] |= v.device_kind == features::DeviceKind::pc ? 1u : 2u;
  std::map<std::string, ActivityTimeline> out;
  for (const auto& [user, m] : marks) {
    ActivityTimeline t{user, m.begin()->first, {}};
    t.states.assign(static_cast<std::size_t>(m.rbegin()->first - t.start_minute + 1), ActivityState::none);
    for (const auto& [minute, bits] : m) {
      t.states[static_cast<std::size_t>(minute - t.start_minute)] =
          bits == 3 ? ActivityState::both : (bits == 1 ? ActivityState::pc : ActivityState::mobile);
    }
    out.emplace(user, std::move(t));
  }
  return out;
}

const std::vector<std::string>& derived_feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{"start_hour",        "weekday",           "pc_vectors",         "mobile_vectors",
                               "changes_pc_mobile", "changes_mobile_pc", "both_active_minutes"};
    for (auto fam : {"pc_activity", "mobile_activity", "both_activity", "pc_inactivity", "mobile_inactivity",
                     "both_inactivity"}) {
      for (auto stat : {"mean", "std", "max", "min"}) n.push_back(std::string(fam) + "_" + stat);
    }
    n.push_back("active_minutes");
    return n;
  }();
  return names;
}

namespace {

std::vector<double> run_lengths(const std::vector<bool>& flags, bool value) {
  std::vector<double> runs;
  std::size_t len = 0;
  for (bool f : flags) {
    if (f == value) {
      ++len;
    } else if (len > 0) {
      runs.push_back(static_cast<double>(len));
      len = 0;
    }
  }
  if (len > 0) runs.push_back(static_cast<double>(len));
  return runs;
}

}  // namespace

std::vector<DerivedUsageVector> derive_usage_features(const ActivityTimeline& activity, int window_minutes) {
  if (std::find(kDerivedWindows.begin(), kDerivedWindows.end(), window_minutes) == kDerivedWindows.end()) {
    throw Error(ErrorCode::invalid_argument, "unsupported derived window of " + std::to_string(window_minutes) +
                                                 " minutes (expected 60, 180, 360, 720 or 1440)");
  }
  std::vector<DerivedUsageVector> out;
  if (activity.states.empty()) return out;
  const std::int64_t w = window_minutes;
  const std::int64_t end = activity.start_minute + static_cast<std::int64_t>(activity.states.size());
  auto state_at = [&](std::int64_t m) {
    if (m < activity.start_minute || m >= end) return ActivityState::none;
    return activity.states[static_cast<std::size_t>(m - activity.start_minute)];
  };
  for (std::int64_t ws = floor_div(activity.start_minute, w) * w; ws < end; ws += w) {
    std::vector<bool> pc(static_cast<std::size_t>(w)), mob(pc.size()), both(pc.size());
    std::vector<ActivityState> compact;
    double active = 0.0;
    for (std::int64_t i = 0; i < w; ++i) {
      auto s = state_at(ws + i);
      auto idx = static_cast<std::size_t>(i);
      pc[idx] = s == ActivityState::pc || s == ActivityState::both;
      mob[idx] = s == ActivityState::mobile || s == ActivityState::both;
      both[idx] = s == ActivityState::both;
      if (s != ActivityState::none) {
        active += 1.0;
        if (compact.empty() || compact.back() != s) compact.push_back(s);
      }
    }
    if (active == 0.0) continue;
    double pc_to_mobile = 0.0, mobile_to_pc = 0.0;
    for (std::size_t i = 1; i < compact.size(); ++i) {
      if (compact[i - 1] == ActivityState::pc && compact[i] == ActivityState::mobile) pc_to_mobile += 1.0;
      if (compact[i - 1] == ActivityState::mobile && compact[i] == ActivityState::pc) mobile_to_pc += 1.0;
    }
    DerivedUsageVector v;
    v.window_start = ws;
    v.user_id = activity.user_id;
    std::size_t k = 0;
    const std::int64_t day = floor_div(ws, 1440);
    v.values[k++] = static_cast<double>((ws - day * 1440) / 60);
    v.values[k++] = static_cast<double>(((day + 3) % 7 + 7) % 7);  // Monday = 0
    v.values[k++] = static_cast<double>(std::count(pc.begin(), pc.end(), true));
    v.values[k++] = static_cast<double>(std::count(mob.begin(), mob.end(), true));
    v.values[k++] = pc_to_mobile;
    v.values[k++] = mobile_to_pc;
    v.values[k++] = static_cast<double>(std::count(both.begin(), both.end(), true));
    for (bool value : {true, false}) {
      for (const auto* flags : {&pc, &mob, &both}) {
        auto s = summarize(run_lengths(*flags, value));
        v.values[k++] = s.mean;
        v.values[k++] = s.stddev;
        v.values[k++] = s.max;
        v.values[k++] = s.min;
      }
    }
    v.values[k++] = active;
    out.push_back(v);
  }
  return out;
}

LabeledDataset derived_dataset(std::span<const DerivedUsageVector> vectors) {
  LabeledDataset ds;
  ds.feature_names = derived_feature_names();
  ds.rows = Matrix(0, kDerivedFeatureCount);
  for (const auto& v : vectors) ds.append(v.values, v.user_id, v.window_start, "derived");
  return ds;
}

// ---------------------------------------------------------------------------
// Sequences

FusedTimeline make_timeline(const std::string& user_id, std::int64_t start_minute, std::int64_t end_minute,
                            std::span<const FusedVector> vectors) {
  if (end_minute <= start_minute) throw Error(ErrorCode::invalid_argument, "timeline end must follow its start");
  FusedTimeline t;
  t.user_id = user_id;
  t.start_minute = start_minute;
  const auto n = static_cast<std::size_t>(end_minute - start_minute);
  t.values = Matrix(n, kFusedWidth, kInactiveFill);
  t.active.assign(n, false);
  for (const auto& v : vectors) {
    if (v.user_id != user_id || v.minute_index < start_minute || v.minute_index >= end_minute) continue;
    auto r = static_cast<std::size_t>(v.minute_index - start_minute);
    auto values = v.values();
    std::copy(values.begin(), values.end(), t.values.row(r).begin());
    t.active[r] = true;
  }
  return t;
}

FusedTimeline make_timeline(const LabeledDataset& fused, const std::string& user_id, std::int64_t start_minute,
                            std::int64_t end_minute) {
  if (end_minute <= start_minute) throw Error(ErrorCode::invalid_argument, "timeline end must follow its start");
  FusedTimeline t;
  t.user_id = user_id;
  t.start_minute = start_minute;
  const auto n = static_cast<std::size_t>(end_minute - start_minute);
  t.values = Matrix(n, fused.width(), kInactiveFill);
  t.active.assign(n, false);
  for (std::size_t r = 0; r < fused.size(); ++r) {
    const auto m = fused.minute_index[r];
    if (fused.labels[r] != user_id || m < start_minute || m >= end_minute) continue;
    auto i = static_cast<std::size_t>(m - start_minute);
    std::copy(fused.rows.row(r).begin(), fused.rows.row(r).end(), t.values.row(i).begin());
    t.active[i] = true;
  }
  return t;
}

bool SequenceWindow::has_activity() const {
  for (std::size_t t = 0; t < length; ++t) {
    if (timeline->active[offset + t]) return true;
  }
  return false;
}

SequenceSet build_sequences(std::shared_ptr<const FusedTimeline> timeline, std::size_t window_length) {
  if (!timeline) throw Error(ErrorCode::invalid_argument, "no timeline given");
  const std::size_t n = timeline->length();
  if (window_length < 2 || window_length > n) {
    throw Error(ErrorCode::invalid_argument, "window length " + std::to_string(window_length) + " must lie in [2, " +
                                                 std::to_string(n) + "]");
  }
  std::vector<std::size_t> prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (timeline->active[i] ? 1 : 0);
  SequenceSet set;
  set.total = n - window_length + 1;
  for (std::size_t off = 0; off < set.total; ++off) {
    if (prefix[off + window_length] == prefix[off]) {
      ++set.excluded;
      continue;
    }
    set.windows.push_back(SequenceWindow{timeline, off, window_length});
  }
  return set;
}

SequenceSplit split_sequences_by_day(std::span<const std::shared_ptr<const FusedTimeline>> timelines,
                                     std::size_t window_length, double train_share, double val_share) {
  if (!(train_share > 0.0) || !(val_share >= 0.0) || train_share + val_share >= 1.0) {
    throw Error(ErrorCode::invalid_argument, "day shares must satisfy train > 0, val >= 0, train + val < 1");
  }
  SequenceSplit split;
  for (auto* part : {&split.train, &split.validation, &split.test}) part->window_length = window_length;
  for (const auto& tl : timelines) {
    const std::size_t n = tl->length();
    const std::size_t days = (n + 1439) / 1440;
    const auto train_days = static_cast<std::size_t>(std::llround(train_share * static_cast<double>(days)));
    const auto val_days = static_cast<std::size_t>(std::llround(val_share * static_cast<double>(days)));
    if (train_days == 0 || train_days + val_days >= days) {
      throw Error(ErrorCode::validation, "timeline of " + tl->user_id + " spans " + std::to_string(days) +
                                             " days, too few for the requested shares");
    }
    const std::size_t cut1 = train_days * 1440, cut2 = (train_days + val_days) * 1440;
    auto set = build_sequences(tl, window_length);
    for (const auto& w : set.windows) {
      const std::size_t a = w.offset, b = w.offset + w.length;
      SequenceDataset* dst = nullptr;
      if (b <= cut1) {
        dst = &split.train;
      } else if (a >= cut1 && b <= cut2) {
        dst = &split.validation;
      } else if (a >= cut2) {
        dst = &split.test;
      }
      if (dst == nullptr) continue;
      dst->windows.push_back(w);
      dst->labels.push_back(tl->user_id);
      dst->width = tl->values.cols;
    }
  }
  return split;
}

void write_sidecar(const std::string& path, const std::string& schema, const std::vector<std::string>& feature_names,
                   int window, double fill_value) {
  json j;
  j["schema"] = schema;
  j["feature_names"] = feature_names;
  j["width"] = feature_names.size();
  j["window"] = window;
  j["fill_value"] = fill_value;
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace authcode::pipeline
