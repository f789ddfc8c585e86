#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "authcode/common.hpp"
#include "authcode/pipeline.hpp"

namespace authcode::models {

enum class Family { naive_bayes, knn, random_forest, gbt, mlp, lstm };

std::string_view to_string(Family family);
Family parse_family(std::string_view text);

struct HyperRange {
  std::string name;
  double lo;
  double hi;
  bool integer;
};

// Searchable ranges per family. Extra knobs (rounds, epochs, ...) are accepted
// by ModelSpec but are not part of these ranges.
const std::vector<HyperRange>& hyper_ranges(Family family);

struct ModelSpec {
  Family family = Family::naive_bayes;
  std::map<std::string, double> hyper;
  std::uint64_t seed = 0;

  double get(const std::string& name, double fallback) const;
  void validate() const;
  std::string describe() const;  // "gbt(lr=0.25,max_depth=10)"
};

// Midpoints of the searchable ranges; the LSTM default is 2 layers of 64 and
// 32 nodes with 0.2 dropout.
ModelSpec default_spec(Family family, std::uint64_t seed = 0);

struct Prediction {
  std::size_t label_index = 0;
  std::string label;
  std::vector<double> scores;  // aligned with TrainedModel::classes
};

struct TrainingReport {
  std::size_t iterations = 0;  // epochs, trees or boosting rounds
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  double seconds = 0.0;
};

class Estimator;

struct TrainedModel {
  ModelSpec spec;
  std::vector<std::string> classes;
  std::vector<std::string> feature_names;  // flat input schema, or per-row names for lstm
  std::size_t window_length = 0;           // lstm only
  TrainingReport report;
  std::shared_ptr<const Estimator> estimator;

  bool is_sequence() const { return spec.family == Family::lstm; }

  Prediction predict(std::span<const double> x) const;
  Prediction predict(const pipeline::SequenceWindow& window) const;
  std::vector<Prediction> predict_all(const pipeline::LabeledDataset& ds) const;
  std::vector<Prediction> predict_all(const pipeline::SequenceDataset& ds) const;

  // Normalized importances; random_forest and gbt only.
  std::map<std::string, double> feature_importances() const;

  std::string to_json() const;
  static TrainedModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static TrainedModel load(const std::string& path);
};

TrainedModel train(const ModelSpec& spec, const pipeline::LabeledDataset& train,
                   const pipeline::LabeledDataset* validation = nullptr);
TrainedModel train(const ModelSpec& spec, const pipeline::SequenceDataset& train,
                   const pipeline::SequenceDataset* validation = nullptr);

// ---------------------------------------------------------------------------
// Trees, exposed for oracle checks

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double gain = 0.0;          // impurity decrease (cart) or loss reduction (gbt)
  std::vector<double> value;  // class counts (cart) or the single leaf weight (gbt)
};

struct Tree {
  std::vector<TreeNode> nodes;

  // x[feature] <= threshold goes left.
  const TreeNode& leaf(std::span<const double> x) const;
  std::size_t split_count() const;
};

struct CartOptions {
  int max_depth = -1;  // unlimited
  std::size_t min_samples_split = 2;
  std::size_t max_features = 0;  // 0: all features
  std::uint64_t seed = 0;
};

// Gini CART over the given rows; `importance` accumulates the weighted impurity
// decrease per feature when non-null.
Tree fit_cart(const Matrix& x, std::span<const int> y, std::span<const std::size_t> rows, int n_classes,
              const CartOptions& options, std::vector<double>* importance = nullptr);

struct GbtOptions {
  std::size_t rounds = 100;
  double lr = 0.1;
  int max_depth = 6;
  double min_child_weight = 1.0;
  double gamma = 0.0;
  double colsample_bytree = 1.0;
  double lambda = 1.0;
  std::uint64_t seed = 0;
};

struct GbtTrace {
  std::vector<std::vector<Tree>> rounds;  // rounds x classes
  std::vector<double> train_loss;         // mean cross-entropy after each round
};

// Second-order split gain used by the booster.
double gbt_split_gain(double gl, double hl, double gr, double hr, double lambda, double gamma);

GbtTrace fit_gbt(const Matrix& x, std::span<const int> y, int n_classes, const GbtOptions& options);

// ---------------------------------------------------------------------------
// Neural networks

// Freshly initialized network for the spec (shape checks only, so a zero
// hidden-layer mlp gives a linear softmax model).
TrainedModel untrained_network(const ModelSpec& spec, std::vector<std::string> feature_names,
                               std::vector<std::string> classes, std::size_t window_length = 0);

std::vector<double> network_parameters(const TrainedModel& model);
TrainedModel with_parameters(const TrainedModel& model, std::vector<double> params);

// Mean cross-entropy over the batch (dropout disabled) and its gradient.
double network_loss(const TrainedModel& model, const pipeline::LabeledDataset& batch, std::vector<double>* grad);
double network_loss(const TrainedModel& model, const pipeline::SequenceDataset& batch, std::vector<double>* grad);

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

GradientCheck gradient_check(const TrainedModel& model, const pipeline::LabeledDataset& batch,
                             std::size_t min_parameters = 200, std::uint64_t seed = 0);
GradientCheck gradient_check(const TrainedModel& model, const pipeline::SequenceDataset& batch,
                             std::size_t min_parameters = 200, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Metrics

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> counts;  // [truth][predicted]

  ClassCounts for_class(std::size_t c) const;
};

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct Metrics {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

struct Evaluation {
  ConfusionMatrix confusion;
  Metrics metrics;
};

double f1_score(double precision, double recall);
Evaluation evaluate(std::span<const std::string> predictions, std::span<const std::string> truth);
Evaluation evaluate(const TrainedModel& model, const pipeline::LabeledDataset& ds);
Evaluation evaluate(const TrainedModel& model, const pipeline::SequenceDataset& ds);

// Per-class rows then a "macro" row.
std::string metrics_csv(const Metrics& metrics);

// ---------------------------------------------------------------------------
// Hyperparameter search

using SearchSpace = std::map<std::string, std::vector<double>>;

struct LeaderboardEntry {
  ModelSpec spec;
  double macro_f1 = 0.0;
  double seconds = 0.0;
  std::size_t order = 0;  // position in the enumerated grid
};

struct SearchResult {
  ModelSpec best;
  std::vector<LeaderboardEntry> leaderboard;  // ranked
};

// Ranked by validation macro-f1, ties by grid order.
SearchResult grid_search(Family family, const SearchSpace& space, const pipeline::LabeledDataset& train,
                         const pipeline::LabeledDataset& validation, std::size_t budget, std::uint64_t seed = 0,
                         const std::map<std::string, double>& fixed = {});
SearchResult grid_search(Family family, const SearchSpace& space, const pipeline::SequenceDataset& train,
                         const pipeline::SequenceDataset& validation, std::size_t budget, std::uint64_t seed = 0,
                         const std::map<std::string, double>& fixed = {});

std::string leaderboard_csv(const SearchResult& result);

}  // namespace authcode::models
