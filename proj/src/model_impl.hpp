#pragma once

#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "authcode/models.hpp"
#include "json.hpp"

namespace authcode::models {

using json = nlohmann::json;

class Estimator {
 public:
  virtual ~Estimator() = default;

  virtual std::vector<double> predict_proba(std::span<const double> x) const;
  virtual std::vector<double> predict_sequence(const pipeline::SequenceWindow& window) const;
  // Raw per-feature importances (not normalized).
  virtual std::optional<std::vector<double>> importances() const { return std::nullopt; }
  virtual json to_json() const = 0;
};

std::vector<double> softmax(std::span<const double> logits);

std::shared_ptr<const Estimator> fit_naive_bayes(const Matrix& x, std::span<const int> y, int n_classes);
std::shared_ptr<const Estimator> fit_knn(const Matrix& x, std::span<const int> y, int n_classes, std::size_t k);
std::shared_ptr<const Estimator> fit_forest(const Matrix& x, std::span<const int> y, int n_classes,
                                            const ModelSpec& spec, TrainingReport& report);
std::shared_ptr<const Estimator> fit_gbt_estimator(const Matrix& x, std::span<const int> y, int n_classes,
                                                   const ModelSpec& spec, TrainingReport& report);

json tree_to_json(const Tree& tree);
Tree tree_from_json(const json& j);

std::shared_ptr<const Estimator> naive_bayes_from_json(const json& j);
std::shared_ptr<const Estimator> knn_from_json(const json& j);
std::shared_ptr<const Estimator> forest_from_json(const json& j);
std::shared_ptr<const Estimator> gbt_from_json(const json& j);

// ---------------------------------------------------------------------------
// Neural networks over a flat parameter vector

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Input standardization (mlp) or min-max scaling (lstm) fitted on training data.
struct Scaler {
  std::vector<double> offset;
  std::vector<double> scale;
  double apply(std::size_t i, double v) const { return (v - offset[i]) / scale[i]; }
};

class MlpNet : public Estimator {
 public:
  MlpNet(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t outputs);

  std::size_t parameter_count() const;
  void init(std::mt19937_64& rng);

  // Loss over columns of a scaled batch; dropout not used by the mlp.
  double loss(const Mat& x, std::span<const int> y, std::vector<double>* grad) const;
  Mat forward(const Mat& x) const;  // class probabilities, one column per sample
  Mat scale_batch(const Matrix& rows, std::span<const std::size_t> idx) const;

  std::vector<double> predict_proba(std::span<const double> x) const override;
  json to_json() const override;
  static std::shared_ptr<MlpNet> from_json(const json& j);

  std::size_t inputs, outputs;
  std::vector<std::size_t> hidden;
  std::vector<double> params;
  Scaler scaler;
};

class LstmNet : public Estimator {
 public:
  LstmNet(std::size_t inputs, std::vector<std::size_t> layers, std::size_t outputs, double dropout);

  std::size_t parameter_count() const;
  void init(std::mt19937_64& rng);

  // xs[t] is inputs x batch. Dropout masks are drawn from rng when given.
  double loss(const std::vector<Mat>& xs, std::span<const int> y, std::vector<double>* grad,
              std::mt19937_64* dropout_rng) const;
  Mat forward(const std::vector<Mat>& xs) const;
  std::vector<Mat> scale_batch(std::span<const pipeline::SequenceWindow> windows) const;

  std::vector<double> predict_sequence(const pipeline::SequenceWindow& window) const override;
  json to_json() const override;
  static std::shared_ptr<LstmNet> from_json(const json& j);

  std::size_t inputs, outputs;
  std::vector<std::size_t> layers;
  double dropout;
  std::vector<double> params;
  Scaler scaler;
};

std::shared_ptr<const Estimator> fit_mlp(const pipeline::LabeledDataset& train, std::span<const int> y,
                                         const pipeline::LabeledDataset* val, std::span<const int> yval,
                                         int n_classes, const ModelSpec& spec, TrainingReport& report);
std::shared_ptr<const Estimator> fit_lstm(const pipeline::SequenceDataset& train, std::span<const int> y,
                                          const pipeline::SequenceDataset* val, std::span<const int> yval,
                                          int n_classes, const ModelSpec& spec, TrainingReport& report);

std::vector<std::size_t> mlp_hidden_layers(const ModelSpec& spec);
std::vector<std::size_t> lstm_layer_sizes(const ModelSpec& spec);

}  // namespace authcode::models
