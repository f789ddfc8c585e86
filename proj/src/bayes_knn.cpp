#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "model_impl.hpp"

namespace authcode::models {

std::vector<double> Estimator::predict_proba(std::span<const double>) const {
  throw Error(ErrorCode::unsupported, "this model scores sequence windows, not flat vectors");
}

std::vector<double> Estimator::predict_sequence(const pipeline::SequenceWindow&) const {
  throw Error(ErrorCode::unsupported, "this model scores flat vectors, not sequence windows");
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double top = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - top);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

namespace {

constexpr double kVarianceFloor = 1e-9;

class NaiveBayes : public Estimator {
 public:
  std::vector<double> log_prior;
  std::vector<std::vector<double>> mean, var;  // [class][feature]

  std::vector<double> predict_proba(std::span<const double> x) const override {
    std::vector<double> logp(log_prior.size());
    for (std::size_t c = 0; c < log_prior.size(); ++c) {
      if (!std::isfinite(log_prior[c])) {
        logp[c] = -std::numeric_limits<double>::infinity();
        continue;
      }
      double s = log_prior[c];
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double d = x[j] - mean[c][j];
        s -= 0.5 * (std::log(2.0 * M_PI * var[c][j]) + d * d / var[c][j]);
      }
      logp[c] = s;
    }
    return softmax(logp);
  }

  json to_json() const override { return {{"log_prior", log_prior}, {"mean", mean}, {"var", var}}; }
};

class Knn : public Estimator {
 public:
  std::size_t k = 1;
  int n_classes = 0;
  std::vector<double> offset, scale;
  Matrix x;  // standardized
  std::vector<int> y;

  std::vector<double> predict_proba(std::span<const double> q) const override {
    std::vector<double> z(q.size());
    for (std::size_t j = 0; j < q.size(); ++j) z[j] = (q[j] - offset[j]) / scale[j];
    std::vector<std::pair<double, std::size_t>> dist(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
      auto row = x.row(r);
      double d = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j) {
        const double t = row[j] - z[j];
        d += t * t;
      }
      dist[r] = {d, r};
    }
    const std::size_t kk = std::min(k, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    std::vector<double> votes(static_cast<std::size_t>(n_classes), 0.0);
    std::vector<double> nearest(votes.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < kk; ++i) {
      auto c = static_cast<std::size_t>(y[dist[i].second]);
      votes[c] += 1.0;
      nearest[c] = std::min(nearest[c], dist[i].first);
    }
    // Vote ties go to the class with the closest neighbour.
    const double top = *std::max_element(votes.begin(), votes.end());
    std::size_t winner = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t tied = 0;
    for (std::size_t c = 0; c < votes.size(); ++c) {
      if (votes[c] != top) continue;
      ++tied;
      if (nearest[c] < best) {
        best = nearest[c];
        winner = c;
      }
    }
    if (tied > 1) votes[winner] += 1e-9;
    double sum = std::accumulate(votes.begin(), votes.end(), 0.0);
    for (double& v : votes) v /= sum;
    return votes;
  }

  json to_json() const override {
    return {{"k", k}, {"n_classes", n_classes}, {"offset", offset}, {"scale", scale},
            {"rows", x.rows}, {"cols", x.cols}, {"x", x.data}, {"y", y}};
  }
};

}  // namespace

std::shared_ptr<const Estimator> fit_naive_bayes(const Matrix& x, std::span<const int> y, int n_classes) {
  auto nb = std::make_shared<NaiveBayes>();
  const auto k = static_cast<std::size_t>(n_classes);
  nb->mean.assign(k, std::vector<double>(x.cols, 0.0));
  nb->var.assign(k, std::vector<double>(x.cols, 0.0));
  std::vector<double> count(k, 0.0);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto c = static_cast<std::size_t>(y[r]);
    count[c] += 1.0;
    for (std::size_t j = 0; j < x.cols; ++j) nb->mean[c][j] += x(r, j);
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] > 0) {
      for (double& m : nb->mean[c]) m /= count[c];
    }
  }
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto c = static_cast<std::size_t>(y[r]);
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double d = x(r, j) - nb->mean[c][j];
      nb->var[c][j] += d * d;
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (double& v : nb->var[c]) v = std::max(count[c] > 0 ? v / count[c] : 0.0, kVarianceFloor);
    nb->log_prior.push_back(count[c] > 0 ? std::log(count[c] / static_cast<double>(x.rows))
                                         : -std::numeric_limits<double>::infinity());
  }
  return nb;
}

std::shared_ptr<const Estimator> fit_knn(const Matrix& x, std::span<const int> y, int n_classes, std::size_t k) {
  auto m = std::make_shared<Knn>();
  m->k = k;
  m->n_classes = n_classes;
  m->offset.assign(x.cols, 0.0);
  m->scale.assign(x.cols, 1.0);
  for (std::size_t j = 0; j < x.cols; ++j) {
    std::vector<double> col(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) col[r] = x(r, j);
    auto s = summarize(col);
    m->offset[j] = s.mean;
    m->scale[j] = s.stddev > 0.0 ? s.stddev : 1.0;
  }
  m->x = x;
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t j = 0; j < x.cols; ++j) m->x(r, j) = (x(r, j) - m->offset[j]) / m->scale[j];
  }
  m->y.assign(y.begin(), y.end());
  return m;
}

std::shared_ptr<const Estimator> naive_bayes_from_json(const json& j) {
  auto nb = std::make_shared<NaiveBayes>();
  nb->mean = j.at("mean").get<std::vector<std::vector<double>>>();
  nb->var = j.at("var").get<std::vector<std::vector<double>>>();
  for (const auto& v : j.at("log_prior")) {
    nb->log_prior.push_back(v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>());
  }
  return nb;
}

std::shared_ptr<const Estimator> knn_from_json(const json& j) {
  auto m = std::make_shared<Knn>();
  m->k = j.at("k").get<std::size_t>();
  m->n_classes = j.at("n_classes").get<int>();
  m->offset = j.at("offset").get<std::vector<double>>();
  m->scale = j.at("scale").get<std::vector<double>>();
  m->x.rows = j.at("rows").get<std::size_t>();
  m->x.cols = j.at("cols").get<std::size_t>();
  m->x.data = j.at("x").get<std::vector<double>>();
  m->y = j.at("y").get<std::vector<int>>();
  return m;
}

}  // namespace authcode::models
