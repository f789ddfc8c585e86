#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "authcode/models.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace authcode;
using namespace authcode::models;
using pipeline::LabeledDataset;

namespace {

LabeledDataset make(std::size_t width) {
  LabeledDataset ds;
  for (std::size_t j = 0; j < width; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  ds.rows = Matrix(0, width);
  return ds;
}

void add(LabeledDataset& ds, std::vector<double> row, const std::string& label) {
  ds.append(row, label, static_cast<std::int64_t>(ds.size()), "pc");
}

ModelSpec spec_of(Family f, std::map<std::string, double> hyper, std::uint64_t seed = 1) {
  ModelSpec s;
  s.family = f;
  s.hyper = std::move(hyper);
  s.seed = seed;
  return s;
}

LabeledDataset noisy_dataset(std::size_t rows, std::size_t width, int classes, std::uint64_t seed) {
  oracle::Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  auto ds = make(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const int c = static_cast<int>(rng() % static_cast<unsigned>(classes));
    std::vector<double> row(width);
    for (std::size_t j = 0; j < width; ++j) row[j] = n(rng) + (j % static_cast<std::size_t>(classes) == static_cast<std::size_t>(c) ? 1.0 : 0.0);
    add(ds, row, "c" + std::to_string(c));
  }
  return ds;
}

std::vector<int> label_indices(const LabeledDataset& ds) {
  auto classes = ds.classes();
  std::vector<int> y;
  for (const auto& l : ds.labels) y.push_back(static_cast<int>(std::find(classes.begin(), classes.end(), l) - classes.begin()));
  return y;
}

std::shared_ptr<pipeline::FusedTimeline> random_timeline(const std::string& user, std::size_t n, std::size_t width,
                                                         oracle::Rng& rng) {
  auto t = std::make_shared<pipeline::FusedTimeline>();
  t->user_id = user;
  t->values = Matrix(n, width);
  t->active.assign(n, true);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (double& v : t->values.row(r)) v = u(rng) + (user == "a" ? 0.3 : 0.0);
  }
  return t;
}

pipeline::SequenceDataset sequence_dataset(std::size_t width, std::size_t T, std::uint64_t seed) {
  oracle::Rng rng(seed);
  pipeline::SequenceDataset ds;
  ds.window_length = T;
  ds.width = width;
  for (const char* user : {"a", "b", "c"}) {
    auto t = random_timeline(user, 30, width, rng);
    for (auto& w : pipeline::build_sequences(t, T).windows) {
      ds.windows.push_back(w);
      ds.labels.push_back(user);
    }
  }
  return ds;
}

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("f" + std::to_string(i));
  return out;
}

}  // namespace

TEST_CASE("knn identity and majority") {
  auto ds = noisy_dataset(60, 3, 3, 2);
  auto m = train(spec_of(Family::knn, {{"k", 1}}), ds);
  for (std::size_t r = 0; r < ds.size(); ++r) CHECK(m.predict(ds.rows.row(r)).label == ds.labels[r]);

  auto three = make(1);
  add(three, {0.0}, "A");
  add(three, {0.1}, "A");
  add(three, {-0.1}, "B");
  add(three, {50.0}, "B");
  auto knn = train(spec_of(Family::knn, {{"k", 3}}), three);
  CHECK(knn.predict(std::vector<double>{0.0}).label == "A");
}

TEST_CASE("naive bayes posterior on separated Gaussians") {
  oracle::Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  auto ds = make(2);
  for (int i = 0; i < 200; ++i) {
    add(ds, {5 + n(rng), 5 + n(rng)}, "pos");
    add(ds, {-5 + n(rng), -5 + n(rng)}, "neg");
  }
  auto m = train(spec_of(Family::naive_bayes, {}), ds);
  CHECK(m.predict(std::vector<double>{5, 5}).label == "pos");
  CHECK(m.predict(std::vector<double>{-5, -5}).label == "neg");

  // Posterior from a Gaussian fit done here.
  std::map<std::string, std::array<double, 5>> fit;  // count, mean x2, var x2
  for (const std::string c : {"neg", "pos"}) {
    std::array<double, 5> f{};
    for (std::size_t r = 0; r < ds.size(); ++r) {
      if (ds.labels[r] != c) continue;
      f[0] += 1;
      f[1] += ds.rows(r, 0);
      f[2] += ds.rows(r, 1);
    }
    f[1] /= f[0];
    f[2] /= f[0];
    for (std::size_t r = 0; r < ds.size(); ++r) {
      if (ds.labels[r] != c) continue;
      f[3] += std::pow(ds.rows(r, 0) - f[1], 2);
      f[4] += std::pow(ds.rows(r, 1) - f[2], 2);
    }
    f[3] /= f[0];
    f[4] /= f[0];
    fit[c] = f;
  }
  for (double q : {-1.0, -0.2, 0.0, 0.3, 1.5}) {
    std::array<double, 2> logp{};
    int i = 0;
    for (auto& [c, f] : fit) {
      logp[i++] = std::log(f[0] / 400.0) - 0.5 * (std::log(2 * M_PI * f[3]) + (q - f[1]) * (q - f[1]) / f[3]) -
                  0.5 * (std::log(2 * M_PI * f[4]) + (q - f[2]) * (q - f[2]) / f[4]);
    }
    const double p_neg = 1.0 / (1.0 + std::exp(logp[1] - logp[0]));
    CHECK(m.predict(std::vector<double>{q, q}).scores[0] == doctest::Approx(p_neg).epsilon(1e-9));
  }
}

TEST_CASE("gbt stump equals the exhaustive split") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto ds = noisy_dataset(40 + seed, 3, 3, 100 + seed);
    auto y = label_indices(ds);
    const int k = static_cast<int>(ds.classes().size());
    GbtOptions o{1, 0.3, 1, 1.0, 0.0, 1.0, 1.0, seed};
    auto trace = fit_gbt(ds.rows, y, k, o);
    for (int c = 0; c < k; ++c) {
      const double p = 1.0 / k;
      std::vector<double> g, h;
      for (int yi : y) {
        g.push_back(p - (yi == c ? 1.0 : 0.0));
        h.push_back(std::max(2.0 * p * (1.0 - p), 1e-16));
      }
      auto want = oracle::best_gbt_split(ds.rows, g, h, 1.0, 0.0, 1.0);
      const auto& tree = trace.rounds[0][static_cast<std::size_t>(c)];
      if (want.feature < 0) {
        CHECK(tree.split_count() == 0);
        continue;
      }
      REQUIRE(tree.split_count() == 1);
      const auto& root = tree.nodes[0];
      CHECK(oracle::gbt_partition_gain(ds.rows, g, h, root.feature, root.threshold, 1.0, 0.0) ==
            doctest::Approx(want.gain).epsilon(1e-9));
      if (want.ties == 1) {
        CHECK(root.feature == want.feature);
        CHECK(root.threshold >= want.lo);
        CHECK(root.threshold < want.hi);
      }
      CHECK(tree.nodes[0].gain == doctest::Approx(want.gain).epsilon(1e-9));
    }
  }
}

TEST_CASE("scores are normalized and argmax follows the tie rule") {
  auto ds = noisy_dataset(120, 4, 3, 9);
  for (Family f : {Family::naive_bayes, Family::knn, Family::random_forest, Family::gbt, Family::mlp}) {
    auto spec = default_spec(f, 4);
    if (f == Family::random_forest) spec.hyper["number_of_trees"] = 20;
    if (f == Family::gbt) spec.hyper["rounds"] = 10;
    if (f == Family::mlp) spec.hyper = {{"layers", 1}, {"neurons_per_layer", 16}, {"max_epochs", 5}};
    auto m = train(spec, ds);
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto p = m.predict(ds.rows.row(r));
      CHECK(std::accumulate(p.scores.begin(), p.scores.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(p.label_index == static_cast<std::size_t>(std::max_element(p.scores.begin(), p.scores.end()) - p.scores.begin()));
      CHECK(std::all_of(p.scores.begin(), p.scores.end(), [](double s) { return s >= 0.0 && std::isfinite(s); }));
    }
  }
}

TEST_CASE("zero-weight network") {
  auto spec = spec_of(Family::mlp, {{"layers", 2}, {"neurons_per_layer", 8}});
  auto base = untrained_network(spec, names(4), {"x", "y", "z"});
  auto zero = with_parameters(base, std::vector<double>(network_parameters(base).size(), 0.0));
  auto p = zero.predict(std::vector<double>{1, -2, 3, 4});
  for (double s : p.scores) CHECK(s == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(p.label == "x");

  // Bias gradient of the output layer is (1/K - class frequency).
  auto batch = make(4);
  for (int i = 0; i < 6; ++i) add(batch, {1.0 * i, -1.0 * i, 0.5, 2.0}, i < 3 ? "x" : i < 5 ? "y" : "z");
  std::vector<double> grad;
  const double loss = network_loss(zero, batch, &grad);
  CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  const std::size_t nb = grad.size() - 3;
  CHECK(grad[nb + 0] == doctest::Approx(1.0 / 3 - 3.0 / 6).epsilon(1e-12));
  CHECK(grad[nb + 1] == doctest::Approx(1.0 / 3 - 2.0 / 6).epsilon(1e-12));
  CHECK(grad[nb + 2] == doctest::Approx(1.0 / 3 - 1.0 / 6).epsilon(1e-12));
}

TEST_CASE("gradient checks") {
  auto batch = noisy_dataset(16, 30, 5, 21);
  auto linear = untrained_network(spec_of(Family::mlp, {{"layers", 0}}, 3), batch.feature_names, batch.classes());
  auto lin = gradient_check(linear, batch, 200, 1);
  CHECK(lin.checked >= 150);  // 30x5 weights + 5 biases
  CHECK(lin.max_relative_error <= 1e-6);

  auto mlp = untrained_network(spec_of(Family::mlp, {{"layers", 2}, {"neurons_per_layer", 64}}, 3), batch.feature_names,
                               batch.classes());
  auto deep = gradient_check(mlp, batch, 200, 2);
  CHECK(deep.checked >= 200);
  CHECK(deep.max_relative_error <= 1e-4);

  auto seq = sequence_dataset(6, 5, 4);
  seq.windows.resize(12);
  seq.labels.resize(12);
  auto lstm = untrained_network(spec_of(Family::lstm, {{"lstm_layers", 1}, {"nodes_per_layer", 8}, {"dropout", 0}}, 5),
                                names(6), {"a", "b", "c"}, 5);
  auto lc = gradient_check(lstm, seq, 200, 3);
  CHECK(lc.checked >= 200);
  CHECK(lc.max_relative_error <= 1e-4);
}

TEST_CASE("feature importances") {
  auto ds = make(3);
  oracle::Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 40; ++i) add(ds, {u(rng), i < 20 ? 0.0 : 1.0, u(rng)}, i < 20 ? "A" : "B");
  auto forest = train(spec_of(Family::random_forest, {{"number_of_trees", 1}, {"bootstrap", 0}, {"max_features", 3}}), ds);
  auto imp = forest.feature_importances();
  CHECK(imp.at("f1") == 1.0);
  CHECK(imp.at("f0") == 0.0);
  CHECK(imp.at("f2") == 0.0);
  CHECK_THROWS_AS(train(spec_of(Family::knn, {{"k", 3}}), ds).feature_importances(), Error);

  // Duplicating a feature splits its weight without changing the total.
  auto base = noisy_dataset(200, 3, 3, 31);
  auto dup = base;
  dup.feature_names.push_back("f0_copy");
  Matrix rows(base.size(), 4);
  for (std::size_t r = 0; r < base.size(); ++r) {
    for (std::size_t j = 0; j < 3; ++j) rows(r, j) = base.rows(r, j);
    rows(r, 3) = base.rows(r, 0);
  }
  dup.rows = rows;
  auto gbt = spec_of(Family::gbt, {{"rounds", 15}, {"max_depth", 3}, {"colsample_bytree", 1}, {"lr", 0.2}});
  auto single = train(gbt, base).feature_importances();
  auto both = train(gbt, dup).feature_importances();
  CHECK(both.at("f0") + both.at("f0_copy") == doctest::Approx(single.at("f0")).epsilon(1e-6));
  double sum = 0.0;
  for (auto& [n, w] : both) sum += w;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("metrics") {
  std::vector<std::string> truth, pred;
  for (int i = 0; i < 8; ++i) truth.push_back("A"), pred.push_back("A");
  for (int i = 0; i < 2; ++i) truth.push_back("B"), pred.push_back("A");
  for (int i = 0; i < 2; ++i) truth.push_back("A"), pred.push_back("B");
  for (int i = 0; i < 8; ++i) truth.push_back("B"), pred.push_back("B");
  auto e = evaluate(pred, truth);
  auto a = e.metrics.per_class.at(0);
  CHECK(a.label == "A");
  CHECK(a.precision == 0.8);
  CHECK(a.recall == 0.8);
  CHECK(a.f1 == 0.8);
  auto cc = e.confusion.for_class(0);
  CHECK(cc.tp == 8);
  CHECK(cc.fp == 2);
  CHECK(cc.fn == 2);
  CHECK(cc.tn == 8);

  auto perfect = evaluate(truth, truth).metrics;
  CHECK(perfect.macro_precision == 1.0);
  CHECK(perfect.macro_f1 == 1.0);
  CHECK(f1_score(0.0, 0.0) == 0.0);
  std::vector<std::string> shorter(truth.begin(), truth.end() - 1);
  CHECK_THROWS_AS(evaluate(shorter, truth), Error);

  oracle::Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::string> p, y;
    for (int i = 0; i < 60; ++i) {
      y.push_back(std::string(1, static_cast<char>('a' + rng() % 3)));
      p.push_back(std::string(1, static_cast<char>('a' + rng() % 4)));
    }
    auto got = evaluate(p, y).metrics;
    auto want = oracle::macro_metrics(p, y);
    CHECK(got.macro_precision == doctest::Approx(want.precision).epsilon(1e-12));
    CHECK(got.macro_recall == doctest::Approx(want.recall).epsilon(1e-12));
    CHECK(got.macro_f1 == doctest::Approx(want.f1).epsilon(1e-12));
  }
}

TEST_CASE("grid search") {
  auto tr = noisy_dataset(80, 3, 3, 40);
  auto va = noisy_dataset(40, 3, 3, 41);
  auto one = grid_search(Family::knn, {{"k", {5}}}, tr, va, 10);
  CHECK(one.best.get("k", 0) == 5);
  auto all = grid_search(Family::gbt, {{"max_depth", {3, 4}}, {"lr", {0.1, 0.2, 0.3}}}, tr, va, 100, 0, {{"rounds", 5}});
  CHECK(all.leaderboard.size() == 6);
  auto sub = grid_search(Family::gbt, {{"max_depth", {3, 4}}, {"lr", {0.1, 0.2, 0.3}}}, tr, va, 4, 0, {{"rounds", 5}});
  CHECK(sub.leaderboard.size() == 4);
  CHECK_THROWS_AS(grid_search(Family::knn, {}, tr, va, 3), Error);
  CHECK_THROWS_AS(grid_search(Family::knn, {{"k", {1}}}, tr, va, 3), Error);

  // Majority background on a grid with tight three-point islands of class B:
  // k=3 recovers the islands, k=15 votes them away.
  auto train_set = make(2), val = make(2);
  const std::vector<std::pair<double, double>> islands{{5.5, 5.5}, {12.5, 8.5}, {8.5, 14.5}, {15.5, 15.5}};
  for (int i = 0; i <= 20; ++i) {
    for (int j = 0; j <= 20; ++j) add(train_set, {1.0 * i, 1.0 * j}, "A");
  }
  for (auto [cx, cy] : islands) {
    add(train_set, {cx - 0.05, cy}, "B");
    add(train_set, {cx + 0.05, cy}, "B");
    add(train_set, {cx, cy + 0.05}, "B");
    add(val, {cx, cy - 0.01}, "B");
  }
  for (auto [x, y] : std::vector<std::pair<double, double>>{{1, 1.1}, {3, 18.1}, {18, 3.1}, {10, 1.1}, {1, 10.1}}) {
    add(val, {x, y}, "A");
  }
  auto f1_for = [&](double k) { return evaluate(train(spec_of(Family::knn, {{"k", k}}), train_set), val).metrics.macro_f1; };
  REQUIRE(f1_for(3) == 1.0);
  REQUIRE(f1_for(15) < 1.0);
  auto planted = grid_search(Family::knn, {{"k", {15, 3}}}, train_set, val, 10);
  CHECK(planted.best.get("k", 0) == 3);
}

TEST_CASE("determinism and persistence") {
  auto ds = noisy_dataset(150, 4, 3, 50);
  for (Family f : {Family::random_forest, Family::gbt, Family::mlp}) {
    auto spec = default_spec(f, 11);
    if (f == Family::random_forest) spec.hyper["number_of_trees"] = 15;
    if (f == Family::gbt) spec.hyper["rounds"] = 8;
    if (f == Family::mlp) spec.hyper = {{"layers", 2}, {"neurons_per_layer", 12}, {"max_epochs", 10}};
    auto a = train(spec, ds);
    auto b = train(spec, ds);
    const auto path = std::filesystem::temp_directory_path() / ("authcode_model_" + std::string(to_string(f)) + ".json");
    a.save(path.string());
    auto c = TrainedModel::load(path.string());
    std::filesystem::remove(path);
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto pa = a.predict(ds.rows.row(r));
      CHECK(pa.scores == b.predict(ds.rows.row(r)).scores);
      CHECK(pa.scores == c.predict(ds.rows.row(r)).scores);
    }
  }
  CHECK_THROWS_AS(train(default_spec(Family::lstm), ds), Error);
  auto bad = ds;
  bad.rows(3, 1) = std::nan("");
  CHECK_THROWS_AS(train(default_spec(Family::naive_bayes), bad), Error);
  auto m = train(default_spec(Family::naive_bayes), ds);
  CHECK_THROWS_AS(m.predict(std::vector<double>{1, 2}), Error);
}

TEST_CASE("gbt training loss never increases") {
  auto ds = noisy_dataset(200, 5, 4, 60);
  auto trace = fit_gbt(ds.rows, label_indices(ds), 4, GbtOptions{40, 0.3, 3, 1.0, 0.0, 0.7, 1.0, 2});
  REQUIRE(trace.train_loss.size() == 40);
  for (std::size_t i = 1; i < trace.train_loss.size(); ++i) CHECK(trace.train_loss[i] <= trace.train_loss[i - 1] + 1e-12);
}

TEST_CASE("single-tree forest equals CART") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto ds = noisy_dataset(60 + 10 * seed, 3, 3, 70 + seed);
    auto y = label_indices(ds);
    auto m = train(spec_of(Family::random_forest, {{"number_of_trees", 1}, {"bootstrap", 0}, {"max_features", 3}}, seed), ds);
    oracle::CartOracle cart(ds.rows, y, 3);
    auto probe = noisy_dataset(100, 3, 3, 900 + seed);
    for (std::size_t r = 0; r < probe.size(); ++r) {
      CHECK(m.predict(probe.rows.row(r)).label_index == static_cast<std::size_t>(cart.predict(probe.rows.row(r))));
    }
  }
}

TEST_CASE("lstm ignores history before the window") {
  oracle::Rng rng(80);
  auto seq = sequence_dataset(6, 5, 81);
  auto m = train(spec_of(Family::lstm, {{"lstm_layers", 1}, {"nodes_per_layer", 8}, {"max_epochs", 3}}), seq);
  auto body = random_timeline("a", 5, 6, rng);
  auto padded = std::make_shared<pipeline::FusedTimeline>();
  padded->user_id = "a";
  padded->values = Matrix(8, 6, pipeline::kInactiveFill);
  padded->active.assign(8, false);
  for (std::size_t r = 0; r < 5; ++r) {
    std::copy(body->values.row(r).begin(), body->values.row(r).end(), padded->values.row(r + 3).begin());
    padded->active[r + 3] = true;
  }
  pipeline::SequenceWindow w1{body, 0, 5}, w2{padded, 3, 5};
  CHECK(m.predict(w1).scores == m.predict(w2).scores);

  auto idle = std::make_shared<pipeline::FusedTimeline>();
  idle->user_id = "a";
  idle->values = Matrix(5, 6, pipeline::kInactiveFill);
  idle->active.assign(5, false);
  CHECK_THROWS_AS(m.predict(pipeline::SequenceWindow{idle, 0, 5}), Error);
}
