#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "model_impl.hpp"

namespace authcode::models {

const TreeNode& Tree::leaf(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes[i];
}

std::size_t Tree::split_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature >= 0; }));
}

json tree_to_json(const Tree& tree) {
  json j = json::object();
  std::vector<int> feature, left, right;
  std::vector<double> threshold, gain;
  std::vector<std::vector<double>> value;
  for (const auto& n : tree.nodes) {
    feature.push_back(n.feature);
    left.push_back(n.left);
    right.push_back(n.right);
    threshold.push_back(n.threshold);
    gain.push_back(n.gain);
    value.push_back(n.value);
  }
  j["feature"] = feature;
  j["threshold"] = threshold;
  j["left"] = left;
  j["right"] = right;
  j["gain"] = gain;
  j["value"] = value;
  return j;
}

Tree tree_from_json(const json& j) {
  Tree t;
  auto feature = j.at("feature").get<std::vector<int>>();
  auto threshold = j.at("threshold").get<std::vector<double>>();
  auto left = j.at("left").get<std::vector<int>>();
  auto right = j.at("right").get<std::vector<int>>();
  auto gain = j.at("gain").get<std::vector<double>>();
  auto value = j.at("value").get<std::vector<std::vector<double>>>();
  for (std::size_t i = 0; i < feature.size(); ++i) {
    t.nodes.push_back(TreeNode{feature[i], threshold[i], left[i], right[i], gain[i], value[i]});
  }
  return t;
}

namespace {

double midpoint(double a, double b) {
  double m = a + (b - a) / 2.0;
  return m >= b ? a : m;
}

// ---------------------------------------------------------------------------
// CART

struct CartBuilder {
  const Matrix& x;
  std::span<const int> y;
  std::size_t k;
  const CartOptions& opt;
  std::vector<double>* importance;
  std::mt19937_64 rng;
  Tree tree;
  std::vector<std::pair<double, int>> scratch;

  int build(std::vector<std::size_t>& idx, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    std::vector<double> counts(k, 0.0);
    for (auto r : idx) counts[static_cast<std::size_t>(y[r])] += 1.0;
    const double n = static_cast<double>(idx.size());
    double sq = 0.0;
    for (double c : counts) sq += c * c;
    tree.nodes[static_cast<std::size_t>(id)].value = counts;

    const bool pure = sq == n * n;
    if (pure || idx.size() < std::max<std::size_t>(2, opt.min_samples_split) ||
        (opt.max_depth >= 0 && depth >= opt.max_depth)) {
      return id;
    }

    std::vector<std::size_t> order(x.cols);
    std::iota(order.begin(), order.end(), 0);
    std::size_t budget = x.cols;
    if (opt.max_features > 0 && opt.max_features < x.cols) {
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng() % (order.size() - i));
        std::swap(order[i], order[j]);
      }
      budget = opt.max_features;
    }

    const double parent = sq / n;
    double best = 1e-12 * n;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::size_t examined = 0;
    std::vector<double> left(k), right(k);
    for (std::size_t f : order) {
      if (examined >= budget) break;
      scratch.clear();
      for (auto r : idx) scratch.emplace_back(x(r, f), y[r]);
      std::sort(scratch.begin(), scratch.end());
      if (scratch.front().first == scratch.back().first) continue;  // constant here; does not count
      ++examined;
      std::fill(left.begin(), left.end(), 0.0);
      right = counts;
      double sql = 0.0, sqr = sq;
      for (std::size_t i = 0; i + 1 < scratch.size(); ++i) {
        auto c = static_cast<std::size_t>(scratch[i].second);
        sql += 2.0 * left[c] + 1.0;
        sqr -= 2.0 * right[c] - 1.0;
        left[c] += 1.0;
        right[c] -= 1.0;
        if (scratch[i].first == scratch[i + 1].first) continue;
        const double nl = static_cast<double>(i + 1);
        const double decrease = sql / nl + sqr / (n - nl) - parent;
        if (decrease > best) {
          best = decrease;
          best_feature = static_cast<int>(f);
          best_threshold = midpoint(scratch[i].first, scratch[i + 1].first);
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> li, ri;
    for (auto r : idx) (x(r, static_cast<std::size_t>(best_feature)) <= best_threshold ? li : ri).push_back(r);
    idx.clear();
    idx.shrink_to_fit();
    if (importance != nullptr) (*importance)[static_cast<std::size_t>(best_feature)] += best;
    {
      auto& node = tree.nodes[static_cast<std::size_t>(id)];
      node.feature = best_feature;
      node.threshold = best_threshold;
      node.gain = best;
    }
    int l = build(li, depth + 1);
    int r = build(ri, depth + 1);
    tree.nodes[static_cast<std::size_t>(id)].left = l;
    tree.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }
};

std::size_t argmax_index(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

class Forest : public Estimator {
 public:
  int n_classes = 0;
  std::size_t n_features = 0;
  std::vector<Tree> trees;
  std::vector<double> importance;

  std::vector<double> predict_proba(std::span<const double> x) const override {
    std::vector<double> votes(static_cast<std::size_t>(n_classes), 0.0);
    for (const auto& t : trees) votes[argmax_index(t.leaf(x).value)] += 1.0;
    for (double& v : votes) v /= static_cast<double>(trees.size());
    return votes;
  }

  std::optional<std::vector<double>> importances() const override { return importance; }

  json to_json() const override {
    json ts = json::array();
    for (const auto& t : trees) ts.push_back(tree_to_json(t));
    return {{"n_classes", n_classes}, {"n_features", n_features}, {"trees", ts}, {"importance", importance}};
  }
};

// ---------------------------------------------------------------------------
// Gradient boosting

struct GbtTreeBuilder {
  const Matrix& x;
  const std::vector<std::vector<std::uint32_t>>& sorted;  // per feature, rows by ascending value
  const GbtOptions& opt;

  Tree build(const std::vector<double>& g, const std::vector<double>& h, const std::vector<std::size_t>& features) {
    const std::size_t n = x.rows;
    Tree tree;
    std::vector<int> node_of(n, 0);
    std::vector<double> G{0.0}, H{0.0};
    for (std::size_t r = 0; r < n; ++r) {
      G[0] += g[r];
      H[0] += h[r];
    }
    tree.nodes.emplace_back();
    std::vector<int> active{0};

    struct Best {
      double gain = 0.0;
      int feature = -1;
      double threshold = 0.0;
      double gl = 0.0, hl = 0.0;
    };
    for (int depth = 0; depth < opt.max_depth && !active.empty(); ++depth) {
      std::vector<int> slot(tree.nodes.size(), -1);
      for (std::size_t s = 0; s < active.size(); ++s) slot[static_cast<std::size_t>(active[s])] = static_cast<int>(s);
      std::vector<Best> best(active.size());
      std::vector<double> gl(active.size()), hl(active.size()), last(active.size());
      std::vector<char> seen(active.size());
      for (std::size_t f : features) {
        std::fill(gl.begin(), gl.end(), 0.0);
        std::fill(hl.begin(), hl.end(), 0.0);
        std::fill(seen.begin(), seen.end(), 0);
        for (auto row : sorted[f]) {
          const int s = slot[static_cast<std::size_t>(node_of[row])];
          if (s < 0) continue;
          const auto si = static_cast<std::size_t>(s);
          const double v = x(row, f);
          if (seen[si] && v != last[si]) {
            const auto node = static_cast<std::size_t>(active[si]);
            const double gr = G[node] - gl[si], hr = H[node] - hl[si];
            if (hl[si] >= opt.min_child_weight && hr >= opt.min_child_weight) {
              const double gain = gbt_split_gain(gl[si], hl[si], gr, hr, opt.lambda, opt.gamma);
              if (gain > best[si].gain) {
                best[si] = Best{gain, static_cast<int>(f), midpoint(last[si], v), gl[si], hl[si]};
              }
            }
          }
          gl[si] += g[row];
          hl[si] += h[row];
          last[si] = v;
          seen[si] = 1;
        }
      }
      std::vector<int> next;
      for (std::size_t s = 0; s < active.size(); ++s) {
        if (best[s].feature < 0) continue;
        const auto node = static_cast<std::size_t>(active[s]);
        const int l = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        G.push_back(best[s].gl);
        H.push_back(best[s].hl);
        G.push_back(G[node] - best[s].gl);
        H.push_back(H[node] - best[s].hl);
        auto& nd = tree.nodes[node];
        nd.feature = best[s].feature;
        nd.threshold = best[s].threshold;
        nd.gain = best[s].gain;
        nd.left = l;
        nd.right = l + 1;
        next.push_back(l);
        next.push_back(l + 1);
      }
      if (next.empty()) break;
      for (std::size_t r = 0; r < n; ++r) {
        const auto& nd = tree.nodes[static_cast<std::size_t>(node_of[r])];
        if (nd.feature >= 0) node_of[r] = x(r, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
      }
      active = std::move(next);
    }
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      if (tree.nodes[i].feature < 0) tree.nodes[i].value = {-G[i] / (H[i] + opt.lambda) * opt.lr};
    }
    return tree;
  }
};

double mean_cross_entropy(const std::vector<double>& margins, std::span<const int> y, std::size_t k) {
  double loss = 0.0;
  const std::size_t n = y.size();
  for (std::size_t r = 0; r < n; ++r) {
    const double* m = &margins[r * k];
    const double top = *std::max_element(m, m + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(m[c] - top);
    loss += top + std::log(s) - m[static_cast<std::size_t>(y[r])];
  }
  return loss / static_cast<double>(n);
}

class Booster : public Estimator {
 public:
  int n_classes = 0;
  std::size_t n_features = 0;
  std::vector<std::vector<Tree>> rounds;

  std::vector<double> predict_proba(std::span<const double> x) const override {
    std::vector<double> margin(static_cast<std::size_t>(n_classes), 0.0);
    for (const auto& round : rounds) {
      for (std::size_t c = 0; c < round.size(); ++c) margin[c] += round[c].leaf(x).value[0];
    }
    return softmax(margin);
  }

  std::optional<std::vector<double>> importances() const override {
    std::vector<double> imp(n_features, 0.0);
    for (const auto& round : rounds) {
      for (const auto& t : round) {
        for (const auto& n : t.nodes) {
          if (n.feature >= 0) imp[static_cast<std::size_t>(n.feature)] += n.gain;
        }
      }
    }
    return imp;
  }

  json to_json() const override {
    json rs = json::array();
    for (const auto& round : rounds) {
      json r = json::array();
      for (const auto& t : round) r.push_back(tree_to_json(t));
      rs.push_back(r);
    }
    return {{"n_classes", n_classes}, {"n_features", n_features}, {"rounds", rs}};
  }
};

}  // namespace

Tree fit_cart(const Matrix& x, std::span<const int> y, std::span<const std::size_t> rows, int n_classes,
              const CartOptions& options, std::vector<double>* importance) {
  if (rows.empty()) throw Error(ErrorCode::invalid_argument, "cannot grow a tree on zero rows");
  if (importance != nullptr && importance->size() != x.cols) importance->assign(x.cols, 0.0);
  CartBuilder b{x, y, static_cast<std::size_t>(n_classes), options, importance, std::mt19937_64(options.seed), {}, {}};
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  b.build(idx, 0);
  return std::move(b.tree);
}

double gbt_split_gain(double gl, double hl, double gr, double hr, double lambda, double gamma) {
  const double g = gl + gr, h = hl + hr;
  return 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma;
}

GbtTrace fit_gbt(const Matrix& x, std::span<const int> y, int n_classes, const GbtOptions& options) {
  const std::size_t n = x.rows, k = static_cast<std::size_t>(n_classes);
  if (n == 0) throw Error(ErrorCode::invalid_argument, "cannot boost on zero rows");
  std::vector<std::vector<std::uint32_t>> sorted(x.cols);
  for (std::size_t f = 0; f < x.cols; ++f) {
    auto& s = sorted[f];
    s.resize(n);
    std::iota(s.begin(), s.end(), 0u);
    std::stable_sort(s.begin(), s.end(), [&](std::uint32_t a, std::uint32_t b) { return x(a, f) < x(b, f); });
  }
  std::mt19937_64 rng(mix_seed(options.seed, 0x9b));
  const std::size_t per_tree = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(options.colsample_bytree * static_cast<double>(x.cols))));

  GbtTrace trace;
  GbtTreeBuilder builder{x, sorted, options};
  std::vector<double> margins(n * k, 0.0), g(n), h(n), p(n * k);
  for (std::size_t round = 0; round < options.rounds; ++round) {
    for (std::size_t r = 0; r < n; ++r) {
      auto probs = softmax(std::span<const double>(&margins[r * k], k));
      std::copy(probs.begin(), probs.end(), &p[r * k]);
    }
    std::vector<Tree> trees;
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t r = 0; r < n; ++r) {
        const double pr = p[r * k + c];
        g[r] = pr - (static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0);
        h[r] = std::max(2.0 * pr * (1.0 - pr), 1e-16);
      }
      std::vector<std::size_t> features(x.cols);
      std::iota(features.begin(), features.end(), 0);
      if (per_tree < x.cols) {
        for (std::size_t i = 0; i < per_tree; ++i) {
          std::size_t j = i + static_cast<std::size_t>(rng() % (x.cols - i));
          std::swap(features[i], features[j]);
        }
        features.resize(per_tree);
        std::sort(features.begin(), features.end());
      }
      trees.push_back(builder.build(g, h, features));
    }
    for (std::size_t r = 0; r < n; ++r) {
      auto row = x.row(r);
      for (std::size_t c = 0; c < k; ++c) margins[r * k + c] += trees[c].leaf(row).value[0];
    }
    trace.rounds.push_back(std::move(trees));
    trace.train_loss.push_back(mean_cross_entropy(margins, y, k));
  }
  return trace;
}

std::shared_ptr<const Estimator> fit_forest(const Matrix& x, std::span<const int> y, int n_classes,
                                            const ModelSpec& spec, TrainingReport& report) {
  auto forest = std::make_shared<Forest>();
  forest->n_classes = n_classes;
  forest->n_features = x.cols;
  forest->importance.assign(x.cols, 0.0);
  const auto n_trees = static_cast<std::size_t>(spec.get("number_of_trees", 100));
  const bool bootstrap = spec.get("bootstrap", 1.0) != 0.0;
  const double mf = spec.get("max_features", 0.0);
  CartOptions opt;
  opt.max_depth = static_cast<int>(spec.get("max_depth", -1));
  opt.min_samples_split = static_cast<std::size_t>(spec.get("min_samples_split", 2));
  if (mf <= 0.0) {
    opt.max_features = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(x.cols))));
  } else if (mf < 1.0) {
    opt.max_features = std::max<std::size_t>(1, static_cast<std::size_t>(mf * static_cast<double>(x.cols)));
  } else {
    opt.max_features = static_cast<std::size_t>(mf);
  }
  std::vector<std::size_t> rows(x.rows);
  for (std::size_t t = 0; t < n_trees; ++t) {
    const std::uint64_t tree_seed = mix_seed(spec.seed, t);
    std::iota(rows.begin(), rows.end(), 0);
    if (bootstrap) {
      std::mt19937_64 rng(mix_seed(tree_seed, 0xb007));
      for (auto& r : rows) r = static_cast<std::size_t>(rng() % x.rows);
    }
    opt.seed = tree_seed;
    std::vector<double> imp(x.cols, 0.0);
    forest->trees.push_back(fit_cart(x, y, rows, n_classes, opt, &imp));
    const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
    if (total > 0.0) {
      for (std::size_t j = 0; j < x.cols; ++j) forest->importance[j] += imp[j] / total;
    }
  }
  report.iterations = n_trees;
  return forest;
}

std::shared_ptr<const Estimator> fit_gbt_estimator(const Matrix& x, std::span<const int> y, int n_classes,
                                                   const ModelSpec& spec, TrainingReport& report) {
  GbtOptions opt;
  opt.rounds = static_cast<std::size_t>(spec.get("rounds", 100));
  opt.lr = spec.get("lr", opt.lr);
  opt.max_depth = static_cast<int>(spec.get("max_depth", opt.max_depth));
  opt.min_child_weight = spec.get("min_child_weight", opt.min_child_weight);
  opt.gamma = spec.get("gamma", opt.gamma);
  opt.colsample_bytree = spec.get("colsample_bytree", opt.colsample_bytree);
  opt.lambda = spec.get("lambda", opt.lambda);
  opt.seed = spec.seed;
  auto trace = fit_gbt(x, y, n_classes, opt);
  for (double l : trace.train_loss) {
    if (!std::isfinite(l)) throw Error(ErrorCode::numeric, "boosting produced a non-finite training loss");
  }
  auto b = std::make_shared<Booster>();
  b->n_classes = n_classes;
  b->n_features = x.cols;
  b->rounds = std::move(trace.rounds);
  report.iterations = b->rounds.size();
  report.train_loss = std::move(trace.train_loss);
  return b;
}

std::shared_ptr<const Estimator> forest_from_json(const json& j) {
  auto f = std::make_shared<Forest>();
  f->n_classes = j.at("n_classes").get<int>();
  f->n_features = j.at("n_features").get<std::size_t>();
  for (const auto& t : j.at("trees")) f->trees.push_back(tree_from_json(t));
  f->importance = j.at("importance").get<std::vector<double>>();
  return f;
}

std::shared_ptr<const Estimator> gbt_from_json(const json& j) {
  auto b = std::make_shared<Booster>();
  b->n_classes = j.at("n_classes").get<int>();
  b->n_features = j.at("n_features").get<std::size_t>();
  for (const auto& r : j.at("rounds")) {
    std::vector<Tree> round;
    for (const auto& t : r) round.push_back(tree_from_json(t));
    b->rounds.push_back(std::move(round));
  }
  return b;
}

}  // namespace authcode::models
