#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "model_impl.hpp"

namespace authcode::models {

namespace {

using ConstMap = Eigen::Map<const Mat>;
using ConstVecMap = Eigen::Map<const Vec>;
using MutMap = Eigen::Map<Mat>;
using MutVecMap = Eigen::Map<Vec>;

Mat column_softmax(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    const double top = p.col(c).maxCoeff();
    p.col(c) = (p.col(c).array() - top).exp();
    p.col(c) /= p.col(c).sum();
  }
  return p;
}

double cross_entropy(const Mat& probs, std::span<const int> y) {
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    loss -= std::log(std::max(probs(y[i], static_cast<Eigen::Index>(i)), 1e-300));
  }
  return loss / static_cast<double>(y.size());
}

Mat sigmoid(const Mat& m) { return (1.0 / (1.0 + (-m.array()).exp())).matrix(); }

struct Adam {
  std::vector<double> m, v;
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t t = 0;

  explicit Adam(std::size_t n, double lr_) : m(n, 0.0), v(n, 0.0), lr(lr_) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

void check_finite(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::numeric, "training loss became non-finite at epoch " + std::to_string(epoch));
  }
}

json scaler_json(const Scaler& s) { return {{"offset", s.offset}, {"scale", s.scale}}; }

Scaler scaler_from_json(const json& j) {
  return Scaler{j.at("offset").get<std::vector<double>>(), j.at("scale").get<std::vector<double>>()};
}

// Generic mini-batch loop with early stopping on validation loss.
template <typename BatchLoss, typename FullLoss>
std::vector<double> run_adam(std::vector<double> params, std::size_t n, const ModelSpec& spec, BatchLoss&& batch_loss,
                             FullLoss&& val_loss, TrainingReport& report) {
  const auto max_epochs = static_cast<std::size_t>(spec.get("max_epochs", 200));
  const auto batch = std::max<std::size_t>(1, static_cast<std::size_t>(spec.get("batch_size", 64)));
  const auto patience = static_cast<std::size_t>(spec.get("patience", 10));
  Adam adam(params.size(), spec.get("learning_rate", 1e-3));
  std::mt19937_64 rng(mix_seed(spec.seed, 0xada));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad, best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
      const double l = batch_loss(params, idx, grad, rng);
      check_finite(l, epoch);
      total += l * static_cast<double>(idx.size());
      adam.step(params, grad);
    }
    report.train_loss.push_back(total / static_cast<double>(n));
    report.iterations = epoch;
    const double vl = val_loss(params);
    if (std::isnan(vl)) {
      // No validation data: stop on the training loss instead.
      if (report.train_loss.back() < best_loss - 1e-12) {
        best_loss = report.train_loss.back();
        best = params;
        since_best = 0;
      } else if (++since_best >= patience) {
        break;
      }
      continue;
    }
    check_finite(vl, epoch);
    report.validation_loss.push_back(vl);
    if (vl < best_loss - 1e-12) {
      best_loss = vl;
      best = params;
      since_best = 0;
    } else if (++since_best >= patience) {
      break;
    }
  }
  return best;
}

std::size_t window_label_check(const pipeline::SequenceWindow& w, std::size_t inputs) {
  if (w.width() != inputs) {
    throw Error(ErrorCode::schema_mismatch, "sequence rows have " + std::to_string(w.width()) + " values, model expects " +
                                                std::to_string(inputs));
  }
  return w.length;
}

}  // namespace

// ---------------------------------------------------------------------------
// MLP

MlpNet::MlpNet(std::size_t in, std::vector<std::size_t> hid, std::size_t out)
    : inputs(in), outputs(out), hidden(std::move(hid)) {
  params.assign(parameter_count(), 0.0);
  scaler.offset.assign(inputs, 0.0);
  scaler.scale.assign(inputs, 1.0);
}

std::size_t MlpNet::parameter_count() const {
  std::size_t n = 0, prev = inputs;
  for (auto h : hidden) {
    n += h * prev + h;
    prev = h;
  }
  return n + outputs * prev + outputs;
}

void MlpNet::init(std::mt19937_64& rng) {
  std::size_t pos = 0, prev = inputs;
  auto layer = [&](std::size_t out, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < out * prev; ++i) params[pos++] = dist(rng);
    for (std::size_t i = 0; i < out; ++i) params[pos++] = 0.0;
    prev = out;
  };
  for (auto h : hidden) layer(h, std::sqrt(2.0 / static_cast<double>(prev)));
  layer(outputs, std::sqrt(1.0 / static_cast<double>(prev)));
}

Mat MlpNet::forward(const Mat& x) const {
  Mat a = x;
  std::size_t pos = 0, prev = inputs;
  for (std::size_t l = 0; l <= hidden.size(); ++l) {
    const std::size_t out = l < hidden.size() ? hidden[l] : outputs;
    ConstMap w(params.data() + pos, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(prev));
    pos += out * prev;
    ConstVecMap b(params.data() + pos, static_cast<Eigen::Index>(out));
    pos += out;
    Mat z = w * a;
    z.colwise() += b;
    a = l < hidden.size() ? Mat(z.cwiseMax(0.0)) : z;
    prev = out;
  }
  return column_softmax(a);
}

double MlpNet::loss(const Mat& x, std::span<const int> y, std::vector<double>* grad) const {
  const auto batch = static_cast<double>(x.cols());
  std::vector<Mat> acts{x}, pre;
  std::vector<std::size_t> offsets;
  std::size_t pos = 0, prev = inputs;
  for (std::size_t l = 0; l <= hidden.size(); ++l) {
    const std::size_t out = l < hidden.size() ? hidden[l] : outputs;
    offsets.push_back(pos);
    ConstMap w(params.data() + pos, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(prev));
    pos += out * prev;
    ConstVecMap b(params.data() + pos, static_cast<Eigen::Index>(out));
    pos += out;
    Mat z = w * acts.back();
    z.colwise() += b;
    pre.push_back(z);
    acts.push_back(l < hidden.size() ? Mat(z.cwiseMax(0.0)) : z);
    prev = out;
  }
  Mat probs = column_softmax(acts.back());
  const double loss = cross_entropy(probs, y);
  if (grad == nullptr) return loss;

  grad->assign(params.size(), 0.0);
  Mat dz = probs;
  for (std::size_t i = 0; i < y.size(); ++i) dz(y[i], static_cast<Eigen::Index>(i)) -= 1.0;
  dz /= batch;
  for (std::size_t l = hidden.size() + 1; l-- > 0;) {
    const std::size_t out = l < hidden.size() ? hidden[l] : outputs;
    const std::size_t in = l == 0 ? inputs : hidden[l - 1];
    MutMap dw(grad->data() + offsets[l], static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    MutVecMap db(grad->data() + offsets[l] + out * in, static_cast<Eigen::Index>(out));
    dw.noalias() = dz * acts[l].transpose();
    db = dz.rowwise().sum();
    if (l == 0) break;
    ConstMap w(params.data() + offsets[l], static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    Mat da = w.transpose() * dz;
    dz = (pre[l - 1].array() > 0.0).select(da, 0.0);
  }
  return loss;
}

Mat MlpNet::scale_batch(const Matrix& rows, std::span<const std::size_t> idx) const {
  Mat x(static_cast<Eigen::Index>(inputs), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) {
    auto row = rows.row(idx[c]);
    for (std::size_t j = 0; j < inputs; ++j) x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = scaler.apply(j, row[j]);
  }
  return x;
}

std::vector<double> MlpNet::predict_proba(std::span<const double> x) const {
  Mat in(static_cast<Eigen::Index>(inputs), 1);
  for (std::size_t j = 0; j < inputs; ++j) in(static_cast<Eigen::Index>(j), 0) = scaler.apply(j, x[j]);
  Mat p = forward(in);
  return {p.data(), p.data() + p.size()};
}

json MlpNet::to_json() const {
  return {{"inputs", inputs}, {"outputs", outputs}, {"hidden", hidden}, {"params", params}, {"scaler", scaler_json(scaler)}};
}

std::shared_ptr<MlpNet> MlpNet::from_json(const json& j) {
  auto net = std::make_shared<MlpNet>(j.at("inputs").get<std::size_t>(), j.at("hidden").get<std::vector<std::size_t>>(),
                                      j.at("outputs").get<std::size_t>());
  net->params = j.at("params").get<std::vector<double>>();
  net->scaler = scaler_from_json(j.at("scaler"));
  if (net->params.size() != net->parameter_count()) throw Error(ErrorCode::validation, "mlp parameter count mismatch");
  return net;
}

std::vector<std::size_t> mlp_hidden_layers(const ModelSpec& spec) {
  const auto layers = static_cast<std::size_t>(spec.get("layers", 1));
  const auto neurons = static_cast<std::size_t>(spec.get("neurons_per_layer", 100));
  return std::vector<std::size_t>(layers, neurons);
}

std::shared_ptr<const Estimator> fit_mlp(const pipeline::LabeledDataset& train, std::span<const int> y,
                                         const pipeline::LabeledDataset* val, std::span<const int> yval,
                                         int n_classes, const ModelSpec& spec, TrainingReport& report) {
  auto net = std::make_shared<MlpNet>(train.width(), mlp_hidden_layers(spec), static_cast<std::size_t>(n_classes));
  for (std::size_t j = 0; j < train.width(); ++j) {
    std::vector<double> col(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) col[r] = train.rows(r, j);
    auto s = summarize(col);
    net->scaler.offset[j] = s.mean;
    net->scaler.scale[j] = s.stddev > 0.0 ? s.stddev : 1.0;
  }
  std::mt19937_64 rng(mix_seed(spec.seed, 0x1417));
  net->init(rng);

  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  const Mat xtrain = net->scale_batch(train.rows, all);
  Mat xval;
  if (val != nullptr && val->size() > 0) {
    std::vector<std::size_t> vi(val->size());
    std::iota(vi.begin(), vi.end(), 0);
    xval = net->scale_batch(val->rows, vi);
  }
  std::vector<int> yb;
  auto batch_loss = [&](const std::vector<double>& params, std::span<const std::size_t> idx, std::vector<double>& grad,
                        std::mt19937_64&) {
    net->params = params;
    Mat xb(xtrain.rows(), static_cast<Eigen::Index>(idx.size()));
    yb.resize(idx.size());
    for (std::size_t c = 0; c < idx.size(); ++c) {
      xb.col(static_cast<Eigen::Index>(c)) = xtrain.col(static_cast<Eigen::Index>(idx[c]));
      yb[c] = y[idx[c]];
    }
    return net->loss(xb, yb, &grad);
  };
  auto val_loss = [&](const std::vector<double>& params) {
    if (xval.cols() == 0) return std::numeric_limits<double>::quiet_NaN();
    net->params = params;
    return net->loss(xval, yval, nullptr);
  };
  net->params = run_adam(net->params, train.size(), spec, batch_loss, val_loss, report);
  return net;
}

// ---------------------------------------------------------------------------
// LSTM

LstmNet::LstmNet(std::size_t in, std::vector<std::size_t> ls, std::size_t out, double drop)
    : inputs(in), outputs(out), layers(std::move(ls)), dropout(drop) {
  params.assign(parameter_count(), 0.0);
  scaler.offset.assign(inputs, 0.0);
  scaler.scale.assign(inputs, 1.0);
}

std::size_t LstmNet::parameter_count() const {
  std::size_t n = 0, prev = inputs;
  for (auto h : layers) {
    n += 4 * h * (prev + h) + 4 * h;
    prev = h;
  }
  return n + outputs * prev + outputs;
}

void LstmNet::init(std::mt19937_64& rng) {
  std::size_t pos = 0, prev = inputs;
  for (auto h : layers) {
    const double bound = std::sqrt(6.0 / static_cast<double>(prev + h + 4 * h));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < 4 * h * (prev + h); ++i) params[pos++] = dist(rng);
    for (std::size_t i = 0; i < 4 * h; ++i) params[pos++] = (i >= h && i < 2 * h) ? 1.0 : 0.0;  // forget bias
    prev = h;
  }
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(prev)));
  for (std::size_t i = 0; i < outputs * prev; ++i) params[pos++] = dist(rng);
  for (std::size_t i = 0; i < outputs; ++i) params[pos++] = 0.0;
}

namespace {

struct LstmStep {
  Mat concat, i, f, g, o, c, tanh_c;
};

}  // namespace

double LstmNet::loss(const std::vector<Mat>& xs, std::span<const int> y, std::vector<double>* grad,
                     std::mt19937_64* dropout_rng) const {
  const std::size_t T = xs.size();
  const Eigen::Index B = xs.front().cols();
  std::vector<std::vector<LstmStep>> steps(layers.size(), std::vector<LstmStep>(T));
  std::vector<Mat> masks(layers.size());
  std::vector<std::size_t> offsets;
  std::vector<Mat> input = xs;
  std::size_t pos = 0, prev = inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto H = static_cast<Eigen::Index>(layers[l]);
    const auto I = static_cast<Eigen::Index>(prev);
    offsets.push_back(pos);
    ConstMap w(params.data() + pos, 4 * H, I + H);
    ConstVecMap b(params.data() + pos + static_cast<std::size_t>(4 * H * (I + H)), 4 * H);
    pos += static_cast<std::size_t>(4 * H * (I + H) + 4 * H);
    Mat h = Mat::Zero(H, B), c = Mat::Zero(H, B);
    std::vector<Mat> out(T);
    for (std::size_t t = 0; t < T; ++t) {
      auto& s = steps[l][t];
      s.concat.resize(I + H, B);
      s.concat.topRows(I) = input[t];
      s.concat.bottomRows(H) = h;
      Mat gates = w * s.concat;
      gates.colwise() += b;
      s.i = sigmoid(gates.topRows(H));
      s.f = sigmoid(gates.middleRows(H, H));
      s.g = gates.middleRows(2 * H, H).array().tanh().matrix();
      s.o = sigmoid(gates.bottomRows(H));
      c = (s.f.array() * c.array() + s.i.array() * s.g.array()).matrix();
      s.c = c;
      s.tanh_c = c.array().tanh().matrix();
      h = (s.o.array() * s.tanh_c.array()).matrix();
      out[t] = h;
    }
    if (dropout_rng != nullptr && dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - dropout);
      masks[l].resize(H, B);
      for (Eigen::Index r = 0; r < H; ++r) {
        for (Eigen::Index col = 0; col < B; ++col) masks[l](r, col) = keep(*dropout_rng) ? 1.0 / (1.0 - dropout) : 0.0;
      }
      for (auto& m : out) m = (m.array() * masks[l].array()).matrix();
    }
    input = std::move(out);
    prev = layers[l];
  }
  const auto K = static_cast<Eigen::Index>(outputs);
  const auto Htop = static_cast<Eigen::Index>(prev);
  ConstMap v(params.data() + pos, K, Htop);
  ConstVecMap cb(params.data() + pos + static_cast<std::size_t>(K * Htop), K);
  const Mat& last = input.back();
  Mat logits = v * last;
  logits.colwise() += cb;
  Mat probs = column_softmax(logits);
  const double loss = cross_entropy(probs, y);
  if (grad == nullptr) return loss;

  grad->assign(params.size(), 0.0);
  Mat dz = probs;
  for (std::size_t i = 0; i < y.size(); ++i) dz(y[i], static_cast<Eigen::Index>(i)) -= 1.0;
  dz /= static_cast<double>(B);
  MutMap dv(grad->data() + pos, K, Htop);
  MutVecMap dcb(grad->data() + pos + static_cast<std::size_t>(K * Htop), K);
  dv.noalias() = dz * last.transpose();
  dcb = dz.rowwise().sum();

  // Gradient w.r.t. each layer's (post-dropout) output sequence.
  std::vector<Mat> dout(T);
  for (std::size_t t = 0; t + 1 < T; ++t) dout[t] = Mat::Zero(Htop, B);
  dout[T - 1] = v.transpose() * dz;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto H = static_cast<Eigen::Index>(layers[l]);
    const auto I = static_cast<Eigen::Index>(l == 0 ? inputs : layers[l - 1]);
    if (masks[l].size() > 0) {
      for (auto& d : dout) d = (d.array() * masks[l].array()).matrix();
    }
    ConstMap w(params.data() + offsets[l], 4 * H, I + H);
    MutMap dw(grad->data() + offsets[l], 4 * H, I + H);
    MutVecMap db(grad->data() + offsets[l] + static_cast<std::size_t>(4 * H * (I + H)), 4 * H);
    Mat dh_next = Mat::Zero(H, B), dc_next = Mat::Zero(H, B);
    std::vector<Mat> dinput(T);
    Mat da(4 * H, B);
    for (std::size_t t = T; t-- > 0;) {
      const auto& s = steps[l][t];
      Mat dh = dout[t] + dh_next;
      Mat dc = (dh.array() * s.o.array() * (1.0 - s.tanh_c.array().square()) + dc_next.array()).matrix();
      const Mat c_prev = t > 0 ? steps[l][t - 1].c : Mat::Zero(H, B);
      da.topRows(H) = (dc.array() * s.g.array() * s.i.array() * (1.0 - s.i.array())).matrix();
      da.middleRows(H, H) = (dc.array() * c_prev.array() * s.f.array() * (1.0 - s.f.array())).matrix();
      da.middleRows(2 * H, H) = (dc.array() * s.i.array() * (1.0 - s.g.array().square())).matrix();
      da.bottomRows(H) = (dh.array() * s.tanh_c.array() * s.o.array() * (1.0 - s.o.array())).matrix();
      dc_next = (dc.array() * s.f.array()).matrix();
      dw.noalias() += da * s.concat.transpose();
      db += da.rowwise().sum();
      Mat dconcat = w.transpose() * da;
      dh_next = dconcat.bottomRows(H);
      dinput[t] = dconcat.topRows(I);
    }
    dout = std::move(dinput);
  }
  return loss;
}

Mat LstmNet::forward(const std::vector<Mat>& xs) const {
  // Inference path: dropout off, no caches kept.
  const Eigen::Index B = xs.front().cols();
  std::vector<Mat> input = xs;
  std::size_t pos = 0, prev = inputs;
  for (auto hsize : layers) {
    const auto H = static_cast<Eigen::Index>(hsize);
    const auto I = static_cast<Eigen::Index>(prev);
    ConstMap w(params.data() + pos, 4 * H, I + H);
    ConstVecMap b(params.data() + pos + static_cast<std::size_t>(4 * H * (I + H)), 4 * H);
    pos += static_cast<std::size_t>(4 * H * (I + H) + 4 * H);
    Mat h = Mat::Zero(H, B), c = Mat::Zero(H, B), concat(I + H, B);
    for (auto& x : input) {
      concat.topRows(I) = x;
      concat.bottomRows(H) = h;
      Mat gates = w * concat;
      gates.colwise() += b;
      c = (sigmoid(gates.middleRows(H, H)).array() * c.array() +
           sigmoid(gates.topRows(H)).array() * gates.middleRows(2 * H, H).array().tanh())
              .matrix();
      h = (sigmoid(gates.bottomRows(H)).array() * c.array().tanh()).matrix();
      x = h;
    }
    prev = hsize;
  }
  const auto K = static_cast<Eigen::Index>(outputs);
  ConstMap v(params.data() + pos, K, static_cast<Eigen::Index>(prev));
  ConstVecMap cb(params.data() + pos + outputs * prev, K);
  Mat logits = v * input.back();
  logits.colwise() += cb;
  return column_softmax(logits);
}

std::vector<Mat> LstmNet::scale_batch(std::span<const pipeline::SequenceWindow> windows) const {
  const std::size_t T = windows.front().length;
  std::vector<Mat> xs(T, Mat(static_cast<Eigen::Index>(inputs), static_cast<Eigen::Index>(windows.size())));
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const auto& w = windows[b];
    if (window_label_check(w, inputs) != T) throw Error(ErrorCode::validation, "sequence windows differ in length");
    for (std::size_t t = 0; t < T; ++t) {
      const bool active = w.timeline->active[w.offset + t];
      auto row = w.row(t);
      for (std::size_t j = 0; j < inputs; ++j) {
        xs[t](static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(b)) =
            active ? scaler.apply(j, row[j]) : pipeline::kInactiveFill;
      }
    }
  }
  return xs;
}

std::vector<double> LstmNet::predict_sequence(const pipeline::SequenceWindow& window) const {
  if (!window.has_activity()) {
    throw Error(ErrorCode::validation, "sequence window starting at minute " + std::to_string(window.start_minute()) +
                                           " has no active minute");
  }
  Mat p = forward(scale_batch(std::span<const pipeline::SequenceWindow>(&window, 1)));
  return {p.data(), p.data() + p.size()};
}

json LstmNet::to_json() const {
  return {{"inputs", inputs},   {"outputs", outputs}, {"layers", layers},
          {"dropout", dropout}, {"params", params},   {"scaler", scaler_json(scaler)}};
}

std::shared_ptr<LstmNet> LstmNet::from_json(const json& j) {
  auto net = std::make_shared<LstmNet>(j.at("inputs").get<std::size_t>(), j.at("layers").get<std::vector<std::size_t>>(),
                                       j.at("outputs").get<std::size_t>(), j.at("dropout").get<double>());
  net->params = j.at("params").get<std::vector<double>>();
  net->scaler = scaler_from_json(j.at("scaler"));
  if (net->params.size() != net->parameter_count()) throw Error(ErrorCode::validation, "lstm parameter count mismatch");
  return net;
}

std::vector<std::size_t> lstm_layer_sizes(const ModelSpec& spec) {
  const auto n = static_cast<std::size_t>(spec.get("lstm_layers", 2));
  std::vector<std::size_t> sizes;
  for (std::size_t l = 0; l < n; ++l) {
    const double fallback = spec.get("nodes_per_layer", l == 0 ? 64.0 : 32.0);
    sizes.push_back(static_cast<std::size_t>(spec.get("nodes_layer_" + std::to_string(l + 1), fallback)));
  }
  return sizes;
}

std::shared_ptr<const Estimator> fit_lstm(const pipeline::SequenceDataset& train, std::span<const int> y,
                                          const pipeline::SequenceDataset* val, std::span<const int> yval,
                                          int n_classes, const ModelSpec& spec, TrainingReport& report) {
  const std::size_t width = train.windows.front().width();
  auto net = std::make_shared<LstmNet>(width, lstm_layer_sizes(spec), static_cast<std::size_t>(n_classes),
                                       spec.get("dropout", 0.2));
  // Min-max scaling over the active rows of the training timelines.
  std::vector<double> lo(width, std::numeric_limits<double>::infinity()), hi(width, -lo[0]);
  std::set<const pipeline::FusedTimeline*> seen;
  for (const auto& w : train.windows) {
    if (!seen.insert(w.timeline.get()).second) continue;
    for (std::size_t r = 0; r < w.timeline->length(); ++r) {
      if (!w.timeline->active[r]) continue;
      auto row = w.timeline->values.row(r);
      for (std::size_t j = 0; j < width; ++j) {
        lo[j] = std::min(lo[j], row[j]);
        hi[j] = std::max(hi[j], row[j]);
      }
    }
  }
  for (std::size_t j = 0; j < width; ++j) {
    const bool any = std::isfinite(lo[j]);
    net->scaler.offset[j] = any ? lo[j] : 0.0;
    net->scaler.scale[j] = any && hi[j] > lo[j] ? hi[j] - lo[j] : 1.0;
  }
  std::mt19937_64 rng(mix_seed(spec.seed, 0x157));
  net->init(rng);

  std::vector<pipeline::SequenceWindow> wb;
  std::vector<int> yb;
  auto batch_loss = [&](const std::vector<double>& params, std::span<const std::size_t> idx, std::vector<double>& grad,
                        std::mt19937_64& drng) {
    net->params = params;
    wb.clear();
    yb.clear();
    for (auto i : idx) {
      wb.push_back(train.windows[i]);
      yb.push_back(y[i]);
    }
    return net->loss(net->scale_batch(wb), yb, &grad, &drng);
  };
  auto val_loss = [&](const std::vector<double>& params) {
    if (val == nullptr || val->size() == 0) return std::numeric_limits<double>::quiet_NaN();
    net->params = params;
    double total = 0.0;
    const std::size_t chunk = 256;
    for (std::size_t s = 0; s < val->size(); s += chunk) {
      const std::size_t e = std::min(val->size(), s + chunk);
      std::span<const pipeline::SequenceWindow> ws(val->windows.data() + s, e - s);
      total += net->loss(net->scale_batch(ws), yval.subspan(s, e - s), nullptr, nullptr) * static_cast<double>(e - s);
    }
    return total / static_cast<double>(val->size());
  };
  net->params = run_adam(net->params, train.size(), spec, batch_loss, val_loss, report);
  return net;
}

}  // namespace authcode::models
