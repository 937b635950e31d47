#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "steerlab/activation_store.hpp"
#include "steerlab/random.hpp"

namespace steerlab {

template <typename T>
using PerLayer = std::map<int, T>;

struct TrainConfig {
  double l2_regularization = 1e-2;
  int max_epochs = 500;
  // Fraction of the inverse smoothness constant of the loss, not a raw step.
  double learning_rate = 0.1;
  double convergence_tol = 1e-6;
  bool class_balance = true;
  std::uint64_t seed = 0;

  void check() const {
    if (!(learning_rate > 0.0)) throw ValueError("learning_rate must be positive");
    if (max_epochs < 1) throw ValueError("max_epochs must be >= 1");
    if (!(l2_regularization >= 0.0)) throw ValueError("l2_regularization must be >= 0");
  }
};

// f(x) = w·x + b; f > 0 predicts faithful, f == 0 predicts faithless.
struct LinearProbe {
  int layer_index = 0;
  std::vector<float> weights;
  double bias = 0.0;

  double logit(std::span<const float> x) const { return linalg::dot(std::span<const float>(weights), x) + bias; }
  double logit(std::span<const double> x) const { return linalg::dot(std::span<const float>(weights), x) + bias; }
  double weight_norm() const { return linalg::norm(std::span<const float>(weights)); }

  bool operator==(const LinearProbe&) const = default;
};

inline bool predicts_faithful(double logit) { return logit > 0.0; }

class ProbeSet {
 public:
  ProbeSet() = default;
  ProbeSet(int num_layers, int hidden_dim) : num_layers_(num_layers), hidden_dim_(hidden_dim) {}

  int num_layers() const { return num_layers_; }
  int hidden_dim() const { return hidden_dim_; }
  const std::vector<LinearProbe>& probes() const { return probes_; }
  std::size_t size() const { return probes_.size(); }

  void add(LinearProbe p) {
    if (p.layer_index < 0 || p.layer_index >= num_layers_) {
      throw DimensionError("probe layer " + std::to_string(p.layer_index) + " outside [0, " +
                           std::to_string(num_layers_) + ")");
    }
    if (static_cast<int>(p.weights.size()) != hidden_dim_) {
      throw DimensionError("probe weight dimension " + std::to_string(p.weights.size()) + " != " +
                           std::to_string(hidden_dim_));
    }
    if (find(p.layer_index)) throw ValueError("duplicate probe for layer " + std::to_string(p.layer_index));
    const auto pos = std::lower_bound(probes_.begin(), probes_.end(), p.layer_index,
                                      [](const LinearProbe& a, int l) { return a.layer_index < l; });
    probes_.insert(pos, std::move(p));
  }

  const LinearProbe* find(int layer) const {
    for (const auto& p : probes_) {
      if (p.layer_index == layer) return &p;
    }
    return nullptr;
  }

  const LinearProbe& at(int layer) const {
    if (const auto* p = find(layer)) return *p;
    throw ValueError("no probe for layer " + std::to_string(layer));
  }

  std::vector<int> layers() const {
    std::vector<int> out;
    for (const auto& p : probes_) out.push_back(p.layer_index);
    return out;
  }

  bool operator==(const ProbeSet&) const = default;

 private:
  int num_layers_ = 0;
  int hidden_dim_ = 0;
  std::vector<LinearProbe> probes_;
};

struct FitResult {
  Eigen::VectorXd w;
  double b = 0.0;
  int epochs = 0;
  bool converged = false;
  double loss = 0.0;
};

namespace detail {

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Full-batch gradient descent on the weighted, L2-regularised logistic loss
// from a zero start. y holds 1 for faithful rows, 0 for faithless rows.
inline FitResult fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const TrainConfig& cfg) {
  cfg.check();
  const Eigen::Index n = X.rows();
  const double n_pos = y.sum();
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos < 1.0 || n_neg < 1.0) throw ValueError("train_probe: both classes must be non-empty");

  Eigen::VectorXd sw(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sw[i] = cfg.class_balance ? (y[i] > 0.5 ? 0.5 / n_pos : 0.5 / n_neg) : 1.0 / static_cast<double>(n);
  }
  const double l_smooth = 0.25 * (sw.array() * (X.rowwise().squaredNorm().array() + 1.0)).sum() + cfg.l2_regularization;
  const double eta = cfg.learning_rate / l_smooth;

  FitResult r;
  r.w = Eigen::VectorXd::Zero(X.cols());
  std::optional<double> prev;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const Eigen::VectorXd z = (X * r.w).array() + r.b;
    double loss = 0.5 * cfg.l2_regularization * r.w.squaredNorm();
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      loss += sw[i] * (softplus(z[i]) - y[i] * z[i]);
      g[i] = sw[i] * (sigmoid(z[i]) - y[i]);
    }
    r.loss = loss;
    r.epochs = epoch;
    if (prev && std::abs(*prev - loss) < cfg.convergence_tol) {
      r.converged = true;
      return r;
    }
    prev = loss;
    r.w -= eta * (X.transpose() * g + cfg.l2_regularization * r.w);
    r.b -= eta * g.sum();
  }
  r.epochs = cfg.max_epochs;
  return r;
}

template <typename Rows>
Eigen::MatrixXd stack(const Rows& pos, const Rows& neg, Eigen::VectorXd& y) {
  const std::size_t n = pos.size() + neg.size();
  if (pos.empty() || neg.empty()) throw ValueError("train_probe: both classes must be non-empty");
  const std::size_t d = pos.front().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  y.resize(static_cast<Eigen::Index>(n));
  Eigen::Index row = 0;
  for (const auto* group : {&pos, &neg}) {
    for (const auto& v : *group) {
      if (v.size() != d) throw DimensionError("train_probe: mixed vector dimensions");
      for (std::size_t k = 0; k < d; ++k) {
        const double x = static_cast<double>(v[k]);
        if (!std::isfinite(x)) throw ValueError("train_probe: non-finite input");
        X(row, static_cast<Eigen::Index>(k)) = x;
      }
      y[row] = group == &pos ? 1.0 : 0.0;
      ++row;
    }
  }
  return X;
}

inline LinearProbe to_probe(const FitResult& fit, int layer) {
  LinearProbe p;
  p.layer_index = layer;
  p.weights.resize(static_cast<std::size_t>(fit.w.size()));
  for (Eigen::Index k = 0; k < fit.w.size(); ++k) p.weights[static_cast<std::size_t>(k)] = static_cast<float>(fit.w[k]);
  p.bias = fit.b;
  return p;
}

inline void warn_unconverged(const FitResult& fit, int layer, const TrainConfig& cfg) {
  if (!fit.converged) {
    log::warn("probe for layer " + std::to_string(layer) + " did not reach tolerance " +
              std::to_string(cfg.convergence_tol) + " within " + std::to_string(cfg.max_epochs) +
              " epochs; keeping final iterate");
  }
}

}  // namespace detail

// positives are faithful activations, negatives faithless.
template <typename T>
LinearProbe train_probe(const std::vector<std::vector<T>>& positives, const std::vector<std::vector<T>>& negatives,
                        const TrainConfig& cfg, int layer_index = 0) {
  Eigen::VectorXd y;
  const auto X = detail::stack(positives, negatives, y);
  const auto fit = detail::fit_logistic(X, y, cfg);
  detail::warn_unconverged(fit, layer_index, cfg);
  return detail::to_probe(fit, layer_index);
}

namespace detail {

inline bool is_labelled(const ActivationRecord& r) { return r.label != Label::unlabeled; }

// Labelled rows of one layer in record order.
inline Eigen::MatrixXd layer_matrix(const ActivationSet& set, int layer, const std::vector<std::size_t>& rows,
                                    Eigen::VectorXd& y) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), set.hidden_dim());
  y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& rec = set.records()[rows[i]];
    const auto v = set.layer_of(rec, layer);
    for (int k = 0; k < set.hidden_dim(); ++k) X(static_cast<Eigen::Index>(i), k) = v[static_cast<std::size_t>(k)];
    y[static_cast<Eigen::Index>(i)] = rec.label == Label::faithful ? 1.0 : 0.0;
  }
  return X;
}

inline std::vector<std::size_t> labelled_rows(const ActivationSet& set) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (is_labelled(set.records()[i])) rows.push_back(i);
  }
  return rows;
}

inline ProbeSet train_rows(const ActivationSet& set, const std::vector<std::size_t>& rows, const TrainConfig& cfg,
                           const std::vector<int>& layers, bool warn) {
  for (const int l : layers) {
    if (l < 0 || l >= set.num_layers()) throw DimensionError("steerable layer " + std::to_string(l) + " out of range");
  }
  std::vector<std::future<FitResult>> jobs;
  jobs.reserve(layers.size());
  for (const int l : layers) {
    jobs.push_back(std::async(std::launch::async, [&set, &rows, &cfg, l] {
      Eigen::VectorXd y;
      const auto X = layer_matrix(set, l, rows, y);
      return fit_logistic(X, y, cfg);
    }));
  }
  ProbeSet out(set.num_layers(), set.hidden_dim());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto fit = jobs[i].get();
    if (warn) warn_unconverged(fit, layers[i], cfg);
    out.add(to_probe(fit, layers[i]));
  }
  return out;
}

}  // namespace detail

inline std::vector<int> all_layers(int num_layers) {
  std::vector<int> out(static_cast<std::size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l) out[static_cast<std::size_t>(l)] = l;
  return out;
}

// One probe per steerable layer, trained in parallel on that layer's labelled vectors.
inline ProbeSet train_probe_set(const ActivationSet& set, const TrainConfig& cfg, const std::vector<int>& steerable_layers) {
  const auto rows = detail::labelled_rows(set);
  if (set.count(Label::faithful) == 0 || set.count(Label::faithless) == 0) {
    throw ValueError("train_probe_set: need at least one faithful and one faithless record");
  }
  std::set<int> unique(steerable_layers.begin(), steerable_layers.end());
  return detail::train_rows(set, rows, cfg, {unique.begin(), unique.end()}, true);
}

struct LogitTable {
  std::vector<std::int64_t> record_ids;
  PerLayer<std::vector<double>> values;  // layer -> one logit per record, record order
};

inline void check_shape(const ProbeSet& probes, const ActivationSet& set) {
  if (probes.hidden_dim() != set.hidden_dim() || probes.num_layers() != set.num_layers()) {
    throw DimensionError("probe set shape (" + std::to_string(probes.num_layers()) + "," +
                         std::to_string(probes.hidden_dim()) + ") does not match activations (" +
                         std::to_string(set.num_layers()) + "," + std::to_string(set.hidden_dim()) + ")");
  }
}

inline LogitTable logits(const ProbeSet& probes, const ActivationSet& set) {
  check_shape(probes, set);
  LogitTable t;
  for (const auto& r : set.records()) t.record_ids.push_back(r.record_id);
  for (const auto& p : probes.probes()) {
    auto& col = t.values[p.layer_index];
    col.reserve(set.size());
    for (const auto& r : set.records()) col.push_back(p.logit(set.layer_of(r, p.layer_index)));
  }
  return t;
}

inline PerLayer<double> accuracy(const ProbeSet& probes, const ActivationSet& set) {
  check_shape(probes, set);
  const auto rows = detail::labelled_rows(set);
  if (rows.empty()) throw ValueError("accuracy: no labelled records");
  PerLayer<double> out;
  for (const auto& p : probes.probes()) {
    std::size_t correct = 0;
    for (const auto i : rows) {
      const auto& r = set.records()[i];
      const bool pred = predicts_faithful(p.logit(set.layer_of(r, p.layer_index)));
      if (pred == (r.label == Label::faithful)) ++correct;
    }
    out[p.layer_index] = static_cast<double>(correct) / static_cast<double>(rows.size());
  }
  return out;
}

struct Direction {
  std::vector<double> v;
  bool usable = true;
};

// mean(faithless) - mean(faithful) per layer: points toward refusal.
inline PerLayer<Direction> mean_difference_direction(const ActivationSet& set) {
  const std::size_t n_pos = set.count(Label::faithful);
  const std::size_t n_neg = set.count(Label::faithless);
  if (n_pos == 0 || n_neg == 0) throw ValueError("mean_difference_direction: both classes must be non-empty");
  PerLayer<Direction> out;
  const auto d = static_cast<std::size_t>(set.hidden_dim());
  for (int l = 0; l < set.num_layers(); ++l) {
    std::vector<double> sum_pos(d, 0.0), sum_neg(d, 0.0);
    for (const auto& r : set.records()) {
      if (r.label == Label::unlabeled) continue;
      auto& acc = r.label == Label::faithful ? sum_pos : sum_neg;
      const auto v = set.layer_of(r, l);
      for (std::size_t k = 0; k < d; ++k) acc[k] += v[k];
    }
    Direction dir;
    dir.v.resize(d);
    for (std::size_t k = 0; k < d; ++k) {
      dir.v[k] = sum_neg[k] / static_cast<double>(n_neg) - sum_pos[k] / static_cast<double>(n_pos);
    }
    dir.usable = linalg::norm(dir.v) > 0.0;
    out[l] = std::move(dir);
  }
  return out;
}

// First principal component per layer. With pairs (faithful record id,
// faithless record id) the input rows are the per-pair differences, otherwise
// the activations themselves; rows are mean-centred either way. Unit norm, sign
// agreeing with the mean difference when that is defined, else the largest
// magnitude component is made positive.
inline PerLayer<Direction> pca_direction(
    const ActivationSet& set, const std::vector<std::pair<std::int64_t, std::int64_t>>& pairs = {}) {
  if (pairs.empty() && set.size() < 2) throw ValueError("pca_direction: need at least 2 records");
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < set.size(); ++i) index[set.records()[i].record_id] = i;
  std::vector<std::pair<std::size_t, std::size_t>> idx_pairs;
  for (const auto& [a, b] : pairs) {
    const auto ia = index.find(a);
    const auto ib = index.find(b);
    if (ia == index.end() || ib == index.end()) throw ValueError("pca_direction: unknown record id in pair");
    idx_pairs.emplace_back(ia->second, ib->second);
  }
  if (!pairs.empty() && pairs.size() < 2) throw ValueError("pca_direction: need at least 2 pairs");

  std::optional<PerLayer<Direction>> md;
  if (set.count(Label::faithful) > 0 && set.count(Label::faithless) > 0) md = mean_difference_direction(set);

  const int d = set.hidden_dim();
  PerLayer<Direction> out;
  for (int l = 0; l < set.num_layers(); ++l) {
    const std::size_t n = pairs.empty() ? set.size() : idx_pairs.size();
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), d);
    for (std::size_t i = 0; i < n; ++i) {
      if (pairs.empty()) {
        const auto v = set.vector(i, l);
        for (int k = 0; k < d; ++k) X(static_cast<Eigen::Index>(i), k) = v[static_cast<std::size_t>(k)];
      } else {
        const auto a = set.vector(idx_pairs[i].first, l);
        const auto b = set.vector(idx_pairs[i].second, l);
        for (int k = 0; k < d; ++k) {
          X(static_cast<Eigen::Index>(i), k) =
              static_cast<double>(a[static_cast<std::size_t>(k)]) - static_cast<double>(b[static_cast<std::size_t>(k)]);
        }
      }
    }
    X.rowwise() -= X.colwise().mean();
    const Eigen::MatrixXd C = X.transpose() * X;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    const double top = es.eigenvalues()[d - 1];
    if (!(top > 1e-12 * std::max(1.0, C.trace()))) {
      throw ValueError("pca_direction: rank-0 data at layer " + std::to_string(l));
    }
    Eigen::VectorXd u = es.eigenvectors().col(d - 1).normalized();

    double agreement = 0.0;
    if (md && md->at(l).usable) {
      for (int k = 0; k < d; ++k) agreement += u[k] * md->at(l).v[static_cast<std::size_t>(k)];
    }
    if (agreement == 0.0) {
      Eigen::Index arg = 0;
      u.cwiseAbs().maxCoeff(&arg);
      agreement = u[arg];
    }
    if (agreement < 0.0) u = -u;
    Direction dir;
    dir.v.assign(u.data(), u.data() + d);
    out[l] = std::move(dir);
  }
  return out;
}

struct Summary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double spread() const { return max - min; }
};

struct TrialRow {
  int trial = 0;
  std::uint64_t trial_seed = 0;
  int layer = 0;
  double accuracy = 0.0;
};

struct StabilityReport {
  PerLayer<Summary> summary;
  std::vector<TrialRow> rows;
  int resampled = 0;
};

inline constexpr int kMaxResamples = 100;

// One random train/test split with the given seed. nullopt when the split
// leaves the training half without one of the classes or the test half empty.
inline std::optional<PerLayer<double>> stability_trial(const ActivationSet& contrastive, double split,
                                                       const TrainConfig& cfg, std::uint64_t trial_seed,
                                                       const std::vector<int>& layers) {
  auto rows = detail::labelled_rows(contrastive);
  auto rng = Rng(trial_seed);
  shuffle(rows, rng);
  auto n_train = static_cast<std::size_t>(std::llround(split * static_cast<double>(rows.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, rows.size() > 1 ? rows.size() - 1 : 1);
  std::vector<std::size_t> train(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
  bool has_pos = false, has_neg = false;
  for (const auto i : train) {
    (contrastive.records()[i].label == Label::faithful ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg || test.empty()) return std::nullopt;
  std::sort(train.begin(), train.end());

  const auto probes = detail::train_rows(contrastive, train, cfg, layers, false);
  PerLayer<double> acc;
  for (const auto& p : probes.probes()) {
    std::size_t correct = 0;
    for (const auto i : test) {
      const auto& r = contrastive.records()[i];
      if (predicts_faithful(p.logit(contrastive.layer_of(r, p.layer_index))) == (r.label == Label::faithful)) ++correct;
    }
    acc[p.layer_index] = static_cast<double>(correct) / static_cast<double>(test.size());
  }
  return acc;
}

inline StabilityReport resample_stability(const ActivationSet& contrastive, int trials, double split,
                                          const TrainConfig& cfg, std::uint64_t seed, std::vector<int> layers = {}) {
  if (trials < 1) throw ValueError("resample_stability: trials must be >= 1");
  if (!(split > 0.0 && split < 1.0)) throw ValueError("resample_stability: split must be in (0,1)");
  if (contrastive.count(Label::faithful) == 0 || contrastive.count(Label::faithless) == 0) {
    throw ValueError("resample_stability: both classes must be present");
  }
  if (layers.empty()) layers = all_layers(contrastive.num_layers());

  StabilityReport report;
  for (int t = 0; t < trials; ++t) {
    std::optional<PerLayer<double>> acc;
    std::uint64_t trial_seed = 0;
    for (int attempt = 0; !acc; ++attempt) {
      if (attempt > kMaxResamples) {
        throw ValueError("resample_stability: trial " + std::to_string(t) + " could not draw a split with both classes");
      }
      if (attempt > 0) ++report.resampled;
      trial_seed = hash_seed({seed, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(attempt)});
      acc = stability_trial(contrastive, split, cfg, trial_seed, layers);
    }
    for (const auto& [layer, a] : *acc) report.rows.push_back({t, trial_seed, layer, a});
  }
  for (const int l : layers) {
    Summary s{0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    int n = 0;
    for (const auto& row : report.rows) {
      if (row.layer != l) continue;
      s.mean += row.accuracy;
      s.min = std::min(s.min, row.accuracy);
      s.max = std::max(s.max, row.accuracy);
      ++n;
    }
    s.mean /= n;
    report.summary[l] = s;
  }
  return report;
}

inline constexpr const char* kProbesManifest = "probes.json";
inline constexpr const char* kProbesTensor = "probes.bin";

inline void save_probe_set(const ProbeSet& probes, const fs::path& dir) {
  io::ensure_directory(dir);
  json m;
  m["format_version"] = kFormatVersion;
  m["hidden_dim"] = probes.hidden_dim();
  m["num_layers"] = probes.num_layers();
  json layers = json::array();
  std::vector<unsigned char> payload;
  for (const auto& p : probes.probes()) {
    layers.push_back(json{{"index", p.layer_index}, {"b", p.bias}});
    for (const float w : p.weights) io::append_f32(payload, w);
  }
  m["layers"] = std::move(layers);
  io::write_text(dir / kProbesManifest, m.dump(2) + "\n");
  io::write_bytes(dir / kProbesTensor, payload);
}

inline ProbeSet load_probe_set(const fs::path& dir) {
  const auto mpath = dir / kProbesManifest;
  const auto bpath = dir / kProbesTensor;
  if (!fs::exists(mpath)) throw IoError("missing " + mpath.string());
  if (!fs::exists(bpath)) throw IoError("missing " + bpath.string());
  try {
    const auto m = json::parse(io::read_text(mpath));
    const int version = m.at("format_version").get<int>();
    if (version != kFormatVersion) throw FormatError("unsupported probes format_version " + std::to_string(version));
    ProbeSet out(m.at("num_layers").get<int>(), m.at("hidden_dim").get<int>());
    const auto bytes = io::read_bytes(bpath);
    const auto d = static_cast<std::size_t>(out.hidden_dim());
    if (bytes.size() != m.at("layers").size() * d * 4) {
      throw FormatError("probes.bin length " + std::to_string(bytes.size()) + " does not match manifest");
    }
    const unsigned char* p = bytes.data();
    for (const auto& layer : m.at("layers")) {
      LinearProbe probe;
      probe.layer_index = layer.at("index").get<int>();
      probe.bias = layer.at("b").get<double>();
      probe.weights.resize(d);
      for (auto& w : probe.weights) {
        w = io::read_f32(p);
        p += 4;
      }
      if (!linalg::all_finite(std::span<const float>(probe.weights)) || !std::isfinite(probe.bias)) {
        throw FormatError("non-finite probe parameters for layer " + std::to_string(probe.layer_index));
      }
      out.add(std::move(probe));
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
}

}  // namespace steerlab
