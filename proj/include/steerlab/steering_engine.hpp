#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/probe_engine.hpp"

namespace steerlab {

enum class SteeringMode { constant, ablation, probe_clamp, probe_project };

enum class PositionPolicy { all_tokens, response_only, pre_response_only };

inline std::string to_string(SteeringMode m) {
  switch (m) {
    case SteeringMode::constant: return "constant";
    case SteeringMode::ablation: return "ablation";
    case SteeringMode::probe_clamp: return "probe_clamp";
    case SteeringMode::probe_project: return "probe_project";
  }
  return "constant";
}

inline SteeringMode parse_steering_mode(std::string_view s) {
  if (s == "constant") return SteeringMode::constant;
  if (s == "ablation") return SteeringMode::ablation;
  if (s == "probe_clamp") return SteeringMode::probe_clamp;
  if (s == "probe_project") return SteeringMode::probe_project;
  throw FormatError("unknown steering mode '" + std::string(s) + "'");
}

inline bool is_probe_mode(SteeringMode m) { return m == SteeringMode::probe_clamp || m == SteeringMode::probe_project; }

inline std::string to_string(PositionPolicy p) {
  switch (p) {
    case PositionPolicy::all_tokens: return "all_tokens";
    case PositionPolicy::response_only: return "response_only";
    case PositionPolicy::pre_response_only: return "pre_response_only";
  }
  return "all_tokens";
}

inline PositionPolicy parse_position_policy(std::string_view s) {
  if (s == "all_tokens") return PositionPolicy::all_tokens;
  if (s == "response_only") return PositionPolicy::response_only;
  if (s == "pre_response_only") return PositionPolicy::pre_response_only;
  throw FormatError("unknown position policy '" + std::string(s) + "'");
}

// One layer of a plan. For probe modes `vector` is w, `b` its bias and `s` the
// target logit; ablation and constant modes use b = 0 and ignore s.
struct LayerPlan {
  int index = 0;
  bool enabled = false;
  SteeringMode mode = SteeringMode::probe_clamp;
  std::vector<float> vector;
  double b = 0.0;
  double s = 0.0;
  double lambda = 0.0;
  PositionPolicy position = PositionPolicy::all_tokens;

  bool operator==(const LayerPlan&) const = default;
};

struct SteeringPlan {
  int num_layers = 0;
  int hidden_dim = 0;
  std::vector<LayerPlan> layers;  // one entry per layer index, ascending

  const LayerPlan* find(int layer) const {
    for (const auto& lp : layers) {
      if (lp.index == layer) return &lp;
    }
    return nullptr;
  }

  std::vector<int> enabled_layers() const {
    std::vector<int> out;
    for (const auto& lp : layers) {
      if (lp.enabled) out.push_back(lp.index);
    }
    return out;
  }

  bool operator==(const SteeringPlan&) const = default;
};

template <typename T>
double compute_lambda(std::span<const T> x, const LayerPlan& lp) {
  if (lp.mode == SteeringMode::constant) return lp.lambda;
  const std::span<const float> v(lp.vector);
  if (x.size() != v.size()) {
    throw DimensionError("steering vector dimension " + std::to_string(v.size()) + " vs activation " +
                         std::to_string(x.size()));
  }
  const double vv = linalg::squared_norm(v);
  if (!(vv > 0.0)) throw ValueError("zero-norm steering vector at layer " + std::to_string(lp.index));
  const double xv = linalg::dot(x, v);
  if (lp.mode == SteeringMode::ablation) return -xv / vv;
  const double gap = lp.s - xv - lp.b;
  if (lp.mode == SteeringMode::probe_clamp) return gap > 0.0 ? gap / vv : 0.0;
  return gap / vv;
}

template <typename T>
double compute_lambda(const std::vector<T>& x, const LayerPlan& lp) {
  return compute_lambda(std::span<const T>(x), lp);
}

// x + λ·v; a disabled layer is the identity.
template <typename T>
std::vector<double> apply_steering(std::span<const T> x, const LayerPlan& lp) {
  std::vector<double> out(x.begin(), x.end());
  if (!lp.enabled) return out;
  const double lambda = compute_lambda(x, lp);
  if (lambda == 0.0) return out;
  if (lp.vector.size() != x.size()) throw DimensionError("steering vector dimension mismatch");
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += lambda * static_cast<double>(lp.vector[k]);
  return out;
}

template <typename T>
std::vector<double> apply_steering(const std::vector<T>& x, const LayerPlan& lp) {
  return apply_steering(std::span<const T>(x), lp);
}

// Rank-1 adapter with fixed bias: x ↦ x − ŵ(ŵᵀx) + bias.
struct AdapterLayer {
  int index = 0;
  std::vector<double> w_hat;
  std::vector<double> bias;

  template <typename T>
  std::vector<double> apply(std::span<const T> x) const {
    if (x.size() != w_hat.size()) throw DimensionError("adapter dimension mismatch");
    const double proj = linalg::dot(std::span<const double>(w_hat), x);
    std::vector<double> out(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = static_cast<double>(x[k]) - w_hat[k] * proj + bias[k];
    return out;
  }
  template <typename T>
  std::vector<double> apply(const std::vector<T>& x) const {
    return apply(std::span<const T>(x));
  }
};

inline std::vector<AdapterLayer> export_adapter(const SteeringPlan& plan) {
  std::vector<AdapterLayer> out;
  for (const auto& lp : plan.layers) {
    if (!lp.enabled) continue;
    if (lp.mode != SteeringMode::probe_project) {
      throw ValueError("export_adapter: layer " + std::to_string(lp.index) + " uses mode " + to_string(lp.mode) +
                       "; the rank-1 adapter form is two-sided and exists only for probe_project plans");
    }
    const std::span<const float> w(lp.vector);
    const double nw2 = linalg::squared_norm(w);
    if (!(nw2 > 0.0)) throw ValueError("export_adapter: zero-norm probe at layer " + std::to_string(lp.index));
    const double nw = std::sqrt(nw2);
    AdapterLayer a;
    a.index = lp.index;
    a.w_hat.resize(w.size());
    a.bias.resize(w.size());
    const double c = (lp.s - lp.b) / nw2;
    for (std::size_t k = 0; k < w.size(); ++k) {
      a.w_hat[k] = static_cast<double>(w[k]) / nw;
      a.bias[k] = c * static_cast<double>(w[k]);
    }
    out.push_back(std::move(a));
  }
  if (out.empty()) throw ValueError("export_adapter: plan has no enabled layers");
  return out;
}

struct StrengthPolicy {
  enum class Kind { fixed, sigma_inverse, max_train_logit, quantile_train_logit, zero };
  Kind kind = Kind::zero;
  double value = 0.0;  // fixed: the target; sigma_inverse: p; quantile: q
  bool faithful_only = false;  // max_train_logit over faithful records only

  static StrengthPolicy fixed(double v) { return {Kind::fixed, v, false}; }
  static StrengthPolicy sigma_inverse(double p) { return {Kind::sigma_inverse, p, false}; }
  static StrengthPolicy max_train_logit(bool faithful_only = false) { return {Kind::max_train_logit, 0.0, faithful_only}; }
  static StrengthPolicy quantile(double q) { return {Kind::quantile_train_logit, q, false}; }
  static StrengthPolicy zero() { return {Kind::zero, 0.0, false}; }

  void check() const {
    if (kind == Kind::sigma_inverse && !(value > 0.0 && value < 1.0)) {
      throw ValueError("sigma_inverse p must lie in (0,1)");
    }
    if (kind == Kind::quantile_train_logit && !(value >= 0.0 && value <= 1.0)) {
      throw ValueError("quantile q must lie in [0,1]");
    }
  }

  bool operator==(const StrengthPolicy&) const = default;
};

inline std::string to_string(const StrengthPolicy& p) {
  switch (p.kind) {
    case StrengthPolicy::Kind::fixed: return "fixed:" + std::to_string(p.value);
    case StrengthPolicy::Kind::sigma_inverse: return "sigma-inv:" + std::to_string(p.value);
    case StrengthPolicy::Kind::max_train_logit: return p.faithful_only ? "max-faithful-logit" : "max-train-logit";
    case StrengthPolicy::Kind::quantile_train_logit: return "quantile:" + std::to_string(p.value);
    case StrengthPolicy::Kind::zero: return "zero";
  }
  return "zero";
}

// Sorted-sample linear interpolation (the common "type 7" estimator).
inline double quantile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw ValueError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double logit_of(double p) { return std::log(p / (1.0 - p)); }

inline PerLayer<double> resolve_targets(const ProbeSet& probes, const ActivationSet& train_set,
                                        const StrengthPolicy& policy) {
  policy.check();
  PerLayer<double> out;
  using K = StrengthPolicy::Kind;
  if (policy.kind == K::fixed || policy.kind == K::sigma_inverse || policy.kind == K::zero) {
    const double s = policy.kind == K::fixed ? policy.value : policy.kind == K::zero ? 0.0 : logit_of(policy.value);
    for (const int l : probes.layers()) out[l] = s;
    return out;
  }
  const bool faithful_subset = policy.kind == K::quantile_train_logit || policy.faithful_only;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (!faithful_subset || train_set.records()[i].label == Label::faithful) rows.push_back(i);
  }
  if (rows.empty()) {
    throw ValueError(std::string("resolve_targets: no ") + (faithful_subset ? "faithful " : "") +
                     "training records for policy " + to_string(policy));
  }
  check_shape(probes, train_set);
  for (const auto& p : probes.probes()) {
    std::vector<double> vals;
    vals.reserve(rows.size());
    for (const auto i : rows) vals.push_back(p.logit(train_set.vector(i, p.layer_index)));
    out[p.layer_index] = policy.kind == K::max_train_logit ? *std::max_element(vals.begin(), vals.end())
                                                           : quantile_linear(std::move(vals), policy.value);
  }
  return out;
}

// (s − w·x − b) / (‖w‖·‖x‖): displacement size relative to the activation.
template <typename T, typename W>
double norm_ratio(std::span<const T> x, std::span<const W> w, double b, double s) {
  const double nx = linalg::norm(x);
  const double nw = linalg::norm(w);
  if (!(nx > 0.0) || !(nw > 0.0)) throw ValueError("norm_ratio: zero-norm activation or probe");
  return (s - linalg::dot(w, x) - b) / (nw * nx);
}

template <typename T, typename W>
double norm_ratio(const std::vector<T>& x, const std::vector<W>& w, double b, double s) {
  return norm_ratio(std::span<const T>(x), std::span<const W>(w), b, s);
}

struct LayerPolicy {
  bool discard_last_layer = true;
  std::optional<double> accuracy_threshold;

  void check() const {
    if (accuracy_threshold && !(*accuracy_threshold >= 0.0 && *accuracy_threshold <= 1.0)) {
      throw ValueError("accuracy_threshold must lie in [0,1]");
    }
  }
};

// Layers a loop may train probes for: everything except the last layer under DLA.
inline std::vector<int> steerable_layers(int num_layers, const LayerPolicy& policy) {
  auto layers = all_layers(num_layers);
  if (policy.discard_last_layer && num_layers > 1) layers.pop_back();
  return layers;
}

inline SteeringPlan build_plan(const ProbeSet& probes, const PerLayer<double>& targets, const LayerPolicy& policy,
                               SteeringMode mode, PositionPolicy position,
                               const std::optional<PerLayer<double>>& validation_accuracy = std::nullopt) {
  policy.check();
  if (!is_probe_mode(mode)) throw ValueError("build_plan: probe plans need probe_clamp or probe_project mode");
  if (policy.accuracy_threshold && !validation_accuracy) {
    throw ValueError("build_plan: accuracy_threshold set but no validation accuracies given");
  }
  SteeringPlan plan{probes.num_layers(), probes.hidden_dim(), {}};
  for (int l = 0; l < probes.num_layers(); ++l) {
    LayerPlan lp;
    lp.index = l;
    lp.mode = mode;
    lp.position = position;
    const auto* probe = probes.find(l);
    const auto target = targets.find(l);
    if (probe) lp.b = probe->bias;
    if (target != targets.end()) lp.s = target->second;

    bool enabled = probe != nullptr;
    if (enabled && policy.discard_last_layer && l == probes.num_layers() - 1) enabled = false;
    if (enabled && policy.accuracy_threshold) {
      const auto acc = validation_accuracy->find(l);
      enabled = acc != validation_accuracy->end() && acc->second >= *policy.accuracy_threshold;
    }
    if (enabled && !(probe->weight_norm() > 0.0)) {
      log::warn("build_plan: zero-norm probe at layer " + std::to_string(l) + " disabled");
      enabled = false;
    }
    if (enabled && target == targets.end()) throw ValueError("build_plan: no target for layer " + std::to_string(l));
    lp.enabled = enabled;
    if (enabled) lp.vector = probe->weights;
    plan.layers.push_back(std::move(lp));
  }
  if (plan.enabled_layers().empty()) throw ValueError("build_plan: every layer is disabled");
  return plan;
}

// Plans from unit directions (mean-difference / PCA baselines).
inline SteeringPlan build_direction_plan(const PerLayer<Direction>& directions, int num_layers, int hidden_dim,
                                         const LayerPolicy& policy, SteeringMode mode, double lambda,
                                         PositionPolicy position) {
  if (is_probe_mode(mode)) throw ValueError("build_direction_plan: use build_plan for probe modes");
  SteeringPlan plan{num_layers, hidden_dim, {}};
  for (int l = 0; l < num_layers; ++l) {
    LayerPlan lp;
    lp.index = l;
    lp.mode = mode;
    lp.position = position;
    lp.lambda = mode == SteeringMode::constant ? lambda : 0.0;
    const auto it = directions.find(l);
    bool enabled = it != directions.end() && it->second.usable;
    if (enabled && policy.discard_last_layer && l == num_layers - 1) enabled = false;
    lp.enabled = enabled;
    if (enabled) {
      if (static_cast<int>(it->second.v.size()) != hidden_dim) throw DimensionError("direction dimension mismatch");
      lp.vector = linalg::to_float(std::span<const double>(it->second.v));
    }
    plan.layers.push_back(std::move(lp));
  }
  if (plan.enabled_layers().empty()) throw ValueError("build_direction_plan: every layer is disabled");
  return plan;
}

// Per-layer norm_ratio statistics of a probe plan over a set of activations.
inline PerLayer<Summary> norm_ratio_report(const SteeringPlan& plan, const ActivationSet& set) {
  if (set.empty()) throw ValueError("norm_ratio_report: empty activation set");
  PerLayer<Summary> out;
  for (const auto& lp : plan.layers) {
    if (!lp.enabled || !is_probe_mode(lp.mode)) continue;
    Summary s{0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double r = norm_ratio(set.vector(i, lp.index), std::span<const float>(lp.vector), lp.b, lp.s);
      s.mean += r;
      s.min = std::min(s.min, r);
      s.max = std::max(s.max, r);
    }
    s.mean /= static_cast<double>(set.size());
    out[lp.index] = s;
  }
  return out;
}

inline constexpr const char* kSteeringManifest = "steering.json";
inline constexpr const char* kSteeringTensor = "steering.bin";

inline void save_steering_plan(const SteeringPlan& plan, const fs::path& dir) {
  io::ensure_directory(dir);
  json m;
  m["format_version"] = kFormatVersion;
  m["hidden_dim"] = plan.hidden_dim;
  m["num_layers"] = plan.num_layers;
  json layers = json::array();
  std::vector<unsigned char> payload;
  for (const auto& lp : plan.layers) {
    json j;
    j["index"] = lp.index;
    j["enabled"] = lp.enabled;
    j["mode"] = to_string(lp.mode);
    j["b"] = lp.b;
    j["s"] = lp.s;
    if (lp.mode == SteeringMode::constant) j["lambda"] = lp.lambda;
    j["position_policy"] = to_string(lp.position);
    layers.push_back(std::move(j));
    if (lp.enabled) {
      if (static_cast<int>(lp.vector.size()) != plan.hidden_dim) {
        throw DimensionError("plan layer " + std::to_string(lp.index) + " vector has wrong dimension");
      }
      for (const float v : lp.vector) io::append_f32(payload, v);
    }
  }
  m["layers"] = std::move(layers);
  io::write_text(dir / kSteeringManifest, m.dump(2) + "\n");
  io::write_bytes(dir / kSteeringTensor, payload);
}

inline SteeringPlan load_steering_plan(const fs::path& dir) {
  const auto mpath = dir / kSteeringManifest;
  const auto bpath = dir / kSteeringTensor;
  if (!fs::exists(mpath)) throw IoError("missing " + mpath.string());
  if (!fs::exists(bpath)) throw IoError("missing " + bpath.string());
  try {
    const auto m = json::parse(io::read_text(mpath));
    const int version = m.at("format_version").get<int>();
    if (version != kFormatVersion) throw FormatError("unsupported steering format_version " + std::to_string(version));
    SteeringPlan plan{m.at("num_layers").get<int>(), m.at("hidden_dim").get<int>(), {}};
    const auto bytes = io::read_bytes(bpath);
    std::size_t enabled = 0;
    for (const auto& j : m.at("layers")) enabled += j.at("enabled").get<bool>() ? 1 : 0;
    const auto d = static_cast<std::size_t>(plan.hidden_dim);
    if (bytes.size() != enabled * d * 4) {
      throw FormatError("steering.bin length " + std::to_string(bytes.size()) + " does not match " +
                        std::to_string(enabled) + " enabled layers");
    }
    const unsigned char* p = bytes.data();
    for (const auto& j : m.at("layers")) {
      LayerPlan lp;
      lp.index = j.at("index").get<int>();
      lp.enabled = j.at("enabled").get<bool>();
      lp.mode = parse_steering_mode(j.at("mode").get<std::string>());
      lp.b = j.at("b").get<double>();
      lp.s = j.at("s").get<double>();
      if (j.contains("lambda")) lp.lambda = j.at("lambda").get<double>();
      lp.position = parse_position_policy(j.at("position_policy").get<std::string>());
      if (lp.index < 0 || lp.index >= plan.num_layers) throw FormatError("plan layer index out of range");
      if (lp.enabled) {
        lp.vector.resize(d);
        for (auto& v : lp.vector) {
          v = io::read_f32(p);
          p += 4;
        }
        if (!linalg::all_finite(std::span<const float>(lp.vector))) throw FormatError("non-finite steering vector");
      }
      plan.layers.push_back(std::move(lp));
    }
    return plan;
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
}

inline constexpr const char* kAdapterManifest = "adapter.json";
inline constexpr const char* kAdapterTensor = "adapter.bin";

// adapter.bin holds, per layer in manifest order, ŵ then the bias vector.
inline void save_adapter(const std::vector<AdapterLayer>& layers, int num_layers, int hidden_dim, const fs::path& dir) {
  io::ensure_directory(dir);
  json m;
  m["format_version"] = kFormatVersion;
  m["hidden_dim"] = hidden_dim;
  m["num_layers"] = num_layers;
  m["form"] = "x - w_hat (w_hat^T x) + bias";
  json arr = json::array();
  std::vector<unsigned char> payload;
  for (const auto& a : layers) {
    arr.push_back(json{{"index", a.index}, {"rank", 1}});
    for (const double v : a.w_hat) io::append_f32(payload, static_cast<float>(v));
    for (const double v : a.bias) io::append_f32(payload, static_cast<float>(v));
  }
  m["layers"] = std::move(arr);
  io::write_text(dir / kAdapterManifest, m.dump(2) + "\n");
  io::write_bytes(dir / kAdapterTensor, payload);
}

inline std::vector<AdapterLayer> load_adapter(const fs::path& dir) {
  const auto mpath = dir / kAdapterManifest;
  try {
    const auto m = json::parse(io::read_text(mpath));
    const auto d = m.at("hidden_dim").get<std::size_t>();
    const auto bytes = io::read_bytes(dir / kAdapterTensor);
    if (bytes.size() != m.at("layers").size() * d * 8) throw FormatError("adapter.bin length mismatch");
    const unsigned char* p = bytes.data();
    std::vector<AdapterLayer> out;
    for (const auto& j : m.at("layers")) {
      AdapterLayer a;
      a.index = j.at("index").get<int>();
      a.w_hat.resize(d);
      a.bias.resize(d);
      for (auto& v : a.w_hat) {
        v = io::read_f32(p);
        p += 4;
      }
      for (auto& v : a.bias) {
        v = io::read_f32(p);
        p += 4;
      }
      out.push_back(std::move(a));
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
}

}  // namespace steerlab
