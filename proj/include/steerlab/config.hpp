#pragma once

#include <sstream>
#include <string>

#include "steerlab/analysis.hpp"
#include "toml.hpp"

// Declarative run configuration (TOML), mirroring the LoopConfig/TrainConfig/
// SyntheticConfig field names. Unknown keys are rejected so typos surface.
namespace steerlab {

struct RunConfig {
  std::uint64_t seed = 0;
  LoopConfig loop;
  SyntheticConfig synthetic;
};

// zero | max-train-logit | max-faithful-logit | median-faithful |
// sigma-inv:<p> | fixed:<value> | quantile:<q>
inline StrengthPolicy parse_strength_policy(const std::string& text) {
  auto number = [&](const std::string& prefix) {
    const std::string rest = text.substr(prefix.size());
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(rest, &used);
    } catch (const std::exception&) {
      throw ValueError("bad number in strength policy '" + text + "'");
    }
    if (used != rest.size()) throw ValueError("bad number in strength policy '" + text + "'");
    return v;
  };
  StrengthPolicy p;
  if (text == "zero") {
    p = StrengthPolicy::zero();
  } else if (text == "max-train-logit") {
    p = StrengthPolicy::max_train_logit(false);
  } else if (text == "max-faithful-logit") {
    p = StrengthPolicy::max_train_logit(true);
  } else if (text == "median-faithful") {
    p = StrengthPolicy::quantile(0.5);
  } else if (text.rfind("sigma-inv:", 0) == 0) {
    p = StrengthPolicy::sigma_inverse(number("sigma-inv:"));
  } else if (text.rfind("fixed:", 0) == 0) {
    p = StrengthPolicy::fixed(number("fixed:"));
  } else if (text.rfind("quantile:", 0) == 0) {
    p = StrengthPolicy::quantile(number("quantile:"));
  } else {
    throw ValueError("unknown strength policy '" + text + "'");
  }
  p.check();
  return p;
}

inline std::string exact_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string policy_spec(const StrengthPolicy& p) {
  using K = StrengthPolicy::Kind;
  switch (p.kind) {
    case K::zero: return "zero";
    case K::max_train_logit: return p.faithful_only ? "max-faithful-logit" : "max-train-logit";
    case K::sigma_inverse: return "sigma-inv:" + exact_num(p.value);
    case K::fixed: return "fixed:" + exact_num(p.value);
    case K::quantile_train_logit: return p.value == 0.5 ? "median-faithful" : "quantile:" + exact_num(p.value);
  }
  return "zero";
}

namespace detail {

template <typename T>
void read_key(const toml::table& tbl, const char* key, T& out) {
  const auto* node = tbl.get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, bool>) {
    if (!node->is_boolean()) throw ValueError(std::string("config key '") + key + "' must be a boolean");
    out = node->as_boolean()->get();
  } else if constexpr (std::is_integral_v<T>) {
    if (!node->is_integer()) throw ValueError(std::string("config key '") + key + "' must be an integer");
    out = static_cast<T>(node->as_integer()->get());
  } else if constexpr (std::is_floating_point_v<T>) {
    if (node->is_integer()) {
      out = static_cast<T>(node->as_integer()->get());
    } else if (node->is_floating_point()) {
      out = static_cast<T>(node->as_floating_point()->get());
    } else {
      throw ValueError(std::string("config key '") + key + "' must be a number");
    }
  } else {
    if (!node->is_string()) throw ValueError(std::string("config key '") + key + "' must be a string");
    out = node->as_string()->get();
  }
}

inline void reject_unknown(const toml::table& tbl, const std::string& section, std::initializer_list<const char*> known) {
  for (const auto& [k, v] : tbl) {
    bool ok = false;
    for (const char* name : known) ok = ok || k.str() == name;
    if (!ok) throw ValueError("unknown config key '" + section + (section.empty() ? "" : ".") + std::string(k.str()) + "'");
  }
}

inline const toml::table* section(const toml::table& root, const char* name) {
  const auto* node = root.get(name);
  if (!node) return nullptr;
  if (!node->is_table()) throw ValueError(std::string("config section '") + name + "' must be a table");
  return node->as_table();
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ": " << e.description() << " at line " << e.source().begin.line;
    throw FormatError(msg.str());
  }
  detail::reject_unknown(root, "", {"seed", "loop", "thresholds", "train", "layers", "synthetic"});
  RunConfig c;
  detail::read_key(root, "seed", c.seed);

  if (const auto* t = detail::section(root, "loop")) {
    detail::reject_unknown(*t, "loop", {"iterations", "sampling", "inference", "sampling_mode", "inference_mode",
                                        "capture", "max_tokens_search", "split_ratio"});
    detail::read_key(*t, "iterations", c.loop.iterations);
    std::string s;
    if (t->get("sampling")) {
      detail::read_key(*t, "sampling", s);
      c.loop.sampling = parse_strength_policy(s);
    }
    if (t->get("inference")) {
      detail::read_key(*t, "inference", s);
      c.loop.inference = parse_strength_policy(s);
    }
    if (t->get("sampling_mode")) {
      detail::read_key(*t, "sampling_mode", s);
      c.loop.sampling_mode = parse_steering_mode(s);
    }
    if (t->get("inference_mode")) {
      detail::read_key(*t, "inference_mode", s);
      c.loop.inference_mode = parse_steering_mode(s);
    }
    if (t->get("capture")) {
      detail::read_key(*t, "capture", s);
      c.loop.capture.role = parse_token_role(s);
    }
    detail::read_key(*t, "max_tokens_search", c.loop.max_tokens_search);
    detail::read_key(*t, "split_ratio", c.loop.split_ratio);
  }
  if (const auto* t = detail::section(root, "thresholds")) {
    detail::reject_unknown(*t, "thresholds", {"low", "high"});
    detail::read_key(*t, "low", c.loop.thresholds.low);
    detail::read_key(*t, "high", c.loop.thresholds.high);
  }
  if (const auto* t = detail::section(root, "train")) {
    detail::reject_unknown(*t, "train", {"l2_regularization", "max_epochs", "learning_rate", "convergence_tol",
                                         "class_balance"});
    detail::read_key(*t, "l2_regularization", c.loop.train.l2_regularization);
    detail::read_key(*t, "max_epochs", c.loop.train.max_epochs);
    detail::read_key(*t, "learning_rate", c.loop.train.learning_rate);
    detail::read_key(*t, "convergence_tol", c.loop.train.convergence_tol);
    detail::read_key(*t, "class_balance", c.loop.train.class_balance);
  }
  if (const auto* t = detail::section(root, "layers")) {
    detail::reject_unknown(*t, "layers", {"discard_last_layer", "accuracy_threshold"});
    detail::read_key(*t, "discard_last_layer", c.loop.layers.discard_last_layer);
    if (t->get("accuracy_threshold")) {
      double v = 0.0;
      detail::read_key(*t, "accuracy_threshold", v);
      c.loop.layers.accuracy_threshold = v;
    }
  }
  if (const auto* t = detail::section(root, "synthetic")) {
    detail::reject_unknown(*t, "synthetic",
                           {"num_layers", "hidden_dim", "margin", "nuisance_count", "nuisance_strength", "nuisance_sd",
                            "noise_sigma", "magnitude_growth", "annotator_noise", "behavior_sharpness",
                            "coherence_tau", "coherence_ramp", "offset_strength"});
    auto& s = c.synthetic;
    detail::read_key(*t, "num_layers", s.num_layers);
    detail::read_key(*t, "hidden_dim", s.hidden_dim);
    detail::read_key(*t, "margin", s.margin);
    detail::read_key(*t, "nuisance_count", s.nuisance_count);
    detail::read_key(*t, "nuisance_strength", s.nuisance_strength);
    detail::read_key(*t, "nuisance_sd", s.nuisance_sd);
    detail::read_key(*t, "noise_sigma", s.noise_sigma);
    detail::read_key(*t, "magnitude_growth", s.magnitude_growth);
    detail::read_key(*t, "annotator_noise", s.annotator_noise);
    detail::read_key(*t, "behavior_sharpness", s.behavior_sharpness);
    detail::read_key(*t, "coherence_tau", s.coherence_tau);
    detail::read_key(*t, "coherence_ramp", s.coherence_ramp);
    detail::read_key(*t, "offset_strength", s.offset_strength);
  }
  c.loop.seed = c.seed;
  c.loop.train.seed = c.seed;
  c.synthetic.seed = c.seed;
  c.loop.check();
  c.synthetic.check();
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  return parse_config(io::read_text(path), path.string());
}

// Fully resolved TOML; parse_config(to_toml(c)) == c.
inline std::string to_toml(const RunConfig& c) {
  toml::table root;
  root.insert("seed", static_cast<std::int64_t>(c.seed));
  toml::table loop;
  loop.insert("iterations", c.loop.iterations);
  loop.insert("sampling", policy_spec(c.loop.sampling));
  loop.insert("inference", policy_spec(c.loop.inference));
  loop.insert("sampling_mode", to_string(c.loop.sampling_mode));
  loop.insert("inference_mode", to_string(c.loop.inference_mode));
  loop.insert("capture", to_string(c.loop.capture.role));
  loop.insert("max_tokens_search", c.loop.max_tokens_search);
  loop.insert("split_ratio", c.loop.split_ratio);
  root.insert("loop", std::move(loop));
  root.insert("thresholds", toml::table{{"low", c.loop.thresholds.low}, {"high", c.loop.thresholds.high}});
  root.insert("train", toml::table{{"l2_regularization", c.loop.train.l2_regularization},
                                   {"max_epochs", c.loop.train.max_epochs},
                                   {"learning_rate", c.loop.train.learning_rate},
                                   {"convergence_tol", c.loop.train.convergence_tol},
                                   {"class_balance", c.loop.train.class_balance}});
  toml::table layers{{"discard_last_layer", c.loop.layers.discard_last_layer}};
  if (c.loop.layers.accuracy_threshold) layers.insert("accuracy_threshold", *c.loop.layers.accuracy_threshold);
  root.insert("layers", std::move(layers));
  const auto& s = c.synthetic;
  root.insert("synthetic", toml::table{{"num_layers", s.num_layers},
                                       {"hidden_dim", s.hidden_dim},
                                       {"margin", s.margin},
                                       {"nuisance_count", s.nuisance_count},
                                       {"nuisance_strength", s.nuisance_strength},
                                       {"nuisance_sd", s.nuisance_sd},
                                       {"noise_sigma", s.noise_sigma},
                                       {"magnitude_growth", s.magnitude_growth},
                                       {"annotator_noise", s.annotator_noise},
                                       {"behavior_sharpness", s.behavior_sharpness},
                                       {"coherence_tau", s.coherence_tau},
                                       {"coherence_ramp", s.coherence_ramp},
                                       {"offset_strength", s.offset_strength}});
  std::ostringstream out;
  out << root << "\n";
  return out.str();
}

}  // namespace steerlab
