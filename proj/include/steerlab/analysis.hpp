#pragma once

#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "steerlab/extraction_loop.hpp"

namespace steerlab {

struct NormReport {
  PerLayer<Summary> layers;
  std::size_t samples = 0;
};

inline NormReport layer_norms(const ActivationSet& set) {
  if (set.empty()) throw ValueError("layer_norms: empty activation set");
  NormReport r;
  r.samples = set.size();
  for (int l = 0; l < set.num_layers(); ++l) {
    Summary s{0.0, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double n = linalg::norm(set.vector(i, l));
      s.mean += n;
      s.min = std::min(s.min, n);
      s.max = std::max(s.max, n);
    }
    s.mean /= static_cast<double>(set.size());
    // Keep min <= mean <= max exact in the face of summation rounding.
    s.mean = std::clamp(s.mean, s.min, s.max);
    r.layers[l] = s;
  }
  return r;
}

struct SweepPoint {
  std::string label;
  double quantile = 0.0;
  PerLayer<double> targets;
  double score = 0.0;
};

struct MonotonicityReport {
  std::vector<SweepPoint> points;  // in increasing target order
  bool monotone = true;
  int peak_index = 0;
};

inline const std::vector<std::pair<std::string, double>>& default_sweep() {
  static const std::vector<std::pair<std::string, double>> labels{
      {"q1", 0.25}, {"median", 0.5}, {"q3", 0.75}, {"max", 1.0}};
  return labels;
}

inline std::optional<double> sweep_quantile(const std::string& label) {
  for (const auto& [name, q] : default_sweep()) {
    if (name == label) return q;
  }
  return std::nullopt;
}

// Targets at quantiles of the faithful training logits; the report is monotone
// when the mean judged score never decreases from one point to the next.
inline MonotonicityReport monotonicity_sweep(const ProbeSet& probes, SubjectModel& model, Judge& judge,
                                             const PromptSet& prompts, const ActivationSet& train_set,
                                             const LoopConfig& cfg,
                                             const std::vector<std::pair<std::string, double>>& points = default_sweep()) {
  if (prompts.empty()) throw ValueError("monotonicity_sweep: empty prompt set");
  MonotonicityReport r;
  for (const auto& [label, q] : points) {
    SweepPoint p;
    p.label = label;
    p.quantile = q;
    const auto plan = plan_for(probes, train_set, StrengthPolicy::quantile(q), cfg.inference_mode, cfg, &p.targets);
    const auto res = model.run(prompts, &plan, cfg.capture, cfg.max_tokens_search);
    const auto items = judge_batch(judge, prompts.prompts(), res.responses);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& it : items) {
      if (it.score) {
        sum += *it.score;
        ++n;
      }
    }
    if (n == 0) throw ValueError("monotonicity_sweep: judge failed on every prompt at " + label);
    p.score = sum / static_cast<double>(n);
    r.points.push_back(std::move(p));
  }
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    if (r.points[i].score < r.points[i - 1].score) r.monotone = false;
    if (r.points[i].score > r.points[static_cast<std::size_t>(r.peak_index)].score) r.peak_index = static_cast<int>(i);
  }
  return r;
}

inline StabilityReport instability_report(const ActivationSet& contrastive, int trials, double split,
                                          const TrainConfig& cfg, std::uint64_t seed, std::vector<int> layers = {}) {
  return resample_stability(contrastive, trials, split, cfg, seed, std::move(layers));
}

// Comma-separated tables with a header row and a fixed column order.
namespace csv {

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string norms(const NormReport& r) {
  std::string out = "layer,mean_norm,min_norm,max_norm,samples\n";
  for (const auto& [l, s] : r.layers) {
    out += std::to_string(l) + "," + num(s.mean) + "," + num(s.min) + "," + num(s.max) + "," +
           std::to_string(r.samples) + "\n";
  }
  return out;
}

inline std::string stability_summary(const StabilityReport& r) {
  std::string out = "layer,mean_accuracy,min_accuracy,max_accuracy,spread\n";
  for (const auto& [l, s] : r.summary) {
    out += std::to_string(l) + "," + num(s.mean) + "," + num(s.min) + "," + num(s.max) + "," + num(s.spread()) + "\n";
  }
  return out;
}

inline std::string stability_trials(const StabilityReport& r) {
  std::string out = "trial,trial_seed,layer,accuracy\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.trial) + "," + std::to_string(row.trial_seed) + "," + std::to_string(row.layer) + "," +
           num(row.accuracy) + "\n";
  }
  return out;
}

inline std::string monotonicity(const MonotonicityReport& r) {
  std::string out = "label,quantile,mean_score,monotone\n";
  for (const auto& p : r.points) {
    out += p.label + "," + num(p.quantile) + "," + num(p.score) + "," + (r.monotone ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string monotonicity_targets(const MonotonicityReport& r) {
  std::string out = "label,layer,target\n";
  for (const auto& p : r.points) {
    for (const auto& [l, s] : p.targets) out += p.label + "," + std::to_string(l) + "," + num(s) + "\n";
  }
  return out;
}

inline std::string norm_ratios(const PerLayer<Summary>& r) {
  std::string out = "layer,mean_ratio,min_ratio,max_ratio\n";
  for (const auto& [l, s] : r) {
    out += std::to_string(l) + "," + num(s.mean) + "," + num(s.min) + "," + num(s.max) + "\n";
  }
  return out;
}

inline std::string iteration_log(const std::vector<IterationLog>& log) {
  std::string out = "iteration,training_size,generated,positive,negative,discarded,judge_failures,validation_score\n";
  for (const auto& e : log) {
    out += std::to_string(e.iteration) + "," + std::to_string(e.training_size) + "," + std::to_string(e.generated) +
           "," + std::to_string(e.positive) + "," + std::to_string(e.negative) + "," + std::to_string(e.discarded) +
           "," + std::to_string(e.judge_failures) + "," + num(e.validation_score) + "\n";
  }
  return out;
}

}  // namespace csv
}  // namespace steerlab
