#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/annotator.hpp"

namespace steerlab {

struct LoopConfig {
  int iterations = 20;  // T
  StrengthPolicy sampling = StrengthPolicy::zero();
  StrengthPolicy inference = StrengthPolicy::max_train_logit();
  SteeringMode sampling_mode = SteeringMode::probe_clamp;
  SteeringMode inference_mode = SteeringMode::probe_clamp;
  ThresholdConfig thresholds;
  TrainConfig train;
  LayerPolicy layers;
  CaptureSpec capture;
  int max_tokens_search = 256;
  double split_ratio = 0.5;
  std::uint64_t seed = 0;

  void check() const {
    if (iterations < 1) throw ValueError("iterations must be >= 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ValueError("split_ratio must lie in (0,1)");
    if (max_tokens_search < 0) throw ValueError("max_tokens_search must be >= 0");
    if (!is_probe_mode(sampling_mode) || !is_probe_mode(inference_mode)) {
      throw ValueError("loop steering modes must be probe_clamp or probe_project");
    }
    thresholds.check();
    train.check();
    layers.check();
    sampling.check();
    inference.check();
  }
};

struct IterationLog {
  int iteration = 0;
  std::size_t training_size = 0;  // |A_i|
  std::size_t generated = 0;      // samples drawn to build A_i from A_{i-1}
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t discarded = 0;
  std::size_t judge_failures = 0;  // subset of discarded
  double validation_score = 0.0;
  PerLayer<double> sampling_targets;
  PerLayer<double> inference_targets;
  double wall_seconds = 0.0;  // not written to checkpoints

  json to_json() const {
    json j;
    j["iteration"] = iteration;
    j["training_size"] = training_size;
    j["generated"] = generated;
    j["positive"] = positive;
    j["negative"] = negative;
    j["discarded"] = discarded;
    j["judge_failures"] = judge_failures;
    j["validation_score"] = validation_score;
    auto targets = [](const PerLayer<double>& t) {
      json a = json::array();
      for (const auto& [l, s] : t) a.push_back(json{{"layer", l}, {"s", s}});
      return a;
    };
    j["sampling_targets"] = targets(sampling_targets);
    j["inference_targets"] = targets(inference_targets);
    return j;
  }

  static IterationLog from_json(const json& j) {
    IterationLog e;
    e.iteration = j.at("iteration").get<int>();
    e.training_size = j.at("training_size").get<std::size_t>();
    e.generated = j.at("generated").get<std::size_t>();
    e.positive = j.at("positive").get<std::size_t>();
    e.negative = j.at("negative").get<std::size_t>();
    e.discarded = j.at("discarded").get<std::size_t>();
    e.judge_failures = j.at("judge_failures").get<std::size_t>();
    e.validation_score = j.at("validation_score").get<double>();
    for (const auto& t : j.at("sampling_targets")) e.sampling_targets[t.at("layer").get<int>()] = t.at("s").get<double>();
    for (const auto& t : j.at("inference_targets")) e.inference_targets[t.at("layer").get<int>()] = t.at("s").get<double>();
    return e;
  }
};

// One line of responses.txt: the raw material for re-thresholding later.
struct ResponseLog {
  std::int64_t record_id = 0;
  std::int64_t prompt_id = 0;
  std::string phase;  // "sampling" or "validation"
  std::string response;
  std::optional<double> score;
  std::string outcome;
};

struct LoopState {
  PromptSet train_benign;
  PromptSet train_malicious;
  PromptSet validation;
  ActivationSet training;  // A_i
  ProbeSet probes;         // F_i
  int iteration = 0;
  std::vector<IterationLog> log;
  std::vector<ResponseLog> responses;  // of the latest iteration
};

struct PromptSplit {
  PromptSet train_benign;
  PromptSet train_malicious;
  PromptSet validation;
};

// Pairs the i-th benign prompt with the i-th malicious prompt, shuffles the
// pairs with the loop seed and keeps round(ratio·pairs) of them for training;
// the malicious halves of the rest are the validation prompts.
inline PromptSplit split_prompts(const PromptSet& prompts, double ratio, std::uint64_t seed) {
  const auto benign = prompts.of_category(Category::benign);
  const auto malicious = prompts.of_category(Category::malicious);
  if (benign.empty() || malicious.empty()) throw ValueError("prompt set needs both benign and malicious prompts");
  const std::size_t pairs = std::min(benign.size(), malicious.size());
  if (benign.size() != malicious.size()) {
    log::warn("unequal category sizes; using the first " + std::to_string(pairs) + " prompts of each");
  }
  std::vector<std::size_t> order(pairs);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng({seed, 0x53504c4954ULL});
  shuffle(order, rng);
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pairs)));
  n_train = std::clamp<std::size_t>(n_train, 1, pairs > 1 ? pairs - 1 : 1);
  if (pairs < 2) throw ValueError("need at least two prompt pairs to split into training and validation");
  PromptSplit s;
  for (std::size_t i = 0; i < pairs; ++i) {
    if (i < n_train) {
      s.train_benign.add(benign[order[i]]);
      s.train_malicious.add(malicious[order[i]]);
    } else {
      s.validation.add(malicious[order[i]]);
    }
  }
  return s;
}

// Unsteered activations of the prompts, labelled by category with the
// category-implied score (benign 1, malicious 0).
inline ActivationSet contrastive_set(SubjectModel& model, const PromptSet& benign, const PromptSet& malicious,
                                     const CaptureSpec& capture, int max_tokens) {
  ActivationSet out(model.num_layers(), model.hidden_dim());
  for (const auto* group : {&benign, &malicious}) {
    if (group->empty()) continue;
    auto res = model.run(*group, nullptr, capture, max_tokens);
    for (auto rec : res.activations.records()) {
      const bool faithful = group == &benign;
      rec.label = faithful ? Label::faithful : Label::faithless;
      rec.score = faithful ? 1.0 : 0.0;
      rec.source_iteration = 0;
      out.mutable_records().push_back(std::move(rec));
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out.mutable_records()[i].record_id = static_cast<std::int64_t>(i);
  out.validate();
  return out;
}

inline std::vector<int> loop_layers(const SubjectModel& model, const LoopConfig& cfg) {
  return steerable_layers(model.num_layers(), cfg.layers);
}

inline SteeringPlan plan_for(const ProbeSet& probes, const ActivationSet& training, const StrengthPolicy& policy,
                             SteeringMode mode, const LoopConfig& cfg, PerLayer<double>* targets_out = nullptr) {
  const auto targets = resolve_targets(probes, training, policy);
  if (targets_out) *targets_out = targets;
  LayerPolicy lp = cfg.layers;
  lp.accuracy_threshold.reset();
  return build_plan(probes, targets, lp, mode, PositionPolicy::all_tokens);
}

inline LoopState initialize(const PromptSet& prompts, SubjectModel& model, const LoopConfig& cfg) {
  cfg.check();
  auto split = split_prompts(prompts, cfg.split_ratio, cfg.seed);
  LoopState st;
  st.train_benign = std::move(split.train_benign);
  st.train_malicious = std::move(split.train_malicious);
  st.validation = std::move(split.validation);
  st.training = contrastive_set(model, st.train_benign, st.train_malicious, cfg.capture, cfg.max_tokens_search);
  st.probes = train_probe_set(st.training, cfg.train, loop_layers(model, cfg));
  return st;
}

struct ValidationResult {
  double score = 0.0;
  PerLayer<double> targets;
  SteeringPlan plan;
  std::vector<ResponseLog> responses;
};

// Mean judged score of the validation prompts steered by F with inference targets.
inline ValidationResult validate(const ProbeSet& probes, const ActivationSet& training, SubjectModel& model,
                                 Judge& judge, const PromptSet& validation, const LoopConfig& cfg) {
  if (validation.empty()) throw ValueError("validate: empty validation prompt set");
  ValidationResult v;
  v.plan = plan_for(probes, training, cfg.inference, cfg.inference_mode, cfg, &v.targets);
  const auto res = model.run(validation, &v.plan, cfg.capture, cfg.max_tokens_search);
  const auto items = judge_batch(judge, validation.prompts(), res.responses);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].score) {
      sum += *items[i].score;
      ++n;
    }
    v.responses.push_back({static_cast<std::int64_t>(i), validation[i].prompt_id, "validation", res.responses[i],
                           items[i].score, ""});
  }
  if (n == 0) throw ValueError("validate: the judge failed on every validation prompt");
  v.score = sum / static_cast<double>(n);
  return v;
}

// One extraction round: sample at the sampling targets, annotate, merge, retrain.
inline void run_iteration(LoopState& st, SubjectModel& model, Judge& judge, const LoopConfig& cfg) {
  const int next = st.iteration + 1;
  IterationLog entry;
  entry.iteration = next;
  const auto plan = plan_for(st.probes, st.training, cfg.sampling, cfg.sampling_mode, cfg, &entry.sampling_targets);
  auto res = model.run(st.train_malicious, &plan, cfg.capture, cfg.max_tokens_search);
  const auto items = judge_batch(judge, st.train_malicious.prompts(), res.responses);
  std::vector<std::int64_t> ids;
  for (const auto& r : res.activations.records()) ids.push_back(r.record_id);
  const auto outcomes = make_outcomes(ids, items, cfg.thresholds);

  st.responses.clear();
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    entry.generated++;
    if (o.outcome == Outcome::positive) entry.positive++;
    if (o.outcome == Outcome::negative) entry.negative++;
    if (o.outcome == Outcome::discarded) entry.discarded++;
    if (!o.score) entry.judge_failures++;
    st.responses.push_back({o.record_id, st.train_malicious[i].prompt_id, "sampling", res.responses[i], o.score,
                            to_string(o.outcome)});
  }

  auto augmented = annotate_set(res.activations, outcomes);
  auto& recs = augmented.mutable_records();
  for (auto& r : recs) r.source_iteration = next;
  std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.prompt_id < b.prompt_id; });
  st.training = merge(st.training, augmented);
  st.probes = train_probe_set(st.training, cfg.train, loop_layers(model, cfg));
  st.iteration = next;
  entry.training_size = st.training.size();
  st.log.push_back(entry);
}

inline std::string iteration_dir_name(int i) { return "iter_" + std::to_string(i); }

inline void save_response_log(const std::vector<ResponseLog>& lines, const fs::path& path) {
  std::string out;
  for (const auto& r : lines) {
    json j;
    j["record_id"] = r.record_id;
    j["prompt_id"] = r.prompt_id;
    j["phase"] = r.phase;
    j["response"] = r.response;
    j["score"] = r.score ? json(*r.score) : json(nullptr);
    if (!r.outcome.empty()) j["outcome"] = r.outcome;
    out += j.dump() + "\n";
  }
  io::write_text(path, out);
}

inline void write_checkpoint(const fs::path& dir, const LoopState& st, const IterationLog& entry,
                             const SteeringPlan& validation_plan, const std::vector<ResponseLog>& validation_responses) {
  io::ensure_directory(dir);
  save_activation_set(st.training, dir);
  save_probe_set(st.probes, dir);
  save_steering_plan(validation_plan, dir);
  auto lines = st.responses;
  lines.insert(lines.end(), validation_responses.begin(), validation_responses.end());
  save_response_log(lines, dir / "responses.txt");
  io::write_text(dir / "log.json", entry.to_json().dump(2) + "\n");
}

struct LoopResult {
  int best_iteration = 0;
  ProbeSet best_probes;
  ActivationSet best_training;
  std::vector<IterationLog> log;
  LoopState final_state;
};

using IterationCallback = std::function<void(const IterationLog&)>;

namespace detail {

inline LoopResult finish(LoopState st, const std::vector<ProbeSet>& probes, const std::vector<ActivationSet>& sets,
                         const std::optional<fs::path>& checkpoint_root) {
  LoopResult r;
  for (std::size_t i = 0; i < st.log.size(); ++i) {
    if (st.log[i].validation_score > st.log[static_cast<std::size_t>(r.best_iteration)].validation_score) {
      r.best_iteration = static_cast<int>(i);
    }
  }
  const auto best = static_cast<std::size_t>(r.best_iteration);
  if (best < probes.size() && probes[best].size() > 0) {
    r.best_probes = probes[best];
    r.best_training = sets[best];
  } else if (checkpoint_root) {
    const auto dir = *checkpoint_root / iteration_dir_name(r.best_iteration);
    r.best_probes = load_probe_set(dir);
    r.best_training = load_activation_set(dir);
  } else {
    throw Error("best iteration's probes are unavailable");
  }
  r.log = st.log;
  r.final_state = std::move(st);
  if (checkpoint_root) {
    json summary;
    summary["best_iteration"] = r.best_iteration;
    json scores = json::array();
    for (const auto& e : r.log) scores.push_back(e.validation_score);
    summary["validation_scores"] = scores;
    io::write_text(*checkpoint_root / "best.json", summary.dump(2) + "\n");
    save_probe_set(r.best_probes, *checkpoint_root / "best");
    json timings = json::array();
    for (const auto& e : r.log) timings.push_back(json{{"iteration", e.iteration}, {"wall_seconds", e.wall_seconds}});
    io::write_text(*checkpoint_root / "timings.json", timings.dump(2) + "\n");
  }
  return r;
}

inline void drive(LoopState& st, SubjectModel& model, Judge& judge, const LoopConfig& cfg,
                  const std::optional<fs::path>& checkpoint_root, const IterationCallback& on_iteration,
                  std::vector<ProbeSet>& probes, std::vector<ActivationSet>& sets) {
  while (st.iteration < cfg.iterations) {
    const auto t0 = std::chrono::steady_clock::now();
    run_iteration(st, model, judge, cfg);
    auto v = validate(st.probes, st.training, model, judge, st.validation, cfg);
    auto& entry = st.log.back();
    entry.validation_score = v.score;
    entry.inference_targets = v.targets;
    entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (checkpoint_root) {
      write_checkpoint(*checkpoint_root / iteration_dir_name(st.iteration), st, entry, v.plan, v.responses);
    }
    probes.push_back(st.probes);
    sets.push_back(st.training);
    if (on_iteration) on_iteration(entry);
  }
}

}  // namespace detail

// The full extraction loop, with best-of-T selection by validation score (ties go to the earliest).
inline LoopResult run(const PromptSet& prompts, SubjectModel& model, Judge& judge, const LoopConfig& cfg,
                      const std::optional<fs::path>& checkpoint_root = std::nullopt,
                      const IterationCallback& on_iteration = {}) {
  cfg.check();
  log::warn("validation reuses the annotation judge; scores can overstate steering quality");
  const auto t0 = std::chrono::steady_clock::now();
  auto st = initialize(prompts, model, cfg);
  auto v = validate(st.probes, st.training, model, judge, st.validation, cfg);
  IterationLog entry;
  entry.training_size = st.training.size();
  entry.validation_score = v.score;
  entry.inference_targets = v.targets;
  entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  st.log.push_back(entry);
  if (checkpoint_root) write_checkpoint(*checkpoint_root / iteration_dir_name(0), st, entry, v.plan, v.responses);
  if (on_iteration) on_iteration(entry);
  std::vector<ProbeSet> probes{st.probes};
  std::vector<ActivationSet> sets{st.training};
  detail::drive(st, model, judge, cfg, checkpoint_root, on_iteration, probes, sets);
  return detail::finish(std::move(st), probes, sets, checkpoint_root);
}

// Continues a checkpointed run from iter_<from>; earlier iterations are read back from disk.
inline LoopResult resume(const fs::path& checkpoint_root, int from, const PromptSet& prompts, SubjectModel& model,
                         Judge& judge, const LoopConfig& cfg, const IterationCallback& on_iteration = {}) {
  cfg.check();
  if (from < 0 || from > cfg.iterations) throw ValueError("resume: iteration " + std::to_string(from) + " out of range");
  auto split = split_prompts(prompts, cfg.split_ratio, cfg.seed);
  LoopState st;
  st.train_benign = std::move(split.train_benign);
  st.train_malicious = std::move(split.train_malicious);
  st.validation = std::move(split.validation);
  for (int i = 0; i <= from; ++i) {
    const auto dir = checkpoint_root / iteration_dir_name(i);
    if (!fs::exists(dir / "log.json")) throw IoError("resume: missing checkpoint " + dir.string());
    try {
      st.log.push_back(IterationLog::from_json(json::parse(io::read_text(dir / "log.json"))));
    } catch (const json::exception& e) {
      throw FormatError((dir / "log.json").string() + ": " + e.what());
    }
  }
  const auto dir = checkpoint_root / iteration_dir_name(from);
  st.training = load_activation_set(dir);
  st.probes = load_probe_set(dir);
  st.iteration = from;
  if (st.training.num_layers() != model.num_layers() || st.training.hidden_dim() != model.hidden_dim()) {
    throw DimensionError("resume: checkpoint shape does not match the model");
  }
  // Iterations before `from` are loaded lazily by finish() if one of them wins.
  std::vector<ProbeSet> probes(static_cast<std::size_t>(from));
  std::vector<ActivationSet> sets(static_cast<std::size_t>(from));
  probes.push_back(st.probes);
  sets.push_back(st.training);
  detail::drive(st, model, judge, cfg, checkpoint_root, on_iteration, probes, sets);
  return detail::finish(std::move(st), probes, sets, std::optional<fs::path>(checkpoint_root));
}

// Control: spend the same sample budget on extra labelled contrastive prompts
// instead of steered samples, then train once.
inline ProbeSet naive_augmentation(const ActivationSet& initial, SubjectModel& model, const PromptSet& extra,
                                   const LoopConfig& cfg) {
  const auto extra_set = contrastive_set(model, extra.of_category(Category::benign),
                                         extra.of_category(Category::malicious), cfg.capture, cfg.max_tokens_search);
  const auto merged = merge(initial, extra_set);
  return train_probe_set(merged, cfg.train, loop_layers(model, cfg));
}

inline bool growth_bound_holds(const std::vector<IterationLog>& log, std::size_t loop_train_prompts) {
  if (log.empty()) return true;
  const auto a0 = log.front().training_size;
  for (const auto& e : log) {
    if (e.training_size > a0 + static_cast<std::size_t>(e.iteration) * loop_train_prompts) return false;
  }
  return true;
}

// Prompt pairs for the synthetic environment: benign ids first_id+2i, malicious first_id+2i+1.
inline PromptSet synthetic_prompts(int pairs, std::int64_t first_id = 0) {
  PromptSet p;
  for (int i = 0; i < pairs; ++i) {
    p.add({first_id + 2 * i, "benign request " + std::to_string(i), Category::benign});
    p.add({first_id + 2 * i + 1, "malicious request " + std::to_string(i), Category::malicious});
  }
  return p;
}

}  // namespace steerlab
