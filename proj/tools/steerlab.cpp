// steerlab: operator CLI over the header-only library.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "steerlab/steerlab.hpp"

using namespace steerlab;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kModelEnv = "STEERLAB_MODEL_CMD";
constexpr const char* kJudgeEnv = "STEERLAB_JUDGE_CMD";

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool synthetic = false;
  std::string prompts_path;
  std::string out_dir;
  int prompt_pairs = 100;
};

void add_common(CLI::App* cmd, Common& c, bool with_prompts = true) {
  cmd->add_option("--config", c.config_path, "TOML configuration file");
  cmd->add_option("--seed", c.seed, "overrides the configuration seed");
  cmd->add_flag("--synthetic", c.synthetic, "use the built-in synthetic subject model");
  if (with_prompts) {
    cmd->add_option("--prompts", c.prompts_path, "prompt file (JSON Lines: prompt_id, category, text)");
    cmd->add_option("--synthetic-pairs", c.prompt_pairs, "prompt pairs generated when --synthetic has no --prompts")
        ->check(CLI::PositiveNumber);
  }
}

RunConfig resolve_config(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
    rc = load_config(c.config_path);
  }
  if (c.seed) {
    rc.seed = *c.seed;
    rc.loop.seed = rc.loop.train.seed = rc.synthetic.seed = *c.seed;
  }
  return rc;
}

PromptSet resolve_prompts(const Common& c) {
  if (!c.prompts_path.empty()) {
    if (!fs::exists(c.prompts_path)) throw UsageError("prompts file not found: " + c.prompts_path);
    return load_prompts(c.prompts_path);
  }
  if (c.synthetic) return synthetic_prompts(c.prompt_pairs);
  throw UsageError("--prompts is required unless --synthetic is given");
}

std::string require_env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) throw UsageError(std::string("no --synthetic given and ") + name + " is not set");
  return v;
}

struct Environment {
  std::unique_ptr<SubjectModel> model;
  std::unique_ptr<Judge> judge;
  const SyntheticModel* synthetic = nullptr;
};

Environment make_environment(const Common& c, const RunConfig& rc, bool need_judge) {
  Environment env;
  if (c.synthetic) {
    auto m = std::make_unique<SyntheticModel>(rc.synthetic);
    env.synthetic = m.get();
    env.model = std::move(m);
    env.judge = std::make_unique<OracleJudge>(rc.synthetic);
    return env;
  }
  env.model = std::make_unique<ExternalModel>(require_env(kModelEnv), fs::path(c.out_dir) / "bridge");
  if (need_judge) env.judge = std::make_unique<ExternalJudge>(require_env(kJudgeEnv));
  return env;
}

void write_manifest(const std::string& command, const Common& c, const RunConfig& rc, int argc, char** argv) {
  const fs::path out(c.out_dir);
  io::ensure_directory(out);
  const std::string snapshot = to_toml(rc);
  io::write_text(out / "resolved_config.toml", snapshot);
  json m;
  m["command"] = command;
  json args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  m["argv"] = args;
  m["config_path"] = c.config_path.empty() ? json(nullptr) : json(c.config_path);
  m["resolved_config"] = "resolved_config.toml";
  m["config_snapshot"] = snapshot;
  m["seed"] = rc.seed;
  m["synthetic"] = c.synthetic;
  m["versions"] = json{{"steerlab", STEERLAB_VERSION},
                       {"format_version", kFormatVersion},
                       {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                     "." + std::to_string(EIGEN_MINOR_VERSION)},
                       {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                             std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                             std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  m["output_dir"] = c.out_dir;
  io::write_text(out / "run_manifest.json", m.dump(2) + "\n");
}

StrengthPolicy policy_arg(const std::string& text) {
  try {
    return parse_strength_policy(text);
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
}

std::string fmt(double v) { return csv::num(v); }

// ---- extract -------------------------------------------------------------

struct ExtractArgs {
  Common c;
  std::string capture = "pre_response";
  int max_tokens = 256;
};

int cmd_extract(const ExtractArgs& a, int argc, char** argv) {
  auto rc = resolve_config(a.c);
  if (a.capture != "pre_response" && a.capture != "response_mean") {
    throw UsageError("--capture must be pre_response or response_mean");
  }
  CaptureSpec capture{parse_token_role(a.capture), "extract"};
  const auto prompts = resolve_prompts(a.c);
  rc.loop.capture = capture;
  write_manifest("extract", a.c, rc, argc, argv);
  auto env = make_environment(a.c, rc, false);
  const auto set = contrastive_set(*env.model, prompts.of_category(Category::benign),
                                   prompts.of_category(Category::malicious), capture, a.max_tokens);
  save_activation_set(set, a.c.out_dir);
  std::cout << "wrote " << set.size() << " records (" << set.num_layers() << " layers, d=" << set.hidden_dim()
            << ", role " << to_string(capture.role) << ") to " << a.c.out_dir << "\n";
  return 0;
}

// ---- iterate -------------------------------------------------------------

struct IterateArgs {
  Common c;
  std::string resume;
  std::string sampling;
  std::string inference;
  std::optional<int> iterations;
};

int cmd_iterate(const IterateArgs& a, int argc, char** argv) {
  auto rc = resolve_config(a.c);
  if (!a.sampling.empty()) rc.loop.sampling = policy_arg(a.sampling);
  if (!a.inference.empty()) rc.loop.inference = policy_arg(a.inference);
  if (a.iterations) rc.loop.iterations = *a.iterations;
  try {
    rc.loop.check();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  const auto prompts = resolve_prompts(a.c);
  write_manifest("iterate", a.c, rc, argc, argv);
  auto env = make_environment(a.c, rc, true);

  auto print = [](const IterationLog& e) {
    std::cout << "iter " << e.iteration << "  |A|=" << e.training_size << "  +" << e.positive << " -" << e.negative
              << " ~" << e.discarded << "  validation=" << fmt(e.validation_score) << std::endl;
  };
  LoopResult result;
  if (!a.resume.empty()) {
    fs::path dir(a.resume);
    if (!fs::exists(dir)) dir = fs::path(a.c.out_dir) / a.resume;
    if (!fs::exists(dir)) throw UsageError("checkpoint not found: " + a.resume);
    const std::string name = fs::canonical(dir).filename().string();
    if (name.rfind("iter_", 0) != 0) throw UsageError("--resume expects an iter_<i> checkpoint directory");
    int from = 0;
    try {
      from = std::stoi(name.substr(5));
    } catch (const std::exception&) {
      throw UsageError("cannot read the iteration number of " + name);
    }
    result = resume(fs::canonical(dir).parent_path(), from, prompts, *env.model, *env.judge, rc.loop, print);
  } else {
    result = run(prompts, *env.model, *env.judge, rc.loop, fs::path(a.c.out_dir), print);
  }
  io::write_text(fs::path(a.c.out_dir) / "iterations.csv", csv::iteration_log(result.log));
  std::cout << "best iteration " << result.best_iteration << " (validation "
            << fmt(result.log[static_cast<std::size_t>(result.best_iteration)].validation_score) << "); probes in "
            << (fs::path(a.c.out_dir) / "best").string() << "\n";
  if (env.synthetic) {
    std::cout << "ground-truth check: mean cosine(best w, u*) = " << fmt(env.synthetic->mean_cosine(result.best_probes))
              << "\n";
  }
  return 0;
}

// ---- steer ---------------------------------------------------------------

struct SteerArgs {
  Common c;
  std::string probes;
  std::string train;
  std::string validation;
  std::string targets = "max-train-logit";
  std::string mode = "probe_clamp";
  std::string direction = "probe";
  std::string position = "all_tokens";
  double lambda = 0.0;
  bool discard_last = true;
  std::optional<double> accuracy_threshold;
  bool run = false;
  int max_tokens = 256;
};

int cmd_steer(const SteerArgs& a, int argc, char** argv) {
  auto rc = resolve_config(a.c);
  SteeringMode mode;
  PositionPolicy position;
  try {
    mode = parse_steering_mode(a.mode);
    position = parse_position_policy(a.position);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
  LayerPolicy layers;
  layers.discard_last_layer = a.discard_last;
  layers.accuracy_threshold = a.accuracy_threshold;
  if (!fs::exists(a.probes)) throw UsageError("probe directory not found: " + a.probes);
  const fs::path train_dir = a.train.empty() ? fs::path(a.probes) : fs::path(a.train);

  SteeringPlan plan;
  if (a.direction == "probe") {
    if (!is_probe_mode(mode)) throw UsageError("--direction probe needs --mode probe_clamp or probe_project");
    const auto probes = load_probe_set(a.probes);
    const auto policy = policy_arg(a.targets);
    const bool needs_data = policy.kind == StrengthPolicy::Kind::max_train_logit ||
                            policy.kind == StrengthPolicy::Kind::quantile_train_logit;
    ActivationSet train;
    if (needs_data || a.accuracy_threshold) train = load_activation_set(train_dir);
    const auto targets = resolve_targets(probes, train, policy);
    std::optional<PerLayer<double>> acc;
    if (a.accuracy_threshold) {
      if (a.validation.empty()) {
        log::warn("--accuracy-threshold without --validation: using training accuracy");
        acc = accuracy(probes, train);
      } else {
        acc = accuracy(probes, load_activation_set(a.validation));
      }
    }
    plan = build_plan(probes, targets, layers, mode, position, acc);
  } else if (a.direction == "mean-diff" || a.direction == "pca") {
    if (is_probe_mode(mode)) throw UsageError("--direction " + a.direction + " needs --mode ablation or constant");
    const auto train = load_activation_set(train_dir);
    auto dirs = a.direction == "pca" ? pca_direction(train) : mean_difference_direction(train);
    // Unit vectors pointing away from refusal; ablation is sign-agnostic.
    for (auto& [l, d] : dirs) {
      const double n = linalg::norm(d.v);
      if (n > 0.0) {
        for (auto& x : d.v) x = -x / n;
      }
    }
    plan = build_direction_plan(dirs, train.num_layers(), train.hidden_dim(), layers, mode, a.lambda, position);
  } else {
    throw UsageError("--direction must be probe, mean-diff or pca");
  }
  write_manifest("steer", a.c, rc, argc, argv);
  save_steering_plan(plan, a.c.out_dir);
  std::cout << "plan: ";
  for (const auto& lp : plan.layers) {
    std::cout << "L" << lp.index << (lp.enabled ? "" : "(off)");
    if (lp.enabled && is_probe_mode(lp.mode)) std::cout << " s=" << fmt(lp.s);
    if (lp.enabled && lp.mode == SteeringMode::constant) std::cout << " lambda=" << fmt(lp.lambda);
    std::cout << "  ";
  }
  std::cout << "\n";

  if (a.run) {
    const auto prompts = resolve_prompts(a.c);
    auto env = make_environment(a.c, rc, true);
    const auto res = env.model->run(prompts, &plan, rc.loop.capture, a.max_tokens);
    const auto items = judge_batch(*env.judge, prompts.prompts(), res.responses);
    std::vector<ResponseLog> lines;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      lines.push_back({static_cast<std::int64_t>(i), prompts[i].prompt_id, "steer", res.responses[i], items[i].score, ""});
      if (items[i].score) {
        sum += *items[i].score;
        ++n;
      }
    }
    save_response_log(lines, fs::path(a.c.out_dir) / "responses.txt");
    save_activation_set(res.activations, fs::path(a.c.out_dir) / "activations");
    if (n > 0) std::cout << "mean judged score over " << n << " prompts: " << fmt(sum / static_cast<double>(n)) << "\n";
  }
  return 0;
}

// ---- analyze -------------------------------------------------------------

struct AnalyzeArgs {
  Common c;
  std::string activations;
  std::string probes;
  std::string train;
  std::string targets = "max-train-logit";
  int trials = 50;
  double split = 0.5;
  std::string quantiles = "q1,median,q3,max";
};

int cmd_norms(const AnalyzeArgs& a, int argc, char** argv) {
  const auto rc = resolve_config(a.c);
  const auto set = load_activation_set(a.activations);
  write_manifest("analyze norms", a.c, rc, argc, argv);
  const auto r = layer_norms(set);
  io::write_text(fs::path(a.c.out_dir) / "norms.csv", csv::norms(r));
  std::cout << csv::norms(r);
  return 0;
}

int cmd_instability(const AnalyzeArgs& a, int argc, char** argv) {
  const auto rc = resolve_config(a.c);
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  if (!(a.split > 0.0 && a.split < 1.0)) throw UsageError("--split must lie in (0,1)");
  const auto set = load_activation_set(a.activations);
  write_manifest("analyze instability", a.c, rc, argc, argv);
  const auto layers = steerable_layers(set.num_layers(), rc.loop.layers);
  const auto r = instability_report(set, a.trials, a.split, rc.loop.train, rc.seed, layers);
  io::write_text(fs::path(a.c.out_dir) / "instability.csv", csv::stability_summary(r));
  io::write_text(fs::path(a.c.out_dir) / "instability_trials.csv", csv::stability_trials(r));
  std::cout << csv::stability_summary(r);
  return 0;
}

int cmd_monotonicity(const AnalyzeArgs& a, int argc, char** argv) {
  const auto rc = resolve_config(a.c);
  std::vector<std::pair<std::string, double>> points;
  std::stringstream ss(a.quantiles);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto q = sweep_quantile(item);
    if (!q) throw UsageError("unknown quantile label '" + item + "' (use q1, median, q3, max)");
    points.emplace_back(item, *q);
  }
  if (points.empty()) throw UsageError("--quantiles is empty");
  const auto probes = load_probe_set(a.probes);
  const auto train = load_activation_set(a.train.empty() ? a.probes : a.train);
  const auto prompts = resolve_prompts(a.c);
  write_manifest("analyze monotonicity", a.c, rc, argc, argv);
  auto env = make_environment(a.c, rc, true);
  // Held-out malicious prompts, as in validation.
  const auto split = split_prompts(prompts, rc.loop.split_ratio, rc.loop.seed);
  const auto r = monotonicity_sweep(probes, *env.model, *env.judge, split.validation, train, rc.loop, points);
  io::write_text(fs::path(a.c.out_dir) / "monotonicity.csv", csv::monotonicity(r));
  io::write_text(fs::path(a.c.out_dir) / "monotonicity_targets.csv", csv::monotonicity_targets(r));
  std::cout << csv::monotonicity(r);
  if (!r.monotone) {
    std::cout << "non-monotone: score peaks at " << r.points[static_cast<std::size_t>(r.peak_index)].label << "\n";
  }
  return 0;
}

int cmd_ratios(const AnalyzeArgs& a, int argc, char** argv) {
  const auto rc = resolve_config(a.c);
  const auto probes = load_probe_set(a.probes);
  const auto train = load_activation_set(a.train.empty() ? a.probes : a.train);
  const auto set = load_activation_set(a.activations);
  write_manifest("analyze ratios", a.c, rc, argc, argv);
  const auto targets = resolve_targets(probes, train, policy_arg(a.targets));
  const auto plan = build_plan(probes, targets, rc.loop.layers, SteeringMode::probe_project, PositionPolicy::all_tokens);
  const auto r = norm_ratio_report(plan, set);
  io::write_text(fs::path(a.c.out_dir) / "norm_ratio.csv", csv::norm_ratios(r));
  std::cout << csv::norm_ratios(r);
  return 0;
}

// ---- export-adapter ------------------------------------------------------

struct ExportArgs {
  Common c;
  std::string plan;
  bool self_check = false;
};

int cmd_export(const ExportArgs& a, int argc, char** argv) {
  const auto rc = resolve_config(a.c);
  const auto plan = load_steering_plan(a.plan);
  const auto adapter = export_adapter(plan);
  write_manifest("export-adapter", a.c, rc, argc, argv);
  save_adapter(adapter, plan.num_layers, plan.hidden_dim, a.c.out_dir);
  std::cout << "exported " << adapter.size() << " rank-1 layers to " << a.c.out_dir << "\n";
  if (!a.self_check) return 0;

  // Reload what was written and compare against the steering transform.
  const auto loaded = load_adapter(a.c.out_dir);
  auto rng = make_rng({rc.seed, 0x53454c46ULL});
  std::normal_distribution<double> N(0.0, 1.0);
  double worst = 0.0;
  for (const auto& layer : loaded) {
    const auto& lp = *plan.find(layer.index);
    for (int t = 0; t < 1000; ++t) {
      std::vector<double> x(static_cast<std::size_t>(plan.hidden_dim));
      for (auto& v : x) v = N(rng);
      const auto ref = apply_steering(x, lp);
      const auto got = layer.apply(x);
      for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(ref[k] - got[k]));
    }
  }
  const bool ok = worst <= 1e-5;
  std::cout << "self-check: max abs difference " << fmt(worst) << " over 1000 inputs per layer: "
            << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerlab: probe-based contrastive steering with iterative adaptive retraining"};
  app.require_subcommand(1);
  app.set_version_flag("--version", STEERLAB_VERSION);

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract", "capture labelled contrastive activations");
  add_common(extract, ex.c);
  extract->add_option("--capture", ex.capture, "pre_response | response_mean")
      ->check(CLI::IsMember({"pre_response", "response_mean"}));
  extract->add_option("--max-tokens", ex.max_tokens);
  extract->add_option("--out", ex.c.out_dir)->required();

  IterateArgs it;
  auto* iterate = app.add_subcommand("iterate", "run iterative training-set augmentation");
  add_common(iterate, it.c);
  iterate->add_option("--out", it.c.out_dir)->required();
  iterate->add_option("--resume", it.resume, "continue from a checkpoint directory iter_<i>");
  iterate->add_option("--sampling", it.sampling, "zero | median-faithful | quantile:<q> | fixed:<v>");
  iterate->add_option("--inference", it.inference, "validation targets, default max-train-logit");
  iterate->add_option("--iterations", it.iterations);

  SteerArgs st;
  auto* steer = app.add_subcommand("steer", "build a steering plan (and optionally run it)");
  add_common(steer, st.c);
  steer->add_option("--probes", st.probes, "directory with probes.json/probes.bin")->required();
  steer->add_option("--train", st.train, "activation set for data-dependent targets (default: --probes dir)");
  steer->add_option("--validation", st.validation, "activation set for --accuracy-threshold");
  steer->add_option("--targets", st.targets, "zero | max-train-logit | max-faithful-logit | sigma-inv:<p> | ...");
  steer->add_option("--mode", st.mode, "probe_clamp | probe_project | ablation | constant");
  steer->add_option("--direction", st.direction, "probe | mean-diff | pca");
  steer->add_option("--position", st.position, "all_tokens | response_only | pre_response_only");
  steer->add_option("--lambda", st.lambda, "strength for --mode constant");
  steer->add_flag("--discard-last,!--keep-last", st.discard_last, "disable the last layer (default on)");
  steer->add_option("--accuracy-threshold", st.accuracy_threshold)->check(CLI::Range(0.0, 1.0));
  steer->add_flag("--run", st.run, "run the subject model with the plan and judge the responses");
  steer->add_option("--max-tokens", st.max_tokens);
  steer->add_option("--out", st.c.out_dir)->required();

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "diagnostic reports");
  analyze->require_subcommand(1);
  auto* norms = analyze->add_subcommand("norms", "per-layer activation norms");
  add_common(norms, an.c, false);
  norms->add_option("--activations", an.activations)->required();
  norms->add_option("--out", an.c.out_dir)->required();
  auto* inst = analyze->add_subcommand("instability", "probe accuracy over random train/test splits");
  add_common(inst, an.c, false);
  inst->add_option("--activations", an.activations)->required();
  inst->add_option("--trials", an.trials);
  inst->add_option("--split", an.split);
  inst->add_option("--out", an.c.out_dir)->required();
  auto* mono = analyze->add_subcommand("monotonicity", "judged score across quantile targets");
  add_common(mono, an.c);
  mono->add_option("--probes", an.probes)->required();
  mono->add_option("--train", an.train, "activation set supplying faithful logits (default: --probes dir)");
  mono->add_option("--quantiles", an.quantiles, "comma list of q1, median, q3, max");
  mono->add_option("--out", an.c.out_dir)->required();
  auto* ratios = analyze->add_subcommand("ratios", "norm_ratio of a probe plan over activations");
  add_common(ratios, an.c, false);
  ratios->add_option("--probes", an.probes)->required();
  ratios->add_option("--train", an.train);
  ratios->add_option("--activations", an.activations)->required();
  ratios->add_option("--targets", an.targets);
  ratios->add_option("--out", an.c.out_dir)->required();

  ExportArgs xa;
  auto* exp = app.add_subcommand("export-adapter", "rank-1 adapter form of a probe_project plan");
  add_common(exp, xa.c, false);
  exp->add_option("--plan", xa.plan, "directory with steering.json/steering.bin")->required();
  exp->add_flag("--self-check", xa.self_check, "verify the written adapter against the steering transform");
  exp->add_option("--out", xa.c.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*extract) return cmd_extract(ex, argc, argv);
    if (*iterate) return cmd_iterate(it, argc, argv);
    if (*steer) return cmd_steer(st, argc, argv);
    if (*norms) return cmd_norms(an, argc, argv);
    if (*inst) return cmd_instability(an, argc, argv);
    if (*mono) return cmd_monotonicity(an, argc, argv);
    if (*ratios) return cmd_ratios(an, argc, argv);
    if (*exp) return cmd_export(xa, argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
