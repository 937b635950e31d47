#include "test_util.hpp"

using namespace steerlab;
using testutil::TempDir;

namespace {

class ConstantJudge : public Judge {
 public:
  explicit ConstantJudge(double v) : v_(v) {}
  double score(const Prompt&, const std::string&) override { return v_; }

 private:
  double v_;
};

// Scores by call order: the first 20 calls positive, next 25 negative, rest ambiguous.
class ScriptedJudge : public Judge {
 public:
  double score(const Prompt&, const std::string&) override {
    const int i = calls_++;
    return i < 20 ? 0.9 : i < 45 ? 0.01 : 0.3;
  }

 private:
  int calls_ = 0;
};

std::string slurp(const fs::path& p) { return io::read_text(p); }

std::vector<std::string> checkpoint_files() {
  return {"manifest.json", "activations.bin", "probes.json", "probes.bin",
          "steering.json", "steering.bin",    "responses.txt", "log.json"};
}

}  // namespace

TEST(Split, HalfAndHalf) {
  const auto s = split_prompts(synthetic_prompts(100), 0.5, 0);
  EXPECT_EQ(s.train_benign.size(), 50u);
  EXPECT_EQ(s.train_malicious.size(), 50u);
  EXPECT_EQ(s.validation.size(), 50u);
  std::set<std::int64_t> ids;
  for (const auto* p : {&s.train_malicious, &s.validation}) {
    for (const auto& q : p->prompts()) {
      EXPECT_EQ(q.category, Category::malicious);
      ids.insert(q.prompt_id);
    }
  }
  EXPECT_EQ(ids.size(), 100u);
  // pairs stay together: benign 2i goes with malicious 2i+1
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(s.train_benign[i].prompt_id + 1, s.train_malicious[i].prompt_id);
  }
}

TEST(Split, EightyTwenty) {
  const auto s = split_prompts(synthetic_prompts(100), 0.8, 0);
  EXPECT_EQ(s.train_malicious.size(), 80u);
  EXPECT_EQ(s.validation.size(), 20u);
}

TEST(Split, SeededAndErrors) {
  const auto a = split_prompts(synthetic_prompts(40), 0.5, 1);
  const auto b = split_prompts(synthetic_prompts(40), 0.5, 1);
  const auto c = split_prompts(synthetic_prompts(40), 0.5, 2);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_NE(a.validation, c.validation);
  EXPECT_THROW(split_prompts(synthetic_prompts(10).of_category(Category::benign), 0.5, 0), ValueError);
  EXPECT_THROW(split_prompts(synthetic_prompts(1), 0.5, 0), ValueError);
}

TEST(Initialize, ContrastiveSetSize) {
  SyntheticModel model(SyntheticConfig{});
  const auto st = initialize(synthetic_prompts(100), model, LoopConfig{});
  EXPECT_EQ(st.training.size(), 100u);
  EXPECT_EQ(st.training.count(Label::faithful), 50u);
  EXPECT_EQ(st.training.count(Label::faithless), 50u);
  EXPECT_EQ(st.probes.layers(), (std::vector<int>{0, 1, 2, 3, 4}));
  for (const auto& r : st.training.records()) {
    EXPECT_EQ(r.source_iteration, 0);
    EXPECT_EQ(r.score, r.label == Label::faithful ? 1.0 : 0.0);
  }
}

TEST(RunIteration, EmptyAugmentationKeepsProbes) {
  testutil::WarningCapture warnings;
  SyntheticModel model(SyntheticConfig{});
  ConstantJudge judge(0.3);
  const LoopConfig cfg;
  auto st = initialize(synthetic_prompts(40), model, cfg);
  const auto before = st.training;
  const auto probes = st.probes;
  run_iteration(st, model, judge, cfg);
  EXPECT_EQ(st.training, before);
  EXPECT_EQ(st.probes, probes);
  EXPECT_EQ(st.log.back().discarded, 20u);
  EXPECT_EQ(st.iteration, 1);
}

TEST(RunIteration, Bookkeeping) {
  SyntheticModel model(SyntheticConfig{});
  ScriptedJudge judge;
  const LoopConfig cfg;
  auto st = initialize(synthetic_prompts(100), model, cfg);
  const auto a0 = st.training.size();
  run_iteration(st, model, judge, cfg);
  const auto& e = st.log.back();
  EXPECT_EQ(e.generated, 50u);
  EXPECT_EQ(e.positive, 20u);
  EXPECT_EQ(e.negative, 25u);
  EXPECT_EQ(e.discarded, 5u);
  EXPECT_EQ(st.training.size(), a0 + 45);
  EXPECT_EQ(e.training_size, a0 + 45);
  std::size_t added = 0;
  std::int64_t prev = -1;
  for (std::size_t i = a0; i < st.training.size(); ++i) {
    const auto& r = st.training.records()[i];
    EXPECT_EQ(r.source_iteration, 1);
    EXPECT_EQ(r.record_id, static_cast<std::int64_t>(i));
    EXPECT_GT(r.prompt_id, prev);  // ordered by prompt id
    prev = r.prompt_id;
    ++added;
  }
  EXPECT_EQ(added, 45u);
}

TEST(RunIteration, CosineRatchet) {
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  const LoopConfig cfg;
  auto st = initialize(synthetic_prompts(100), model, cfg);
  double prev = model.mean_cosine(st.probes);
  int ok = 0;
  for (int i = 0; i < cfg.iterations; ++i) {
    run_iteration(st, model, judge, cfg);
    const double c = model.mean_cosine(st.probes);
    ok += c >= prev - 0.02;
    prev = c;
  }
  EXPECT_GE(ok, static_cast<int>(0.8 * cfg.iterations));
}

TEST(Validate, PerfectJudgeScoresOne) {
  SyntheticModel model(SyntheticConfig{});
  ConstantJudge judge(1.0);
  const LoopConfig cfg;
  const auto st = initialize(synthetic_prompts(20), model, cfg);
  EXPECT_EQ(validate(st.probes, st.training, model, judge, st.validation, cfg).score, 1.0);
}

TEST(Validate, AlignedProbeJailbreaks) {
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  const LoopConfig cfg;
  const auto st = initialize(synthetic_prompts(100), model, cfg);
  const auto oracle = train_probe_set(model.oracle_set(2000, 1000000), cfg.train, loop_layers(model, cfg));
  ASSERT_GE(model.mean_cosine(oracle), 0.99);
  const auto v = validate(oracle, st.training, model, judge, st.validation, cfg);
  EXPECT_GE(v.score, 0.9);
  EXPECT_EQ(v.responses.size(), st.validation.size());
}

TEST(Validate, EmptyValidationIsError) {
  SyntheticModel model(SyntheticConfig{});
  ConstantJudge judge(1.0);
  const LoopConfig cfg;
  const auto st = initialize(synthetic_prompts(20), model, cfg);
  EXPECT_THROW(validate(st.probes, st.training, model, judge, PromptSet{}, cfg), ValueError);
}

TEST(Run, SingleIteration) {
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  LoopConfig cfg;
  cfg.iterations = 1;
  const auto r = run(synthetic_prompts(40), model, judge, cfg);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].iteration, 0);
  EXPECT_EQ(r.log[1].iteration, 1);
  EXPECT_TRUE(r.best_iteration == 0 || r.best_iteration == 1);
}

TEST(Run, TiesGoToEarliest) {
  SyntheticModel model(SyntheticConfig{});
  ConstantJudge judge(1.0);
  LoopConfig cfg;
  cfg.iterations = 3;
  const auto r = run(synthetic_prompts(20), model, judge, cfg);
  EXPECT_EQ(r.best_iteration, 0);
}

TEST(Run, HeadlineSeedZero) {
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  const LoopConfig cfg;
  const auto r = run(synthetic_prompts(100), model, judge, cfg);
  EXPECT_GE(r.log[r.best_iteration].validation_score, 0.85);
  EXPECT_GE(model.mean_cosine(r.best_probes), 0.95);
  EXPECT_TRUE(growth_bound_holds(r.log, 50));
  for (std::size_t i = 1; i < r.log.size(); ++i) {
    EXPECT_EQ(r.log[i].training_size, r.log[i - 1].training_size + r.log[i].positive + r.log[i].negative);
  }
}

TEST(Run, NaiveAugmentationIsWorse) {
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  const LoopConfig cfg;
  const auto r = run(synthetic_prompts(100), model, judge, cfg);
  std::size_t budget = 0;
  for (const auto& e : r.log) budget += e.positive + e.negative;
  const auto initial = initialize(synthetic_prompts(100), model, cfg).training;
  const auto extra = synthetic_prompts(static_cast<int>((budget + 1) / 2), 1000000);
  const auto na = naive_augmentation(initial, model, extra, cfg);
  EXPECT_LT(model.mean_cosine(na), model.mean_cosine(r.best_probes));
}

TEST(Run, Deterministic) {
  SyntheticConfig scfg;
  LoopConfig cfg;
  cfg.iterations = 4;
  auto once = [&] {
    SyntheticModel model(scfg);
    OracleJudge judge(scfg);
    return run(synthetic_prompts(40), model, judge, cfg);
  };
  const auto a = once();
  const auto b = once();
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].to_json(), b.log[i].to_json());
  EXPECT_EQ(a.best_probes, b.best_probes);
}

TEST(Run, CheckpointLayout) {
  TempDir tmp;
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  LoopConfig cfg;
  cfg.iterations = 2;
  const auto r = run(synthetic_prompts(20), model, judge, cfg, tmp.path());
  for (int i = 0; i <= 2; ++i) {
    for (const auto& f : checkpoint_files()) EXPECT_TRUE(fs::exists(tmp / iteration_dir_name(i) / f)) << i << f;
    const auto log = json::parse(slurp(tmp / iteration_dir_name(i) / "log.json"));
    EXPECT_FALSE(log.contains("wall_seconds"));
    EXPECT_EQ(log.at("iteration"), i);
  }
  EXPECT_EQ(load_activation_set(tmp / "iter_2"), r.final_state.training);
  const auto best = json::parse(slurp(tmp / "best.json"));
  EXPECT_EQ(best.at("best_iteration"), r.best_iteration);
  EXPECT_EQ(load_probe_set(tmp / "best"), r.best_probes);
  EXPECT_TRUE(fs::exists(tmp / "timings.json"));
  // responses.txt: one line per sampled prompt plus one per validation prompt
  const auto lines = load_responses(tmp / "iter_1" / "responses.txt", "record_id");
  EXPECT_EQ(lines.size(), 20u);
}

TEST(Run, ResumeMatchesUninterrupted) {
  TempDir full, part;
  SyntheticConfig scfg;
  LoopConfig cfg;
  cfg.iterations = 4;
  const auto prompts = synthetic_prompts(40);
  {
    SyntheticModel model(scfg);
    OracleJudge judge(scfg);
    run(prompts, model, judge, cfg, full.path());
  }
  for (int i = 0; i <= 2; ++i) {
    fs::copy(full / iteration_dir_name(i), part / iteration_dir_name(i), fs::copy_options::recursive);
  }
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  const auto r = resume(part.path(), 2, prompts, model, judge, cfg);
  ASSERT_EQ(r.log.size(), 5u);
  for (int i = 0; i <= 4; ++i) {
    for (const auto& f : checkpoint_files()) {
      EXPECT_EQ(slurp(full / iteration_dir_name(i) / f), slurp(part / iteration_dir_name(i) / f)) << i << "/" << f;
    }
  }
  EXPECT_EQ(slurp(full / "best.json"), slurp(part / "best.json"));
  EXPECT_EQ(slurp(full / "best" / "probes.bin"), slurp(part / "best" / "probes.bin"));
}

TEST(Run, ResumeErrors) {
  TempDir tmp;
  SyntheticConfig scfg;
  SyntheticModel model(scfg);
  OracleJudge judge(scfg);
  LoopConfig cfg;
  cfg.iterations = 2;
  EXPECT_THROW(resume(tmp.path(), 1, synthetic_prompts(10), model, judge, cfg), IoError);
  EXPECT_THROW(resume(tmp.path(), 5, synthetic_prompts(10), model, judge, cfg), ValueError);
}

TEST(GrowthBound, DetectsViolation) {
  std::vector<IterationLog> log(2);
  log[0].training_size = 100;
  log[1].iteration = 1;
  log[1].training_size = 150;
  EXPECT_TRUE(growth_bound_holds(log, 50));
  log[1].training_size = 151;
  EXPECT_FALSE(growth_bound_holds(log, 50));
}

TEST(LoopConfigCheck, Invariants) {
  LoopConfig c;
  c.iterations = 0;
  EXPECT_THROW(c.check(), ValueError);
  c = {};
  c.split_ratio = 1.0;
  EXPECT_THROW(c.check(), ValueError);
  c = {};
  c.sampling_mode = SteeringMode::ablation;
  EXPECT_THROW(c.check(), ValueError);
}
