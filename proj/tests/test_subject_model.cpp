#include "test_util.hpp"

using namespace steerlab;

namespace {

PromptSet prompts_of(Category c, int n, std::int64_t first = 0) {
  PromptSet p;
  for (int i = 0; i < n; ++i) p.add({first + i, "p", c});
  return p;
}

// probe_project along u* at every layer with target t·γ^l: similarity becomes t.
SteeringPlan along_ideal(const SyntheticModel& m, double t) {
  const auto& cfg = m.config();
  SteeringPlan plan{cfg.num_layers, cfg.hidden_dim, {}};
  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerPlan lp;
    lp.index = l;
    lp.enabled = true;
    lp.mode = SteeringMode::probe_project;
    lp.vector = linalg::to_float(std::span<const double>(m.ground_truth().ideal[l]));
    lp.s = t * std::pow(cfg.magnitude_growth, l);
    plan.layers.push_back(lp);
  }
  return plan;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0;
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Synthetic, MaliciousPromptsRefuseUnsteered) {
  SyntheticModel m(SyntheticConfig{});
  const auto res = m.run(prompts_of(Category::malicious, 10000), nullptr, {}, 0);
  int below = 0;
  for (const auto& r : res.responses) below += decode_behavior(r) < 0.5;
  EXPECT_GE(below / 10000.0, 0.99);
}

TEST(Synthetic, BenignPromptsComplyUnsteered) {
  SyntheticModel m(SyntheticConfig{});
  const auto res = m.run(prompts_of(Category::benign, 2000), nullptr, {}, 0);
  int above = 0;
  for (const auto& r : res.responses) above += decode_behavior(r) > 0.5;
  EXPECT_GE(above / 2000.0, 0.99);
}

TEST(Synthetic, AblatingIdealGivesHalf) {
  SyntheticModel m(SyntheticConfig{});
  SteeringPlan plan{6, 32, {}};
  for (int l = 0; l < 6; ++l) {
    LayerPlan lp;
    lp.index = l;
    lp.enabled = true;
    lp.mode = SteeringMode::ablation;
    lp.vector = linalg::to_float(std::span<const double>(m.ground_truth().ideal[l]));
    plan.layers.push_back(lp);
  }
  for (const auto c : {Category::benign, Category::malicious}) {
    const auto res = m.run(prompts_of(c, 50), &plan, {}, 0);
    for (const auto& r : res.responses) EXPECT_NEAR(decode_behavior(r), 0.5, 1e-3);
  }
}

TEST(Synthetic, MonotoneInTarget) {
  SyntheticModel m(SyntheticConfig{});
  const auto prompts = prompts_of(Category::malicious, 20);
  std::vector<double> prev(prompts.size(), -1.0);
  for (double t = -0.1; t <= 0.1 + 1e-12; t += 0.005) {
    const auto plan = along_ideal(m, t);
    const auto res = m.run(prompts, &plan, {}, 0);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const double s = decode_behavior(res.responses[i]);
      EXPECT_GE(s, prev[i]) << "t=" << t;
      prev[i] = s;
    }
  }
}

TEST(Synthetic, JudgedScoresTrackSimilarity) {
  SyntheticModel m(SyntheticConfig{});
  const auto& cfg = m.config();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> T(-0.05, 0.05);
  std::vector<double> sims, scores;
  for (int i = 0; i < 1000; ++i) {
    const auto plan = along_ideal(m, T(rng));
    PromptSet one({{i, "p", i % 2 ? Category::malicious : Category::benign}});
    const auto res = m.run(one, &plan, {}, 0);
    double sim = 0.0;
    for (int l = 0; l < cfg.num_layers; ++l) {
      sim += linalg::dot(res.activations.vector(0, l), std::span<const double>(m.ground_truth().ideal[l])) /
             std::pow(cfg.magnitude_growth, l);
    }
    sims.push_back(sim / cfg.num_layers);
    scores.push_back(m.judge(i, res.responses[0]));
  }
  EXPECT_GE(pearson(ranks(sims), ranks(scores)), 0.95);
}

TEST(Synthetic, Deterministic) {
  SyntheticModel a(SyntheticConfig{}), b(SyntheticConfig{});
  const auto prompts = synthetic_prompts(30, 0);
  const auto plan = along_ideal(a, 0.02);
  const auto ra = a.run(prompts, &plan, {}, 0);
  const auto rb = b.run(prompts, &plan, {}, 0);
  EXPECT_EQ(ra.responses, rb.responses);
  EXPECT_EQ(ra.activations, rb.activations);
}

TEST(Synthetic, PerPromptSeedingIndependentOfBatch) {
  SyntheticModel m(SyntheticConfig{});
  const auto all = synthetic_prompts(20, 0);
  PromptSet subset({all[7], all[3]});
  const auto full = m.run(all, nullptr, {}, 0);
  const auto part = m.run(subset, nullptr, {}, 0);
  EXPECT_EQ(part.activations.records()[0].values, full.activations.records()[7].values);
  EXPECT_EQ(part.responses[1], full.responses[3]);
}

TEST(Synthetic, DifferentSeedsDiffer) {
  SyntheticConfig c1;
  c1.seed = 1;
  SyntheticModel a(SyntheticConfig{}), b(c1);
  const auto prompts = synthetic_prompts(2, 0);
  EXPECT_NE(a.run(prompts, nullptr, {}, 0).activations, b.run(prompts, nullptr, {}, 0).activations);
}

TEST(Synthetic, GroundTruthOrthonormal) {
  SyntheticModel m(SyntheticConfig{});
  const auto& g = m.ground_truth();
  for (int l = 0; l < 6; ++l) {
    std::vector<std::vector<double>> basis{g.ideal[l]};
    for (const auto& n : g.nuisance[l]) basis.push_back(n);
    basis.push_back(g.offset[l]);
    for (std::size_t i = 0; i < basis.size(); ++i) {
      for (std::size_t j = 0; j < basis.size(); ++j) {
        const double dot = linalg::dot(std::span<const double>(basis[i]), std::span<const double>(basis[j]));
        EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-10);
      }
    }
  }
  EXPECT_EQ(g.ideal_bias, 0.0);
}

TEST(Synthetic, MagnitudeGrowsGeometrically) {
  SyntheticModel m(SyntheticConfig{});
  const auto res = m.run(synthetic_prompts(100, 0), nullptr, {}, 0);
  double n0 = 0, n5 = 0;
  for (std::size_t i = 0; i < res.activations.size(); ++i) {
    n0 += linalg::norm(res.activations.vector(i, 0));
    n5 += linalg::norm(res.activations.vector(i, 5));
  }
  const double g5 = std::pow(1.6, 5);
  EXPECT_GE(n5 / n0, g5 * 0.5);
  EXPECT_LE(n5 / n0, g5 * 2.0);
}

TEST(Synthetic, ShapeAndAlignment) {
  SyntheticModel m(SyntheticConfig{});
  const auto prompts = synthetic_prompts(5, 10);
  const auto res = m.run(prompts, nullptr, {TokenRole::response_mean, ""}, 16);
  ASSERT_EQ(res.responses.size(), prompts.size());
  ASSERT_EQ(res.activations.size(), prompts.size());
  EXPECT_EQ(res.activations.num_layers(), 6);
  EXPECT_EQ(res.activations.hidden_dim(), 32);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& r = res.activations.records()[i];
    EXPECT_EQ(r.prompt_id, prompts[i].prompt_id);
    EXPECT_EQ(r.label, Label::unlabeled);
    EXPECT_EQ(r.role, TokenRole::response_mean);
  }
  // averaging over response positions changes the captured vector but not the behaviour
  const auto pre = m.run(prompts, nullptr, {}, 16);
  EXPECT_EQ(pre.responses, res.responses);
  EXPECT_NE(pre.activations.records()[0].values, res.activations.records()[0].values);
}

TEST(Synthetic, PlanShapeMismatch) {
  SyntheticModel m(SyntheticConfig{});
  SteeringPlan plan{6, 16, {}};
  EXPECT_THROW(m.run(synthetic_prompts(1, 0), &plan, {}, 0), DimensionError);
  SteeringPlan bad{6, 32, {}};
  LayerPlan lp;
  lp.enabled = true;
  lp.vector = {1, 2};
  bad.layers.push_back(lp);
  EXPECT_THROW(m.run(synthetic_prompts(1, 0), &bad, {}, 0), DimensionError);
}

TEST(Synthetic, ConfigValidation) {
  SyntheticConfig c;
  c.magnitude_growth = 0.9;
  EXPECT_THROW(SyntheticModel{c}, ValueError);
  c = {};
  c.nuisance_count = 31;
  EXPECT_THROW(SyntheticModel{c}, ValueError);
  c = {};
  c.noise_sigma = 0;
  EXPECT_THROW(SyntheticModel{c}, ValueError);
}

TEST(Synthetic, NaiveProbeIsBiased) {
  SyntheticModel m(SyntheticConfig{});
  const auto prompts = synthetic_prompts(100, 0);
  auto set = m.run(prompts, nullptr, {}, 0).activations;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto& r = set.mutable_records()[i];
    r.label = prompts[i].category == Category::benign ? Label::faithful : Label::faithless;
    r.score = r.label == Label::faithful ? 1.0 : 0.0;
  }
  const auto naive = train_probe_set(set, TrainConfig{}, all_layers(6));
  const auto oracle = train_probe_set(m.oracle_set(400, 100000), TrainConfig{}, all_layers(6));
  EXPECT_LT(m.mean_cosine(naive), 0.9);
  EXPECT_GT(m.mean_cosine(oracle), m.mean_cosine(naive));
}

TEST(OracleJudge, Examples) {
  SyntheticConfig quiet;
  quiet.annotator_noise = 0.0;
  EXPECT_EQ(oracle_judge(quiet, 1, encode_behavior(0.5)), 0.5);
  SyntheticConfig noisy;
  for (std::int64_t id = 0; id < 200; ++id) {
    const double s = oracle_judge(noisy, id, encode_behavior(0.99));
    EXPECT_GE(s, 0.97);
    EXPECT_LE(s, 1.0);
    const double t = oracle_judge(noisy, id, "BEH 0.873200");
    EXPECT_LE(std::abs(t - 0.8732), 0.02 + 1e-12);
  }
  EXPECT_EQ(oracle_judge(noisy, 5, "BEH 0.300000"), oracle_judge(noisy, 5, "BEH 0.300000"));
}

TEST(OracleJudge, MalformedResponses) {
  SyntheticConfig cfg;
  EXPECT_THROW(oracle_judge(cfg, 0, "hello"), FormatError);
  EXPECT_THROW(oracle_judge(cfg, 0, "BEH 1.500000"), FormatError);
  EXPECT_THROW(oracle_judge(cfg, 0, "BEH -0.1"), FormatError);
  EXPECT_EQ(encode_behavior(0.8732), "BEH 0.873200");
}
