#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "steerlab/steering_engine.hpp"

namespace steerlab {

struct RunResult {
  std::vector<std::string> responses;  // aligned with the prompts
  ActivationSet activations;           // one unlabelled record per prompt
};

// Anything that produces behaviour and activations under an optional plan.
class SubjectModel {
 public:
  virtual ~SubjectModel() = default;
  virtual int num_layers() const = 0;
  virtual int hidden_dim() const = 0;
  virtual RunResult run(const PromptSet& prompts, const SteeringPlan* plan, const CaptureSpec& capture,
                        int max_tokens) = 0;
};

inline void check_plan_shape(const SteeringPlan* plan, int num_layers, int hidden_dim) {
  if (!plan) return;
  if (plan->num_layers != num_layers || plan->hidden_dim != hidden_dim) {
    throw DimensionError("steering plan shape (" + std::to_string(plan->num_layers) + "," +
                         std::to_string(plan->hidden_dim) + ") does not match model (" + std::to_string(num_layers) +
                         "," + std::to_string(hidden_dim) + ")");
  }
}

struct SyntheticConfig {
  int num_layers = 6;
  int hidden_dim = 32;
  std::uint64_t seed = 0;
  double margin = 1.0;             // a
  int nuisance_count = 4;          // k
  double nuisance_strength = 1.0;  // ρ
  double nuisance_sd = 0.5;        // spread of the class-correlated nuisance coefficients
  double noise_sigma = 0.1;
  double magnitude_growth = 1.6;  // γ
  double annotator_noise = 0.02;
  double behavior_sharpness = 100.0;  // κ in logistic(κ·similarity)
  double coherence_tau = 1.5;
  double coherence_ramp = 0.25;  // displacement/‖x‖ at which off-axis steering is fully penalised
  double offset_strength = 2.0;  // μ, shared component orthogonal to the behaviour subspace

  void check() const {
    if (num_layers < 1 || hidden_dim < 1) throw ValueError("synthetic: num_layers and hidden_dim must be >= 1");
    if (!(magnitude_growth >= 1.0)) throw ValueError("synthetic: magnitude_growth must be >= 1");
    if (nuisance_count < 0 || nuisance_count >= hidden_dim - 1) {
      throw ValueError("synthetic: nuisance_count must be < hidden_dim - 1");
    }
    if (!(margin > 0.0) || !(nuisance_strength > 0.0) || !(noise_sigma > 0.0) || !(nuisance_sd > 0.0) ||
        !(behavior_sharpness > 0.0) || !(coherence_tau > 0.0) || !(coherence_ramp > 0.0) ||
        !(offset_strength >= 0.0) || !(annotator_noise >= 0.0)) {
      throw ValueError("synthetic: scales must be positive");
    }
  }
};

// Evaluation-only view of the synthetic geometry.
struct GroundTruth {
  std::vector<std::vector<double>> ideal;                  // u*^(l)
  std::vector<std::vector<std::vector<double>>> nuisance;  // n_j^(l)
  std::vector<std::vector<double>> offset;                 // m^(l), unit
  double ideal_bias = 0.0;
};

inline std::string encode_behavior(double sigma) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "BEH %.6f", sigma);
  return buf;
}

inline double decode_behavior(const std::string& response) {
  static const std::regex re(R"(^BEH ([0-9]+\.[0-9]+)\s*$)");
  std::smatch m;
  if (!std::regex_match(response, m, re)) throw FormatError("malformed synthetic response '" + response + "'");
  const double v = std::stod(m[1].str());
  if (!(v >= 0.0 && v <= 1.0)) throw FormatError("synthetic response out of range: '" + response + "'");
  return v;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Decodes the behaviour score, adds uniform ±noise (seeded by the global seed,
// prompt id and response text) and clips to [0,1].
inline double oracle_judge(const SyntheticConfig& cfg, std::int64_t prompt_id, const std::string& response) {
  const double sigma = decode_behavior(response);
  if (cfg.annotator_noise == 0.0) return sigma;
  auto rng = make_rng({cfg.seed, 0x4a554447ULL, static_cast<std::uint64_t>(prompt_id), fnv1a(response)});
  std::uniform_real_distribution<double> u(-cfg.annotator_noise, cfg.annotator_noise);
  return std::clamp(sigma + u(rng), 0.0, 1.0);
}

// Activations x^(l) = γ^l (c·a·u* + ρ Σ_j c_j n_j + μ m + ε) with c = +1 for
// benign prompts and −1 for malicious ones. Behaviour is read directly off the
// (possibly steered) activations: coherence · logistic(κ · mean_l u*·x'/γ^l).
class SyntheticModel : public SubjectModel {
 public:
  explicit SyntheticModel(SyntheticConfig cfg) : cfg_(cfg) {
    cfg_.check();
    build_frame();
  }

  int num_layers() const override { return cfg_.num_layers; }
  int hidden_dim() const override { return cfg_.hidden_dim; }
  const SyntheticConfig& config() const { return cfg_; }

  // Only evaluation code should call this.
  const GroundTruth& ground_truth() const { return truth_; }

  RunResult run(const PromptSet& prompts, const SteeringPlan* plan, const CaptureSpec& capture,
                int max_tokens) override {
    return generate(prompts, plan, capture, max_tokens, false);
  }

  // independent_nuisance draws nuisance coefficients with zero mean regardless
  // of class, which removes the coupled-direction bias (oracle training data).
  RunResult generate(const PromptSet& prompts, const SteeringPlan* plan, const CaptureSpec& capture, int max_tokens,
                     bool independent_nuisance) const {
    check_plan_shape(plan, cfg_.num_layers, cfg_.hidden_dim);
    if (plan) {
      for (const auto& lp : plan->layers) {
        if (lp.enabled && static_cast<int>(lp.vector.size()) != cfg_.hidden_dim && lp.mode != SteeringMode::constant) {
          throw DimensionError("plan layer " + std::to_string(lp.index) + " vector dimension mismatch");
        }
      }
    }
    const std::size_t n = prompts.size();
    RunResult out;
    out.responses.resize(n);
    out.activations = ActivationSet(cfg_.num_layers, cfg_.hidden_dim);
    std::vector<ActivationRecord> records(n);

    const unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 8u));
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::future<void>> jobs;
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t stop = std::min(n, start + chunk);
      jobs.push_back(std::async(std::launch::async, [&, start, stop] {
        for (std::size_t i = start; i < stop; ++i) {
          records[i] = one_prompt(prompts[i], plan, capture, max_tokens, independent_nuisance, out.responses[i]);
          records[i].record_id = static_cast<std::int64_t>(i);
        }
      }));
    }
    for (auto& j : jobs) j.get();
    for (auto& r : records) out.activations.add(std::move(r));
    return out;
  }

  // Balanced oracle-labelled set with independent nuisance: even offsets benign
  // (faithful), odd offsets malicious (faithless).
  ActivationSet oracle_set(int count, std::int64_t first_prompt_id) const {
    PromptSet prompts;
    for (int i = 0; i < count; ++i) {
      prompts.add({first_prompt_id + i, "oracle", i % 2 == 0 ? Category::benign : Category::malicious});
    }
    auto res = generate(prompts, nullptr, {}, 0, true);
    for (std::size_t i = 0; i < res.activations.size(); ++i) {
      auto& r = res.activations.mutable_records()[i];
      const bool benign = prompts[i].category == Category::benign;
      r.label = benign ? Label::faithful : Label::faithless;
      r.score = benign ? 1.0 : 0.0;
    }
    return res.activations;
  }

  // Mean cosine between each probe and u* over the probe's layers.
  double mean_cosine(const ProbeSet& probes) const {
    if (probes.size() == 0) throw ValueError("mean_cosine: empty probe set");
    double acc = 0.0;
    for (const auto& p : probes.probes()) {
      acc += linalg::cosine(linalg::to_double(std::span<const float>(p.weights)), truth_.ideal.at(p.layer_index));
    }
    return acc / static_cast<double>(probes.size());
  }

  double judge(std::int64_t prompt_id, const std::string& response) const {
    return oracle_judge(cfg_, prompt_id, response);
  }

 private:
  static constexpr int kResponsePositions = 8;

  void build_frame() {
    const int d = cfg_.hidden_dim;
    const int k = cfg_.nuisance_count;
    auto rng = make_rng({cfg_.seed, 0x4652414dULL});
    std::normal_distribution<double> N(0.0, 1.0);
    for (int l = 0; l < cfg_.num_layers; ++l) {
      Eigen::MatrixXd G(d, k + 2);
      for (int c = 0; c < k + 2; ++c) {
        for (int r = 0; r < d; ++r) G(r, c) = N(rng);
      }
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
      const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k + 2);
      auto col = [&](int c) { return std::vector<double>(Q.col(c).data(), Q.col(c).data() + d); };
      truth_.ideal.push_back(col(0));
      std::vector<std::vector<double>> ns;
      for (int j = 0; j < k; ++j) ns.push_back(col(1 + j));
      truth_.nuisance.push_back(std::move(ns));
      truth_.offset.push_back(col(k + 1));
    }
  }

  ActivationRecord one_prompt(const Prompt& prompt, const SteeringPlan* plan, const CaptureSpec& capture,
                              int max_tokens, bool independent, std::string& response) const {
    const int L = cfg_.num_layers;
    const auto d = static_cast<std::size_t>(cfg_.hidden_dim);
    auto rng = make_rng({cfg_.seed, static_cast<std::uint64_t>(prompt.prompt_id)});
    std::normal_distribution<double> N(0.0, 1.0);
    const double c = prompt.category == Category::benign ? 1.0 : -1.0;
    std::vector<double> coeff(static_cast<std::size_t>(cfg_.nuisance_count));
    for (auto& cj : coeff) cj = (independent ? 0.0 : c) + cfg_.nuisance_sd * N(rng);

    // Noise-free part of every layer; positions differ only in ε.
    std::vector<std::vector<double>> base(static_cast<std::size_t>(L), std::vector<double>(d));
    for (int l = 0; l < L; ++l) {
      auto& b = base[static_cast<std::size_t>(l)];
      const auto& u = truth_.ideal[static_cast<std::size_t>(l)];
      const auto& m = truth_.offset[static_cast<std::size_t>(l)];
      for (std::size_t k = 0; k < d; ++k) b[k] = c * cfg_.margin * u[k] + cfg_.offset_strength * m[k];
      for (std::size_t j = 0; j < coeff.size(); ++j) {
        const auto& nj = truth_.nuisance[static_cast<std::size_t>(l)][j];
        for (std::size_t k = 0; k < d; ++k) b[k] += cfg_.nuisance_strength * coeff[j] * nj[k];
      }
    }

    const bool any_enabled = plan && !plan->enabled_layers().empty();
    auto position = [&](bool score, std::vector<float>& values) {
      double similarity = 0.0;
      double off_axis = 0.0;
      int counted = 0;
      for (int l = 0; l < L; ++l) {
        const double g = std::pow(cfg_.magnitude_growth, l);
        std::vector<float> x(d);
        for (std::size_t k = 0; k < d; ++k) {
          x[k] = static_cast<float>(g * (base[static_cast<std::size_t>(l)][k] + cfg_.noise_sigma * N(rng)));
        }
        const LayerPlan* lp = plan ? plan->find(l) : nullptr;
        const bool steered = lp && lp->enabled;
        std::vector<double> xs = steered ? apply_steering(std::span<const float>(x), *lp) : linalg::to_double(std::span<const float>(x));
        const auto& u = truth_.ideal[static_cast<std::size_t>(l)];
        if (steered) {
          double dn2 = 0.0, du = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            const double delta = xs[k] - static_cast<double>(x[k]);
            dn2 += delta * delta;
            du += delta * u[k];
          }
          if (dn2 > 0.0) {
            const double sin2 = std::max(0.0, 1.0 - du * du / dn2);
            const double rel = std::sqrt(dn2) / (cfg_.coherence_ramp * linalg::norm(std::span<const float>(x)));
            off_axis += std::min(1.0, rel * rel) * sin2;
          }
        }
        if (!any_enabled || steered) {
          similarity += linalg::dot(std::span<const double>(xs), std::span<const double>(u)) / g;
          ++counted;
        }
        for (std::size_t k = 0; k < d; ++k) values[static_cast<std::size_t>(l) * d + k] += static_cast<float>(xs[k]);
      }
      if (!score) return 0.0;
      similarity /= counted;
      const double coherence = std::exp(-(off_axis / counted) / (cfg_.coherence_tau * cfg_.coherence_tau));
      return coherence * detail::sigmoid(cfg_.behavior_sharpness * similarity);
    };

    ActivationRecord rec;
    rec.prompt_id = prompt.prompt_id;
    rec.role = capture.role;
    rec.values.assign(static_cast<std::size_t>(L) * d, 0.0f);
    const double sigma = position(true, rec.values);
    if (capture.role == TokenRole::response_mean) {
      const int extra = std::clamp(max_tokens, 0, kResponsePositions);
      std::vector<double> sum(rec.values.begin(), rec.values.end());
      for (int t = 0; t < extra; ++t) {
        std::vector<float> pos(rec.values.size(), 0.0f);
        position(false, pos);
        for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += pos[k];
      }
      for (std::size_t k = 0; k < sum.size(); ++k) rec.values[k] = static_cast<float>(sum[k] / (extra + 1));
    }
    response = encode_behavior(sigma);
    return rec;
  }

  SyntheticConfig cfg_;
  GroundTruth truth_;
};

}  // namespace steerlab
