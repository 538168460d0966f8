#pragma once

#include <span>
#include <vector>

namespace idr {

/// Cumulative signal levels alpha[0..T] with alpha[0] = 1 and alpha strictly decreasing.
struct NoiseSchedule {
  int steps = 0;  // T
  std::vector<double> alpha;
  double beta_start = 0.0;
  double beta_end = 0.0;

  double at(int t) const { return alpha[static_cast<std::size_t>(t)]; }
  /// True when the final level is below 1e-3, i.e. x_T is essentially pure noise.
  bool reaches_noise() const { return alpha.back() < 1e-3; }

  /// Builds a schedule from explicit levels; alpha[0] must be 1 and the rest strictly decreasing in (0, 1).
  static NoiseSchedule from_alphas(std::vector<double> alpha);
};

struct LinearBeta {
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

inline constexpr int kDefaultDiffusionSteps = 2000;

NoiseSchedule build_schedule(int steps, LinearBeta kind = {});

struct NoisyEmbedding {
  std::vector<double> vector;
  int t = 0;
};

enum class SigmaRule { kDeterministic, kDdpmMatch };

struct SamplingPlan {
  std::vector<int> tau;  // strictly increasing, ends at T
  SigmaRule sigma_rule = SigmaRule::kDeterministic;
};

/// sqrt(alpha_t) * e0 + sqrt(1 - alpha_t) * noise. Accepts 0 <= t <= T.
NoisyEmbedding forward_perturb(std::span<const double> e0, int t, const NoiseSchedule& s,
                               std::span<const double> noise);

/// One reverse jump t -> s_idx given a prediction of the clean embedding.
NoisyEmbedding ddim_step(const NoisyEmbedding& e_t, std::span<const double> e0_hat, int s_idx, double sigma,
                         const NoiseSchedule& sched, std::span<const double> noise);

/// Standard deviation that makes a t -> t-1 jump match ancestral DDPM sampling.
double ddpm_sigma(int t, const NoiseSchedule& sched);

/// Posterior-matching standard deviation for an arbitrary jump t -> s (zero when s == 0).
double ancestral_sigma(int t, int s, const NoiseSchedule& sched);

SamplingPlan make_plan(int steps_total, int steps, SigmaRule rule = SigmaRule::kDeterministic);

}  // namespace idr
