#include "idreamrec/diffusion.hpp"

#include <cmath>
#include <string>

#include "idreamrec/error.hpp"

namespace idr {

namespace {

void check_step(int t, const NoiseSchedule& s, const char* what) {
  if (t < 0 || t > s.steps) {
    throw Error(ErrorCode::kOutOfRange, std::string(what) + " step " + std::to_string(t) +
                                            " outside [0, " + std::to_string(s.steps) + "]");
  }
}

void validate_alphas(const std::vector<double>& alpha) {
  if (alpha.size() < 2) throw Error(ErrorCode::kInvalidSchedule, "schedule needs at least one step");
  if (alpha[0] != 1.0) throw Error(ErrorCode::kInvalidSchedule, "alpha_0 must be 1");
  for (std::size_t t = 1; t < alpha.size(); ++t) {
    if (!(alpha[t] > 0.0) || !(alpha[t] < alpha[t - 1])) {
      throw Error(ErrorCode::kInvalidSchedule, "alpha not strictly decreasing in (0,1] at t=" + std::to_string(t));
    }
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::from_alphas(std::vector<double> alpha) {
  validate_alphas(alpha);
  NoiseSchedule s;
  s.steps = static_cast<int>(alpha.size()) - 1;
  s.alpha = std::move(alpha);
  return s;
}

NoiseSchedule build_schedule(int steps, LinearBeta kind) {
  if (steps < 1) throw Error(ErrorCode::kInvalidSchedule, "T must be >= 1");
  if (!(kind.beta_start > 0.0) || !(kind.beta_start <= kind.beta_end) || !(kind.beta_end < 1.0)) {
    throw Error(ErrorCode::kInvalidSchedule, "need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = kind.beta_start;
  s.beta_end = kind.beta_end;
  s.alpha.resize(static_cast<std::size_t>(steps) + 1);
  s.alpha[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    const double beta = kind.beta_start + (kind.beta_end - kind.beta_start) * frac;
    s.alpha[static_cast<std::size_t>(t)] = s.alpha[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
  }
  validate_alphas(s.alpha);
  return s;
}

NoisyEmbedding forward_perturb(std::span<const double> e0, int t, const NoiseSchedule& s,
                               std::span<const double> noise) {
  check_step(t, s, "forward_perturb");
  if (e0.size() != noise.size()) throw Error(ErrorCode::kDimensionMismatch, "noise and e0 differ in size");
  const double a = s.at(t);
  const double signal = std::sqrt(a);
  const double spread = std::sqrt(1.0 - a);
  NoisyEmbedding out{std::vector<double>(e0.size()), t};
  for (std::size_t i = 0; i < e0.size(); ++i) out.vector[i] = signal * e0[i] + spread * noise[i];
  return out;
}

NoisyEmbedding ddim_step(const NoisyEmbedding& e_t, std::span<const double> e0_hat, int s_idx, double sigma,
                         const NoiseSchedule& sched, std::span<const double> noise) {
  check_step(e_t.t, sched, "ddim_step");
  check_step(s_idx, sched, "ddim_step target");
  if (!(s_idx < e_t.t)) throw Error(ErrorCode::kOutOfRange, "ddim_step needs s < t");
  const std::size_t d = e_t.vector.size();
  if (e0_hat.size() != d) throw Error(ErrorCode::kDimensionMismatch, "e0_hat size differs from e_t");
  if (sigma != 0.0 && noise.size() != d) throw Error(ErrorCode::kDimensionMismatch, "noise size differs from e_t");

  const double a_t = sched.at(e_t.t);
  const double a_s = sched.at(s_idx);
  const double var = sigma * sigma;
  const double budget = 1.0 - a_s;
  if (!(sigma >= 0.0) || var > budget * (1.0 + 1e-12) + 1e-300) {
    throw Error(ErrorCode::kInvalidVariance, "sigma^2 exceeds 1 - alpha_s");
  }
  const double signal = std::sqrt(a_s);
  const double residual = std::sqrt(std::max(0.0, budget - var)) / std::sqrt(1.0 - a_t);
  const double sqrt_at = std::sqrt(a_t);

  NoisyEmbedding out{std::vector<double>(d), s_idx};
  for (std::size_t i = 0; i < d; ++i) {
    double v = signal * e0_hat[i] + residual * (e_t.vector[i] - sqrt_at * e0_hat[i]);
    if (sigma != 0.0) v += sigma * noise[i];
    out.vector[i] = v;
  }
  return out;
}

double ancestral_sigma(int t, int s, const NoiseSchedule& sched) {
  check_step(t, sched, "ancestral_sigma");
  check_step(s, sched, "ancestral_sigma target");
  if (!(s < t)) throw Error(ErrorCode::kOutOfRange, "ancestral_sigma needs s < t");
  const double a_t = sched.at(t);
  const double a_s = sched.at(s);
  const double var = (1.0 - a_s) / (1.0 - a_t) * (1.0 - a_t / a_s);
  return std::sqrt(std::max(0.0, var));
}

double ddpm_sigma(int t, const NoiseSchedule& sched) {
  if (t < 1) throw Error(ErrorCode::kOutOfRange, "ddpm_sigma needs t >= 1");
  return ancestral_sigma(t, t - 1, sched);
}

SamplingPlan make_plan(int steps_total, int steps, SigmaRule rule) {
  if (steps_total < 1) throw Error(ErrorCode::kInvalidInput, "T must be >= 1");
  if (steps < 1 || steps > steps_total) {
    throw Error(ErrorCode::kOutOfRange, "sampling steps must be in [1, T]");
  }
  SamplingPlan plan;
  plan.sigma_rule = rule;
  if (steps == 1) {
    plan.tau = {steps_total};
    return plan;
  }
  const double stride = static_cast<double>(steps_total - 1) / static_cast<double>(steps - 1);
  for (int i = 0; i < steps; ++i) {
    const int tau = 1 + static_cast<int>(std::lround(stride * i));
    if (plan.tau.empty() || tau > plan.tau.back()) plan.tau.push_back(tau);
  }
  plan.tau.back() = steps_total;
  return plan;
}

}  // namespace idr
