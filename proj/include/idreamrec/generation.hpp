#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idreamrec/data.hpp"
#include "idreamrec/denoiser.hpp"
#include "idreamrec/diffusion.hpp"
#include "idreamrec/embedding_space.hpp"

namespace idr {

struct GuidanceRequest {
  HistorySequence history;  // an all-padding history is routed to the unconditional token
  std::optional<std::vector<double>> intention;  // already in model (transformed) space
  double rho = 0.0;
  double w = 0.0;
  SamplingPlan plan;
  std::size_t k = 10;
  std::uint64_t seed = 0;
};

struct RankedResult {
  std::vector<std::int64_t> items;
  std::vector<double> scores;
  std::vector<double> oracle;
};

/// (c_hist + rho * c_intent) / (1 + rho); returns c_hist unchanged when rho == 0.
std::vector<double> mix_condition(std::span<const double> c_hist, std::span<const double> c_intent, double rho);

/// (1 + w) * cond - w * uncond
std::vector<double> cfg_combine(std::span<const double> cond_out, std::span<const double> uncond_out, double w);

/// Condition vector for a request: history encoding (or the unconditional token) mixed with the intention.
std::vector<double> build_condition(const Denoiser& model, const GuidanceRequest& req);

/// Guided reverse process from seeded Gaussian noise at tau_last down to step 0.
std::vector<double> generate_oracle(const Denoiser& model, const NoiseSchedule& sched, const GuidanceRequest& req);

/// Full dot-product scan; ties go to the lower item id.
RankedResult ground_topk(std::span<const double> oracle, const EmbeddingMatrix& catalog, std::size_t k);

/// 1-based rank of `target` under the same ordering as ground_topk.
std::size_t target_rank(std::span<const double> oracle, const EmbeddingMatrix& catalog, std::int64_t target);

/// Embeds a padded id list. Pad positions get zero rows and a cleared mask bit.
HistorySequence make_history(std::span<const std::int64_t> ids, const EmbeddingMatrix& catalog, std::int64_t pad_id);

struct MetricRow {
  std::size_t k = 0;
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t n = 0;
};

/// HR@K and NDCG@K (binary relevance, single target) from 1-based ranks.
std::vector<MetricRow> metrics_from_ranks(std::span<const std::size_t> ranks, std::span<const std::size_t> ks);

using IntentionProvider = std::function<std::optional<std::vector<double>>(const SequencePair&)>;

struct EvalSettings {
  std::vector<std::size_t> ks{5, 10};
  SamplingPlan plan;
  double w = 0.0;
  double rho = 0.0;
  std::uint64_t seed = 0;
  IntentionProvider intention;  // optional, per case
};

struct EvalResult {
  std::vector<MetricRow> rows;
  std::vector<std::size_t> ranks;
};

/// Generates one oracle per case (seed derived from settings.seed and the case index),
/// grounds it against the full catalog and scores the target's rank.
EvalResult evaluate(const Denoiser& model, const NoiseSchedule& sched, std::span<const SequencePair> cases,
                    const EmbeddingMatrix& catalog, std::int64_t pad_id, const EvalSettings& settings);

/// Per-case seed: a splitmix64 mix of the base seed and the case index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

std::string metrics_tsv(std::span<const MetricRow> rows);
/// JSON array of {"k","hr","ndcg","n","steps","w","rho"} objects.
std::string metrics_json(std::span<const MetricRow> rows, std::size_t steps, double w, double rho);

}  // namespace idr
