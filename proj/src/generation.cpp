#include "idreamrec/generation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "idreamrec/error.hpp"
#include "idreamrec/kernels.hpp"

namespace idr {

std::vector<double> mix_condition(std::span<const double> c_hist, std::span<const double> c_intent, double rho) {
  if (!(rho >= 0.0)) throw Error(ErrorCode::kInvalidInput, "intention strength rho must be >= 0");
  if (rho == 0.0) return {c_hist.begin(), c_hist.end()};
  if (c_hist.size() != c_intent.size()) throw Error(ErrorCode::kDimensionMismatch, "condition sizes differ");
  std::vector<double> out(c_hist.size());
  const double norm = 1.0 + rho;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (c_hist[i] + rho * c_intent[i]) / norm;
  return out;
}

std::vector<double> cfg_combine(std::span<const double> cond_out, std::span<const double> uncond_out, double w) {
  if (cond_out.size() != uncond_out.size()) throw Error(ErrorCode::kDimensionMismatch, "prediction sizes differ");
  std::vector<double> out(cond_out.size());
  // Written as cond + w * (cond - uncond) so that w = 0 or cond == uncond returns cond bit-exactly.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cond_out[i] + w * (cond_out[i] - uncond_out[i]);
  return out;
}

std::vector<double> build_condition(const Denoiser& model, const GuidanceRequest& req) {
  std::vector<double> c_hist = req.history.empty() ? model.unconditional() : model.cond_encode(req.history);
  if (!req.intention || req.rho == 0.0) return mix_condition(c_hist, c_hist, req.rho);
  if (req.intention->size() != model.item_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "intention dim does not match the model");
  }
  const auto c_intent = model.cond_encode(HistorySequence::single(*req.intention, req.history.length()));
  return mix_condition(c_hist, c_intent, req.rho);
}

std::vector<double> generate_oracle(const Denoiser& model, const NoiseSchedule& sched, const GuidanceRequest& req) {
  const auto& tau = req.plan.tau;
  if (tau.empty() || tau.back() != sched.steps || tau.front() < 1) {
    throw Error(ErrorCode::kInvalidInput, "sampling plan does not match the schedule");
  }
  for (std::size_t i = 1; i < tau.size(); ++i)
    if (tau[i] <= tau[i - 1]) throw Error(ErrorCode::kInvalidInput, "sampling plan is not strictly increasing");

  const std::size_t d = model.item_dim();
  const std::vector<double> c = build_condition(model, req);
  const std::vector<double> phi = model.unconditional();

  std::mt19937_64 rng(req.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  NoisyEmbedding state{std::vector<double>(d), sched.steps};
  for (double& v : state.vector) v = normal(rng);

  std::vector<double> noise(d, 0.0);
  for (std::size_t i = tau.size(); i-- > 0;) {
    const int t = tau[i];
    const int s = i > 0 ? tau[i - 1] : 0;
    state.t = t;
    const auto cond = model.predict(state.vector, t, c);
    const auto uncond = model.predict(state.vector, t, phi);
    const auto e0 = cfg_combine(cond, uncond, req.w);
    double sigma = 0.0;
    if (req.plan.sigma_rule == SigmaRule::kDdpmMatch) {
      sigma = ancestral_sigma(t, s, sched);
      for (double& v : noise) v = normal(rng);
    }
    state = ddim_step(state, e0, s, sigma, sched, noise);
  }
  return std::move(state.vector);
}

namespace {

bool ranks_before(double score_a, std::int64_t id_a, double score_b, std::int64_t id_b) {
  return score_a != score_b ? score_a > score_b : id_a < id_b;
}

}  // namespace

RankedResult ground_topk(std::span<const double> oracle, const EmbeddingMatrix& catalog, std::size_t k) {
  if (catalog.count() == 0) throw Error(ErrorCode::kInvalidInput, "empty catalog");
  if (oracle.size() != catalog.dim()) throw Error(ErrorCode::kDimensionMismatch, "oracle dim differs from catalog");
  if (k < 1 || k > catalog.count()) throw Error(ErrorCode::kOutOfRange, "k must be in [1, catalog size]");
  std::vector<double> scores(catalog.count());
  kernels::omp::score_rows(catalog.vectors, oracle, scores);
  std::vector<std::int64_t> ids(catalog.count());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      return ranks_before(scores[static_cast<std::size_t>(a)], a, scores[static_cast<std::size_t>(b)], b);
                    });
  RankedResult out;
  out.items.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto id : out.items) out.scores.push_back(scores[static_cast<std::size_t>(id)]);
  out.oracle.assign(oracle.begin(), oracle.end());
  return out;
}

std::size_t target_rank(std::span<const double> oracle, const EmbeddingMatrix& catalog, std::int64_t target) {
  if (target < 0 || static_cast<std::size_t>(target) >= catalog.count()) {
    throw Error(ErrorCode::kOutOfRange, "target id outside the catalog");
  }
  if (oracle.size() != catalog.dim()) throw Error(ErrorCode::kDimensionMismatch, "oracle dim differs from catalog");
  std::vector<double> scores(catalog.count());
  kernels::omp::score_rows(catalog.vectors, oracle, scores);
  const double ts = scores[static_cast<std::size_t>(target)];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (ranks_before(scores[j], static_cast<std::int64_t>(j), ts, target)) ++rank;
  return rank;
}

HistorySequence make_history(std::span<const std::int64_t> ids, const EmbeddingMatrix& catalog, std::int64_t pad_id) {
  HistorySequence h;
  h.embeddings = Matrix(ids.size(), catalog.dim());
  h.mask.assign(ids.size(), 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id == pad_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= catalog.count()) {
      throw Error(ErrorCode::kOutOfRange, "unknown item id " + std::to_string(id));
    }
    auto src = catalog.item(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), h.embeddings.row(i).begin());
    h.mask[i] = 1;
  }
  return h;
}

std::vector<MetricRow> metrics_from_ranks(std::span<const std::size_t> ranks, std::span<const std::size_t> ks) {
  std::vector<MetricRow> rows;
  for (std::size_t k : ks) {
    MetricRow row{k, 0.0, 0.0, ranks.size()};
    for (std::size_t r : ranks) {
      if (r >= 1 && r <= k) {
        row.hr += 1.0;
        row.ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
      }
    }
    if (!ranks.empty()) {
      row.hr /= static_cast<double>(ranks.size());
      row.ndcg /= static_cast<double>(ranks.size());
    }
    rows.push_back(row);
  }
  return rows;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

EvalResult evaluate(const Denoiser& model, const NoiseSchedule& sched, std::span<const SequencePair> cases,
                    const EmbeddingMatrix& catalog, std::int64_t pad_id, const EvalSettings& settings) {
  if (cases.empty()) throw Error(ErrorCode::kInvalidInput, "empty evaluation set");
  EvalResult out;
  out.ranks.assign(cases.size(), 0);
  std::exception_ptr failure;

#pragma omp parallel for schedule(dynamic, 4)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(cases.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      GuidanceRequest req;
      req.history = make_history(cases[i].history, catalog, pad_id);
      if (settings.intention) req.intention = settings.intention(cases[i]);
      req.rho = settings.rho;
      req.w = settings.w;
      req.plan = settings.plan;
      req.seed = derive_seed(settings.seed, i);
      const auto oracle = generate_oracle(model, sched, req);
      out.ranks[i] = target_rank(oracle, catalog, cases[i].target);
    } catch (...) {
#pragma omp critical(idr_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  out.rows = metrics_from_ranks(out.ranks, settings.ks);
  return out;
}

std::string metrics_tsv(std::span<const MetricRow> rows) {
  std::ostringstream ss;
  ss << "metric\tvalue\tn\n";
  for (const auto& r : rows) ss << "HR@" << r.k << '\t' << nlohmann::json(r.hr).dump() << '\t' << r.n << '\n';
  for (const auto& r : rows) ss << "NDCG@" << r.k << '\t' << nlohmann::json(r.ndcg).dump() << '\t' << r.n << '\n';
  return ss.str();
}

std::string metrics_json(std::span<const MetricRow> rows, std::size_t steps, double w, double rho) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["k"] = r.k;
    j["hr"] = r.hr;
    j["ndcg"] = r.ndcg;
    j["n"] = r.n;
    j["steps"] = steps;
    j["w"] = w;
    j["rho"] = rho;
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

}  // namespace idr
