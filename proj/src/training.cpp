#include "idreamrec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/error.hpp"
#include "idreamrec/generation.hpp"

namespace idr {

namespace {

constexpr std::string_view kCheckpointMagic = "IDRM1";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream ss(v);
  T out{};
  ss >> out;
  if (ss.fail() || !ss.eof()) throw Error(ErrorCode::kInvalidInput, "config key '" + key + "': bad value '" + v + "'");
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw Error(ErrorCode::kInvalidInput, "p_uncond must be in [0,1]");
  if (batch_size < 1) throw Error(ErrorCode::kInvalidInput, "batch_size must be positive");
  if (epochs < 1) throw Error(ErrorCode::kInvalidInput, "epochs must be positive");
  if (eval_every < 1) throw Error(ErrorCode::kInvalidInput, "eval_every must be positive");
  if (patience < 1) throw Error(ErrorCode::kInvalidInput, "patience must be positive");
  if (eval_steps < 1 || eval_steps > diffusion_steps) {
    throw Error(ErrorCode::kInvalidInput, "eval_steps must be in [1, T]");
  }
  if (!(lr > 0.0)) throw Error(ErrorCode::kInvalidInput, "lr must be positive");
}

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidInput, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    kv.values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) { return parse(read_file(path)); }

void KeyValueConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::kInvalidInput, "override must look like key=value");
  values[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig c;
  for (const auto& [key, v] : kv.values) {
    if (key == "p_uncond") c.p_uncond = parse_number<double>(key, v);
    else if (key == "T") c.diffusion_steps = parse_number<int>(key, v);
    else if (key == "beta_start") c.beta_start = parse_number<double>(key, v);
    else if (key == "beta_end") c.beta_end = parse_number<double>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, v);
    else if (key == "lr") c.lr = parse_number<double>(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, v);
    else if (key == "epochs") c.epochs = parse_number<int>(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "eval_every") c.eval_every = parse_number<int>(key, v);
    else if (key == "patience") c.patience = parse_number<int>(key, v);
    else if (key == "eval_steps") c.eval_steps = parse_number<int>(key, v);
    else if (key == "eval_w") c.eval_w = parse_number<double>(key, v);
    else if (key == "hidden") c.hidden = parse_number<std::size_t>(key, v);
    else if (key == "init_std") c.init_std = parse_number<double>(key, v);
  }
  return c;
}

std::string TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["epoch_loss"] = epoch_loss;
  auto& val = j["validation"] = nlohmann::ordered_json::array();
  for (const auto& v : validation) {
    val.push_back({{"epoch", v.epoch}, {"hr5", v.hr5}, {"ndcg5", v.ndcg5}, {"hr10", v.hr10}, {"ndcg10", v.ndcg10}});
  }
  j["best_epoch"] = best_epoch;
  j["wall_seconds"] = wall_seconds;
  j["samples_seen"] = samples_seen;
  j["unconditional_samples"] = unconditional_samples;
  return j.dump(2) + "\n";
}

int uniform_t(std::mt19937_64& rng, int steps) {
  if (steps < 1) throw Error(ErrorCode::kInvalidInput, "T must be >= 1");
  return std::uniform_int_distribution<int>(1, steps)(rng);
}

TrainResult train(const SequenceDataset& data, const EmbeddingMatrix& catalog, const TrainConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::vector<SequencePair> train_pairs = data.subset(Split::kTrain);
  const std::vector<SequencePair> valid_pairs = data.subset(Split::kValid);
  if (train_pairs.empty()) throw Error(ErrorCode::kInvalidInput, "training split is empty");

  const NoiseSchedule sched = build_schedule(cfg.diffusion_steps, LinearBeta{cfg.beta_start, cfg.beta_end});
  DenoiserConfig mcfg = DenoiserConfig::for_item_dim(catalog.dim());
  if (cfg.hidden > 0) mcfg.hidden = cfg.hidden;
  mcfg.init_std = cfg.init_std;

  std::mt19937_64 rng(cfg.seed);
  DenoiserModel model = DenoiserModel::initialized(mcfg, rng);
  OptimizerState opt(model.layout().total(),
                     AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  // History embeddings never change, so embed them once.
  std::vector<HistorySequence> histories;
  histories.reserve(train_pairs.size());
  for (const auto& p : train_pairs) histories.push_back(make_history(p.history, catalog, data.pad_id));

  const std::size_t d = catalog.dim();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution drop(cfg.p_uncond);
  std::vector<std::size_t> order(train_pairs.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  std::vector<double> best_params(model.params().begin(), model.params().end());
  double best_hr10 = -1.0;
  int rounds_without_gain = 0;

  EvalSettings vsettings;
  vsettings.ks = {5, 10};
  vsettings.plan = make_plan(sched.steps, cfg.eval_steps);
  vsettings.w = cfg.eval_w;
  vsettings.seed = cfg.seed;

  std::vector<TrainExample> batch;
  std::vector<double> noise(d);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const auto e0 = catalog.item(static_cast<std::size_t>(train_pairs[idx].target));
        TrainExample ex;
        ex.t = uniform_t(rng, sched.steps);
        if (drop(rng)) {
          ++report.unconditional_samples;
        } else {
          ex.history = histories[idx];
        }
        for (double& v : noise) v = normal(rng);
        ex.noisy = forward_perturb(e0, ex.t, sched, noise).vector;
        ex.target.assign(e0.begin(), e0.end());
        batch.push_back(std::move(ex));
      }
      LossAndGrad lg = loss_and_grad(model, batch);
      optimizer_step(opt, model.params(), lg.grads.values);
      loss_sum += lg.loss * static_cast<double>(batch.size());
      report.samples_seen += batch.size();
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) {
      throw Error(ErrorCode::kDivergedTraining, "epoch " + std::to_string(epoch) + " loss is not finite");
    }
    report.epoch_loss.push_back(epoch_loss);

    const bool eval_round = !valid_pairs.empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (eval_round) {
      const auto res = evaluate(model, sched, valid_pairs, catalog, data.pad_id, vsettings);
      report.validation.push_back({epoch, res.rows[0].hr, res.rows[0].ndcg, res.rows[1].hr, res.rows[1].ndcg});
      if (res.rows[1].hr > best_hr10) {
        best_hr10 = res.rows[1].hr;
        report.best_epoch = epoch;
        best_params.assign(model.params().begin(), model.params().end());
        rounds_without_gain = 0;
      } else if (++rounds_without_gain >= cfg.patience) {
        break;
      }
    }
  }
  if (valid_pairs.empty()) {
    report.best_epoch = static_cast<int>(report.epoch_loss.size());
    best_params.assign(model.params().begin(), model.params().end());
  }
  std::copy(best_params.begin(), best_params.end(), model.params().begin());
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return TrainResult{std::move(model), sched, std::move(report)};
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& cfg = ck.model.config();
  nlohmann::ordered_json h;
  h["format"] = 1;
  h["dims"] = {{"item_dim", cfg.item_dim}, {"cond_dim", cfg.cond_dim}, {"hidden", cfg.hidden}};
  h["architecture"] = {{"history_len", cfg.history_len},
                       {"time_freqs", cfg.time_freqs},
                       {"attention_heads", 1},
                       {"hidden_layers", 2},
                       {"activation", "silu"},
                       {"init_std", cfg.init_std}};
  h["schedule"] = {{"T", ck.schedule.steps},
                   {"beta_start", ck.schedule.beta_start},
                   {"beta_end", ck.schedule.beta_end}};
  if (ck.schedule.beta_start == 0.0) h["schedule"]["alpha"] = ck.schedule.alpha;
  h["transform"] = ck.transform_path;
  h["embeddings"] = ck.embeddings_path;
  h["seed"] = ck.seed;
  auto& tensors = h["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : ck.model.layout().tensors()) tensors.push_back({t.name, t.rows, t.cols});
  const std::string header = h.dump();

  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put_u64(header.size());
  w.put_bytes(header);
  for (double v : ck.model.params()) w.put_f64(v);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic(kCheckpointMagic);
  const std::uint64_t header_len = r.get_u64();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.get_bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, std::string("checkpoint header: ") + e.what());
  }
  try {
    DenoiserConfig cfg;
    cfg.item_dim = h.at("dims").at("item_dim").get<std::size_t>();
    cfg.cond_dim = h.at("dims").at("cond_dim").get<std::size_t>();
    cfg.hidden = h.at("dims").at("hidden").get<std::size_t>();
    cfg.history_len = h.at("architecture").at("history_len").get<std::size_t>();
    cfg.time_freqs = h.at("architecture").at("time_freqs").get<std::size_t>();
    cfg.init_std = h.at("architecture").value("init_std", 0.02);

    const auto& s = h.at("schedule");
    NoiseSchedule sched;
    if (s.contains("alpha")) {
      sched = NoiseSchedule::from_alphas(s.at("alpha").get<std::vector<double>>());
    } else {
      sched = build_schedule(s.at("T").get<int>(),
                             LinearBeta{s.at("beta_start").get<double>(), s.at("beta_end").get<double>()});
    }

    Checkpoint ck{DenoiserModel(cfg), std::move(sched), h.value("embeddings", std::string()),
                  h.value("transform", std::string()), h.value("seed", std::uint64_t{0})};
    const std::size_t n = ck.model.params().size();
    r.need(n * 8);
    for (auto& v : ck.model.params()) v = r.get_f64();
    if (r.remaining() != 0) throw Error(ErrorCode::kCorruptFile, "checkpoint: trailing bytes");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, std::string("checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace idr
