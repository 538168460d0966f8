#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "idreamrec/data.hpp"
#include "idreamrec/denoiser.hpp"
#include "idreamrec/diffusion.hpp"
#include "idreamrec/embedding_space.hpp"

namespace idr {

struct TrainConfig {
  double p_uncond = 0.1;  // probability of routing a sample through the unconditional token
  int diffusion_steps = kDefaultDiffusionSteps;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int epochs = 150;
  std::uint64_t seed = 42;
  int eval_every = 5;  // epochs between validation rounds
  int patience = 10;   // validation rounds without improvement before stopping
  int eval_steps = 1;  // sampling steps used for validation
  double eval_w = 0.0;
  std::size_t hidden = 0;  // 0 selects 4 * item_dim
  double init_std = 0.02;

  void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment.
struct KeyValueConfig {
  std::map<std::string, std::string> values;
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);
  /// Applies "key=value" overrides.
  void set(const std::string& assignment);
};

/// Reads the documented training keys from a key-value config; other keys are ignored.
TrainConfig train_config_from(const KeyValueConfig& kv);

struct ValidationPoint {
  int epoch = 0;
  double hr5 = 0.0, ndcg5 = 0.0, hr10 = 0.0, ndcg10 = 0.0;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<ValidationPoint> validation;
  int best_epoch = 0;
  double wall_seconds = 0.0;
  std::size_t samples_seen = 0;
  std::size_t unconditional_samples = 0;

  std::string to_json() const;
};

struct TrainResult {
  DenoiserModel model;  // best checkpoint by validation HR@10
  NoiseSchedule schedule;
  TrainReport report;
};

/// Uniform over {1, ..., T}.
int uniform_t(std::mt19937_64& rng, int steps);

/// Classifier-free-guidance training on the train split of `data`; the valid split drives
/// model selection and early stopping. `catalog` is the transformed item table.
TrainResult train(const SequenceDataset& data, const EmbeddingMatrix& catalog, const TrainConfig& cfg);

struct Checkpoint {
  DenoiserModel model;
  NoiseSchedule schedule;
  std::string embeddings_path;
  std::string transform_path;
  std::uint64_t seed = 0;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace idr
