#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idreamrec/matrix.hpp"

namespace idr {

inline constexpr std::size_t kHistoryLength = 9;  // L - 1 with L = 10

/// Fixed-length history of item embeddings. Padded rows are zero and masked out.
struct HistorySequence {
  Matrix embeddings;               // (L-1) x d
  std::vector<std::uint8_t> mask;  // 1 = real interaction

  std::size_t length() const { return mask.size(); }
  bool empty() const;
  /// Index of the last real interaction; requires !empty().
  std::size_t last_position() const;

  /// Sequence whose only real entry is `e`, placed in the last slot.
  static HistorySequence single(std::span<const double> e, std::size_t length = kHistoryLength);
};

/// Anything that can play the denoiser role during generation.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::size_t item_dim() const = 0;
  virtual std::size_t cond_dim() const = 0;
  virtual std::vector<double> cond_encode(const HistorySequence& h) const = 0;
  /// The trainable unconditional token, in condition space.
  virtual std::vector<double> unconditional() const = 0;
  virtual std::vector<double> predict(std::span<const double> e_t, int t, std::span<const double> c) const = 0;
};

struct DenoiserConfig {
  std::size_t item_dim = 32;
  std::size_t cond_dim = 32;
  std::size_t hidden = 128;
  std::size_t history_len = kHistoryLength;
  std::size_t time_freqs = 64;
  double init_std = 0.02;

  /// Default architecture for item dimension d: d_c = d, hidden width 4d.
  static DenoiserConfig for_item_dim(std::size_t d);
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

/// Parameter tensors in declaration order, packed into one flat buffer.
class ParamLayout {
 public:
  explicit ParamLayout(const DenoiserConfig& cfg);
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& find(const std::string& name) const;
  std::size_t total() const { return total_; }

 private:
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
};

/// Gradient buffer congruent with a model's parameter layout.
struct GradientSet {
  std::vector<double> values;
};

class DenoiserModel final : public Denoiser {
 public:
  explicit DenoiserModel(const DenoiserConfig& cfg);  // all parameters zero

  /// Weights ~ N(0, init_std^2); biases and the unconditional token start at zero.
  static DenoiserModel initialized(const DenoiserConfig& cfg, std::mt19937_64& rng);

  const DenoiserConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> tensor(const std::string& name);
  std::span<const double> tensor(const std::string& name) const;

  std::size_t item_dim() const override { return cfg_.item_dim; }
  std::size_t cond_dim() const override { return cfg_.cond_dim; }
  std::vector<double> cond_encode(const HistorySequence& h) const override;
  std::vector<double> unconditional() const override;
  std::vector<double> predict(std::span<const double> e_t, int t, std::span<const double> c) const override;

 private:
  DenoiserConfig cfg_;
  ParamLayout layout_;
  std::vector<double> params_;
};

/// One supervised example: the noisy input, its step, the condition source and the clean target.
/// A missing history routes the example through the unconditional token.
struct TrainExample {
  std::vector<double> noisy;
  int t = 1;
  std::optional<HistorySequence> history;
  std::vector<double> target;
};

struct LossAndGrad {
  double loss = 0.0;
  GradientSet grads;
};

/// Mean over the batch of ||predict - target||^2 and its exact gradient.
LossAndGrad loss_and_grad(const DenoiserModel& model, std::span<const TrainExample> batch);

/// Squared error of one example; adds weight * d(error)/d(params) into `grads`. When
/// `history_grad` is non-null it receives d(error)/d(history embeddings), same shape as the history.
double backprop_example(const DenoiserModel& model, const TrainExample& ex, double weight, std::span<double> grads,
                        Matrix* history_grad = nullptr);

/// Sinusoidal features [sin(t w_k), cos(t w_k)] with w_k = 10000^(-k/F).
std::vector<double> time_features(int t, std::size_t freqs);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  AdamWConfig hp;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  explicit OptimizerState(std::size_t n, AdamWConfig cfg = {}) : hp(cfg), m(n, 0.0), v(n, 0.0) {}
};

/// Decoupled weight decay followed by a bias-corrected Adam update.
void optimizer_step(OptimizerState& state, std::span<double> params, std::span<const double> grads);

}  // namespace idr
