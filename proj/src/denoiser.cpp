#include "idreamrec/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include "idreamrec/error.hpp"
#include "idreamrec/kernels.hpp"

namespace idr {

namespace {

// Tensor indices, in declaration (and checkpoint) order.
enum Tensor : std::size_t {
  kInW, kInB, kPos, kWq, kWk, kWv, kWo, kBo, kPhi, kTimeW, kTimeB, kW1, kB1, kW2, kB2, kW3, kB3, kTensorCount
};

// Examples per gradient chunk. Fixed so the reduction order never depends on the thread count.
constexpr std::size_t kChunk = 8;

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

// out[j] += sum_i x[i] * w[i * m + j]
void vec_mat_acc(const double* x, std::size_t n, const double* w, std::size_t m, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    const double* row = w + i * m;
    for (std::size_t j = 0; j < m; ++j) out[j] += xi * row[j];
  }
}

// out[i] += sum_j w[i * m + j] * g[j]
void mat_vec_t_acc(const double* g, std::size_t m, const double* w, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = w + i * m;
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += row[j] * g[j];
    out[i] += acc;
  }
}

// dw[i * m + j] += x[i] * g[j]
void outer_acc(const double* x, std::size_t n, const double* g, std::size_t m, double* dw) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    double* row = dw + i * m;
    for (std::size_t j = 0; j < m; ++j) row[j] += xi * g[j];
  }
}

struct CondCache {
  std::vector<std::size_t> positions;
  std::vector<double> x, k, v;  // positions x dc
  std::vector<double> q, attn, o, c;
};

struct NetCache {
  std::vector<double> feat, temb, z0, a1, h1, a2, h2, out;
};

class Params {
 public:
  Params(const ParamLayout& layout, const double* base) {
    for (std::size_t i = 0; i < kTensorCount; ++i) ptr_[i] = base + layout.tensors()[i].offset;
  }
  const double* operator[](std::size_t i) const { return ptr_[i]; }

 private:
  const double* ptr_[kTensorCount];
};

class Grads {
 public:
  Grads(const ParamLayout& layout, double* base) {
    for (std::size_t i = 0; i < kTensorCount; ++i) ptr_[i] = base + layout.tensors()[i].offset;
  }
  double* operator[](std::size_t i) const { return ptr_[i]; }

 private:
  double* ptr_[kTensorCount];
};

void check_history(const DenoiserConfig& cfg, const HistorySequence& h) {
  if (h.embeddings.rows != cfg.history_len || h.embeddings.cols != cfg.item_dim ||
      h.mask.size() != cfg.history_len) {
    throw Error(ErrorCode::kDimensionMismatch, "history shape does not match the model");
  }
  if (h.empty()) {
    throw Error(ErrorCode::kInvalidInput, "history has no real interactions; use the unconditional token");
  }
}

void cond_forward(const DenoiserConfig& cfg, const Params& p, const HistorySequence& h, CondCache& cc) {
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim;
  cc.positions.clear();
  for (std::size_t i = 0; i < h.length(); ++i)
    if (h.mask[i]) cc.positions.push_back(i);
  const std::size_t n = cc.positions.size();
  cc.x.assign(n * dc, 0.0);
  cc.k.assign(n * dc, 0.0);
  cc.v.assign(n * dc, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t pos = cc.positions[a];
    double* x = cc.x.data() + a * dc;
    for (std::size_t j = 0; j < dc; ++j) x[j] = p[kInB][j] + p[kPos][pos * dc + j];
    vec_mat_acc(h.embeddings.row(pos).data(), d, p[kInW], dc, x);
    vec_mat_acc(x, dc, p[kWk], dc, cc.k.data() + a * dc);
    vec_mat_acc(x, dc, p[kWv], dc, cc.v.data() + a * dc);
  }
  const double* xr = cc.x.data() + (n - 1) * dc;
  cc.q.assign(dc, 0.0);
  vec_mat_acc(xr, dc, p[kWq], dc, cc.q.data());

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dc));
  cc.attn.assign(n, 0.0);
  double mx = -INFINITY;
  for (std::size_t a = 0; a < n; ++a) {
    double s = 0.0;
    for (std::size_t j = 0; j < dc; ++j) s += cc.q[j] * cc.k[a * dc + j];
    cc.attn[a] = s * inv_sqrt;
    mx = std::max(mx, cc.attn[a]);
  }
  double z = 0.0;
  for (double& s : cc.attn) {
    s = std::exp(s - mx);
    z += s;
  }
  for (double& s : cc.attn) s /= z;

  cc.o.assign(dc, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t j = 0; j < dc; ++j) cc.o[j] += cc.attn[a] * cc.v[a * dc + j];

  cc.c.assign(xr, xr + dc);
  for (std::size_t j = 0; j < dc; ++j) cc.c[j] += p[kBo][j];
  vec_mat_acc(cc.o.data(), dc, p[kWo], dc, cc.c.data());
}

// Accumulates weight-free gradients given dL/dc; optionally writes dL/d(history).
void cond_backward(const DenoiserConfig& cfg, const Params& p, const Grads& g, const HistorySequence& h,
                   const CondCache& cc, const double* dc_in, Matrix* history_grad) {
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim;
  const std::size_t n = cc.positions.size();
  std::vector<double> dx(n * dc, 0.0);
  double* dxr = dx.data() + (n - 1) * dc;

  for (std::size_t j = 0; j < dc; ++j) {
    dxr[j] += dc_in[j];
    g[kBo][j] += dc_in[j];
  }
  outer_acc(cc.o.data(), dc, dc_in, dc, g[kWo]);
  std::vector<double> d_o(dc, 0.0);
  mat_vec_t_acc(dc_in, dc, p[kWo], dc, d_o.data());

  std::vector<double> d_attn(n, 0.0);
  std::vector<double> dv(n * dc, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dc; ++j) {
      dv[a * dc + j] = cc.attn[a] * d_o[j];
      acc += d_o[j] * cc.v[a * dc + j];
    }
    d_attn[a] = acc;
  }
  double mean = 0.0;
  for (std::size_t a = 0; a < n; ++a) mean += cc.attn[a] * d_attn[a];
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dc));
  std::vector<double> dq(dc, 0.0);
  std::vector<double> dk(n * dc, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    const double ds = cc.attn[a] * (d_attn[a] - mean) * inv_sqrt;
    for (std::size_t j = 0; j < dc; ++j) {
      dq[j] += ds * cc.k[a * dc + j];
      dk[a * dc + j] = ds * cc.q[j];
    }
  }
  const double* xr = cc.x.data() + (n - 1) * dc;
  outer_acc(xr, dc, dq.data(), dc, g[kWq]);
  mat_vec_t_acc(dq.data(), dc, p[kWq], dc, dxr);
  for (std::size_t a = 0; a < n; ++a) {
    const double* x = cc.x.data() + a * dc;
    double* dxa = dx.data() + a * dc;
    outer_acc(x, dc, dk.data() + a * dc, dc, g[kWk]);
    outer_acc(x, dc, dv.data() + a * dc, dc, g[kWv]);
    mat_vec_t_acc(dk.data() + a * dc, dc, p[kWk], dc, dxa);
    mat_vec_t_acc(dv.data() + a * dc, dc, p[kWv], dc, dxa);
  }

  if (history_grad) *history_grad = Matrix(h.embeddings.rows, h.embeddings.cols);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t pos = cc.positions[a];
    const double* dxa = dx.data() + a * dc;
    outer_acc(h.embeddings.row(pos).data(), d, dxa, dc, g[kInW]);
    for (std::size_t j = 0; j < dc; ++j) {
      g[kInB][j] += dxa[j];
      g[kPos][pos * dc + j] += dxa[j];
    }
    if (history_grad) mat_vec_t_acc(dxa, dc, p[kInW], d, history_grad->row(pos).data());
  }
}

void net_forward(const DenoiserConfig& cfg, const Params& p, std::span<const double> e_t, int t,
                 std::span<const double> c, NetCache& nc) {
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim, hdim = cfg.hidden;
  nc.feat = time_features(t, cfg.time_freqs);
  nc.temb.assign(p[kTimeB], p[kTimeB] + dc);
  vec_mat_acc(nc.feat.data(), nc.feat.size(), p[kTimeW], dc, nc.temb.data());

  nc.z0.resize(d + 2 * dc);
  std::copy(e_t.begin(), e_t.end(), nc.z0.begin());
  std::copy(nc.temb.begin(), nc.temb.end(), nc.z0.begin() + static_cast<std::ptrdiff_t>(d));
  std::copy(c.begin(), c.end(), nc.z0.begin() + static_cast<std::ptrdiff_t>(d + dc));

  nc.a1.assign(p[kB1], p[kB1] + hdim);
  vec_mat_acc(nc.z0.data(), nc.z0.size(), p[kW1], hdim, nc.a1.data());
  nc.h1.resize(hdim);
  for (std::size_t i = 0; i < hdim; ++i) nc.h1[i] = nc.a1[i] * sigmoid(nc.a1[i]);

  nc.a2.assign(p[kB2], p[kB2] + hdim);
  vec_mat_acc(nc.h1.data(), hdim, p[kW2], hdim, nc.a2.data());
  nc.h2.resize(hdim);
  for (std::size_t i = 0; i < hdim; ++i) nc.h2[i] = nc.a2[i] * sigmoid(nc.a2[i]);

  nc.out.assign(p[kB3], p[kB3] + d);
  vec_mat_acc(nc.h2.data(), hdim, p[kW3], d, nc.out.data());
}

// Given dL/d(out), accumulates parameter gradients and returns dL/dz0.
std::vector<double> net_backward(const DenoiserConfig& cfg, const Params& p, const Grads& g, const NetCache& nc,
                                 const std::vector<double>& dout) {
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim, hdim = cfg.hidden;
  for (std::size_t j = 0; j < d; ++j) g[kB3][j] += dout[j];
  outer_acc(nc.h2.data(), hdim, dout.data(), d, g[kW3]);
  std::vector<double> da2(hdim, 0.0);
  mat_vec_t_acc(dout.data(), d, p[kW3], hdim, da2.data());
  for (std::size_t i = 0; i < hdim; ++i) {
    const double s = sigmoid(nc.a2[i]);
    da2[i] *= s * (1.0 + nc.a2[i] * (1.0 - s));
  }
  for (std::size_t j = 0; j < hdim; ++j) g[kB2][j] += da2[j];
  outer_acc(nc.h1.data(), hdim, da2.data(), hdim, g[kW2]);
  std::vector<double> da1(hdim, 0.0);
  mat_vec_t_acc(da2.data(), hdim, p[kW2], hdim, da1.data());
  for (std::size_t i = 0; i < hdim; ++i) {
    const double s = sigmoid(nc.a1[i]);
    da1[i] *= s * (1.0 + nc.a1[i] * (1.0 - s));
  }
  for (std::size_t j = 0; j < hdim; ++j) g[kB1][j] += da1[j];
  outer_acc(nc.z0.data(), nc.z0.size(), da1.data(), hdim, g[kW1]);
  std::vector<double> dz0(d + 2 * dc, 0.0);
  mat_vec_t_acc(da1.data(), hdim, p[kW1], nc.z0.size(), dz0.data());

  const double* dtemb = dz0.data() + d;
  for (std::size_t j = 0; j < dc; ++j) g[kTimeB][j] += dtemb[j];
  outer_acc(nc.feat.data(), nc.feat.size(), dtemb, dc, g[kTimeW]);
  return dz0;
}

}  // namespace

bool HistorySequence::empty() const {
  return std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

std::size_t HistorySequence::last_position() const {
  for (std::size_t i = mask.size(); i-- > 0;)
    if (mask[i]) return i;
  throw Error(ErrorCode::kInvalidInput, "history has no real interactions");
}

HistorySequence HistorySequence::single(std::span<const double> e, std::size_t length) {
  HistorySequence h;
  h.embeddings = Matrix(length, e.size());
  h.mask.assign(length, 0);
  std::copy(e.begin(), e.end(), h.embeddings.row(length - 1).begin());
  h.mask[length - 1] = 1;
  return h;
}

DenoiserConfig DenoiserConfig::for_item_dim(std::size_t d) {
  DenoiserConfig cfg;
  cfg.item_dim = d;
  cfg.cond_dim = d;
  cfg.hidden = 4 * d;
  return cfg;
}

ParamLayout::ParamLayout(const DenoiserConfig& cfg) {
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim, hdim = cfg.hidden;
  auto add = [&](std::string name, std::size_t r, std::size_t c) {
    tensors_.push_back({std::move(name), r, c, total_});
    total_ += r * c;
  };
  add("cond.in_w", d, dc);
  add("cond.in_b", 1, dc);
  add("cond.pos", cfg.history_len, dc);
  add("cond.wq", dc, dc);
  add("cond.wk", dc, dc);
  add("cond.wv", dc, dc);
  add("cond.wo", dc, dc);
  add("cond.bo", 1, dc);
  add("phi", 1, dc);
  add("time.w", 2 * cfg.time_freqs, dc);
  add("time.b", 1, dc);
  add("net.w1", d + 2 * dc, hdim);
  add("net.b1", 1, hdim);
  add("net.w2", hdim, hdim);
  add("net.b2", 1, hdim);
  add("net.w3", hdim, d);
  add("net.b3", 1, d);
}

const TensorSpec& ParamLayout::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw Error(ErrorCode::kInvalidInput, "no parameter tensor named " + name);
}

DenoiserModel::DenoiserModel(const DenoiserConfig& cfg) : cfg_(cfg), layout_(cfg), params_(layout_.total(), 0.0) {
  if (cfg.item_dim < 1 || cfg.cond_dim < 1 || cfg.hidden < 1 || cfg.history_len < 1 || cfg.time_freqs < 1) {
    throw Error(ErrorCode::kInvalidInput, "denoiser dimensions must be positive");
  }
}

DenoiserModel DenoiserModel::initialized(const DenoiserConfig& cfg, std::mt19937_64& rng) {
  DenoiserModel m(cfg);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  for (const auto& t : m.layout_.tensors()) {
    const bool is_bias = t.name == "phi" || t.name.ends_with("_b") || t.name.ends_with(".bo") ||
                         t.name.starts_with("net.b") || t.name == "time.b";
    if (is_bias) continue;
    for (std::size_t i = 0; i < t.size(); ++i) m.params_[t.offset + i] = normal(rng);
  }
  return m;
}

std::span<double> DenoiserModel::tensor(const std::string& name) {
  const auto& t = layout_.find(name);
  return {params_.data() + t.offset, t.size()};
}

std::span<const double> DenoiserModel::tensor(const std::string& name) const {
  const auto& t = layout_.find(name);
  return {params_.data() + t.offset, t.size()};
}

std::vector<double> DenoiserModel::cond_encode(const HistorySequence& h) const {
  check_history(cfg_, h);
  CondCache cc;
  cond_forward(cfg_, Params(layout_, params_.data()), h, cc);
  return cc.c;
}

std::vector<double> DenoiserModel::unconditional() const {
  auto phi = tensor("phi");
  return {phi.begin(), phi.end()};
}

std::vector<double> DenoiserModel::predict(std::span<const double> e_t, int t, std::span<const double> c) const {
  if (e_t.size() != cfg_.item_dim || c.size() != cfg_.cond_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "predict input sizes do not match the model");
  }
  if (t < 0) throw Error(ErrorCode::kOutOfRange, "predict needs t >= 0");
  NetCache nc;
  net_forward(cfg_, Params(layout_, params_.data()), e_t, t, c, nc);
  return nc.out;
}

std::vector<double> time_features(int t, std::size_t freqs) {
  std::vector<double> f(2 * freqs);
  for (std::size_t k = 0; k < freqs; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(freqs));
    f[k] = std::sin(t * w);
    f[freqs + k] = std::cos(t * w);
  }
  return f;
}

double backprop_example(const DenoiserModel& model, const TrainExample& ex, double weight, std::span<double> grads,
                        Matrix* history_grad) {
  const DenoiserConfig& cfg = model.config();
  if (ex.noisy.size() != cfg.item_dim || ex.target.size() != cfg.item_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "training example size does not match the model");
  }
  if (grads.size() != model.layout().total()) {
    throw Error(ErrorCode::kDimensionMismatch, "gradient buffer does not match the model");
  }
  const Params p(model.layout(), model.params().data());
  const Grads g(model.layout(), grads.data());

  CondCache cc;
  std::vector<double> c;
  if (ex.history) {
    check_history(cfg, *ex.history);
    cond_forward(cfg, p, *ex.history, cc);
    c = cc.c;
  } else {
    c = model.unconditional();
  }
  NetCache nc;
  net_forward(cfg, p, ex.noisy, ex.t, c, nc);

  double err = 0.0;
  std::vector<double> dout(cfg.item_dim);
  for (std::size_t j = 0; j < cfg.item_dim; ++j) {
    const double diff = nc.out[j] - ex.target[j];
    err += diff * diff;
    dout[j] = 2.0 * weight * diff;
  }
  const std::vector<double> dz0 = net_backward(cfg, p, g, nc, dout);
  const double* dcond = dz0.data() + cfg.item_dim + cfg.cond_dim;
  if (ex.history) {
    cond_backward(cfg, p, g, *ex.history, cc, dcond, history_grad);
  } else {
    for (std::size_t j = 0; j < cfg.cond_dim; ++j) g[kPhi][j] += dcond[j];
  }
  return err;
}

LossAndGrad loss_and_grad(const DenoiserModel& model, std::span<const TrainExample> batch) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidInput, "empty batch");
  const std::size_t n = model.layout().total();
  const std::size_t chunks = (batch.size() + kChunk - 1) / kChunk;
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<std::vector<double>> buffers(chunks, std::vector<double>(n, 0.0));
  std::vector<double> errors(batch.size(), 0.0);

#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < static_cast<std::int64_t>(chunks); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    const std::size_t end = std::min(batch.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      errors[i] = backprop_example(model, batch[i], weight, buffers[c]);
    }
  }

  LossAndGrad out;
  out.grads.values.assign(n, 0.0);
  kernels::omp::sum_buffers(buffers, out.grads.values);
  double total = 0.0;
  for (double e : errors) total += e;
  out.loss = total * weight;
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::kDivergedTraining, "loss is not finite");
  return out;
}

void optimizer_step(OptimizerState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size() || state.m.size() != params.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "optimizer state, parameters and gradients differ in size");
  }
  ++state.step;
  const auto& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - hp.lr * hp.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] * decay - hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

}  // namespace idr
