#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <random>

#include "idreamrec/denoiser.hpp"
#include "idreamrec/error.hpp"

using namespace idr;

namespace {

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.item_dim = 3;
  c.cond_dim = 4;
  c.hidden = 6;
  c.history_len = 4;
  c.time_freqs = 4;
  c.init_std = 0.5;
  return c;
}

HistorySequence random_history(const DenoiserConfig& c, std::mt19937_64& rng, std::size_t real) {
  std::normal_distribution<double> normal;
  HistorySequence h;
  h.embeddings = Matrix(c.history_len, c.item_dim);
  h.mask.assign(c.history_len, 0);
  for (std::size_t i = c.history_len - real; i < c.history_len; ++i) {
    h.mask[i] = 1;
    for (double& v : h.embeddings.row(i)) v = normal(rng);
  }
  return h;
}

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

std::vector<TrainExample> random_batch(const DenoiserConfig& c, std::mt19937_64& rng, std::size_t n) {
  std::vector<TrainExample> batch;
  for (std::size_t i = 0; i < n; ++i) {
    TrainExample ex;
    ex.noisy = randn(c.item_dim, rng);
    ex.target = randn(c.item_dim, rng);
    ex.t = static_cast<int>(1 + i * 37 % 100);
    if (i % 3 != 2) ex.history = random_history(c, rng, 1 + i % c.history_len);
    batch.push_back(std::move(ex));
  }
  return batch;
}

double batch_loss(const DenoiserModel& m, const std::vector<TrainExample>& batch) {
  double total = 0.0;
  for (const auto& ex : batch) {
    const auto c = ex.history ? m.cond_encode(*ex.history) : m.unconditional();
    const auto out = m.predict(ex.noisy, ex.t, c);
    for (std::size_t j = 0; j < out.size(); ++j) total += (out[j] - ex.target[j]) * (out[j] - ex.target[j]);
  }
  return total / static_cast<double>(batch.size());
}

double silu(double a) { return a / (1.0 + std::exp(-a)); }

// Straight-line forward pass from the architecture description, sharing no code with the model.
std::vector<double> oracle_predict(const DenoiserModel& m, const std::vector<double>& e, int t,
                                   const std::vector<double>& c) {
  const auto& cfg = m.config();
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim, H = cfg.hidden, F = cfg.time_freqs;
  auto W = [&](const char* name) { return m.tensor(name); };
  std::vector<double> feat(2 * F);
  for (std::size_t k = 0; k < F; ++k) {
    const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(F));
    feat[k] = std::sin(t * w);
    feat[F + k] = std::cos(t * w);
  }
  std::vector<double> temb(dc);
  for (std::size_t j = 0; j < dc; ++j) {
    temb[j] = W("time.b")[j];
    for (std::size_t i = 0; i < 2 * F; ++i) temb[j] += feat[i] * W("time.w")[i * dc + j];
  }
  std::vector<double> z;
  z.insert(z.end(), e.begin(), e.end());
  z.insert(z.end(), temb.begin(), temb.end());
  z.insert(z.end(), c.begin(), c.end());
  auto dense = [&](const std::vector<double>& x, const char* w, const char* b, std::size_t out) {
    std::vector<double> y(out);
    for (std::size_t j = 0; j < out; ++j) {
      y[j] = W(b)[j];
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * W(w)[i * out + j];
    }
    return y;
  };
  auto h1 = dense(z, "net.w1", "net.b1", H);
  for (double& v : h1) v = silu(v);
  auto h2 = dense(h1, "net.w2", "net.b2", H);
  for (double& v : h2) v = silu(v);
  return dense(h2, "net.w3", "net.b3", d);
}

std::vector<double> oracle_condition(const DenoiserModel& m, const HistorySequence& h) {
  const auto& cfg = m.config();
  const std::size_t d = cfg.item_dim, dc = cfg.cond_dim;
  auto W = [&](const char* name) { return m.tensor(name); };
  auto matvec = [&](const std::vector<double>& x, const char* w) {
    std::vector<double> y(dc, 0.0);
    for (std::size_t j = 0; j < dc; ++j)
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * W(w)[i * dc + j];
    return y;
  };
  std::vector<std::vector<double>> xs;
  for (std::size_t p = 0; p < h.length(); ++p) {
    if (!h.mask[p]) continue;
    std::vector<double> x(dc);
    for (std::size_t j = 0; j < dc; ++j) {
      x[j] = W("cond.in_b")[j] + W("cond.pos")[p * dc + j];
      for (std::size_t i = 0; i < d; ++i) x[j] += h.embeddings(p, i) * W("cond.in_w")[i * dc + j];
    }
    xs.push_back(x);
  }
  const auto q = matvec(xs.back(), "cond.wq");
  std::vector<double> score;
  double zmax = -1e300;
  for (const auto& x : xs) {
    const auto k = matvec(x, "cond.wk");
    double s = 0;
    for (std::size_t j = 0; j < dc; ++j) s += q[j] * k[j];
    score.push_back(s / std::sqrt(static_cast<double>(dc)));
    zmax = std::max(zmax, score.back());
  }
  double zsum = 0;
  for (double& s : score) zsum += (s = std::exp(s - zmax));
  std::vector<double> o(dc, 0.0);
  for (std::size_t a = 0; a < xs.size(); ++a) {
    const auto v = matvec(xs[a], "cond.wv");
    for (std::size_t j = 0; j < dc; ++j) o[j] += score[a] / zsum * v[j];
  }
  auto c = matvec(o, "cond.wo");
  for (std::size_t j = 0; j < dc; ++j) c[j] += xs.back()[j] + W("cond.bo")[j];
  return c;
}

}  // namespace

TEST_CASE("layout declares tensors in order") {
  const ParamLayout layout(small_config());
  const std::vector<std::string> names{"cond.in_w", "cond.in_b", "cond.pos", "cond.wq", "cond.wk",  "cond.wv",
                                       "cond.wo",   "cond.bo",   "phi",      "time.w",  "time.b",   "net.w1",
                                       "net.b1",    "net.w2",    "net.b2",   "net.w3",  "net.b3"};
  REQUIRE(layout.tensors().size() == names.size());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(layout.tensors()[i].name == names[i]);
    CHECK(layout.tensors()[i].offset == offset);
    offset += layout.tensors()[i].size();
  }
  CHECK(layout.total() == offset);
  CHECK(layout.find("net.w1").rows == 3 + 2 * 4);
}

TEST_CASE("initialization leaves biases and the unconditional token at zero") {
  std::mt19937_64 rng(1);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  for (const char* name : {"cond.in_b", "cond.bo", "phi", "time.b", "net.b1", "net.b2", "net.b3"}) {
    for (double v : m.tensor(name)) CHECK(v == 0.0);
  }
  double nonzero = 0;
  for (double v : m.tensor("net.w1")) nonzero += v != 0.0;
  CHECK(nonzero == m.tensor("net.w1").size());
}

TEST_CASE("forward pass matches a straight-line oracle") {
  std::mt19937_64 rng(2);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  const HistorySequence h = random_history(m.config(), rng, 3);
  const auto c = m.cond_encode(h);
  const auto c_ref = oracle_condition(m, h);
  for (std::size_t j = 0; j < c.size(); ++j) CHECK(c[j] == doctest::Approx(c_ref[j]).epsilon(1e-12));
  const auto e = randn(3, rng);
  const auto out = m.predict(e, 57, c);
  const auto ref = oracle_predict(m, e, 57, c);
  for (std::size_t j = 0; j < out.size(); ++j) CHECK(out[j] == doctest::Approx(ref[j]).epsilon(1e-12));
}

TEST_CASE("hand-set two-dimensional network") {
  DenoiserConfig cfg;
  cfg.item_dim = 2;
  cfg.cond_dim = 1;
  cfg.hidden = 1;
  cfg.time_freqs = 1;
  cfg.history_len = 1;
  DenoiserModel m(cfg);
  // z = [e0, e1, temb, c]; temb = time.b = 0.5 since time.w = 0.
  m.tensor("time.b")[0] = 0.5;
  auto w1 = m.tensor("net.w1");
  w1[0] = 1.0;   // e0
  w1[1] = -1.0;  // e1
  w1[2] = 2.0;   // temb
  w1[3] = 0.5;   // c
  m.tensor("net.w2")[0] = 1.0;
  m.tensor("net.w3")[0] = 2.0;
  m.tensor("net.w3")[1] = -3.0;
  m.tensor("net.b3")[1] = 0.25;
  const std::vector<double> e{1.0, 0.5}, c{2.0};
  // a1 = 1 - 0.5 + 1 + 1 = 2.5; h1 = silu(2.5); h2 = silu(h1); out = (2 h2, -3 h2 + 0.25).
  const double h2 = silu(silu(2.5));
  const auto out = m.predict(e, 3, c);
  CHECK(out[0] == doctest::Approx(2.0 * h2).epsilon(1e-14));
  CHECK(out[1] == doctest::Approx(-3.0 * h2 + 0.25).epsilon(1e-14));
}

TEST_CASE("zero output layer yields the output bias") {
  std::mt19937_64 rng(3);
  DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  for (double& v : m.tensor("net.w3")) v = 0.0;
  const auto out = m.predict(randn(3, rng), 10, m.unconditional());
  for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("prediction and encoding are deterministic") {
  std::mt19937_64 rng(4);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  const HistorySequence h = random_history(m.config(), rng, 4);
  CHECK(m.cond_encode(h) == m.cond_encode(h));
  const auto e = randn(3, rng);
  CHECK(m.predict(e, 5, m.cond_encode(h)) == m.predict(e, 5, m.cond_encode(h)));
}

TEST_CASE("masked positions do not influence the condition") {
  std::mt19937_64 rng(5);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  HistorySequence h = random_history(m.config(), rng, 2);
  const auto before = m.cond_encode(h);
  for (double& v : h.embeddings.row(0)) v = 123.0;
  for (double& v : h.embeddings.row(1)) v = -7.5;
  CHECK(m.cond_encode(h) == before);
}

TEST_CASE("swapping two real positions changes the condition") {
  std::mt19937_64 rng(6);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  HistorySequence h = random_history(m.config(), rng, 4);
  const auto before = m.cond_encode(h);
  for (std::size_t j = 0; j < 3; ++j) std::swap(h.embeddings(1, j), h.embeddings(2, j));
  CHECK(m.cond_encode(h) != before);
}

TEST_CASE("readout sits at the last real position") {
  std::mt19937_64 rng(7);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  const auto e = randn(3, rng);
  const HistorySequence h = HistorySequence::single(e, 4);
  CHECK(h.last_position() == 3);
  const auto c = m.cond_encode(h);
  // One real position: attention weight 1, so c = x + x Wv Wo + bo.
  const auto ref = oracle_condition(m, h);
  for (std::size_t j = 0; j < c.size(); ++j) CHECK(c[j] == doctest::Approx(ref[j]).epsilon(1e-12));
}

TEST_CASE("all-padding histories are rejected") {
  std::mt19937_64 rng(8);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  HistorySequence h = random_history(m.config(), rng, 0);
  CHECK(h.empty());
  CHECK_THROWS_AS(m.cond_encode(h), Error);
  HistorySequence wrong = random_history(m.config(), rng, 1);
  wrong.mask.push_back(1);
  CHECK_THROWS_AS(m.cond_encode(wrong), Error);
  CHECK_THROWS_AS(m.predict(std::vector<double>(2), 1, m.unconditional()), Error);
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(9);
  DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  for (double& v : m.params()) v += 0.1 * std::normal_distribution<double>()(rng);  // nonzero biases too
  REQUIRE(m.params().size() <= 5000);
  const auto batch = random_batch(m.config(), rng, 12);
  const LossAndGrad lg = loss_and_grad(m, batch);
  CHECK(lg.loss == doctest::Approx(batch_loss(m, batch)).epsilon(1e-12));

  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const double keep = m.params()[i];
    m.params()[i] = keep + h;
    const double up = batch_loss(m, batch);
    m.params()[i] = keep - h;
    const double down = batch_loss(m, batch);
    m.params()[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double an = lg.grads.values[i];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("history gradient matches central differences") {
  std::mt19937_64 rng(10);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  TrainExample ex;
  ex.noisy = randn(3, rng);
  ex.target = randn(3, rng);
  ex.t = 42;
  ex.history = random_history(m.config(), rng, 3);
  std::vector<double> grads(m.params().size(), 0.0);
  Matrix hg;
  backprop_example(m, ex, 1.0, grads, &hg);
  auto loss = [&](const TrainExample& e) {
    return batch_loss(m, std::vector<TrainExample>{e});
  };
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t j = 0; j < 3; ++j) {
      TrainExample up = ex, down = ex;
      up.history->embeddings(p, j) += 1e-5;
      down.history->embeddings(p, j) -= 1e-5;
      const double fd = (loss(up) - loss(down)) / 2e-5;
      if (!ex.history->mask[p]) {
        CHECK(hg(p, j) == 0.0);
        CHECK(fd == 0.0);
      } else {
        CHECK(std::abs(fd - hg(p, j)) / std::max({std::abs(fd), std::abs(hg(p, j)), 1e-6}) < 1e-4);
      }
    }
  }
}

TEST_CASE("a perfect fit has zero loss and zero output-path gradients") {
  std::mt19937_64 rng(11);
  DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  for (double& v : m.tensor("net.w3")) v = 0.0;
  const std::vector<double> e0{0.5, -1.0, 2.0};
  std::copy(e0.begin(), e0.end(), m.tensor("net.b3").begin());
  TrainExample ex{randn(3, rng), 7, random_history(m.config(), rng, 2), e0};
  const LossAndGrad lg = loss_and_grad(m, std::vector<TrainExample>{ex});
  CHECK(lg.loss == 0.0);
  for (const char* name : {"net.b3", "net.w3"}) {
    const auto& spec = m.layout().find(name);
    for (std::size_t i = 0; i < spec.size(); ++i) CHECK(lg.grads.values[spec.offset + i] == 0.0);
  }
}

TEST_CASE("scalar toy loss by hand") {
  DenoiserConfig cfg;
  cfg.item_dim = 1;
  cfg.cond_dim = 1;
  cfg.hidden = 1;
  cfg.time_freqs = 1;
  cfg.history_len = 1;
  DenoiserModel m(cfg);
  m.tensor("net.b3")[0] = 0.75;
  m.tensor("net.w3")[0] = 2.0;
  m.tensor("net.b2")[0] = 1.0;
  // h1 = silu(0) = 0; h2 = silu(1); pred = 2 silu(1) + 0.75.
  const double pred = 2.0 * silu(1.0) + 0.75;
  TrainExample ex{{0.3}, 1, std::nullopt, {0.2}};
  CHECK(loss_and_grad(m, std::vector<TrainExample>{ex}).loss ==
        doctest::Approx((pred - 0.2) * (pred - 0.2)).epsilon(1e-14));
}

TEST_CASE("non-finite loss is a divergence") {
  std::mt19937_64 rng(12);
  DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  m.tensor("net.b3")[0] = std::numeric_limits<double>::infinity();
  TrainExample ex{randn(3, rng), 3, std::nullopt, randn(3, rng)};
  try {
    loss_and_grad(m, std::vector<TrainExample>{ex});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDivergedTraining);
  }
  CHECK_THROWS_AS(loss_and_grad(m, std::vector<TrainExample>{}), Error);
}

TEST_CASE("unconditional examples only touch phi among condition parameters") {
  std::mt19937_64 rng(13);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  std::vector<TrainExample> batch;
  for (int i = 0; i < 5; ++i) batch.push_back({randn(3, rng), 10 + i, std::nullopt, randn(3, rng)});
  const LossAndGrad lg = loss_and_grad(m, batch);
  for (const auto& t : m.layout().tensors()) {
    if (!t.name.starts_with("cond.")) continue;
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(lg.grads.values[t.offset + i] == 0.0);
  }
  double phi = 0;
  for (std::size_t i = 0; i < 4; ++i) phi += std::abs(lg.grads.values[m.layout().find("phi").offset + i]);
  CHECK(phi > 0.0);
}

TEST_CASE("gradient reduction does not depend on the thread count") {
  std::mt19937_64 rng(14);
  const DenoiserModel m = DenoiserModel::initialized(small_config(), rng);
  const auto batch = random_batch(m.config(), rng, 37);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const LossAndGrad one = loss_and_grad(m, batch);
  omp_set_num_threads(4);
  const LossAndGrad four = loss_and_grad(m, batch);
  omp_set_num_threads(saved);
  CHECK(one.loss == four.loss);
  CHECK(one.grads.values == four.grads.values);
}

TEST_CASE("AdamW with zero gradients") {
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g(3, 0.0);
  OptimizerState plain(3, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  optimizer_step(plain, p, g);
  CHECK(p == std::vector<double>{1.0, -2.0, 0.5});
  CHECK(plain.step == 1);

  OptimizerState decay(3, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.01});
  optimizer_step(decay, p, g);
  CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-1.998).epsilon(1e-15));
  CHECK(p[2] == doctest::Approx(0.4995).epsilon(1e-15));
}

TEST_CASE("AdamW three-step scalar trace") {
  std::vector<double> p{0.0};
  const std::vector<double> g{1.0};
  OptimizerState s(1, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  // Constant unit gradient: m_k = 1 - 0.9^k and v_k = 1 - 0.999^k, so both bias-corrected
  // moments are exactly 1 and each step moves by lr / (1 + eps).
  double expect = 0.0;
  for (int k = 1; k <= 3; ++k) {
    optimizer_step(s, p, g);
    const double m = (1 - std::pow(0.9, k)) / (1 - std::pow(0.9, k));
    const double v = (1 - std::pow(0.999, k)) / (1 - std::pow(0.999, k));
    expect -= 0.1 * m / (std::sqrt(v) + 1e-8);
    CHECK(p[0] == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(p[0] == doctest::Approx(-0.3 / (1 + 1e-8)).epsilon(1e-14));
  CHECK(s.m[0] == doctest::Approx(1 - 0.729).epsilon(1e-14));
  CHECK(s.v[0] == doctest::Approx(1 - std::pow(0.999, 3)).epsilon(1e-12));
}

TEST_CASE("optimizer rejects mismatched shapes") {
  std::vector<double> p{1.0, 2.0};
  OptimizerState s(3);
  CHECK_THROWS_AS(optimizer_step(s, p, std::vector<double>{0.0, 0.0}), Error);
}

TEST_CASE("time features") {
  const auto f = time_features(0, 3);
  CHECK(f == std::vector<double>{0, 0, 0, 1, 1, 1});
  const auto g = time_features(100, 2);
  CHECK(g[0] == doctest::Approx(std::sin(100.0)));
  CHECK(g[1] == doctest::Approx(std::sin(100.0 / 100.0)));
  CHECK(g[3] == doctest::Approx(std::cos(1.0)));
}
