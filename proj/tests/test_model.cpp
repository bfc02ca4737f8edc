#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fd_suite.hpp"
#include "ornet/errors.hpp"
#include "ornet/model.hpp"

using namespace ornet;
using ad::Tensor;
using model::Mode;
using model::ModelConfig;
using model::OrNet;
using model::Subset;

namespace {

ModelConfig tiny(std::size_t x_dim = 1) {
  ModelConfig c;
  c.x_dim = x_dim;
  c.y_dim = 1;
  c.d_node = 5;
  c.d_geo = 3;
  c.d_msg = 4;
  c.d_att = 3;
  c.d_z = 3;
  c.d_dec = 5;
  c.n_layers = 2;
  c.gamma = 0.6;
  return c;
}

data::PointSet random_set(std::mt19937_64& rng, std::size_t n, std::size_t n_ctx,
                          std::size_t x_dim = 1, double spread = 2.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  data::PointSet ps;
  ps.points.x_dim = x_dim;
  ps.points.y_dim = 1;
  ps.points.xs.resize(n * x_dim);
  ps.points.ys.resize(n);
  for (auto& v : ps.points.xs) v = u(rng);
  for (auto& v : ps.points.ys) v = u(rng);
  ps.target = ad::iota_index(n);
  std::shuffle(ps.target.begin(), ps.target.end(), rng);
  ps.context.assign(ps.target.begin(), ps.target.begin() + static_cast<std::ptrdiff_t>(n_ctx));
  return ps;
}

std::vector<data::PointSet> random_batch(std::mt19937_64& rng, std::size_t b, std::size_t x_dim = 1) {
  std::vector<data::PointSet> sets;
  std::uniform_int_distribution<std::size_t> size(3, 12);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t n = size(rng);
    sets.push_back(random_set(rng, n, 1 + rng() % n, x_dim));
  }
  return sets;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

TEST_CASE("output shapes follow the target count") {
  std::mt19937_64 rng(1);
  const OrNet net(tiny(2), 0);
  const auto sets = random_batch(rng, 3, 2);
  std::size_t n_t = 0;
  for (const auto& s : sets) n_t += s.target.size();
  const Tensor r = net.encode_deterministic(sets);
  CHECK(r.rows() == n_t);
  CHECK(r.cols() == 5);
  const auto lat = net.encode_latent(sets, Subset::context);
  CHECK(lat.mu.rows() == 3);
  CHECK(lat.mu.cols() == 3);
  const auto [mu, sigma] = net.decode(Tensor::zeros(4, 2), Tensor::zeros(4, 5), Tensor::zeros(4, 3));
  CHECK(mu.rows() == 4);
  CHECK(mu.cols() == 1);
  CHECK(sigma.cols() == 1);
}

TEST_CASE("empty context is an input error") {
  std::mt19937_64 rng(2);
  const OrNet net(tiny(), 0);
  auto sets = random_batch(rng, 2);
  sets[1].context.clear();
  CHECK_THROWS_AS((void)net.encode_deterministic(sets), InputError);
  CHECK_THROWS_AS((void)net.encode_latent(sets, Subset::context), InputError);
  CHECK_THROWS_AS((void)net.encode_deterministic(std::vector<data::PointSet>{}), InputError);
}

TEST_CASE("predictions do not depend on context order") {
  std::mt19937_64 rng(3);
  for (const bool graph : {true, false}) {
    auto cfg = tiny(2);
    cfg.use_graph = graph;
    cfg.gamma = 0.8;
    const OrNet net(cfg, 7);
    auto sets = random_batch(rng, 4, 2);
    const auto base = net.predict(sets, 1);
    for (auto& s : sets) std::shuffle(s.context.begin(), s.context.end(), rng);
    const auto perm = net.predict(sets, 1);
    CHECK(max_abs_diff(base.mean, perm.mean) < 1e-6);
    CHECK(max_abs_diff(base.std, perm.std) < 1e-6);
  }
}

TEST_CASE("latent encoding examples") {
  std::mt19937_64 rng(4);
  const OrNet net(tiny(), 1);
  auto sets = random_batch(rng, 5);
  const auto a = net.encode_latent(sets, Subset::target);
  for (auto& s : sets) std::shuffle(s.target.begin(), s.target.end(), rng);
  const auto b = net.encode_latent(sets, Subset::target);
  CHECK(max_abs_diff(a.mu, b.mu) < 1e-12);
  CHECK(max_abs_diff(a.sigma, b.sigma) < 1e-12);
  for (double s : a.sigma.data()) {
    CHECK(s > 0.01);
    CHECK(s < 1.0);
  }

  // C = T: both latent encodings coincide, KL vanishes
  for (auto& s : sets) s.context = s.target;
  data::Rng r(0);
  const auto terms = net.elbo_loss(sets, r, Mode::eval);
  CHECK(terms.kl.item() == 0.0);
}

TEST_CASE("ib loss examples") {
  model::LatentDist std_normal{Tensor::zeros(2, 8), Tensor::filled(2, 8, 1.0)};
  CHECK(model::ib_loss(std_normal, 0.05).item() == 0.0);
  model::LatentDist shifted{Tensor::filled(2, 8, 1.0), Tensor::filled(2, 8, 1.0)};
  CHECK(model::ib_loss(shifted, 0.0).item() == 0.0);
  CHECK(model::ib_loss(shifted, 0.05).item() == doctest::Approx(0.2).epsilon(1e-14));
  CHECK_THROWS_AS((void)model::ib_loss(shifted, -1.0), ConfigError);
}

TEST_CASE("total loss equals elbo plus ib") {
  std::mt19937_64 rng(5);
  const auto sets = random_batch(rng, 3);
  for (const double beta : {0.0, 0.05}) {
    auto cfg = tiny();
    cfg.beta = beta;
    const OrNet net(cfg, 2);
    data::Rng r1(9);
    data::Rng r2(9);
    const auto elbo = net.elbo_loss(sets, r1, Mode::train);
    const auto total = net.total_loss(sets, r2, Mode::train);
    CHECK(elbo.nll.item() == total.nll.item());
    CHECK(elbo.kl.item() == total.kl.item());
    CHECK(elbo.ib.item() == 0.0);
    CHECK(elbo.loss.item() == elbo.nll.item() + elbo.kl.item());
    if (beta == 0.0) {
      CHECK(total.loss.item() == elbo.loss.item());
    } else {
      CHECK(total.ib.item() > 0.0);
      CHECK(total.loss.item() == doctest::Approx(elbo.loss.item() + total.ib.item()).epsilon(1e-14));
    }
  }
  auto cfg = tiny();
  cfg.use_ib = false;
  const OrNet net(cfg, 2);
  data::Rng r(1);
  CHECK(net.total_loss(sets, r, Mode::train).ib.item() == 0.0);
}

TEST_CASE("deterministic prediction ignores the sample count") {
  std::mt19937_64 rng(6);
  const OrNet net(tiny(2), 3);
  const auto sets = random_batch(rng, 2, 2);
  const auto one = net.predict(sets, 1);
  const auto ten = net.predict(sets, 10);
  CHECK(std::equal(one.mean.data().begin(), one.mean.data().end(), ten.mean.data().begin()));
  CHECK(std::equal(one.std.data().begin(), one.std.data().end(), ten.std.data().begin()));

  data::Rng r(4);
  const auto sampled = net.predict(sets, 16, &r);
  CHECK(sampled.z_samples.size() == 16);
  CHECK(sampled.mean.rows() == one.mean.rows());
  for (double s : sampled.std.data()) CHECK(s >= 0.01);
  CHECK_THROWS_AS((void)net.predict(sets, 0, &r), UsageError);
}

TEST_CASE("eval mode decodes the prior mean") {
  std::mt19937_64 rng(7);
  const OrNet net(tiny(), 3);
  const auto sets = random_batch(rng, 2);
  data::Rng r(0);
  const auto terms = net.total_loss(sets, r, Mode::eval);
  const auto prior = net.encode_latent(sets, Subset::context);
  CHECK(max_abs_diff(terms.z, prior.mu) == 0.0);
  const auto pred = net.predict(sets, 1);
  CHECK(max_abs_diff(terms.mu_y, pred.mean) == 0.0);
  CHECK(terms.kl.item() >= 0.0);
  CHECK(std::isfinite(terms.nll.item()));
}

TEST_CASE("ablation switches shrink the parameter set") {
  auto count = [](ModelConfig c) { return OrNet(c, 0).params().scalar_count(); };
  ModelConfig full = tiny(2);
  const std::size_t n_full = count(full);

  ModelConfig no_graph = full;
  no_graph.use_graph = false;
  CHECK(count(no_graph) < n_full);
  ModelConfig no_att = full;
  no_att.use_attention = false;
  CHECK(count(no_att) < n_full);
  ModelConfig no_pos = full;
  no_pos.use_pos_embed = false;
  CHECK(count(no_pos) < n_full);
  ModelConfig no_ib = full;
  no_ib.use_ib = false;
  CHECK(count(no_ib) == n_full);

  const OrNet plain(no_graph, 0);
  for (const auto& [name, t] : plain.params().entries()) {
    CHECK(name.rfind("tgt_embed", 0) != 0);
    CHECK(name.rfind("inner", 0) != 0);
    CHECK(name.rfind("cross", 0) != 0);
    CHECK(name != "unknown_token");
  }
}

TEST_CASE("one latent head serves context and target encodings") {
  OrNet net(tiny(), 0);
  std::size_t heads = 0;
  for (const auto& [name, t] : net.params().entries()) {
    if (name.find("latent_head") != std::string::npos) ++heads;
  }
  CHECK(heads == 4);  // two affine layers, weight and bias each

  // every parameter of the head receives gradient from both encodings
  std::mt19937_64 rng(8);
  const auto sets = random_batch(rng, 2);
  for (const Subset s : {Subset::context, Subset::target}) {
    net.params().zero_grad();
    ad::Tape tape;
    const auto lat = net.encode_latent(sets, s);
    tape.backward(ad::add(ad::sum(lat.mu), ad::sum(lat.sigma)));
    const Tensor w = net.params().get("latent_head.1.weight");
    CHECK(std::any_of(w.grad().begin(), w.grad().end(), [](double g) { return g != 0.0; }));
  }
}

TEST_CASE("decoder sigma never drops below the floor") {
  const OrNet net(tiny(), 0);
  std::mt19937_64 rng(9);
  const Tensor x = testing::random_tensor(rng, 50, 1, -100, 100);
  const Tensor r = testing::random_tensor(rng, 50, 5, -100, 100);
  const Tensor z = testing::random_tensor(rng, 50, 3, -100, 100);
  const auto [mu, sigma] = net.decode(x, r, z);
  for (double s : sigma.data()) CHECK(s >= 0.01);
}

TEST_CASE("decoder gradients match finite differences") {
  OrNet net(tiny(), 4);
  std::mt19937_64 rng(10);
  const Tensor x = testing::random_tensor(rng, 6, 1);
  const Tensor r = testing::random_tensor(rng, 6, 5);
  const Tensor z = testing::random_tensor(rng, 6, 3);
  const Tensor y = testing::random_tensor(rng, 6, 1);
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : net.params().entries()) {
    if (name.rfind("decoder", 0) == 0) inputs.push_back(t);
  }
  REQUIRE(inputs.size() == 6);
  auto loss = [&](std::vector<Tensor>&) {
    const auto [mu, sigma] = net.decode(x, r, z);
    return ad::gaussian_nll(y, mu, sigma);
  };
  CHECK(testing::grad_check(loss, inputs).max_rel_error < 1e-4);
}

TEST_CASE("full model gradients match finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    INFO("seed " << seed);
    CHECK(testing::model_fd_error(seed) < 1e-4);
  }
}

TEST_CASE("loss stays finite under random inputs") {
  std::mt19937_64 rng(11);
  auto cfg = tiny(2);
  const OrNet net(cfg, 5);
  std::uniform_real_distribution<double> scale(-3.0, 3.0);
  bool ok = true;
  for (int it = 0; it < 10000 && ok; ++it) {
    const double spread = std::pow(10.0, scale(rng));
    std::vector<data::PointSet> sets;
    const std::size_t n = 2 + rng() % 6;
    sets.push_back(random_set(rng, n, 1 + rng() % n, 2, spread));
    data::Rng r(static_cast<std::uint64_t>(it));
    const auto terms = net.total_loss(sets, r, it % 2 ? Mode::train : Mode::eval);
    ok = std::isfinite(terms.loss.item()) && all_finite(terms.mu_y) &&
         std::all_of(terms.sigma_y.data().begin(), terms.sigma_y.data().end(),
                     [](double s) { return s >= 0.01; });
  }
  CHECK(ok);
}
