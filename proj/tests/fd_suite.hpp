#pragma once

// Finite-difference suites shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "ornet/autodiff.hpp"
#include "ornet/model.hpp"

namespace ornet::testing {

// Weighted sum with fixed pseudo-random weights so every output element gets
// a distinct upstream gradient.
inline ad::Tensor probe(const ad::Tensor& t) {
  std::vector<double> w(t.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.3 * static_cast<double>(i) + 0.7);
  return ad::sum(ad::mul(t, ad::Tensor::from(t.rows(), t.cols(), w)));
}

inline ad::Tensor positive(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  return random_tensor(rng, r, c, 0.3, 2.0);
}

struct OpCase {
  const char* name;
  std::function<std::vector<ad::Tensor>(std::mt19937_64&)> make;
  std::function<ad::Tensor(std::vector<ad::Tensor>&)> f;
};

inline std::vector<OpCase> op_cases() {
  using ad::Tensor;
  const ad::Index gather_idx{2, 0, 2, 1, 3};
  const ad::Index seg{0, 0, 1, 2, 2, 2};
  const ad::Index dst{0, 0, 1, 3, 3};
  const ad::Index src{1, 2, 0, 0, 2};
  return {
      {"matmul", [](auto& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 4, 2)}; },
       [](auto& v) { return probe(ad::matmul(v[0], v[1])); }},
      {"transpose", [](auto& r) { return std::vector{random_tensor(r, 3, 4)}; },
       [](auto& v) { return probe(ad::transpose(v[0])); }},
      {"add", [](auto& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 3)}; },
       [](auto& v) { return probe(ad::add(v[0], v[1])); }},
      {"sub", [](auto& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 3)}; },
       [](auto& v) { return probe(ad::sub(v[0], v[1])); }},
      {"mul", [](auto& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 3)}; },
       [](auto& v) { return probe(ad::mul(v[0], v[1])); }},
      {"scale", [](auto& r) { return std::vector{random_tensor(r, 2, 3)}; },
       [](auto& v) { return probe(ad::scale(v[0], -1.7)); }},
      {"add_row", [](auto& r) { return std::vector{random_tensor(r, 4, 3), random_tensor(r, 1, 3)}; },
       [](auto& v) { return probe(ad::add_row(v[0], v[1])); }},
      {"mul_col", [](auto& r) { return std::vector{random_tensor(r, 4, 3), random_tensor(r, 4, 1)}; },
       [](auto& v) { return probe(ad::mul_col(v[0], v[1])); }},
      {"relu",
       [](auto& r) {
         // keep inputs away from the kink
         auto t = random_tensor(r, 3, 3, 0.1, 1.0);
         auto s = random_tensor(r, 3, 3, -1.0, 1.0);
         std::vector<double> v(9);
         for (int i = 0; i < 9; ++i) v[i] = s.data()[i] < 0 ? -t.data()[i] : t.data()[i];
         return std::vector{Tensor::from(3, 3, v)};
       },
       [](auto& v) { return probe(ad::relu(v[0])); }},
      {"tanh", [](auto& r) { return std::vector{random_tensor(r, 3, 3, -2, 2)}; },
       [](auto& v) { return probe(ad::tanh(v[0])); }},
      {"sigmoid", [](auto& r) { return std::vector{random_tensor(r, 3, 3, -4, 4)}; },
       [](auto& v) { return probe(ad::sigmoid(v[0])); }},
      {"softplus", [](auto& r) { return std::vector{random_tensor(r, 3, 3, -4, 4)}; },
       [](auto& v) { return probe(ad::softplus(v[0])); }},
      {"exp", [](auto& r) { return std::vector{random_tensor(r, 3, 3, -2, 2)}; },
       [](auto& v) { return probe(ad::exp(v[0])); }},
      {"log", [](auto& r) { return std::vector{positive(r, 3, 3)}; },
       [](auto& v) { return probe(ad::log(v[0])); }},
      {"square", [](auto& r) { return std::vector{random_tensor(r, 3, 3)}; },
       [](auto& v) { return probe(ad::square(v[0])); }},
      {"sum", [](auto& r) { return std::vector{random_tensor(r, 3, 3)}; },
       [](auto& v) { return ad::scale(ad::sum(v[0]), 1.3); }},
      {"mean", [](auto& r) { return std::vector{random_tensor(r, 3, 3)}; },
       [](auto& v) { return ad::square(ad::mean(v[0])); }},
      {"row_sum", [](auto& r) { return std::vector{random_tensor(r, 4, 3)}; },
       [](auto& v) { return probe(ad::row_sum(v[0])); }},
      {"concat_cols",
       [](auto& r) { return std::vector{random_tensor(r, 3, 2), random_tensor(r, 3, 1), random_tensor(r, 3, 4)}; },
       [](auto& v) { return probe(ad::concat_cols({v[0], v[1], v[2]})); }},
      {"concat_rows",
       [](auto& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 1, 3)}; },
       [](auto& v) { return probe(ad::concat_rows(std::span<const Tensor>(v))); }},
      {"slice_cols", [](auto& r) { return std::vector{random_tensor(r, 3, 5)}; },
       [](auto& v) { return probe(ad::slice_cols(v[0], 1, 4)); }},
      {"gather_rows", [](auto& r) { return std::vector{random_tensor(r, 4, 3)}; },
       [=](auto& v) { return probe(ad::gather_rows(v[0], gather_idx)); }},
      {"segment_mean", [](auto& r) { return std::vector{random_tensor(r, 6, 2)}; },
       [=](auto& v) { return probe(ad::segment_mean(v[0], seg, 3)); }},
      {"softmax_rows", [](auto& r) { return std::vector{random_tensor(r, 3, 4, -3, 3)}; },
       [](auto& v) { return probe(ad::softmax_rows(v[0])); }},
      {"edge_dot", [](auto& r) { return std::vector{random_tensor(r, 4, 3), random_tensor(r, 3, 3)}; },
       [=](auto& v) { return probe(ad::edge_dot(v[0], v[1], dst, src)); }},
      {"segment_softmax", [](auto& r) { return std::vector{random_tensor(r, 6, 1, -3, 3)}; },
       [=](auto& v) { return probe(ad::segment_softmax(v[0], seg, 4)); }},
      {"spmm", [](auto& r) { return std::vector{random_tensor(r, 5, 1), random_tensor(r, 3, 4)}; },
       [=](auto& v) { return probe(ad::spmm(v[0], v[1], dst, src, 4)); }},
      {"gaussian_nll",
       [](auto& r) { return std::vector{random_tensor(r, 3, 2), random_tensor(r, 3, 2), positive(r, 3, 2)}; },
       [](auto& v) { return ad::gaussian_nll(v[0], v[1], v[2]); }},
      {"kl_diag_gaussians",
       [](auto& r) {
         return std::vector{random_tensor(r, 2, 3), positive(r, 2, 3), random_tensor(r, 2, 3), positive(r, 2, 3)};
       },
       [](auto& v) { return ad::kl_diag_gaussians(v[0], v[1], v[2], v[3]); }},
      {"reparameterize",
       [](auto& r) { return std::vector{random_tensor(r, 2, 3), positive(r, 2, 3)}; },
       [](auto& v) {
         auto noise = Tensor::from_rows({{0.3, -1.1, 0.8}, {1.4, -0.2, 0.05}});
         return probe(ad::reparameterize(v[0], v[1], noise));
       }},
  };
}

/// Worst relative error of an op over seeds 1000.. 1000+n_seeds-1.
inline double op_fd_error(const OpCase& c, int n_seeds) {
  double worst = 0.0;
  for (int seed = 0; seed < n_seeds; ++seed) {
    std::mt19937_64 rng(1000 + static_cast<unsigned>(seed));
    auto inputs = c.make(rng);
    worst = std::max(worst, grad_check(c.f, inputs).max_rel_error);
  }
  return worst;
}

/// Random point sets: 3-12 points each, inputs and outputs uniform in (-2, 2).
inline std::vector<data::PointSet> random_point_sets(std::mt19937_64& rng, std::size_t b,
                                                     std::size_t x_dim) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_int_distribution<std::size_t> size(3, 12);
  std::vector<data::PointSet> sets;
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t n = size(rng);
    data::PointSet ps;
    ps.points.x_dim = x_dim;
    ps.points.xs.resize(n * x_dim);
    ps.points.ys.resize(n);
    for (auto& v : ps.points.xs) v = u(rng);
    for (auto& v : ps.points.ys) v = u(rng);
    ps.target = ad::iota_index(n);
    std::shuffle(ps.target.begin(), ps.target.end(), rng);
    ps.context.assign(ps.target.begin(), ps.target.begin() + static_cast<std::ptrdiff_t>(1 + rng() % n));
    sets.push_back(std::move(ps));
  }
  return sets;
}

/// Worst relative error of the full training loss over every parameter; the
/// switch combination varies with the seed.
inline double model_fd_error(int seed) {
  std::mt19937_64 rng(100 + static_cast<unsigned>(seed));
  model::ModelConfig cfg;
  cfg.x_dim = seed % 2 == 0 ? 2 : 1;
  cfg.d_node = 5;
  cfg.d_geo = 3;
  cfg.d_msg = 4;
  cfg.d_att = 3;
  cfg.d_z = 3;
  cfg.d_dec = 5;
  cfg.gamma = 1.0;
  cfg.use_attention = seed % 3 != 1;
  cfg.use_pos_embed = seed % 4 != 2;
  cfg.use_graph = seed % 5 != 4;
  model::OrNet net(cfg, static_cast<std::uint64_t>(seed));
  const auto sets = random_point_sets(rng, 2, cfg.x_dim);
  // Zero biases put relu inputs exactly on the kink for rows whose inputs
  // are all zero; move them off it so central differences are valid.
  std::uniform_real_distribution<double> off(-0.5, 0.5);
  std::vector<ad::Tensor> inputs;
  for (auto [name, t] : net.params().entries()) {
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      for (double& v : t.mutable_data()) v = off(rng);
    }
    inputs.push_back(t);
  }
  auto loss = [&](std::vector<ad::Tensor>&) {
    data::Rng r(static_cast<std::uint64_t>(seed));
    return net.total_loss(sets, r, model::Mode::train).loss;
  };
  return grad_check(loss, inputs).max_rel_error;
}

}  // namespace ornet::testing
