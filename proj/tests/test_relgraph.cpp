#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "gradcheck.hpp"
#include "ornet/errors.hpp"
#include "ornet/relgraph.hpp"

using namespace ornet;
using ad::Tensor;
using graph::Role;

namespace {

struct Instance {
  std::size_t dim;
  std::vector<double> coords;
  std::vector<Role> roles;
  double gamma;
};

Instance random_instance(std::mt19937_64& rng, std::size_t n, std::size_t dim, double gamma,
                         double target_share = 0.3) {
  Instance in{dim, std::vector<double>(n * dim), std::vector<Role>(n), gamma};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : in.coords) x = u(rng);
  for (auto& r : in.roles) r = u(rng) < target_share ? Role::target : Role::context;
  return in;
}

graph::RadiusGraph build(const Instance& in) {
  return graph::build_radius_graph(in.coords, in.dim, in.gamma, in.roles);
}

// All-pairs filter, edges (dst, src).
std::set<std::pair<std::uint32_t, std::uint32_t>> brute_force(const Instance& in) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> edges;
  const std::size_t n = in.roles.size();
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < n; ++j) {
      if (i == j || in.roles[j] != Role::context) continue;
      double d2 = 0.0;
      for (std::size_t a = 0; a < in.dim; ++a) {
        const double d = in.coords[i * in.dim + a] - in.coords[j * in.dim + a];
        d2 += d * d;
      }
      if (std::sqrt(d2) <= in.gamma * (1.0 + 1e-9)) edges.emplace(i, j);
    }
  }
  return edges;
}

graph::LayerDims small_dims(std::size_t coord_dim = 2) { return {coord_dim, 6, 4, 5, 3}; }

// Per-node evaluation through the single-edge reference operations.
Tensor reference_layer(const Tensor& h, const graph::RadiusGraph& g,
                       const graph::RelationalLayer& layer) {
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < g.num_nodes; ++i) {
    const Tensor h_i = ad::gather_rows(h, std::vector<std::uint32_t>{static_cast<std::uint32_t>(i)});
    std::vector<Tensor> msgs;
    for (std::size_t e = g.offsets[i]; e < g.offsets[i + 1]; ++e) {
      const Tensor h_j = ad::gather_rows(h, std::vector<std::uint32_t>{g.src[e]});
      Tensor r;
      if (layer.options.pos_embed) r = graph::geometric_embedding(g.edge_geometry(e), layer.w_geo);
      msgs.push_back(graph::compute_message(h_j, r, layer));
    }
    rows.push_back(msgs.empty() ? h_i : graph::attention_aggregate(h_i, ad::concat_rows(msgs), layer));
  }
  return ad::concat_rows(rows);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

const graph::LayerOptions kAllOptions[] = {{true, true}, {true, false}, {false, true}, {false, false}};

}  // namespace

TEST_CASE("radius graph threshold examples") {
  const std::vector<Role> roles{Role::context, Role::context};
  const auto near = graph::build_radius_graph(std::vector<double>{0.0, 0.0, 0.4, 0.0}, 2, 0.5, roles);
  CHECK(near.num_edges() == 2);
  const auto far = graph::build_radius_graph(std::vector<double>{0.0, 0.0, 0.6, 0.0}, 2, 0.5, roles);
  CHECK(far.num_edges() == 0);
  CHECK(near.geometry_width() == 3);
  const auto geo = near.edge_geometry(0);  // 1 -> 0
  CHECK(near.dst[0] == 0);
  CHECK(near.src[0] == 1);
  CHECK(geo[0] == doctest::Approx(0.4));
  CHECK(geo[1] == 0.0);
  CHECK(geo[2] == doctest::Approx(0.4));
}

TEST_CASE("radius graph rejects bad inputs") {
  const std::vector<Role> roles{Role::context};
  const std::vector<double> xy{0.0, 0.0};
  CHECK_THROWS_AS(graph::build_radius_graph(xy, 2, 0.0, roles), ConfigError);
  CHECK_THROWS_AS(graph::build_radius_graph(xy, 2, -1.0, roles), ConfigError);
  CHECK_THROWS_AS(graph::build_radius_graph(xy, 2, NAN, roles), ConfigError);
  CHECK_THROWS_AS(graph::build_radius_graph(xy, 1, 0.5, roles), DimensionError);
  CHECK_THROWS_AS(graph::build_radius_graph(std::vector<double>(4), 4, 0.5, roles), InputError);
}

TEST_CASE("radius graph matches the all-pairs filter") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> size(1, 500);
  std::uniform_real_distribution<double> gam(0.01, 0.4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + trial % 3;
    const Instance in = random_instance(rng, size(rng), dim, gam(rng));
    const auto g = build(in);
    const auto expected = brute_force(in);
    REQUIRE(g.num_edges() == expected.size());
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      REQUIRE(expected.count({g.dst[e], g.src[e]}) == 1);
      if (e > 0) {
        REQUIRE(std::make_pair(g.dst[e - 1], g.src[e - 1]) < std::make_pair(g.dst[e], g.src[e]));
      }
      const auto geo = g.edge_geometry(e);
      double d2 = 0.0;
      for (std::size_t a = 0; a < dim; ++a) {
        const double d = in.coords[g.src[e] * dim + a] - in.coords[g.dst[e] * dim + a];
        REQUIRE(geo[a] == d);
        d2 += d * d;
      }
      REQUIRE(geo[dim] == doctest::Approx(std::sqrt(d2)).epsilon(1e-14));
    }
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
      for (auto j : g.neighbors(i)) REQUIRE(expected.count({static_cast<std::uint32_t>(i), j}) == 1);
    }
  }
}

TEST_CASE("pixel grid radius keeps boundary ties") {
  // 28 x 28 grid in normalized units, gamma = 5 pixels
  std::vector<double> xy;
  for (int r = 0; r < 28; ++r) {
    for (int c = 0; c < 28; ++c) {
      xy.push_back(r / 27.0);
      xy.push_back(c / 27.0);
    }
  }
  const std::vector<Role> roles(28 * 28, Role::context);
  const auto g = graph::build_radius_graph(xy, 2, 5.0 / 27.0, roles);
  std::size_t expected = 0;
  for (int a = 0; a < 28 * 28; ++a) {
    for (int b = 0; b < 28 * 28; ++b) {
      const int dr = a / 28 - b / 28;
      const int dc = a % 28 - b % 28;
      if (a != b && dr * dr + dc * dc <= 25) ++expected;
    }
  }
  CHECK(g.num_edges() == expected);
  // interior pixel: 80 lattice points within radius 5 besides itself
  CHECK(g.neighbors(14 * 28 + 14).size() == 80);
}

TEST_CASE("context adjacency is symmetric and targets never send") {
  std::mt19937_64 rng(3);
  const Instance in = random_instance(rng, 300, 2, 0.1, 0.4);
  const auto g = build(in);
  std::set<std::pair<std::uint32_t, std::uint32_t>> edges;
  for (std::size_t e = 0; e < g.num_edges(); ++e) edges.emplace(g.dst[e], g.src[e]);
  for (const auto& [i, j] : edges) {
    CHECK(in.roles[j] == Role::context);
    if (in.roles[i] == Role::context) CHECK(edges.count({j, i}) == 1);
  }
}

TEST_CASE("edge geometry is translation invariant") {
  std::mt19937_64 rng(5);
  // Dyadic coordinates and shift keep every subtraction exact.
  Instance in = random_instance(rng, 200, 2, 0.15);
  for (auto& x : in.coords) x = std::round(x * 64.0) / 64.0;
  Instance moved = in;
  for (std::size_t k = 0; k < moved.coords.size(); ++k) moved.coords[k] += k % 2 ? 0.25 : -3.5;
  const auto a = build(in);
  const auto b = build(moved);
  REQUIRE(a.dst == b.dst);
  REQUIRE(a.src == b.src);
  CHECK(a.geometry == b.geometry);

  Instance random_shift = random_instance(rng, 200, 2, 0.15);
  Instance shifted = random_shift;
  for (std::size_t k = 0; k < shifted.coords.size(); ++k) shifted.coords[k] += k % 2 ? 0.123 : 0.456;
  const auto c = build(random_shift);
  const auto d = build(shifted);
  REQUIRE(c.num_edges() == d.num_edges());
  for (std::size_t k = 0; k < c.geometry.size(); ++k) CHECK(std::abs(c.geometry[k] - d.geometry[k]) < 1e-12);
}

TEST_CASE("self loops go to context nodes with neighbors only") {
  // 0 and 1 close, 2 isolated context, 3 target near 0
  const std::vector<double> xy{0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 0.0, 0.1};
  const std::vector<Role> roles{Role::context, Role::context, Role::context, Role::target};
  const auto g = graph::build_radius_graph(xy, 2, 0.2, roles);
  const auto s = graph::with_self_loops(g, roles);
  CHECK(s.num_edges() == g.num_edges() + 2);
  CHECK(std::vector<std::uint32_t>(s.neighbors(0).begin(), s.neighbors(0).end()) ==
        std::vector<std::uint32_t>{0, 1});
  CHECK(std::vector<std::uint32_t>(s.neighbors(1).begin(), s.neighbors(1).end()) ==
        std::vector<std::uint32_t>{0, 1});
  CHECK(s.neighbors(2).empty());
  CHECK(std::vector<std::uint32_t>(s.neighbors(3).begin(), s.neighbors(3).end()) ==
        std::vector<std::uint32_t>{0, 1});
  const auto loop = s.edge_geometry(s.offsets[1] + 1);
  CHECK(s.src[s.offsets[1] + 1] == 1);
  CHECK(std::all_of(loop.begin(), loop.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("concatenated graphs shift node ids") {
  const std::vector<Role> roles{Role::context, Role::context};
  const auto a = graph::build_radius_graph(std::vector<double>{0.0, 0.1}, 1, 0.5, roles);
  const std::vector<graph::RadiusGraph> parts{a, a};
  const auto g = graph::concat_graphs(parts);
  CHECK(g.num_nodes == 4);
  CHECK(g.dst == ad::Index{0, 1, 2, 3});
  CHECK(g.src == ad::Index{1, 0, 3, 2});
  CHECK(g.offsets == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("geometric embedding examples") {
  std::mt19937_64 rng(1);
  const Tensor w = testing::random_tensor(rng, 3, 4);
  const Tensor zero = graph::geometric_embedding(std::vector<double>{0, 0, 0}, w);
  CHECK(zero.rows() == 1);
  CHECK(zero.cols() == 4);
  for (double v : zero.data()) CHECK(v == 0.0);
  // column k selects geometry entry k
  const Tensor sel = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Tensor r = graph::geometric_embedding(std::vector<double>{0.3, 0.4, 0.5}, sel);
  CHECK(r.at(0, 0) == 0.3);
  CHECK(r.at(0, 1) == 0.4);
  CHECK(r.at(0, 2) == 0.5);
}

TEST_CASE("message examples") {
  graph::RelationalLayer l;
  l.w_msg_node = Tensor::from_rows({{1, 0}, {0, 1}});
  l.w_msg_geo = Tensor::from_rows({{2, -1}});
  const Tensor m = graph::compute_message(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}}), l);
  CHECK(m.at(0, 0) == 7.0);
  CHECK(m.at(0, 1) == -1.0);
  const Tensor z = graph::compute_message(Tensor::zeros(1, 2), Tensor::zeros(1, 1), l);
  CHECK(z.at(0, 0) == 0.0);
  CHECK(z.at(0, 1) == 0.0);
  l.options.pos_embed = false;
  const Tensor plain = graph::compute_message(Tensor::from_rows({{1, 2}}), Tensor{}, l);
  CHECK(plain.at(0, 0) == 1.0);
  CHECK(plain.at(0, 1) == 2.0);
}

TEST_CASE("attention coefficient examples") {
  std::mt19937_64 rng(2);
  ParameterStore store;
  const auto l = graph::RelationalLayer::create(store, "l", small_dims(), {}, rng);
  const Tensor h = testing::random_tensor(rng, 1, 6);
  const Tensor one = graph::attention_coefficients(h, testing::random_tensor(rng, 1, 5), l);
  CHECK(one.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  const Tensor row = testing::random_tensor(rng, 1, 5);
  const Tensor same = ad::concat_rows(std::vector<Tensor>{row, row, row, row});
  const Tensor uni = graph::attention_coefficients(h, same, l);
  for (std::size_t k = 0; k < 4; ++k) CHECK(uni.at(0, k) == doctest::Approx(0.25).epsilon(1e-15));

  // hand evaluation with 1-d projections: scores q k m_j / sqrt(1)
  graph::RelationalLayer t;
  t.w_query = Tensor::from_rows({{2.0}});
  t.w_key = Tensor::from_rows({{0.5}});
  t.w_value = Tensor::from_rows({{1.0}});
  const Tensor a = graph::attention_coefficients(Tensor::from_rows({{1.0}}),
                                                 Tensor::from_rows({{0.0}, {1.0}}), t);
  CHECK(a.at(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-14));
  CHECK(a.at(0, 1) == doctest::Approx(std::exp(1.0) / (1.0 + std::exp(1.0))).epsilon(1e-14));
  // aggregate: h + relu(sum a_j m_j W_a)
  const Tensor agg = graph::attention_aggregate(Tensor::from_rows({{1.0}}),
                                                Tensor::from_rows({{0.0}, {1.0}}), t);
  CHECK(agg.at(0, 0) == doctest::Approx(1.0 + std::exp(1.0) / (1.0 + std::exp(1.0))).epsilon(1e-14));
}

TEST_CASE("attention weights sum to one per node") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Instance in = random_instance(rng, 120, 2, 0.2);
    const auto g = graph::with_self_loops(build(in), in.roles);
    ParameterStore store;
    const auto l = graph::RelationalLayer::create(store, "l", small_dims(), {}, rng);
    const Tensor h = testing::random_tensor(rng, g.num_nodes, 6);
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
      if (g.neighbors(i).empty()) continue;
      std::vector<Tensor> msgs;
      for (std::size_t e = g.offsets[i]; e < g.offsets[i + 1]; ++e) {
        const Tensor h_j = ad::gather_rows(h, std::vector<std::uint32_t>{g.src[e]});
        msgs.push_back(graph::compute_message(
            h_j, graph::geometric_embedding(g.edge_geometry(e), l.w_geo), l));
      }
      const Tensor h_i = ad::gather_rows(h, std::vector<std::uint32_t>{static_cast<std::uint32_t>(i)});
      const Tensor a = graph::attention_coefficients(h_i, ad::concat_rows(msgs), l);
      const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
      REQUIRE(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("batched layer agrees with the per-edge reference") {
  std::mt19937_64 rng(21);
  for (const auto& opts : kAllOptions) {
    for (int trial = 0; trial < 5; ++trial) {
      const Instance in = random_instance(rng, 80, 2, 0.2);
      const auto g = graph::with_self_loops(build(in), in.roles);
      ParameterStore store;
      const auto l = graph::RelationalLayer::create(store, "l", small_dims(), opts, rng);
      const Tensor h = testing::random_tensor(rng, g.num_nodes, 6);
      const auto pg = graph::PreparedGraph::from(g);
      CHECK(max_abs_diff(graph::relational_layer(h, pg, l), reference_layer(h, g, l)) < 1e-12);
    }
  }
}

TEST_CASE("disabled features register fewer parameters") {
  std::mt19937_64 rng(0);
  std::size_t full = 0;
  for (const auto& opts : kAllOptions) {
    ParameterStore store;
    (void)graph::RelationalLayer::create(store, "l", small_dims(), opts, rng);
    if (opts.attention && opts.pos_embed) {
      full = store.scalar_count();
      CHECK(store.size() == 6);
    } else {
      CHECK(store.scalar_count() < full);
    }
    CHECK(store.contains("l.w_query") == opts.attention);
    CHECK(store.contains("l.w_geo") == opts.pos_embed);
  }
}

TEST_CASE("isolated node and target without context keep their embedding") {
  const std::vector<double> xy{0.0, 0.0, 0.05, 0.0, 0.9, 0.9, 0.5, 0.5};
  const std::vector<Role> roles{Role::context, Role::context, Role::context, Role::target};
  const auto g = graph::with_self_loops(graph::build_radius_graph(xy, 2, 0.1, roles), roles);
  std::mt19937_64 rng(4);
  ParameterStore store;
  const auto l = graph::RelationalLayer::create(store, "l", small_dims(), {}, rng);
  const Tensor h = testing::random_tensor(rng, 4, 6);
  const Tensor out = graph::relational_layer(h, graph::PreparedGraph::from(g), l);
  for (std::size_t c = 0; c < 6; ++c) {
    CHECK(out.at(2, c) == h.at(2, c));
    CHECK(out.at(3, c) == h.at(3, c));
  }

  const auto empty = graph::build_radius_graph(std::vector<double>{0.0, 0.0}, 2, 0.1,
                                               std::vector<Role>{Role::context});
  const Tensor one = testing::random_tensor(rng, 1, 6);
  const Tensor same = graph::relational_layer(one, graph::PreparedGraph::from(empty), l);
  CHECK(same.same_node(one));
}

TEST_CASE("permuting nodes permutes outputs") {
  std::mt19937_64 rng(9);
  for (const auto& opts : kAllOptions) {
    const Instance in = random_instance(rng, 150, 2, 0.15);
    const std::size_t n = in.roles.size();
    ad::Index perm = ad::iota_index(n);
    std::shuffle(perm.begin(), perm.end(), rng);
    Instance p = in;
    for (std::size_t k = 0; k < n; ++k) {
      p.roles[k] = in.roles[perm[k]];
      p.coords[2 * k] = in.coords[2 * perm[k]];
      p.coords[2 * k + 1] = in.coords[2 * perm[k] + 1];
    }
    ParameterStore store;
    std::vector<graph::RelationalLayer> layers;
    layers.push_back(graph::RelationalLayer::create(store, "a", small_dims(), opts, rng));
    layers.push_back(graph::RelationalLayer::create(store, "b", small_dims(), opts, rng));
    const Tensor h = testing::random_tensor(rng, n, 6);
    const Tensor hp = ad::gather_rows(h, perm);
    const auto g = graph::with_self_loops(build(in), in.roles);
    const auto gp = graph::with_self_loops(build(p), p.roles);
    const Tensor out = graph::propagate(h, graph::PreparedGraph::from(g), layers);
    const Tensor outp = graph::propagate(hp, graph::PreparedGraph::from(gp), layers);
    CHECK(max_abs_diff(ad::gather_rows(out, perm), outp) < 1e-12);
  }
}

TEST_CASE("two layers only see the two-hop neighborhood") {
  // chain of context points 0.1 apart on a line, gamma 0.1; target at x = 0
  std::vector<double> xs{0.0};
  std::vector<Role> roles{Role::target};
  for (int k = 0; k < 6; ++k) {
    xs.push_back(0.1 * k);
    roles.push_back(Role::context);
  }
  std::mt19937_64 rng(6);
  ParameterStore store;
  std::vector<graph::RelationalLayer> layers;
  layers.push_back(graph::RelationalLayer::create(store, "a", small_dims(1), {}, rng));
  layers.push_back(graph::RelationalLayer::create(store, "b", small_dims(1), {}, rng));
  const Tensor h = testing::random_tensor(rng, xs.size(), 6);

  auto target_row = [&](const std::vector<double>& coords, const Tensor& feats) {
    const auto g = graph::with_self_loops(graph::build_radius_graph(coords, 1, 0.1, roles), roles);
    const Tensor out = graph::propagate(feats, graph::PreparedGraph::from(g), layers);
    return std::vector<double>(out.data().begin(), out.data().begin() + 6);
  };
  const auto base = target_row(xs, h);

  // node 3 (x = 0.2) is two hops from the target's sender at x = 0
  Tensor h2 = h.detach();
  h2.mutable_data()[3 * 6] += 1.0;
  CHECK(target_row(xs, h2) != base);

  for (std::size_t far = 4; far < xs.size(); ++far) {
    Tensor hf = h.detach();
    for (std::size_t c = 0; c < 6; ++c) hf.mutable_data()[far * 6 + c] += 3.0;
    CHECK(target_row(xs, hf) == base);
    auto moved = xs;
    moved[far] += 0.03;
    CHECK(target_row(moved, h) == base);
  }
}

TEST_CASE("coincident context point dominates a target's attention") {
  // scalar embeddings; message = h_j - distance, key = message, query = h_i
  graph::RelationalLayer l;
  l.w_geo = Tensor::from_rows({{0}, {0}, {1}});
  l.w_msg_node = Tensor::from_rows({{1}});
  l.w_msg_geo = Tensor::from_rows({{-1}});
  l.w_query = Tensor::from_rows({{1}});
  l.w_key = Tensor::from_rows({{1}});
  l.w_value = Tensor::from_rows({{1}});
  // target at origin; context at the origin and at distance 0.1 on either side
  const std::vector<double> xy{0.0, 0.0, 0.0, 0.0, 0.1, 0.0, -0.1, 0.0};
  const std::vector<Role> roles{Role::target, Role::context, Role::context, Role::context};
  const auto g = graph::build_radius_graph(xy, 2, 0.2, roles);
  const Tensor h = Tensor::from_rows({{1.0}, {1.0}, {1.0}, {1.0}});
  std::vector<Tensor> msgs;
  for (std::size_t e = g.offsets[0]; e < g.offsets[1]; ++e) {
    msgs.push_back(graph::compute_message(ad::gather_rows(h, std::vector<std::uint32_t>{g.src[e]}),
                                          graph::geometric_embedding(g.edge_geometry(e), l.w_geo), l));
  }
  REQUIRE(msgs.size() == 3);
  const Tensor a = graph::attention_coefficients(Tensor::from_rows({{1.0}}), ad::concat_rows(msgs), l);
  CHECK(g.src[g.offsets[0]] == 1);
  CHECK(a.at(0, 0) > a.at(0, 1));
  CHECK(a.at(0, 0) > a.at(0, 2));
  CHECK(a.at(0, 1) == doctest::Approx(a.at(0, 2)));
  const double e0 = 1.0;
  const double e1 = std::exp(-0.1);
  CHECK(a.at(0, 0) == doctest::Approx(e0 / (e0 + 2 * e1)).epsilon(1e-14));
}

TEST_CASE("batched layer gradients match finite differences") {
  std::mt19937_64 rng(31);
  for (const auto& opts : kAllOptions) {
    const Instance in = random_instance(rng, 25, 2, 0.35);
    const auto g = graph::with_self_loops(build(in), in.roles);
    const auto pg = graph::PreparedGraph::from(g);
    ParameterStore store;
    const auto proto = graph::RelationalLayer::create(store, "l", small_dims(), opts, rng);
    std::vector<Tensor> inputs{testing::random_tensor(rng, g.num_nodes, 6)};
    for (const auto& [name, t] : store.entries()) inputs.push_back(t);
    auto loss = [&](std::vector<Tensor>& in_) {
      graph::RelationalLayer l = proto;
      std::size_t k = 1;
      if (opts.pos_embed) l.w_geo = in_[k++];
      l.w_msg_node = in_[k++];
      if (opts.pos_embed) l.w_msg_geo = in_[k++];
      if (opts.attention) {
        l.w_query = in_[k++];
        l.w_key = in_[k++];
      }
      l.w_value = in_[k++];
      const Tensor out = graph::propagate(in_[0], pg, std::vector<graph::RelationalLayer>{l, l});
      return ad::sum(ad::mul(out, out));
    };
    const auto res = testing::grad_check(loss, inputs);
    CHECK(res.max_rel_error < 1e-4);
  }
}
