#include "ornet/relgraph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <unordered_map>

#include "ornet/errors.hpp"

namespace ornet::graph {

namespace {

using Cell = std::array<std::int64_t, 3>;

struct CellHash {
  std::size_t operator()(const Cell& c) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto v : c) {
      h ^= static_cast<std::uint64_t>(v) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

// Relative slack so grid points at exactly gamma survive rounding.
constexpr double kRadiusSlack = 1e-9;

void finish_offsets(RadiusGraph& g) {
  g.offsets.assign(g.num_nodes + 1, 0);
  for (auto d : g.dst) ++g.offsets[d + 1];
  for (std::size_t i = 0; i < g.num_nodes; ++i) g.offsets[i + 1] += g.offsets[i];
}

}  // namespace

RadiusGraph build_radius_graph(std::span<const double> coords, std::size_t dim, double gamma,
                               std::span<const Role> roles) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("radius gamma must be positive and finite, got " + std::to_string(gamma));
  }
  if (dim == 0 || dim > 3) throw InputError("radius graphs support 1 to 3 coordinate axes");
  if (coords.size() % dim != 0 || coords.size() / dim != roles.size()) {
    throw DimensionError("radius graph: " + std::to_string(coords.size()) + " coordinates for " +
                         std::to_string(roles.size()) + " nodes of dimension " +
                         std::to_string(dim));
  }
  const std::size_t n = roles.size();
  RadiusGraph g;
  g.num_nodes = n;
  g.dim = dim;

  auto cell_of = [&](std::size_t i) {
    Cell c{0, 0, 0};
    for (std::size_t a = 0; a < dim; ++a) {
      c[a] = static_cast<std::int64_t>(std::floor(coords[i * dim + a] / gamma));
    }
    return c;
  };

  std::unordered_map<Cell, std::vector<std::uint32_t>, CellHash> buckets;
  for (std::size_t j = 0; j < n; ++j) {
    if (roles[j] == Role::context) buckets[cell_of(j)].push_back(static_cast<std::uint32_t>(j));
  }

  std::size_t n_offsets = 1;
  for (std::size_t a = 0; a < dim; ++a) n_offsets *= 3;
  const double limit = gamma * (1.0 + kRadiusSlack);
  std::vector<std::uint32_t> found;
  std::vector<double> delta(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const Cell home = cell_of(i);
    found.clear();
    for (std::size_t k = 0; k < n_offsets; ++k) {
      Cell c = home;
      std::size_t code = k;
      for (std::size_t a = 0; a < dim; ++a) {
        c[a] += static_cast<std::int64_t>(code % 3) - 1;
        code /= 3;
      }
      const auto it = buckets.find(c);
      if (it == buckets.end()) continue;
      for (auto j : it->second) {
        if (j == i) continue;
        double d2 = 0.0;
        for (std::size_t a = 0; a < dim; ++a) {
          const double d = coords[j * dim + a] - coords[i * dim + a];
          d2 += d * d;
        }
        if (std::sqrt(d2) <= limit) found.push_back(j);
      }
    }
    std::sort(found.begin(), found.end());
    for (auto j : found) {
      g.dst.push_back(static_cast<std::uint32_t>(i));
      g.src.push_back(j);
      double d2 = 0.0;
      for (std::size_t a = 0; a < dim; ++a) {
        delta[a] = coords[j * dim + a] - coords[i * dim + a];
        d2 += delta[a] * delta[a];
      }
      g.geometry.insert(g.geometry.end(), delta.begin(), delta.end());
      g.geometry.push_back(std::sqrt(d2));
    }
  }
  finish_offsets(g);
  return g;
}

RadiusGraph with_self_loops(const RadiusGraph& g, std::span<const Role> roles) {
  if (roles.size() != g.num_nodes) throw DimensionError("with_self_loops: role count mismatch");
  RadiusGraph out;
  out.num_nodes = g.num_nodes;
  out.dim = g.dim;
  const std::size_t w = g.geometry_width();
  for (std::size_t i = 0; i < g.num_nodes; ++i) {
    const std::size_t begin = g.offsets[i];
    const std::size_t end = g.offsets[i + 1];
    const bool loop = roles[i] == Role::context && end > begin;
    bool placed = !loop;
    for (std::size_t e = begin; e <= end; ++e) {
      if (!placed && (e == end || g.src[e] > i)) {
        out.dst.push_back(static_cast<std::uint32_t>(i));
        out.src.push_back(static_cast<std::uint32_t>(i));
        out.geometry.insert(out.geometry.end(), w, 0.0);
        placed = true;
      }
      if (e == end) break;
      out.dst.push_back(g.dst[e]);
      out.src.push_back(g.src[e]);
      const auto geo = g.edge_geometry(e);
      out.geometry.insert(out.geometry.end(), geo.begin(), geo.end());
    }
  }
  finish_offsets(out);
  return out;
}

RadiusGraph concat_graphs(std::span<const RadiusGraph> parts) {
  RadiusGraph out;
  if (parts.empty()) return out;
  out.dim = parts.front().dim;
  for (const auto& p : parts) {
    if (p.dim != out.dim) throw DimensionError("concat_graphs: mixed coordinate dimensions");
    const auto shift = static_cast<std::uint32_t>(out.num_nodes);
    for (std::size_t e = 0; e < p.num_edges(); ++e) {
      out.dst.push_back(p.dst[e] + shift);
      out.src.push_back(p.src[e] + shift);
    }
    out.geometry.insert(out.geometry.end(), p.geometry.begin(), p.geometry.end());
    out.num_nodes += p.num_nodes;
  }
  finish_offsets(out);
  return out;
}

RelationalLayer RelationalLayer::create(ParameterStore& store, const std::string& name,
                                        const LayerDims& dims, LayerOptions options,
                                        std::mt19937_64& rng) {
  RelationalLayer l;
  l.options = options;
  if (options.pos_embed) {
    l.w_geo = store.add_weight(name + ".w_geo", dims.coord_dim + 1, dims.d_geo, rng);
  }
  l.w_msg_node = store.add_weight(name + ".w_msg_node", dims.d_node, dims.d_msg, rng);
  if (options.pos_embed) {
    l.w_msg_geo = store.add_weight(name + ".w_msg_geo", dims.d_geo, dims.d_msg, rng);
  }
  if (options.attention) {
    l.w_query = store.add_weight(name + ".w_query", dims.d_node, dims.d_att, rng);
    l.w_key = store.add_weight(name + ".w_key", dims.d_msg, dims.d_att, rng);
  }
  l.w_value = store.add_weight(name + ".w_value", dims.d_msg, dims.d_node, rng);
  return l;
}

ad::Tensor geometric_embedding(std::span<const double> geometry, const ad::Tensor& w_geo) {
  const auto row = ad::Tensor::from(1, geometry.size(), {geometry.begin(), geometry.end()});
  return ad::matmul(row, w_geo);
}

ad::Tensor compute_message(const ad::Tensor& h_j, const ad::Tensor& r_ij,
                           const RelationalLayer& layer) {
  if (!layer.options.pos_embed) return ad::matmul(h_j, layer.w_msg_node);
  const ad::Tensor w = ad::concat_rows(std::vector<ad::Tensor>{layer.w_msg_node, layer.w_msg_geo});
  return ad::matmul(ad::concat_cols({h_j, r_ij}), w);
}

ad::Tensor attention_coefficients(const ad::Tensor& h_i, const ad::Tensor& messages,
                                  const RelationalLayer& layer) {
  const std::size_t k = messages.rows();
  if (!layer.options.attention) return ad::Tensor::filled(1, k, 1.0 / static_cast<double>(k));
  const ad::Tensor q = ad::matmul(h_i, layer.w_query);
  const ad::Tensor keys = ad::matmul(messages, layer.w_key);
  const double scale = 1.0 / std::sqrt(static_cast<double>(layer.w_query.cols()));
  return ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(keys)), scale));
}

ad::Tensor attention_aggregate(const ad::Tensor& h_i, const ad::Tensor& messages,
                               const RelationalLayer& layer) {
  if (!messages.defined() || messages.rows() == 0) return h_i;
  const ad::Tensor a = attention_coefficients(h_i, messages, layer);
  const ad::Tensor agg = ad::matmul(ad::matmul(a, messages), layer.w_value);
  return ad::add(h_i, ad::relu(agg));
}

PreparedGraph PreparedGraph::from(const RadiusGraph& g) {
  PreparedGraph p;
  p.graph = &g;
  const std::size_t e = g.num_edges();
  if (e == 0) return p;
  p.geometry = ad::Tensor::from(e, g.geometry_width(), g.geometry);
  std::vector<double> w(e);
  for (std::size_t k = 0; k < e; ++k) {
    const auto d = g.dst[k];
    w[k] = 1.0 / static_cast<double>(g.offsets[d + 1] - g.offsets[d]);
  }
  p.uniform_weights = ad::Tensor::from(e, 1, std::move(w));
  p.edge_ids = ad::iota_index(e);
  return p;
}

// Messages are linear in (h_j, geometry), so node-level and geometry-level
// projections are formed once and combined per edge:
//   m_ij W = h_j (W_hn W) + g_ij (W_d W_hg W)
ad::Tensor relational_layer(const ad::Tensor& h, const PreparedGraph& pg, const RelationalLayer& layer) {
  const RadiusGraph& g = *pg.graph;
  if (h.rows() != g.num_nodes) {
    throw DimensionError("relational_layer: " + std::to_string(h.rows()) + " embeddings for " +
                         std::to_string(g.num_nodes) + " nodes");
  }
  if (g.num_edges() == 0) return h;
  const std::size_t n = g.num_nodes;
  const bool pos = layer.options.pos_embed;

  ad::Tensor geo_msg;  // (dim + 1) x d_msg
  if (pos) geo_msg = ad::matmul(layer.w_geo, layer.w_msg_geo);

  ad::Tensor weights;
  if (layer.options.attention) {
    const ad::Tensor q = ad::matmul(h, layer.w_query);
    const ad::Tensor k_node = ad::matmul(h, ad::matmul(layer.w_msg_node, layer.w_key));
    ad::Tensor scores = ad::edge_dot(q, k_node, g.dst, g.src);
    if (pos) {
      const ad::Tensor q_geo = ad::matmul(q, ad::transpose(ad::matmul(geo_msg, layer.w_key)));
      scores = ad::add(scores, ad::edge_dot(q_geo, pg.geometry, g.dst, pg.edge_ids));
    }
    scores = ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(layer.w_query.cols())));
    weights = ad::segment_softmax(scores, g.dst, n);
  } else {
    weights = pg.uniform_weights;
  }

  const ad::Tensor v_node = ad::matmul(h, ad::matmul(layer.w_msg_node, layer.w_value));
  ad::Tensor agg = ad::spmm(weights, v_node, g.dst, g.src, n);
  if (pos) {
    const ad::Tensor pooled_geo = ad::spmm(weights, pg.geometry, g.dst, pg.edge_ids, n);
    agg = ad::add(agg, ad::matmul(pooled_geo, ad::matmul(geo_msg, layer.w_value)));
  }
  return ad::add(h, ad::relu(agg));
}

ad::Tensor propagate(const ad::Tensor& h, const PreparedGraph& g,
                     std::span<const RelationalLayer> layers) {
  ad::Tensor out = h;
  for (const auto& layer : layers) out = relational_layer(out, g, layer);
  return out;
}

}  // namespace ornet::graph
