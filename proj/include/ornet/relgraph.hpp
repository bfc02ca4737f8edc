#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ornet/autodiff.hpp"
#include "ornet/params.hpp"

namespace ornet::graph {

enum class Role : std::uint8_t { context, target };

/// Directed edges src -> dst, sorted by (dst, src). Only context nodes send;
/// every node may receive. Geometry per edge is [x_src - x_dst per axis, distance].
struct RadiusGraph {
  std::size_t num_nodes = 0;
  std::size_t dim = 0;
  ad::Index dst;
  ad::Index src;
  std::vector<double> geometry;     // num_edges x (dim + 1), row-major
  std::vector<std::size_t> offsets;  // CSR by dst, num_nodes + 1 entries

  [[nodiscard]] std::size_t num_edges() const { return dst.size(); }
  [[nodiscard]] std::size_t geometry_width() const { return dim + 1; }
  [[nodiscard]] std::span<const double> edge_geometry(std::size_t e) const {
    return {geometry.data() + e * geometry_width(), geometry_width()};
  }
  /// Senders of node i in ascending order.
  [[nodiscard]] std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return {src.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
};

/// Radius graph over n points stored row-major in `coords` (n x dim, dim <= 3).
/// Edge j -> i iff i != j, roles[j] is context and |x_i - x_j| <= gamma.
RadiusGraph build_radius_graph(std::span<const double> coords, std::size_t dim, double gamma,
                               std::span<const Role> roles);

/// Adds a zero-geometry self edge to every context node that already has at
/// least one neighbor. Isolated nodes and target nodes get none.
RadiusGraph with_self_loops(const RadiusGraph& g, std::span<const Role> roles);

/// Several graphs side by side; node ids of part k are shifted by the node
/// counts of parts 0..k-1.
RadiusGraph concat_graphs(std::span<const RadiusGraph> parts);

struct LayerOptions {
  bool attention = true;
  bool pos_embed = true;
};

struct LayerDims {
  std::size_t coord_dim = 2;
  std::size_t d_node = 128;
  std::size_t d_geo = 32;
  std::size_t d_msg = 128;
  std::size_t d_att = 128;
};

/// One attentive message-passing layer. Disabled features leave their
/// matrices undefined, so they never enter the parameter store.
struct RelationalLayer {
  ad::Tensor w_geo;       // (dim + 1) x d_geo
  ad::Tensor w_msg_node;  // d_node x d_msg, node block of the message matrix
  ad::Tensor w_msg_geo;   // d_geo x d_msg, geometry block of the message matrix
  ad::Tensor w_query;     // d_node x d_att
  ad::Tensor w_key;       // d_msg x d_att
  ad::Tensor w_value;     // d_msg x d_node
  LayerOptions options;

  static RelationalLayer create(ParameterStore& store, const std::string& name,
                                const LayerDims& dims, LayerOptions options,
                                std::mt19937_64& rng);
};

// Per-edge reference forms. The batched layer below computes the same thing.

/// r_ij = geometry W_d, a 1 x d_geo row.
ad::Tensor geometric_embedding(std::span<const double> geometry, const ad::Tensor& w_geo);
/// m_ij = [h_j, r_ij] W_h. With positional embedding off r_ij is omitted.
ad::Tensor compute_message(const ad::Tensor& h_j, const ad::Tensor& r_ij,
                           const RelationalLayer& layer);
/// Attention weights of node i over its k messages (k x d_msg), a 1 x k row.
ad::Tensor attention_coefficients(const ad::Tensor& h_i, const ad::Tensor& messages,
                                  const RelationalLayer& layer);
/// h_i + relu(sum_j a_ij m_ij W_a); h_i itself when there are no messages.
ad::Tensor attention_aggregate(const ad::Tensor& h_i, const ad::Tensor& messages,
                               const RelationalLayer& layer);

/// Graph plus constant tensors reused by every layer that runs on it.
struct PreparedGraph {
  const RadiusGraph* graph = nullptr;
  ad::Tensor geometry;         // E x (dim + 1)
  ad::Tensor uniform_weights;  // E x 1, 1 / in-degree of dst
  ad::Index edge_ids;          // 0..E-1

  static PreparedGraph from(const RadiusGraph& g);
};

/// Updates all node embeddings h (num_nodes x d_node) at once.
ad::Tensor relational_layer(const ad::Tensor& h, const PreparedGraph& g, const RelationalLayer& layer);

/// Runs the layers in sequence. The inner pass uses the context graph, the
/// cross pass the joint context and target graph.
ad::Tensor propagate(const ad::Tensor& h, const PreparedGraph& g,
                     std::span<const RelationalLayer> layers);

}  // namespace ornet::graph
