#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ornet/autodiff.hpp"
#include "ornet/datagen.hpp"
#include "ornet/params.hpp"
#include "ornet/relgraph.hpp"

namespace ornet::model {

struct ModelConfig {
  std::size_t x_dim = 2;
  std::size_t y_dim = 1;
  std::size_t d_node = 128;
  std::size_t d_geo = 32;
  std::size_t d_msg = 128;
  std::size_t d_att = 128;
  std::size_t d_z = 64;
  std::size_t d_dec = 128;
  std::size_t n_layers = 2;
  double gamma = 5.0 / 27.0;  // in input coordinate units
  double sigma_min = 0.01;
  double beta = 0.05;
  bool use_graph = true;
  bool use_attention = true;
  bool use_pos_embed = true;
  bool use_ib = true;
};

struct LatentDist {
  ad::Tensor mu;     // B x d_z
  ad::Tensor sigma;  // B x d_z
};

enum class Subset { context, target };
enum class Mode { train, eval };

struct LossTerms {
  ad::Tensor loss;  // nll + kl + ib
  ad::Tensor nll;
  ad::Tensor kl;
  ad::Tensor ib;
  ad::Tensor mu_y;     // sum|T| x y_dim, targets of set 0 first
  ad::Tensor sigma_y;
  ad::Tensor z;        // B x d_z, the z that was decoded
};

struct Prediction {
  ad::Tensor mean;  // sum|T| x y_dim
  ad::Tensor std;
  std::vector<ad::Tensor> z_samples;
};

/// beta KL(q || N(0, I)), averaged over rows.
ad::Tensor ib_loss(const LatentDist& posterior, double beta);

class OrNet {
 public:
  OrNet(const ModelConfig& config, std::uint64_t seed);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] ParameterStore& params() { return store_; }
  [[nodiscard]] const ParameterStore& params() const { return store_; }

  /// One r-feature per target, rows ordered set by set.
  [[nodiscard]] ad::Tensor encode_deterministic(std::span<const data::PointSet> sets) const;
  /// Mean-pooled summary of the chosen subset mapped to (mu_z, sigma_z), one row per set.
  [[nodiscard]] LatentDist encode_latent(std::span<const data::PointSet> sets, Subset subset) const;
  /// x (n x x_dim), r (n x d_node), z (n x d_z) -> (mu_y, sigma_y).
  [[nodiscard]] std::pair<ad::Tensor, ad::Tensor> decode(const ad::Tensor& x, const ad::Tensor& r,
                                                         const ad::Tensor& z) const;

  /// Reconstruction NLL + KL(q_T || q_C); ib is zero here. Train mode samples
  /// z from q_T, eval mode uses the mean of q_C.
  [[nodiscard]] LossTerms elbo_loss(std::span<const data::PointSet> sets, data::Rng& rng,
                                    Mode mode) const;
  /// elbo_loss plus the information bottleneck term (zero when use_ib is off).
  [[nodiscard]] LossTerms total_loss(std::span<const data::PointSet> sets, data::Rng& rng,
                                     Mode mode) const;
  /// Without rng: deterministic with z = mean of q_C, n_samples ignored.
  /// With rng: averages over n_samples draws z ~ q_C; std is that of the
  /// Gaussian mixture.
  [[nodiscard]] Prediction predict(std::span<const data::PointSet> sets, std::size_t n_samples,
                                   data::Rng* rng = nullptr) const;

 private:
  LossTerms loss_impl(std::span<const data::PointSet> sets, data::Rng& rng, Mode mode,
                      bool with_ib) const;

  ModelConfig config_;
  ParameterStore store_;
  Mlp ctx_embed_;
  Mlp tgt_embed_;
  ad::Tensor unknown_token_;
  std::vector<graph::RelationalLayer> inner_;
  std::vector<graph::RelationalLayer> cross_;
  Mlp latent_embed_;
  Mlp latent_head_;
  Mlp decoder_;
};

/// Rows of the chosen subset stacked over sets: x, y and the owning set index.
struct Gathered {
  ad::Tensor x;
  ad::Tensor y;
  ad::Index set;
};
Gathered gather_subset(std::span<const data::PointSet> sets, Subset subset);

}  // namespace ornet::model
