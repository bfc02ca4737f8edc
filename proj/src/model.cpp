#include "ornet/model.hpp"

#include <cmath>

#include "ornet/errors.hpp"

namespace ornet::model {

namespace {

constexpr std::uint64_t kInitStream = 0x1A17;

ad::Tensor ones(std::size_t rows) { return ad::Tensor::filled(rows, 1, 1.0); }

void check_sets(std::span<const data::PointSet> sets, std::size_t x_dim, std::size_t y_dim) {
  if (sets.empty()) throw InputError("empty batch");
  for (const auto& s : sets) {
    if (s.context.empty()) throw InputError("point set has an empty context");
    if (s.target.empty()) throw InputError("point set has no targets");
    if (s.points.x_dim != x_dim || s.points.y_dim != y_dim) {
      throw DimensionError("point set has x_dim " + std::to_string(s.points.x_dim) + ", y_dim " +
                           std::to_string(s.points.y_dim) + "; model expects " +
                           std::to_string(x_dim) + ", " + std::to_string(y_dim));
    }
  }
}

}  // namespace

Gathered gather_subset(std::span<const data::PointSet> sets, Subset subset) {
  if (sets.empty()) throw InputError("empty batch");
  const std::size_t xd = sets.front().points.x_dim;
  const std::size_t yd = sets.front().points.y_dim;
  std::vector<double> xs;
  std::vector<double> ys;
  Gathered g;
  for (std::size_t b = 0; b < sets.size(); ++b) {
    const auto& s = sets[b];
    const auto& idx = subset == Subset::context ? s.context : s.target;
    if (idx.empty()) {
      throw InputError(std::string("point set has an empty ") +
                       (subset == Subset::context ? "context" : "target set"));
    }
    for (auto i : idx) {
      if (i >= s.points.size()) throw InputError("point index out of range");
      const auto x = s.points.x(i);
      const auto y = s.points.y(i);
      xs.insert(xs.end(), x.begin(), x.end());
      ys.insert(ys.end(), y.begin(), y.end());
      g.set.push_back(static_cast<std::uint32_t>(b));
    }
  }
  const std::size_t n = g.set.size();
  g.x = ad::Tensor::from(n, xd, std::move(xs));
  g.y = ad::Tensor::from(n, yd, std::move(ys));
  return g;
}

ad::Tensor ib_loss(const LatentDist& posterior, double beta) {
  if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
  if (beta == 0.0) return ad::Tensor::scalar(0.0);
  const std::size_t r = posterior.mu.rows();
  const std::size_t c = posterior.mu.cols();
  return ad::scale(ad::kl_diag_gaussians(posterior.mu, posterior.sigma, ad::Tensor::zeros(r, c),
                                         ad::Tensor::filled(r, c, 1.0)),
                   beta);
}

OrNet::OrNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  if (c.x_dim == 0 || c.y_dim == 0 || c.d_node == 0 || c.d_z == 0 || c.d_dec == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (c.use_graph && (c.n_layers == 0 || !(c.gamma > 0.0))) {
    throw ConfigError("graph encoder needs n_layers >= 1 and gamma > 0");
  }
  if (!(c.sigma_min > 0.0) || c.sigma_min >= 1.0) throw ConfigError("sigma_min must lie in (0, 1)");
  if (!(c.beta >= 0.0)) throw ConfigError("beta must be nonnegative");

  data::Rng rng = data::make_rng(seed, kInitStream);
  const std::size_t xy = c.x_dim + c.y_dim;
  ctx_embed_ = Mlp::create(store_, "ctx_embed", {xy, c.d_node, c.d_node}, rng);
  if (c.use_graph) {
    unknown_token_ = store_.add_weight("unknown_token", 1, c.y_dim, rng);
    tgt_embed_ = Mlp::create(store_, "tgt_embed", {xy, c.d_node, c.d_node}, rng);
    const graph::LayerDims dims{c.x_dim, c.d_node, c.d_geo, c.d_msg, c.d_att};
    const graph::LayerOptions opts{c.use_attention, c.use_pos_embed};
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      inner_.push_back(graph::RelationalLayer::create(store_, "inner." + std::to_string(l), dims, opts, rng));
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      cross_.push_back(graph::RelationalLayer::create(store_, "cross." + std::to_string(l), dims, opts, rng));
    }
  }
  latent_embed_ = Mlp::create(store_, "latent_embed", {xy, c.d_node, c.d_node}, rng);
  latent_head_ = Mlp::create(store_, "latent_head", {c.d_node, c.d_node, 2 * c.d_z}, rng);
  decoder_ = Mlp::create(store_, "decoder", {c.x_dim + c.d_node + c.d_z, c.d_dec, c.d_dec, 2 * c.y_dim}, rng);
}

ad::Tensor OrNet::encode_deterministic(std::span<const data::PointSet> sets) const {
  check_sets(sets, config_.x_dim, config_.y_dim);
  const std::size_t batch = sets.size();
  const Gathered ctx = gather_subset(sets, Subset::context);
  const Gathered tgt = gather_subset(sets, Subset::target);
  const ad::Tensor h_ctx0 = ctx_embed_(ad::concat_cols({ctx.x, ctx.y}));
  if (!config_.use_graph) {
    return ad::gather_rows(ad::segment_mean(h_ctx0, ctx.set, batch), tgt.set);
  }

  const std::size_t xd = config_.x_dim;
  std::vector<graph::RadiusGraph> inner_parts;
  std::vector<graph::RadiusGraph> joint_parts;
  ad::Index order;   // joint node -> row of [h_ctx; h_tgt]
  ad::Index tgt_pos;  // target row -> joint node
  const std::size_t n_ctx = ctx.set.size();
  std::size_t ctx_off = 0;
  std::size_t tgt_off = 0;
  std::size_t joint_off = 0;
  for (const auto& s : sets) {
    const std::size_t nc = s.context.size();
    const std::size_t nt = s.target.size();
    std::vector<double> coords;
    coords.reserve((nc + nt) * xd);
    for (auto i : s.context) coords.insert(coords.end(), s.points.x(i).begin(), s.points.x(i).end());
    const std::vector<graph::Role> ctx_roles(nc, graph::Role::context);
    inner_parts.push_back(graph::with_self_loops(
        graph::build_radius_graph(coords, xd, config_.gamma, ctx_roles), ctx_roles));

    for (auto i : s.target) coords.insert(coords.end(), s.points.x(i).begin(), s.points.x(i).end());
    std::vector<graph::Role> roles(nc + nt, graph::Role::target);
    std::fill(roles.begin(), roles.begin() + static_cast<std::ptrdiff_t>(nc), graph::Role::context);
    joint_parts.push_back(graph::with_self_loops(
        graph::build_radius_graph(coords, xd, config_.gamma, roles), roles));

    for (std::size_t k = 0; k < nc; ++k) order.push_back(static_cast<std::uint32_t>(ctx_off + k));
    for (std::size_t k = 0; k < nt; ++k) {
      order.push_back(static_cast<std::uint32_t>(n_ctx + tgt_off + k));
      tgt_pos.push_back(static_cast<std::uint32_t>(joint_off + nc + k));
    }
    ctx_off += nc;
    tgt_off += nt;
    joint_off += nc + nt;
  }
  const graph::RadiusGraph inner = graph::concat_graphs(inner_parts);
  const graph::RadiusGraph joint = graph::concat_graphs(joint_parts);

  const ad::Tensor h_ctx = graph::propagate(h_ctx0, graph::PreparedGraph::from(inner), inner_);
  const ad::Tensor token = ad::matmul(ones(tgt.set.size()), unknown_token_);
  const ad::Tensor h_tgt = tgt_embed_(ad::concat_cols({tgt.x, token}));
  const ad::Tensor h_joint =
      ad::gather_rows(ad::concat_rows(std::vector<ad::Tensor>{h_ctx, h_tgt}), order);
  const ad::Tensor out = graph::propagate(h_joint, graph::PreparedGraph::from(joint), cross_);
  return ad::gather_rows(out, tgt_pos);
}

LatentDist OrNet::encode_latent(std::span<const data::PointSet> sets, Subset subset) const {
  check_sets(sets, config_.x_dim, config_.y_dim);
  const Gathered g = gather_subset(sets, subset);
  const ad::Tensor e = latent_embed_(ad::concat_cols({g.x, g.y}));
  const ad::Tensor head = latent_head_(ad::segment_mean(e, g.set, sets.size()));
  const std::size_t dz = config_.d_z;
  const double lo = config_.sigma_min;
  return {ad::slice_cols(head, 0, dz),
          ad::add_scalar(ad::scale(ad::sigmoid(ad::slice_cols(head, dz, 2 * dz)), 1.0 - lo), lo)};
}

std::pair<ad::Tensor, ad::Tensor> OrNet::decode(const ad::Tensor& x, const ad::Tensor& r,
                                                const ad::Tensor& z) const {
  const ad::Tensor out = decoder_(ad::concat_cols({x, r, z}));
  const std::size_t yd = config_.y_dim;
  return {ad::slice_cols(out, 0, yd),
          ad::add_scalar(ad::softplus(ad::slice_cols(out, yd, 2 * yd)), config_.sigma_min)};
}

LossTerms OrNet::loss_impl(std::span<const data::PointSet> sets, data::Rng& rng, Mode mode,
                           bool with_ib) const {
  const ad::Tensor r = encode_deterministic(sets);
  const LatentDist prior = encode_latent(sets, Subset::context);
  const LatentDist post = encode_latent(sets, Subset::target);
  const Gathered tgt = gather_subset(sets, Subset::target);

  LossTerms out;
  if (mode == Mode::train) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> eps(post.mu.size());
    for (auto& v : eps) v = normal(rng);
    out.z = ad::reparameterize(post.mu, post.sigma,
                               ad::Tensor::from(post.mu.rows(), post.mu.cols(), std::move(eps)));
  } else {
    out.z = prior.mu;
  }
  auto [mu, sigma] = decode(tgt.x, r, ad::gather_rows(out.z, tgt.set));
  out.mu_y = mu;
  out.sigma_y = sigma;
  out.nll = ad::gaussian_nll(tgt.y, mu, sigma);
  out.kl = ad::kl_diag_gaussians(post.mu, post.sigma, prior.mu, prior.sigma);
  out.ib = with_ib && config_.use_ib ? ib_loss(post, config_.beta) : ad::Tensor::scalar(0.0);
  out.loss = ad::add(ad::add(out.nll, out.kl), out.ib);
  return out;
}

LossTerms OrNet::elbo_loss(std::span<const data::PointSet> sets, data::Rng& rng, Mode mode) const {
  return loss_impl(sets, rng, mode, false);
}

LossTerms OrNet::total_loss(std::span<const data::PointSet> sets, data::Rng& rng, Mode mode) const {
  return loss_impl(sets, rng, mode, true);
}

Prediction OrNet::predict(std::span<const data::PointSet> sets, std::size_t n_samples,
                          data::Rng* rng) const {
  const ad::Tensor r = encode_deterministic(sets);
  const LatentDist prior = encode_latent(sets, Subset::context);
  const Gathered tgt = gather_subset(sets, Subset::target);
  Prediction p;
  if (rng == nullptr) {
    auto [mu, sigma] = decode(tgt.x, r, ad::gather_rows(prior.mu, tgt.set));
    p.mean = mu;
    p.std = sigma;
    return p;
  }
  if (n_samples == 0) throw UsageError("sampled prediction needs n_samples >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = tgt.set.size();
  const std::size_t yd = config_.y_dim;
  std::vector<double> sum(n * yd, 0.0);
  std::vector<double> sum_sq(n * yd, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    std::vector<double> eps(prior.mu.size());
    for (auto& v : eps) v = normal(*rng);
    const ad::Tensor z = ad::reparameterize(
        prior.mu, prior.sigma, ad::Tensor::from(prior.mu.rows(), prior.mu.cols(), std::move(eps)));
    p.z_samples.push_back(z);
    auto [mu, sigma] = decode(tgt.x, r, ad::gather_rows(z, tgt.set));
    for (std::size_t k = 0; k < n * yd; ++k) {
      const double m = mu.data()[k];
      const double sd = sigma.data()[k];
      sum[k] += m;
      sum_sq[k] += sd * sd + m * m;
    }
  }
  const double inv = 1.0 / static_cast<double>(n_samples);
  std::vector<double> mean(n * yd);
  std::vector<double> sd(n * yd);
  for (std::size_t k = 0; k < n * yd; ++k) {
    mean[k] = sum[k] * inv;
    sd[k] = std::sqrt(std::max(sum_sq[k] * inv - mean[k] * mean[k], 0.0));
  }
  p.mean = ad::Tensor::from(n, yd, std::move(mean));
  p.std = ad::Tensor::from(n, yd, std::move(sd));
  return p;
}

}  // namespace ornet::model
