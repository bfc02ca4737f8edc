#include "ornet/datagen.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "ornet/errors.hpp"

namespace ornet::data {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

void PointSet::validate() const {
  const std::size_t n = points.size();
  if (context.empty()) throw InputError("point set has an empty context");
  if (target.size() < context.size()) throw InputError("point set has fewer targets than context");
  std::vector<char> in_target(n, 0);
  for (auto t : target) {
    if (t >= n) throw InputError("target index out of range");
    in_target[t] = 1;
  }
  for (auto c : context) {
    if (c >= n) throw InputError("context index out of range");
    if (!in_target[c]) throw InputError("context point " + std::to_string(c) + " is not a target");
  }
}

namespace {

// First k entries of a uniformly random permutation of 0..n-1.
ad::Index draw_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  ad::Index pool = ad::iota_index(n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

std::size_t uniform_count(std::size_t lo, std::size_t hi, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

// --- Gaussian-process curves ------------------------------------------------------------

double se_kernel(double a, double b, const GpParams& gp) {
  const double d = a - b;
  return gp.variance * std::exp(-d * d / (2.0 * gp.lengthscale * gp.lengthscale));
}

FunctionSample sample_gp_at(std::span<const double> xs, const GpParams& gp, Rng& rng) {
  if (!(gp.lengthscale > 0.0) || !(gp.variance > 0.0) || gp.noise < 0.0) {
    throw ConfigError("GP hyperparameters need lengthscale > 0, variance > 0, noise >= 0");
  }
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = se_kernel(xs[i], xs[j], gp);
  k.diagonal().array() += gp.noise;

  // Attempt 1 without jitter, then 1e-6 and 1e-5 on the diagonal.
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  bool ok = false;
  for (int attempt = 0; attempt < 3 && !ok; ++attempt) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    llt.compute(kj);
    ok = llt.info() == Eigen::Success;
    jitter = jitter == 0.0 ? 1e-6 : jitter * 10.0;
  }
  if (!ok) throw NumericError("GP covariance is not positive definite after 3 jitter attempts");

  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd eps(n);
  for (Eigen::Index i = 0; i < n; ++i) eps(i) = normal(rng);
  const Eigen::VectorXd y = llt.matrixL() * eps;

  FunctionSample out;
  out.x_dim = 1;
  out.y_dim = 1;
  out.xs.assign(xs.begin(), xs.end());
  out.ys.assign(y.data(), y.data() + n);
  return out;
}

FunctionSample sample_gp_curve(std::size_t n_points, const GpParams& gp, std::uint64_t seed) {
  if (n_points < 2) throw InputError("a GP curve needs at least 2 points");
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  std::vector<double> xs(n_points);
  for (auto& x : xs) {
    do {
      x = ux(rng);
    } while (x == -2.0);
  }
  return sample_gp_at(xs, gp, rng);
}

PointSet sample_context_target_1d(const FunctionSample& curve, Rng& rng, std::size_t min_context,
                                  std::size_t max_points) {
  if (curve.size() < max_points) {
    throw InputError("curve has " + std::to_string(curve.size()) + " points, need " +
                     std::to_string(max_points));
  }
  const std::size_t n_context = uniform_count(min_context, max_points, rng);
  const std::size_t n_target = n_context + uniform_count(0, max_points - n_context, rng);
  PointSet ps;
  ps.points = curve;
  ps.target = draw_without_replacement(curve.size(), n_target, rng);
  ps.context.assign(ps.target.begin(), ps.target.begin() + static_cast<std::ptrdiff_t>(n_context));
  return ps;
}

PointSet curve_context(const FunctionSample& curve, std::size_t n_context, Rng& rng) {
  if (n_context == 0 || n_context > curve.size()) {
    throw InputError("context count " + std::to_string(n_context) + " invalid for " +
                     std::to_string(curve.size()) + " points");
  }
  PointSet ps;
  ps.points = curve;
  ps.context = draw_without_replacement(curve.size(), n_context, rng);
  ps.target = ad::iota_index(curve.size());
  return ps;
}

// --- images ---------------------------------------------------------------------------------

FunctionSample image_to_points(const ImageDataset& data, std::size_t index) {
  if (index >= data.count) throw InputError("image index out of range");
  const std::size_t h = data.height;
  const std::size_t w = data.width;
  const std::size_t c = data.channels;
  FunctionSample out;
  out.x_dim = 2;
  out.y_dim = c;
  out.xs.resize(h * w * 2);
  const auto pixels = data.image(index);
  out.ys.assign(pixels.begin(), pixels.end());
  const double sy = h > 1 ? 1.0 / static_cast<double>(h - 1) : 0.0;
  const double sx = w > 1 ? 1.0 / static_cast<double>(w - 1) : 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      const std::size_t i = r * w + col;
      out.xs[2 * i] = static_cast<double>(r) * sy;
      out.xs[2 * i + 1] = static_cast<double>(col) * sx;
    }
  }
  return out;
}

PointSet sample_context_target_image(const FunctionSample& image, std::size_t max_points, Rng& rng,
                                     std::size_t min_context) {
  const std::size_t n = image.size();
  if (max_points > n) {
    throw InputError("max_points " + std::to_string(max_points) + " exceeds " +
                     std::to_string(n) + " pixels");
  }
  if (min_context < 1 || min_context > max_points) {
    throw InputError("min_context must lie in [1, max_points]");
  }
  const std::size_t n_context = uniform_count(min_context, max_points, rng);
  PointSet ps;
  ps.points = image;
  ps.target = draw_without_replacement(n, max_points, rng);
  ps.context.assign(ps.target.begin(), ps.target.begin() + static_cast<std::ptrdiff_t>(n_context));
  return ps;
}

PointSet random_context(const FunctionSample& image, std::size_t k, Rng& rng) {
  const std::size_t n = image.size();
  if (k == 0 || k > n) {
    throw InputError("context count " + std::to_string(k) + " exceeds " + std::to_string(n) +
                     " pixels");
  }
  PointSet ps;
  ps.points = image;
  ps.context = draw_without_replacement(n, k, rng);
  ps.target = ad::iota_index(n);
  return ps;
}

PointSet ordered_context(const FunctionSample& image, std::size_t k) {
  const std::size_t n = image.size();
  if (k == 0 || k > n) {
    throw InputError("context count " + std::to_string(k) + " exceeds " + std::to_string(n) +
                     " pixels");
  }
  PointSet ps;
  ps.points = image;
  ps.context = ad::iota_index(k);
  ps.target = ad::iota_index(n);
  return ps;
}

// --- curve cache ------------------------------------------------------------------------------

void write_curve_csv(std::ostream& os, std::span<const FunctionSample> curves) {
  os << "x,y,curve_id\n";
  os.precision(17);
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto& curve = curves[c];
    if (curve.x_dim != 1 || curve.y_dim != 1) throw InputError("curve cache holds 1-D curves only");
    for (std::size_t i = 0; i < curve.size(); ++i) {
      os << curve.xs[i] << ',' << curve.ys[i] << ',' << c << '\n';
    }
  }
}

std::vector<FunctionSample> read_curve_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "x,y,curve_id") {
    throw FormatError("curve cache: expected header 'x,y,curve_id'");
  }
  std::vector<FunctionSample> curves;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    double x = 0.0;
    double y = 0.0;
    std::size_t id = 0;
    char c1 = 0;
    char c2 = 0;
    if (!(row >> x >> c1 >> y >> c2 >> id) || c1 != ',' || c2 != ',') {
      throw FormatError("curve cache: malformed row " + std::to_string(line_no));
    }
    if (id > curves.size()) throw FormatError("curve cache: curve ids must be contiguous");
    if (id == curves.size()) curves.emplace_back();
    curves[id].xs.push_back(x);
    curves[id].ys.push_back(y);
  }
  return curves;
}

}  // namespace ornet::data
