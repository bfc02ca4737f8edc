#pragma once

// Point-set data for completion tasks: Gaussian-process curves, image grids,
// and the context/target sampling regimes used for training and evaluation.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "ornet/autodiff.hpp"

namespace ornet::data {

using Rng = std::mt19937_64;

/// Independent stream `stream` of a base seed (splitmix64 mixing).
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// One realization of a function: n points with x in R^x_dim, y in R^y_dim,
/// stored row-major.
struct FunctionSample {
  std::size_t x_dim = 1;
  std::size_t y_dim = 1;
  std::vector<double> xs;
  std::vector<double> ys;

  [[nodiscard]] std::size_t size() const { return x_dim == 0 ? 0 : xs.size() / x_dim; }
  [[nodiscard]] std::span<const double> x(std::size_t i) const {
    return {xs.data() + i * x_dim, x_dim};
  }
  [[nodiscard]] std::span<const double> y(std::size_t i) const {
    return {ys.data() + i * y_dim, y_dim};
  }
};

/// A realization plus the context subset C and target subset T (C is a subset of T).
struct PointSet {
  FunctionSample points;
  ad::Index context;
  ad::Index target;

  /// Throws InputError unless |C| >= 1, C is a subset of T, and indices are in range.
  void validate() const;
};

enum class Split { train, test };

/// Images scaled to [0,1], stored as count x height x width x channels.
struct ImageDataset {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;
  std::vector<std::uint8_t> labels;
  Split split = Split::train;

  [[nodiscard]] std::size_t image_size() const { return height * width * channels; }
  [[nodiscard]] std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }
};

// --- Gaussian-process curves --------------------------------------------------------

struct GpParams {
  double lengthscale = 0.5;
  double variance = 1.0;
  double noise = 0.02;  // added to the kernel diagonal
};

double se_kernel(double a, double b, const GpParams& gp);

/// Draws y jointly from N(0, K + noise I) at the given inputs.
FunctionSample sample_gp_at(std::span<const double> xs, const GpParams& gp, Rng& rng);

/// n_points inputs uniform in (-2, 2) with jointly Gaussian outputs.
FunctionSample sample_gp_curve(std::size_t n_points, const GpParams& gp, std::uint64_t seed);

/// Context/target split for curve training: |C| ~ U{min_context..max_points},
/// |T| = |C| + U{0..max_points-|C|}, drawn without replacement.
PointSet sample_context_target_1d(const FunctionSample& curve, Rng& rng,
                                  std::size_t min_context = 3, std::size_t max_points = 20);

/// `n_context` random points as context; every point of the curve is a target.
PointSet curve_context(const FunctionSample& curve, std::size_t n_context, Rng& rng);

// --- images ---------------------------------------------------------------------------

/// One point per pixel, x = (row/(H-1), col/(W-1)), y = channel intensities.
FunctionSample image_to_points(const ImageDataset& data, std::size_t index);

/// Training regime: |C| ~ U{min_context..max_points}, T = C plus random
/// extra pixels until |T| = max_points.
PointSet sample_context_target_image(const FunctionSample& image, std::size_t max_points, Rng& rng,
                                     std::size_t min_context = 3);

/// Evaluation regime: k random context pixels, the full grid as targets.
PointSet random_context(const FunctionSample& image, std::size_t k, Rng& rng);

/// First k pixels in row-major order from the top-left corner; full grid targets.
PointSet ordered_context(const FunctionSample& image, std::size_t k);

// --- file formats ------------------------------------------------------------------------

constexpr std::uint32_t kIdxImageMagic = 2051;
constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Parses an IDX image file (and optionally its label file); bytes are scaled by 1/255.
ImageDataset load_mnist_idx(const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path, Split split);
ImageDataset load_mnist_split(const std::filesystem::path& dir, Split split);

/// Re-serializes pixels as an IDX image file (values quantized to round(v*255)).
void write_idx_images(const std::filesystem::path& path, const ImageDataset& data);
void write_idx_labels(const std::filesystem::path& path, const ImageDataset& data);

/// Every readable image in `dir` (sorted by file name): center crop to
/// crop x crop, area-resize to size x size, RGB in [0,1].
ImageDataset load_rgb_directory(const std::filesystem::path& dir, Split split,
                                std::size_t limit = 0, std::size_t crop = 128,
                                std::size_t size = 32);

/// Curve cache: CSV with header `x,y,curve_id`, one row per point (1-D curves only).
void write_curve_csv(std::ostream& os, std::span<const FunctionSample> curves);
std::vector<FunctionSample> read_curve_csv(std::istream& is);

}  // namespace ornet::data
