#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ornet/config.hpp"
#include "ornet/datagen.hpp"
#include "ornet/model.hpp"
#include "ornet/trainer.hpp"

namespace ornet::eval {

enum class ContextMode { random, ordered };
std::string to_string(ContextMode m);
ContextMode parse_context_mode(std::string_view s);

struct ReportRow {
  std::size_t context_count = 0;
  ContextMode mode = ContextMode::random;
  double mse_mean = 0.0;
  double mse_std = 0.0;  // over seeds; 0 for a single run
  std::size_t n = 0;     // evaluated items per seed
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<std::pair<std::string, std::string>> metadata;  // checkpoint, config_hash, seeds, ...
};

/// `context_count,mode,mse_mean,mse_std,n` plus one row per setting.
void write_report_csv(std::ostream& os, const EvalReport& report);
/// Metadata as key=value lines.
void write_report_meta(std::ostream& os, const EvalReport& report);
/// Writes path and path.meta.
void save_report(const std::filesystem::path& path, const EvalReport& report);

/// Predicted means for the targets of every set, concatenated (sum|T| x y_dim, row-major).
using Predictor = std::function<std::vector<double>(std::span<const data::PointSet>)>;

/// Deterministic model predictions (z = context posterior mean).
Predictor model_predictor(const model::OrNet& net);
/// Mean of the k nearest context values per target; k is clamped to |C|.
Predictor knn_predictor(std::size_t k, std::ostream* warnings = nullptr);

/// One target's kNN estimate. Neighbors are ranked by (distance, index).
std::vector<double> knn_predict(const data::PointSet& set, std::size_t k);

/// Mean squared error of the predictions over every target and channel.
double set_mse(const data::PointSet& set, std::span<const double> prediction);

struct CompletionSpec {
  std::vector<std::size_t> context_counts;
  ContextMode mode = ContextMode::random;
  std::vector<std::uint64_t> seeds{0};  // context sampling seeds (random mode)
  std::size_t chunk = 8;                // sets per predictor call
};

/// Full-grid completion: for every item and count, draw the context, predict
/// every point and average the per-item MSE. Ordered mode ignores the seeds.
EvalReport completion_report(const Predictor& predict,
                             const std::function<data::FunctionSample(std::size_t)>& item,
                             std::size_t n_items, const CompletionSpec& spec);

/// Test images (first `limit`, 0 = all) under the model or kNN.
EvalReport mse_completion(const model::OrNet& net, const data::ImageDataset& test,
                          const CompletionSpec& spec, std::size_t limit = 0);
EvalReport knn_baseline(const data::ImageDataset& test, const CompletionSpec& spec, std::size_t k = 3,
                        std::size_t limit = 0, std::ostream* warnings = nullptr);
/// Held-out 1-D curves (random context only).
EvalReport curve_completion(const model::OrNet& net, const train::TaskData& data,
                            std::size_t n_curves, const CompletionSpec& spec);

/// Run directory for a config: root/<config hash>-s<seed>. Identical
/// configs share a directory and so share training.
std::filesystem::path run_dir(const std::filesystem::path& root, const ExperimentConfig& cfg);

/// Trains (or resumes) the run and loads its final checkpoint.
std::unique_ptr<train::Trainer> trained(ExperimentConfig cfg, const std::filesystem::path& root,
                                        std::shared_ptr<const train::TaskData> data,
                                        std::ostream* progress);

struct AblationRow {
  std::string name;
  bool graph = false;
  bool attention = false;
  bool pos_embed = false;
  bool ib = false;
  std::vector<double> mse;  // one per seed
  double mse_mean = 0.0;
  double mse_std = 0.0;
};

/// The six switch combinations of the ablation table, all-off first.
std::vector<AblationRow> ablation_rows();

struct SuiteOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double context_fraction = 0.1;
  std::size_t eval_images = 500;
  std::uint64_t eval_seed = 0;
};

/// Trains every ablation row for every seed and scores it on test images at
/// the given context fraction.
std::vector<AblationRow> ablation_suite(const ExperimentConfig& base, const std::filesystem::path& root,
                                        const SuiteOptions& opts, std::ostream* progress = nullptr);
void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows);

struct SweepCell {
  double gamma = 0;
  std::size_t n_layers = 0;
  double mse = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // gamma-major
  SweepCell best;
};

inline const std::vector<double> kSweepGammas{1, 2, 3, 5, 8, 12, 16, 32};
inline const std::vector<std::size_t> kSweepLayers{1, 2, 3};

/// One training run (seed = opts.seeds[0]) per (gamma, layers) cell.
SweepResult gamma_layer_sweep(const ExperimentConfig& base, const std::filesystem::path& root,
                              std::span<const double> gammas, std::span<const std::size_t> layers,
                              const SuiteOptions& opts, std::ostream* progress = nullptr);
void write_sweep_csv(std::ostream& os, const SweepResult& result);

// --- figures -------------------------------------------------------------------------

constexpr std::size_t kSeparator = 2;

struct Pnm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

void write_pnm(const std::filesystem::path& path, const Pnm& image);
Pnm read_pnm(const std::filesystem::path& path);

/// [context only | predicted mean | predictive std | ground truth] with
/// kSeparator-pixel black gaps. Values in [0,1] map to round(v*255).
Pnm completion_strip(const data::FunctionSample& truth, std::size_t height, std::size_t width,
                     std::span<const std::uint32_t> context, std::span<const double> mean,
                     std::span<const double> std);
void render_completion(const std::filesystem::path& path, const data::FunctionSample& truth,
                       std::size_t height, std::size_t width, std::span<const std::uint32_t> context,
                       std::span<const double> mean, std::span<const double> std);

constexpr std::size_t kDumpGridPoints = 200;

/// kDumpGridPoints inputs evenly spaced inside (-2, 2) with a GP draw on them.
data::FunctionSample dump_curve(const data::GpParams& gp, std::uint64_t seed);

/// CSV `x,y_true,y_pred_mean,y_pred_std,is_context` over every point of the curve.
void regression_curve_dump(std::ostream& os, const model::OrNet& net, const data::FunctionSample& curve,
                           std::span<const std::uint32_t> context);

}  // namespace ornet::eval
