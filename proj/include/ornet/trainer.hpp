#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ornet/config.hpp"
#include "ornet/datagen.hpp"
#include "ornet/model.hpp"
#include "ornet/params.hpp"

namespace ornet::train {

// Independent random streams derived from the run seed.
enum class Stream : std::uint64_t { batch = 1, noise = 2, eval = 3, test_curves = 4 };
std::uint64_t stream_seed(std::uint64_t seed, Stream s);

/// Number of points on each held-out evaluation curve.
constexpr std::size_t kEvalCurvePoints = 100;

/// Training and held-out data for one task.
class TaskData {
 public:
  explicit TaskData(const ExperimentConfig& cfg);

  [[nodiscard]] std::size_t x_dim() const { return is_image_ ? 2 : 1; }
  [[nodiscard]] std::size_t y_dim() const { return is_image_ ? train_.channels : 1; }
  /// Image height, 0 for curves.
  [[nodiscard]] std::size_t grid_height() const { return is_image_ ? train_.height : 0; }
  [[nodiscard]] bool is_image() const { return is_image_; }
  [[nodiscard]] const data::ImageDataset& train_images() const { return train_; }
  [[nodiscard]] const data::ImageDataset& test_images() const { return test_; }

  /// Training sets for the step-th update; a pure function of (seed, step).
  [[nodiscard]] std::vector<data::PointSet> training_batch(std::uint64_t seed, std::uint64_t step) const;
  /// i-th curve of the fixed held-out set (1-D tasks); independent of the run seed.
  [[nodiscard]] data::FunctionSample test_curve(std::size_t i) const;

 private:
  ExperimentConfig cfg_;
  bool is_image_ = false;
  data::ImageDataset train_;
  data::ImageDataset test_;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter from its gradient. With
/// fp32 set, parameters and moments are rounded to float after the update.
void adam_update(ParameterStore& params, AdamState& state, double lr, bool fp32);
void round_to_float(ParameterStore& params);

// Checkpoint file: "ORNT", u32 version, u64 config hash, u64 step, u32 record
// count, then per record u32 name length, name, u32 rank, u32 dims..., float32
// payload. Little-endian throughout.
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct CheckpointData {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<CheckpointRecord> records;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg, std::shared_ptr<const TaskData> data = nullptr);

  [[nodiscard]] const ExperimentConfig& config() const { return cfg_; }
  [[nodiscard]] model::OrNet& model() { return *model_; }
  [[nodiscard]] const model::OrNet& model() const { return *model_; }
  [[nodiscard]] AdamState& optimizer() { return adam_; }
  [[nodiscard]] const TaskData& data() const { return *data_; }
  [[nodiscard]] std::uint64_t step() const { return adam_.step; }

  /// Forward, backward and one Adam update; returns the pre-update loss and
  /// leaves gradients cleared.
  double train_step(std::span<const data::PointSet> batch);
  /// Held-out MSE of the predictive mean over eval_size sets with 10% (images)
  /// or 10 points (curves) of context.
  [[nodiscard]] double eval_mse() const;

  [[nodiscard]] CheckpointData snapshot() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, moments and step. A config hash mismatch is a
  /// ConfigError unless force is set.
  void load_checkpoint(const std::filesystem::path& path, bool force = false);

 private:
  ExperimentConfig cfg_;
  std::shared_ptr<const TaskData> data_;
  std::unique_ptr<model::OrNet> model_;
  AdamState adam_;
};

struct RunResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::uint64_t steps_run = 0;
  double final_loss = 0.0;
  double final_eval_mse = 0.0;
};

/// Trains to cfg.steps, resuming from the newest checkpoint in
/// cfg.checkpoint_path when cfg.resume is set. Writes run.meta, metrics.csv
/// and ckpt-<step>.ornt files (plus .meta sidecars) into that directory.
RunResult train_run(const ExperimentConfig& cfg, std::ostream* progress = nullptr,
                    bool force = false, std::shared_ptr<const TaskData> data = nullptr);

/// Newest ckpt-*.ornt in dir, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);
std::string checkpoint_name(std::uint64_t step);

}  // namespace ornet::train
