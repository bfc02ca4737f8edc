#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ornet/model.hpp"

namespace ornet {

/// Flat experiment configuration. Files hold `key = value` lines; `#` starts a
/// comment; unknown keys are errors.
struct ExperimentConfig {
  std::string task = "regression1d";  // regression1d | mnist | celeba
  std::size_t batch_size = 32;
  double learning_rate = 0.001;
  double beta = 0.05;
  double gamma = 5.0;                     // image radius, see radius_mode
  std::string radius_mode = "pixels";     // pixels | fraction
  double gamma_1d = 0.5;                  // radius in x units for curves
  std::size_t n_layers = 2;
  std::size_t d_node = 128;
  std::size_t d_geo = 32;
  std::size_t d_msg = 128;
  std::size_t d_att = 128;
  std::size_t d_z = 64;
  std::size_t d_dec = 128;
  double sigma_min = 0.01;
  std::size_t max_context = 200;  // image training: |T|, and the upper bound of |C|
  std::size_t max_points_1d = 20;
  std::size_t min_context = 3;
  bool use_graph = true;
  bool use_attention = true;
  bool use_pos_embed = true;
  bool use_ib = true;
  double gp_lengthscale = 0.5;
  double gp_variance = 1.0;
  double gp_noise = 0.02;
  std::size_t image_size = 32;   // celeba resize target
  std::size_t image_limit = 0;   // celeba: 0 = all files
  bool fp32_master = true;

  // run control, excluded from the config hash
  std::uint64_t seed = 0;
  std::size_t steps = 10000;
  std::size_t checkpoint_every = 1000;
  std::size_t keep_checkpoints = 3;
  std::size_t log_every = 100;
  std::size_t eval_every = 1000;
  std::size_t eval_size = 64;
  std::string checkpoint_path = "runs/default";
  std::string data_dir;
  bool resume = true;
  bool log_wall_time = false;

  [[nodiscard]] bool is_image_task() const { return task != "regression1d"; }
  /// Radius in normalized input units for a grid of the given height.
  [[nodiscard]] double effective_gamma(std::size_t grid_height) const;
  [[nodiscard]] model::ModelConfig model_config(std::size_t x_dim, std::size_t y_dim,
                                                std::size_t grid_height) const;
  [[nodiscard]] data::GpParams gp() const { return {gp_lengthscale, gp_variance, gp_noise}; }
  /// Dataset root: data_dir, else $ORNET_DATA_DIR, else "data".
  [[nodiscard]] std::string resolved_data_dir() const;

  void set(std::string_view key, std::string_view value);
  [[nodiscard]] std::string get(std::string_view key) const;
  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

[[nodiscard]] std::vector<std::string> config_keys();
[[nodiscard]] bool is_run_control_key(std::string_view key);

ExperimentConfig parse_config(std::istream& is);
ExperimentConfig load_config(const std::string& path);
/// Applies "key=value".
void apply_override(ExperimentConfig& cfg, std::string_view assignment);

/// Every key as `key=value`, one per line, in declaration order.
[[nodiscard]] std::string config_text(const ExperimentConfig& cfg);
/// FNV-1a over the model and optimization keys (run-control keys excluded).
[[nodiscard]] std::uint64_t config_hash(const ExperimentConfig& cfg);
[[nodiscard]] std::string hash_hex(std::uint64_t h);

}  // namespace ornet
