// ornet: data preparation, training, evaluation, ablation, sweeps and rendering.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ornet/config.hpp"
#include "ornet/errors.hpp"
#include "ornet/eval.hpp"
#include "ornet/trainer.hpp"

using namespace ornet;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool out = true) {
  cmd->add_option("--config", c.config_path, "Experiment config file (key = value lines)");
  cmd->add_option("--set", c.overrides, "Override a config key, KEY=VALUE (repeatable)")->take_all();
  cmd->add_option("--seed", c.seed, "Run seed");
  if (out) cmd->add_option("--out", c.out, "Output directory");
  cmd->add_flag("--force", c.force, "Load checkpoints whose config hash differs");
}

ExperimentConfig effective_config(const Common& c) {
  if (c.config_path.empty()) throw UsageError("--config is required");
  ExperimentConfig cfg = load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  std::istringstream text(config_text(cfg));
  for (std::string line; std::getline(text, line);) std::cout << "config " << line << '\n';
  std::cout << "config config_hash=" << hash_hex(config_hash(cfg)) << '\n' << std::flush;
  return cfg;
}

void add_config_meta(eval::EvalReport& report, const ExperimentConfig& cfg) {
  report.metadata.emplace_back("config_hash", hash_hex(config_hash(cfg)));
  std::istringstream text(config_text(cfg));
  for (std::string line; std::getline(text, line);) {
    const auto eq = line.find('=');
    report.metadata.emplace_back("config." + line.substr(0, eq), line.substr(eq + 1));
  }
}

fs::path resolve_checkpoint(const std::string& given, const ExperimentConfig& cfg) {
  if (!given.empty()) return given;
  if (auto latest = train::latest_checkpoint(cfg.checkpoint_path)) return *latest;
  throw IoError("no checkpoint in " + cfg.checkpoint_path + " (pass --checkpoint)");
}

std::unique_ptr<train::Trainer> load_model(const ExperimentConfig& cfg, const fs::path& ckpt, bool force) {
  auto tr = std::make_unique<train::Trainer>(cfg);
  tr->load_checkpoint(ckpt, force);
  std::cerr << "loaded " << ckpt.string() << " at step " << tr->step() << '\n';
  return tr;
}

std::string join(const auto& values) {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : values) {
    os << (first ? "" : ",") << v;
    first = false;
  }
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

// --- commands ------------------------------------------------------------------------------

int cmd_gen_data(const Common& c, std::size_t count) {
  ExperimentConfig cfg = effective_config(c);
  if (cfg.task == "regression1d") {
    const fs::path out = c.out.empty() ? fs::path(cfg.resolved_data_dir()) / "gp_curves.csv"
                                       : fs::path(c.out) / "gp_curves.csv";
    std::vector<data::FunctionSample> curves;
    for (std::size_t i = 0; i < count; ++i) {
      curves.push_back(data::sample_gp_curve(cfg.max_points_1d, cfg.gp(), data::mix_seed(cfg.seed, i)));
    }
    std::ostringstream os;
    data::write_curve_csv(os, curves);
    write_text_file(out, os.str());
    std::cout << "gen-data curves=" << count << " path=" << out.string() << '\n';
    return 0;
  }
  const train::TaskData data(cfg);
  std::cout << "gen-data task=" << cfg.task << " train=" << data.train_images().count
            << " test=" << data.test_images().count << " height=" << data.train_images().height
            << " width=" << data.train_images().width << " channels=" << data.train_images().channels
            << '\n';
  return 0;
}

int cmd_train(const Common& c) {
  ExperimentConfig cfg = effective_config(c);
  if (!c.out.empty()) cfg.checkpoint_path = c.out;
  const auto result = train::train_run(cfg, &std::cout, c.force);
  std::cout << "done steps_run=" << result.steps_run << " checkpoint=" << result.checkpoint.string()
            << " final_eval_mse=" << result.final_eval_mse << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::size_t> context;
  std::string mode = "random";
  std::vector<std::uint64_t> seeds{0};
  std::size_t images = 0;
  std::size_t knn = 0;
};

int cmd_eval(const Common& c, EvalArgs a) {
  const ExperimentConfig cfg = effective_config(c);
  eval::CompletionSpec spec;
  spec.mode = eval::parse_context_mode(a.mode);
  spec.seeds = a.seeds;
  if (a.context.empty()) {
    a.context = cfg.is_image_task() ? std::vector<std::size_t>{50, 100, 200, 400}
                                    : std::vector<std::size_t>{3, 5, 10, 20};
  }
  spec.context_counts = a.context;

  eval::EvalReport report;
  fs::path out_dir = c.out;
  std::string name;
  if (a.knn > 0) {
    if (!cfg.is_image_task()) throw UsageError("--knn needs an image task");
    const train::TaskData data(cfg);
    report = eval::knn_baseline(data.test_images(), spec, a.knn, a.images, &std::cerr);
    if (out_dir.empty()) out_dir = cfg.checkpoint_path;
    name = "knn" + std::to_string(a.knn) + "-" + a.mode + ".csv";
  } else {
    const fs::path ckpt = resolve_checkpoint(a.checkpoint, cfg);
    const auto tr = load_model(cfg, ckpt, c.force);
    if (cfg.is_image_task()) {
      report = eval::mse_completion(tr->model(), tr->data().test_images(), spec, a.images);
    } else {
      report = eval::curve_completion(tr->model(), tr->data(), a.images == 0 ? 200 : a.images, spec);
    }
    report.metadata.emplace_back("checkpoint", ckpt.filename().string());
    report.metadata.emplace_back("checkpoint_step", std::to_string(tr->step()));
    if (out_dir.empty()) out_dir = ckpt.parent_path();
    name = "eval-" + a.mode + ".csv";
  }
  add_config_meta(report, cfg);
  const fs::path path = out_dir / name;
  eval::save_report(path, report);
  for (const auto& r : report.rows) {
    std::cout << "eval context=" << r.context_count << " mode=" << eval::to_string(r.mode)
              << " mse_mean=" << r.mse_mean << " mse_std=" << r.mse_std << " n=" << r.n << '\n';
  }
  std::cout << "report " << path.string() << '\n';
  return 0;
}

struct SuiteArgs {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t images = 500;
  std::vector<double> gammas = eval::kSweepGammas;
  std::vector<std::size_t> layers = eval::kSweepLayers;
};

eval::SuiteOptions suite_options(const SuiteArgs& a, const ExperimentConfig& cfg) {
  eval::SuiteOptions o;
  o.seeds = a.seeds;
  o.eval_images = a.images;
  o.eval_seed = cfg.seed;
  return o;
}

int cmd_ablate(const Common& c, const SuiteArgs& a) {
  const ExperimentConfig cfg = effective_config(c);
  const fs::path root = c.out.empty() ? fs::path(cfg.checkpoint_path) : fs::path(c.out);
  const auto rows = eval::ablation_suite(cfg, root / "runs", suite_options(a, cfg), &std::cout);
  std::ostringstream os;
  eval::write_ablation_csv(os, rows);
  write_text_file(root / "ablation.csv", os.str());
  write_text_file(root / "ablation.csv.meta", config_text(cfg) + "config_hash=" +
                                                  hash_hex(config_hash(cfg)) + "\nseeds=" +
                                                  join(a.seeds) + "\n");
  std::cout << "report " << (root / "ablation.csv").string() << '\n';
  return 0;
}

int cmd_sweep(const Common& c, const SuiteArgs& a) {
  const ExperimentConfig cfg = effective_config(c);
  const fs::path root = c.out.empty() ? fs::path(cfg.checkpoint_path) : fs::path(c.out);
  const auto result =
      eval::gamma_layer_sweep(cfg, root / "runs", a.gammas, a.layers, suite_options(a, cfg), &std::cout);
  std::ostringstream os;
  eval::write_sweep_csv(os, result);
  write_text_file(root / "sweep.csv", os.str());
  write_text_file(root / "sweep.csv.meta", config_text(cfg) + "config_hash=" +
                                               hash_hex(config_hash(cfg)) + "\nseeds=" +
                                               std::to_string(a.seeds.front()) + "\n");
  std::cout << "sweep best_gamma=" << result.best.gamma << " best_n_layers=" << result.best.n_layers
            << " mse=" << result.best.mse << '\n';
  std::cout << "report " << (root / "sweep.csv").string() << '\n';
  return 0;
}

int cmd_complete(const Common& c, EvalArgs a, std::size_t index) {
  const ExperimentConfig cfg = effective_config(c);
  const fs::path ckpt = resolve_checkpoint(a.checkpoint, cfg);
  const auto tr = load_model(cfg, ckpt, c.force);
  const fs::path out = c.out.empty() ? ckpt.parent_path() / "complete" : fs::path(c.out);
  fs::create_directories(out);
  const auto mode = eval::parse_context_mode(a.mode);
  data::Rng rng = data::make_rng(cfg.seed, index);

  if (!cfg.is_image_task()) {
    if (a.context.empty()) a.context = {3, 5, 10, 20};
    const auto curve = eval::dump_curve(cfg.gp(), data::mix_seed(cfg.seed, index));
    for (const auto k : a.context) {
      const auto set = data::curve_context(curve, k, rng);
      std::ostringstream os;
      eval::regression_curve_dump(os, tr->model(), curve, set.context);
      const fs::path path = out / ("curve-" + std::to_string(index) + "-c" + std::to_string(k) + ".csv");
      write_text_file(path, os.str());
      std::cout << "wrote " << path.string() << '\n';
    }
    return 0;
  }

  const auto& test = tr->data().test_images();
  if (index >= test.count) throw UsageError("--index beyond the test split");
  if (a.context.empty()) a.context = {50, 100, 200, 400};
  const auto truth = data::image_to_points(test, index);
  for (const auto k : a.context) {
    std::vector<data::PointSet> sets{mode == eval::ContextMode::ordered ? data::ordered_context(truth, k)
                                                                        : data::random_context(truth, k, rng)};
    const auto pred = tr->model().predict(sets, 1);
    const fs::path path = out / ("image-" + std::to_string(index) + "-" + a.mode + "-c" + std::to_string(k) +
                                 (test.channels == 1 ? ".pgm" : ".ppm"));
    eval::render_completion(path, truth, test.height, test.width, sets[0].context, pred.mean.data(),
                            pred.std.data());
    std::cout << "wrote " << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ornet: omni-relational network for data completion"};
  app.require_subcommand(1);

  Common common;
  EvalArgs ev;
  SuiteArgs suite;
  std::size_t count = 1000;
  std::size_t index = 0;

  auto* gen = app.add_subcommand("gen-data", "Write GP curve caches or verify image datasets");
  add_common(gen, common);
  gen->add_option("--count", count, "Number of curves to write");

  auto* train_cmd = app.add_subcommand("train", "Train (or resume) a run");
  add_common(train_cmd, common);

  auto* eval_cmd = app.add_subcommand("eval", "MSE versus context count on held-out data");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file (default: newest in checkpoint_path)");
  eval_cmd->add_option("--context", ev.context, "Context counts, comma separated")->delimiter(',');
  eval_cmd->add_option("--mode", ev.mode, "random | ordered")->check(CLI::IsMember({"random", "ordered"}));
  eval_cmd->add_option("--seeds", ev.seeds, "Context sampling seeds")->delimiter(',');
  eval_cmd->add_option("--images", ev.images, "Evaluate the first N test items (0 = all)");
  eval_cmd->add_option("--knn", ev.knn, "Score the k-nearest-neighbor baseline instead of a model");

  auto* ablate = app.add_subcommand("ablate", "Train and score the six ablation configurations");
  add_common(ablate, common);
  ablate->add_option("--seeds", suite.seeds, "Training seeds")->delimiter(',');
  ablate->add_option("--images", suite.images, "Test images per evaluation");

  auto* sweep = app.add_subcommand("sweep", "Radius and layer-count grid");
  add_common(sweep, common);
  sweep->add_option("--gammas", suite.gammas, "Radii")->delimiter(',');
  sweep->add_option("--layers", suite.layers, "Layer counts")->delimiter(',');
  sweep->add_option("--images", suite.images, "Test images per evaluation");

  auto* complete = app.add_subcommand("complete", "Render completions or dump regression curves");
  add_common(complete, common);
  complete->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  complete->add_option("--context", ev.context, "Context counts, comma separated")->delimiter(',');
  complete->add_option("--mode", ev.mode, "random | ordered")->check(CLI::IsMember({"random", "ordered"}));
  complete->add_option("--index", index, "Test image index or curve seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(common, count);
    if (*train_cmd) return cmd_train(common);
    if (*eval_cmd) return cmd_eval(common, ev);
    if (*ablate) return cmd_ablate(common, suite);
    if (*sweep) {
      if (common.seed) suite.seeds = {*common.seed};
      return cmd_sweep(common, suite);
    }
    if (*complete) return cmd_complete(common, ev, index);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n' << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
