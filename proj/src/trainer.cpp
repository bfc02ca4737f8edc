#include "ornet/trainer.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>

#include "ornet/errors.hpp"

namespace ornet::train {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'O', 'R', 'N', 'T'};
// Fixed seed of the held-out curve split.
constexpr std::uint64_t kTestCurveSeed = 0x7E57C0DE;
constexpr std::size_t kEvalChunk = 16;
constexpr std::size_t kEvalCurveContext = 10;

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

fs::path image_root(const ExperimentConfig& cfg, const char* sub) {
  const fs::path base = cfg.resolved_data_dir();
  return fs::exists(base / sub) ? base / sub : base;
}

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(const std::vector<char>& buf, std::size_t& pos, const fs::path& path) {
  if (buf.size() < pos + sizeof(T)) throw LengthError(path.string() + ": truncated checkpoint");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

std::vector<float> to_float(std::span<const double> v) {
  std::vector<float> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return static_cast<float>(x); });
  return out;
}

void round_vector(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, Stream s) {
  return data::mix_seed(seed, 0x5EED0000ULL + static_cast<std::uint64_t>(s));
}

// --- data ----------------------------------------------------------------------------

TaskData::TaskData(const ExperimentConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  if (cfg.task == "mnist") {
    is_image_ = true;
    const fs::path dir = image_root(cfg, "mnist");
    train_ = data::load_mnist_split(dir, data::Split::train);
    test_ = data::load_mnist_split(dir, data::Split::test);
  } else if (cfg.task == "celeba") {
    is_image_ = true;
    const fs::path dir = image_root(cfg, "celeba");
    train_ = data::load_rgb_directory(dir / "train", data::Split::train, cfg.image_limit, 128,
                                      cfg.image_size);
    test_ = data::load_rgb_directory(dir / "test", data::Split::test, cfg.image_limit, 128,
                                     cfg.image_size);
  }
  if (is_image_ && cfg.max_context > train_.height * train_.width) {
    throw ConfigError("max_context " + std::to_string(cfg.max_context) + " exceeds the " +
                      std::to_string(train_.height * train_.width) + " pixels per image");
  }
}

std::vector<data::PointSet> TaskData::training_batch(std::uint64_t seed, std::uint64_t step) const {
  data::Rng rng = data::make_rng(stream_seed(seed, Stream::batch), step);
  std::vector<data::PointSet> sets;
  sets.reserve(cfg_.batch_size);
  for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
    if (is_image_) {
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, train_.count - 1)(rng);
      sets.push_back(data::sample_context_target_image(data::image_to_points(train_, idx),
                                                       cfg_.max_context, rng, cfg_.min_context));
    } else {
      const auto curve = data::sample_gp_curve(cfg_.max_points_1d, cfg_.gp(), rng());
      sets.push_back(data::sample_context_target_1d(curve, rng, cfg_.min_context, cfg_.max_points_1d));
    }
  }
  return sets;
}

data::FunctionSample TaskData::test_curve(std::size_t i) const {
  return data::sample_gp_curve(kEvalCurvePoints, cfg_.gp(), data::mix_seed(kTestCurveSeed, i));
}

// --- optimizer ---------------------------------------------------------------------------

void adam_update(ParameterStore& params, AdamState& state, double lr, bool fp32) {
  const auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.size(), 0.0);
      state.v.emplace_back(t.size(), 0.0);
    }
  }
  if (state.m.size() != entries.size()) throw UsageError("optimizer state does not match parameters");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    ad::Tensor p = entries[k].second;
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto grad = p.grad();
    auto value = p.mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
    }
    if (fp32) {
      for (auto& x : value) x = static_cast<double>(static_cast<float>(x));
      round_vector(m);
      round_vector(v);
    }
  }
}

void round_to_float(ParameterStore& params) {
  for (const auto& [name, t] : params.entries()) {
    ad::Tensor p = t;
    for (auto& x : p.mutable_data()) x = static_cast<double>(static_cast<float>(x));
  }
}

// --- checkpoint files ------------------------------------------------------------------------

void write_checkpoint(const fs::path& path, const CheckpointData& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, data.config_hash);
  put<std::uint64_t>(os, data.step);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.records.size()));
  for (const auto& r : data.records) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put<std::uint32_t>(os, d);
    os.write(reinterpret_cast<const char*>(r.values.data()),
             static_cast<std::streamsize>(r.values.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

CheckpointData read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<char> buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(buf, pos, path);
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  }
  CheckpointData data;
  data.config_hash = take<std::uint64_t>(buf, pos, path);
  data.step = take<std::uint64_t>(buf, pos, path);
  const auto count = take<std::uint32_t>(buf, pos, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointRecord r;
    const auto len = take<std::uint32_t>(buf, pos, path);
    if (buf.size() < pos + len) throw LengthError(path.string() + ": truncated record name");
    r.name.assign(buf.data() + pos, len);
    pos += len;
    const auto rank = take<std::uint32_t>(buf, pos, path);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.dims.push_back(take<std::uint32_t>(buf, pos, path));
      n *= r.dims.back();
    }
    if (buf.size() < pos + n * sizeof(float)) {
      throw LengthError(path.string() + ": truncated payload of " + r.name);
    }
    r.values.resize(n);
    std::memcpy(r.values.data(), buf.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    data.records.push_back(std::move(r));
  }
  if (pos != buf.size()) throw FormatError(path.string() + ": trailing bytes after last record");
  return data;
}

// --- trainer -----------------------------------------------------------------------------------

Trainer::Trainer(const ExperimentConfig& cfg, std::shared_ptr<const TaskData> data)
    : cfg_(cfg), data_(std::move(data)) {
  cfg_.validate();
  if (!data_) data_ = std::make_shared<TaskData>(cfg_);
  model_ = std::make_unique<model::OrNet>(
      cfg_.model_config(data_->x_dim(), data_->y_dim(), data_->grid_height()), cfg_.seed);
  if (cfg_.fp32_master) round_to_float(model_->params());
}

double Trainer::train_step(std::span<const data::PointSet> batch) {
  auto& params = model_->params();
  params.zero_grad();
  data::Rng noise = data::make_rng(stream_seed(cfg_.seed, Stream::noise), adam_.step);
  double loss = 0.0;
  try {
    ad::Tape tape;
    const auto terms = model_->total_loss(batch, noise, model::Mode::train);
    loss = terms.loss.item();
    tape.backward(terms.loss);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(adam_.step + 1) +
                       " (batch seed " + std::to_string(cfg_.seed) + ", stream step " +
                       std::to_string(adam_.step) + ")");
  }
  adam_update(params, adam_, cfg_.learning_rate, cfg_.fp32_master);
  params.zero_grad();
  return loss;
}

double Trainer::eval_mse() const {
  std::vector<data::PointSet> sets;
  for (std::size_t i = 0; i < cfg_.eval_size; ++i) {
    data::Rng rng = data::make_rng(stream_seed(cfg_.seed, Stream::eval), i);
    if (data_->is_image()) {
      const auto& test = data_->test_images();
      const std::size_t pixels = test.height * test.width;
      const auto k = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(pixels)));
      sets.push_back(data::random_context(data::image_to_points(test, i % test.count), k, rng));
    } else {
      sets.push_back(data::curve_context(data_->test_curve(i), kEvalCurveContext, rng));
    }
  }
  double total = 0.0;
  for (std::size_t begin = 0; begin < sets.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(sets.size(), begin + kEvalChunk);
    const std::span<const data::PointSet> chunk(sets.data() + begin, end - begin);
    const auto pred = model_->predict(chunk, 1);
    std::size_t row = 0;
    for (const auto& s : chunk) {
      const std::size_t yd = s.points.y_dim;
      double se = 0.0;
      for (auto t : s.target) {
        for (std::size_t c = 0; c < yd; ++c) {
          const double d = pred.mean.at(row, c) - s.points.y(t)[c];
          se += d * d;
        }
        ++row;
      }
      total += se / static_cast<double>(s.target.size() * yd);
    }
  }
  return total / static_cast<double>(sets.size());
}

CheckpointData Trainer::snapshot() const {
  CheckpointData data;
  data.config_hash = config_hash(cfg_);
  data.step = adam_.step;
  const auto& entries = model_->params().entries();
  auto dims = [](const ad::Tensor& t) {
    return std::vector<std::uint32_t>{static_cast<std::uint32_t>(t.rows()),
                                      static_cast<std::uint32_t>(t.cols())};
  };
  for (const auto& [name, t] : entries) data.records.push_back({name, dims(t), to_float(t.data())});
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& t = entries[k].second;
    const std::vector<double> zeros(t.size(), 0.0);
    data.records.push_back({"adam.m." + entries[k].first, dims(t),
                            to_float(adam_.m.empty() ? zeros : adam_.m[k])});
    data.records.push_back({"adam.v." + entries[k].first, dims(t),
                            to_float(adam_.v.empty() ? zeros : adam_.v[k])});
  }
  return data;
}

void Trainer::save_checkpoint(const fs::path& path) const { write_checkpoint(path, snapshot()); }

void Trainer::load_checkpoint(const fs::path& path, bool force) {
  const CheckpointData data = read_checkpoint(path);
  const std::uint64_t expected = config_hash(cfg_);
  if (data.config_hash != expected && !force) {
    throw ConfigError(path.string() + ": config hash " + hash_hex(data.config_hash) +
                      " does not match " + hash_hex(expected) + " (use --force to override)");
  }
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : data.records) by_name[r.name] = &r;
  const auto& entries = model_->params().entries();
  if (data.records.size() != 3 * entries.size()) {
    throw FormatError(path.string() + ": " + std::to_string(data.records.size()) +
                      " records, model expects " + std::to_string(3 * entries.size()));
  }
  auto fetch = [&](const std::string& name, const ad::Tensor& like) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing record " + name);
    const auto& r = *it->second;
    if (r.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(like.rows()),
                                             static_cast<std::uint32_t>(like.cols())}) {
      throw DimensionError(path.string() + ": record " + name + " has the wrong shape for [" +
                           std::to_string(like.rows()) + "x" + std::to_string(like.cols()) + "]");
    }
    return std::vector<double>(r.values.begin(), r.values.end());
  };
  AdamState restored;
  restored.step = data.step;
  std::vector<std::vector<double>> values;
  for (const auto& [name, t] : entries) {
    values.push_back(fetch(name, t));
    restored.m.push_back(fetch("adam.m." + name, t));
    restored.v.push_back(fetch("adam.v." + name, t));
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    ad::Tensor p = entries[k].second;
    std::copy(values[k].begin(), values[k].end(), p.mutable_data().begin());
  }
  adam_ = std::move(restored);
}

// --- runs ----------------------------------------------------------------------------------------

std::string checkpoint_name(std::uint64_t step) {
  std::string digits = std::to_string(step);
  if (digits.size() < 8) digits.insert(0, 8 - digits.size(), '0');
  return "ckpt-" + digits + ".ornt";
}

namespace {

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("ckpt-", 0) == 0 && e.path().extension() == ".ornt") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void remove_checkpoint(const fs::path& p) {
  fs::remove(p);
  fs::path meta = p;
  meta += ".meta";
  fs::remove(meta);
}

std::string meta_text(const ExperimentConfig& cfg, const std::string& checkpoint) {
  std::ostringstream os;
  os << config_text(cfg) << "config_hash=" << hash_hex(config_hash(cfg)) << "\n";
  if (!checkpoint.empty()) os << "checkpoint=" << checkpoint << "\n";
  os << "seeds=" << cfg.seed << "\n";
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

// Keeps the header and rows up to `step`.
std::string truncated_metrics(const fs::path& path, std::uint64_t step) {
  std::ifstream in(path);
  std::string out = "step,loss,eval_mse,wall_time_s\n";
  if (!in) return out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::uint64_t s = 0;
    std::from_chars(line.data(), line.data() + line.size(), s);
    if (s <= step) out += line + "\n";
  }
  return out;
}

}  // namespace

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  const auto all = list_checkpoints(dir);
  if (all.empty()) return std::nullopt;
  return all.back();
}

RunResult train_run(const ExperimentConfig& cfg, std::ostream* progress, bool force,
                    std::shared_ptr<const TaskData> data) {
  cfg.validate();
  const fs::path dir = cfg.checkpoint_path;
  try {
    fs::create_directories(dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create checkpoint directory " + dir.string() + ": " + e.what());
  }
  {
    const fs::path probe = dir / ".write_probe";
    std::ofstream os(probe);
    if (!os) throw IoError("checkpoint directory " + dir.string() + " is not writable");
    os.close();
    fs::remove(probe);
  }

  Trainer trainer(cfg, std::move(data));
  const fs::path metrics_path = dir / "metrics.csv";
  std::string metrics = "step,loss,eval_mse,wall_time_s\n";
  if (cfg.resume) {
    if (const auto latest = latest_checkpoint(dir)) {
      trainer.load_checkpoint(*latest, force);
      metrics = truncated_metrics(metrics_path, trainer.step());
    }
  } else {
    for (const auto& p : list_checkpoints(dir)) remove_checkpoint(p);
  }
  write_text(dir / "run.meta", meta_text(cfg, ""));

  std::ofstream log(metrics_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + metrics_path.string());
  log << metrics << std::flush;

  RunResult result;
  result.metrics = metrics_path;
  const auto start = std::chrono::steady_clock::now();
  auto save = [&](std::uint64_t step) {
    const fs::path p = dir / checkpoint_name(step);
    trainer.save_checkpoint(p);
    fs::path meta = p;
    meta += ".meta";
    write_text(meta, meta_text(cfg, p.filename().string()));
    auto all = list_checkpoints(dir);
    while (all.size() > cfg.keep_checkpoints) {
      remove_checkpoint(all.front());
      all.erase(all.begin());
    }
    result.checkpoint = p;
  };

  const std::uint64_t total = cfg.steps;
  bool evaluated = false;
  for (std::uint64_t step = trainer.step() + 1; step <= total; ++step) {
    const auto batch = trainer.data().training_batch(cfg.seed, step - 1);
    const double loss = trainer.train_step(batch);
    ++result.steps_run;
    result.final_loss = loss;
    const bool last = step == total;
    const bool do_eval = step % cfg.eval_every == 0;
    if (step % cfg.log_every == 0 || do_eval) {
      std::string eval_field;
      if (do_eval) {
        result.final_eval_mse = trainer.eval_mse();
        eval_field = fmt(result.final_eval_mse);
        evaluated = last;
      }
      const double wall =
          cfg.log_wall_time
              ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
              : 0.0;
      log << step << ',' << fmt(loss) << ',' << eval_field << ',' << fmt(wall) << '\n' << std::flush;
      if (progress != nullptr) {
        *progress << "step=" << step << " loss=" << fmt(loss);
        if (do_eval) *progress << " eval_mse=" << eval_field;
        *progress << '\n' << std::flush;
      }
    }
    if (step % cfg.checkpoint_every == 0 || last) save(step);
  }
  if (result.steps_run == 0) {
    // already complete: keep the newest checkpoint, or write one for a zero-step run
    if (const auto latest = latest_checkpoint(dir)) {
      result.checkpoint = *latest;
    } else {
      save(trainer.step());
    }
  }
  if (!evaluated) result.final_eval_mse = trainer.eval_mse();
  return result;
}

}  // namespace ornet::train
