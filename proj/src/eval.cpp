#include "ornet/eval.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "ornet/errors.hpp"

namespace ornet::eval {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::string to_string(ContextMode m) { return m == ContextMode::random ? "random" : "ordered"; }

ContextMode parse_context_mode(std::string_view s) {
  if (s == "random") return ContextMode::random;
  if (s == "ordered") return ContextMode::ordered;
  throw ConfigError("mode must be random or ordered, got '" + std::string(s) + "'");
}

// --- reports ---------------------------------------------------------------------------

void write_report_csv(std::ostream& os, const EvalReport& report) {
  os << "context_count,mode,mse_mean,mse_std,n\n";
  for (const auto& r : report.rows) {
    os << r.context_count << ',' << to_string(r.mode) << ',' << fmt(r.mse_mean) << ','
       << fmt(r.mse_std) << ',' << r.n << '\n';
  }
}

void write_report_meta(std::ostream& os, const EvalReport& report) {
  for (const auto& [k, v] : report.metadata) os << k << '=' << v << '\n';
}

void save_report(const fs::path& path, const EvalReport& report) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream csv(path);
  fs::path meta_path = path;
  meta_path += ".meta";
  std::ofstream meta(meta_path);
  if (!csv || !meta) throw IoError("cannot write report " + path.string());
  write_report_csv(csv, report);
  write_report_meta(meta, report);
  if (!csv || !meta) throw IoError("write failed for " + path.string());
}

// --- predictors ------------------------------------------------------------------------

Predictor model_predictor(const model::OrNet& net) {
  return [&net](std::span<const data::PointSet> sets) {
    const auto pred = net.predict(sets, 1);
    return std::vector<double>(pred.mean.data().begin(), pred.mean.data().end());
  };
}

std::vector<double> knn_predict(const data::PointSet& set, std::size_t k) {
  if (k == 0) throw ConfigError("knn needs k >= 1");
  set.validate();
  const auto& pts = set.points;
  const std::size_t yd = pts.y_dim;
  k = std::min(k, set.context.size());
  std::vector<std::pair<double, std::uint32_t>> ranked(set.context.size());
  std::vector<double> out;
  out.reserve(set.target.size() * yd);
  for (auto t : set.target) {
    const auto xt = pts.x(t);
    for (std::size_t c = 0; c < set.context.size(); ++c) {
      const auto xc = pts.x(set.context[c]);
      double d2 = 0.0;
      for (std::size_t a = 0; a < pts.x_dim; ++a) d2 += (xt[a] - xc[a]) * (xt[a] - xc[a]);
      ranked[c] = {std::sqrt(d2), set.context[c]};
    }
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end());
    for (std::size_t ch = 0; ch < yd; ++ch) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += pts.y(ranked[j].second)[ch];
      out.push_back(s / static_cast<double>(k));
    }
  }
  return out;
}

Predictor knn_predictor(std::size_t k, std::ostream* warnings) {
  if (k == 0) throw ConfigError("knn needs k >= 1");
  return [k, warnings, warned = false](std::span<const data::PointSet> sets) mutable {
    std::vector<double> out;
    for (const auto& s : sets) {
      if (k > s.context.size() && warnings != nullptr && !warned) {
        *warnings << "warning: knn k=" << k << " exceeds the context size " << s.context.size()
                  << "; clamping\n";
        warned = true;
      }
      const auto p = knn_predict(s, k);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  };
}

double set_mse(const data::PointSet& set, std::span<const double> prediction) {
  const std::size_t yd = set.points.y_dim;
  if (prediction.size() != set.target.size() * yd) {
    throw DimensionError("prediction has " + std::to_string(prediction.size()) + " values, expected " +
                         std::to_string(set.target.size() * yd));
  }
  double se = 0.0;
  std::size_t k = 0;
  for (auto t : set.target) {
    for (double y : set.points.y(t)) {
      const double d = prediction[k++] - y;
      se += d * d;
    }
  }
  return se / static_cast<double>(prediction.size());
}

// --- completion protocol ------------------------------------------------------------------

EvalReport completion_report(const Predictor& predict,
                             const std::function<data::FunctionSample(std::size_t)>& item,
                             std::size_t n_items, const CompletionSpec& spec) {
  if (n_items == 0) throw InputError("nothing to evaluate");
  if (spec.context_counts.empty()) throw InputError("no context counts given");
  if (spec.mode == ContextMode::random && spec.seeds.empty()) throw InputError("no seeds given");
  const std::vector<std::uint64_t> seeds =
      spec.mode == ContextMode::ordered ? std::vector<std::uint64_t>{0} : spec.seeds;
  const std::size_t chunk = std::max<std::size_t>(spec.chunk, 1);

  EvalReport report;
  for (const std::size_t count : spec.context_counts) {
    std::vector<double> per_seed;
    for (const auto seed : seeds) {
      double total = 0.0;
      for (std::size_t begin = 0; begin < n_items; begin += chunk) {
        std::vector<data::PointSet> sets;
        for (std::size_t i = begin; i < std::min(n_items, begin + chunk); ++i) {
          data::FunctionSample points = item(i);
          if (count > points.size()) {
            throw InputError("context count " + std::to_string(count) + " exceeds the " +
                             std::to_string(points.size()) + " points per item");
          }
          if (spec.mode == ContextMode::ordered) {
            sets.push_back(data::ordered_context(points, count));
          } else {
            data::Rng rng = data::make_rng(data::mix_seed(seed, count), i);
            sets.push_back(data::random_context(points, count, rng));
          }
        }
        const auto pred = predict(sets);
        std::size_t offset = 0;
        for (const auto& s : sets) {
          const std::size_t len = s.target.size() * s.points.y_dim;
          if (offset + len > pred.size()) throw DimensionError("predictor returned too few values");
          total += set_mse(s, std::span<const double>(pred).subspan(offset, len));
          offset += len;
        }
      }
      per_seed.push_back(total / static_cast<double>(n_items));
    }
    const auto [mean, sd] = mean_std(per_seed);
    report.rows.push_back({count, spec.mode, mean, sd, n_items});
  }
  std::string seed_list;
  for (const auto s : seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  report.metadata.emplace_back("mode", to_string(spec.mode));
  report.metadata.emplace_back("seeds", seed_list);
  report.metadata.emplace_back("items", std::to_string(n_items));
  return report;
}

EvalReport mse_completion(const model::OrNet& net, const data::ImageDataset& test,
                          const CompletionSpec& spec, std::size_t limit) {
  const std::size_t n = limit == 0 ? test.count : std::min(limit, test.count);
  return completion_report(
      model_predictor(net), [&](std::size_t i) { return data::image_to_points(test, i); }, n, spec);
}

EvalReport knn_baseline(const data::ImageDataset& test, const CompletionSpec& spec, std::size_t k,
                        std::size_t limit, std::ostream* warnings) {
  const std::size_t n = limit == 0 ? test.count : std::min(limit, test.count);
  auto report = completion_report(
      knn_predictor(k, warnings), [&](std::size_t i) { return data::image_to_points(test, i); }, n,
      spec);
  report.metadata.emplace_back("knn_k", std::to_string(k));
  return report;
}

EvalReport curve_completion(const model::OrNet& net, const train::TaskData& data, std::size_t n_curves,
                            const CompletionSpec& spec) {
  if (spec.mode != ContextMode::random) throw InputError("curves support random context only");
  return completion_report(
      model_predictor(net), [&](std::size_t i) { return data.test_curve(i); }, n_curves, spec);
}

// --- training suites -----------------------------------------------------------------------

fs::path run_dir(const fs::path& root, const ExperimentConfig& cfg) {
  return root / (hash_hex(config_hash(cfg)) + "-n" + std::to_string(cfg.steps) + "-s" +
                 std::to_string(cfg.seed));
}

std::unique_ptr<train::Trainer> trained(ExperimentConfig cfg, const fs::path& root,
                                        std::shared_ptr<const train::TaskData> data,
                                        std::ostream* progress) {
  cfg.checkpoint_path = run_dir(root, cfg).string();
  cfg.resume = true;
  const auto result = train::train_run(cfg, progress, false, data);
  auto tr = std::make_unique<train::Trainer>(cfg, std::move(data));
  tr->load_checkpoint(result.checkpoint);
  return tr;
}

std::vector<AblationRow> ablation_rows() {
  return {
      {"none", false, false, false, false, {}, 0, 0},
      {"graph", true, false, false, false, {}, 0, 0},
      {"graph+ib", true, false, false, true, {}, 0, 0},
      {"graph+pe+ib", true, false, true, true, {}, 0, 0},
      {"graph+att+ib", true, true, false, true, {}, 0, 0},
      {"all", true, true, true, true, {}, 0, 0},
  };
}

namespace {

double fraction_mse(const train::Trainer& tr, const SuiteOptions& opts) {
  const auto& test = tr.data().test_images();
  const std::size_t k = static_cast<std::size_t>(
      std::lround(opts.context_fraction * static_cast<double>(test.height * test.width)));
  CompletionSpec spec;
  spec.context_counts = {std::max<std::size_t>(k, 1)};
  spec.seeds = {opts.eval_seed};
  return mse_completion(tr.model(), test, spec, opts.eval_images).rows.front().mse_mean;
}

}  // namespace

std::vector<AblationRow> ablation_suite(const ExperimentConfig& base, const fs::path& root,
                                        const SuiteOptions& opts, std::ostream* progress) {
  if (!base.is_image_task()) throw ConfigError("the ablation suite runs on an image task");
  const auto data = std::make_shared<const train::TaskData>(base);
  auto rows = ablation_rows();
  for (auto& row : rows) {
    for (const auto seed : opts.seeds) {
      ExperimentConfig cfg = base;
      cfg.use_graph = row.graph;
      cfg.use_attention = row.attention;
      cfg.use_pos_embed = row.pos_embed;
      cfg.use_ib = row.ib;
      cfg.seed = seed;
      const auto tr = trained(cfg, root, data, nullptr);
      row.mse.push_back(fraction_mse(*tr, opts));
      if (progress != nullptr) {
        *progress << "ablate row=" << row.name << " seed=" << seed << " mse=" << fmt(row.mse.back())
                  << '\n'
                  << std::flush;
      }
    }
    std::tie(row.mse_mean, row.mse_std) = mean_std(row.mse);
  }
  return rows;
}

void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "name,graph,attention,pos_embed,ib,mse_mean,mse_std,n_seeds\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.graph << ',' << r.attention << ',' << r.pos_embed << ',' << r.ib << ','
       << fmt(r.mse_mean) << ',' << fmt(r.mse_std) << ',' << r.mse.size() << '\n';
  }
}

SweepResult gamma_layer_sweep(const ExperimentConfig& base, const fs::path& root,
                              std::span<const double> gammas, std::span<const std::size_t> layers,
                              const SuiteOptions& opts, std::ostream* progress) {
  if (!base.is_image_task()) throw ConfigError("the sweep runs on an image task");
  if (gammas.empty() || layers.empty() || opts.seeds.empty()) throw InputError("empty sweep grid");
  const auto data = std::make_shared<const train::TaskData>(base);
  SweepResult result;
  for (const double g : gammas) {
    for (const std::size_t l : layers) {
      ExperimentConfig cfg = base;
      cfg.gamma = g;
      cfg.n_layers = l;
      cfg.seed = opts.seeds.front();
      const auto tr = trained(cfg, root, data, nullptr);
      result.cells.push_back({g, l, fraction_mse(*tr, opts)});
      if (progress != nullptr) {
        *progress << "sweep gamma=" << fmt(g) << " n_layers=" << l
                  << " mse=" << fmt(result.cells.back().mse) << '\n'
                  << std::flush;
      }
    }
  }
  result.best = *std::min_element(result.cells.begin(), result.cells.end(),
                                  [](const SweepCell& a, const SweepCell& b) { return a.mse < b.mse; });
  return result;
}

void write_sweep_csv(std::ostream& os, const SweepResult& result) {
  os << "gamma,n_layers,mse\n";
  for (const auto& c : result.cells) os << fmt(c.gamma) << ',' << c.n_layers << ',' << fmt(c.mse) << '\n';
}

// --- figures -----------------------------------------------------------------------------------

void write_pnm(const fs::path& path, const Pnm& image) {
  if (image.channels != 1 && image.channels != 3) throw InputError("PNM needs 1 or 3 channels");
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw DimensionError("PNM pixel buffer does not match its size");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Pnm read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    int c = in.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      } else if (std::isspace(c) != 0) {
        if (!t.empty()) break;
      } else {
        t.push_back(static_cast<char>(c));
      }
      c = in.get();
    }
    return t;
  };
  Pnm img;
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError(path.string() + ": not a binary PGM/PPM");
  img.channels = magic == "P5" ? 1 : 3;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed header");
  }
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) {
    throw LengthError(path.string() + ": truncated pixel data");
  }
  return img;
}

Pnm completion_strip(const data::FunctionSample& truth, std::size_t height, std::size_t width,
                     std::span<const std::uint32_t> context, std::span<const double> mean,
                     std::span<const double> std) {
  const std::size_t ch = truth.y_dim;
  const std::size_t n = height * width;
  if (truth.size() != n || mean.size() != n * ch || std.size() != n * ch) {
    throw DimensionError("completion strip needs full-grid truth, mean and std");
  }
  if (ch != 1 && ch != 3) throw InputError("completion strip needs 1 or 3 channels");
  std::vector<double> ctx(n * ch, 0.0);
  for (auto c : context) {
    if (c >= n) throw InputError("context index out of range");
    std::copy_n(truth.ys.begin() + static_cast<std::ptrdiff_t>(c * ch), ch,
                ctx.begin() + static_cast<std::ptrdiff_t>(c * ch));
  }
  const std::span<const double> panels[4] = {ctx, mean, std, truth.ys};
  Pnm img;
  img.channels = ch;
  img.height = height;
  img.width = 4 * width + 3 * kSeparator;
  img.pixels.assign(img.width * img.height * ch, 0);
  for (std::size_t p = 0; p < 4; ++p) {
    const std::size_t x0 = p * (width + kSeparator);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        for (std::size_t k = 0; k < ch; ++k) {
          img.pixels[(r * img.width + x0 + c) * ch + k] = quantize(panels[p][(r * width + c) * ch + k]);
        }
      }
    }
  }
  return img;
}

void render_completion(const fs::path& path, const data::FunctionSample& truth, std::size_t height,
                       std::size_t width, std::span<const std::uint32_t> context,
                       std::span<const double> mean, std::span<const double> std) {
  write_pnm(path, completion_strip(truth, height, width, context, mean, std));
}

data::FunctionSample dump_curve(const data::GpParams& gp, std::uint64_t seed) {
  std::vector<double> xs(kDumpGridPoints);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = -2.0 + 4.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(kDumpGridPoints);
  }
  data::Rng rng = data::make_rng(seed);
  return data::sample_gp_at(xs, gp, rng);
}

void regression_curve_dump(std::ostream& os, const model::OrNet& net, const data::FunctionSample& curve,
                           std::span<const std::uint32_t> context) {
  if (curve.x_dim != 1 || curve.y_dim != 1) throw InputError("curve dump needs a 1-D curve");
  std::vector<data::PointSet> sets(1);
  sets[0].points = curve;
  sets[0].context.assign(context.begin(), context.end());
  sets[0].target = ad::iota_index(curve.size());
  sets[0].validate();
  const auto pred = net.predict(sets, 1);
  std::vector<bool> is_ctx(curve.size(), false);
  for (auto c : context) is_ctx[c] = true;
  os << "x,y_true,y_pred_mean,y_pred_std,is_context\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    os << fmt(curve.xs[i]) << ',' << fmt(curve.ys[i]) << ',' << fmt(pred.mean.at(i, 0)) << ','
       << fmt(pred.std.at(i, 0)) << ',' << (is_ctx[i] ? 1 : 0) << '\n';
  }
}

}  // namespace ornet::eval
