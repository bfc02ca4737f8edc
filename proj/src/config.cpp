#include "ornet/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <sstream>
#include <variant>

#include "ornet/errors.hpp"

namespace ornet {

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed is stored through a size_t member");

using Member = std::variant<std::string ExperimentConfig::*, std::size_t ExperimentConfig::*,
                            double ExperimentConfig::*, bool ExperimentConfig::*>;

struct Field {
  const char* key;
  Member member;
  bool run_control;
};

// Declaration order; fixes config_text and the hash input.
const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> f{
      {"task", &C::task, false},
      {"batch_size", &C::batch_size, false},
      {"learning_rate", &C::learning_rate, false},
      {"beta", &C::beta, false},
      {"gamma", &C::gamma, false},
      {"radius_mode", &C::radius_mode, false},
      {"gamma_1d", &C::gamma_1d, false},
      {"n_layers", &C::n_layers, false},
      {"d_node", &C::d_node, false},
      {"d_geo", &C::d_geo, false},
      {"d_msg", &C::d_msg, false},
      {"d_att", &C::d_att, false},
      {"d_z", &C::d_z, false},
      {"d_dec", &C::d_dec, false},
      {"sigma_min", &C::sigma_min, false},
      {"max_context", &C::max_context, false},
      {"max_points_1d", &C::max_points_1d, false},
      {"min_context", &C::min_context, false},
      {"use_graph", &C::use_graph, false},
      {"use_attention", &C::use_attention, false},
      {"use_pos_embed", &C::use_pos_embed, false},
      {"use_ib", &C::use_ib, false},
      {"gp_lengthscale", &C::gp_lengthscale, false},
      {"gp_variance", &C::gp_variance, false},
      {"gp_noise", &C::gp_noise, false},
      {"image_size", &C::image_size, false},
      {"image_limit", &C::image_limit, false},
      {"fp32_master", &C::fp32_master, false},
      {"seed", &C::seed, true},
      {"steps", &C::steps, true},
      {"checkpoint_every", &C::checkpoint_every, true},
      {"keep_checkpoints", &C::keep_checkpoints, true},
      {"log_every", &C::log_every, true},
      {"eval_every", &C::eval_every, true},
      {"eval_size", &C::eval_size, true},
      {"checkpoint_path", &C::checkpoint_path, true},
      {"data_dir", &C::data_dir, true},
      {"resume", &C::resume, true},
      {"log_wall_time", &C::log_wall_time, true},
  };
  return f;
}

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(v) + "'");
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

bool is_run_control_key(std::string_view key) { return find_field(key).run_control; }

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  const Field& f = find_field(key);
  const std::string_view v = trim(value);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          this->*member = std::string(v);
        } else if constexpr (std::is_same_v<T, bool>) {
          if (v == "true" || v == "1") {
            this->*member = true;
          } else if (v == "false" || v == "0") {
            this->*member = false;
          } else {
            throw ConfigError("config key '" + std::string(key) + "' expects true or false, got '" +
                              std::string(v) + "'");
          }
        } else {
          if (!v.empty() && v.front() == '-' && !std::is_same_v<T, double>) {
            throw ConfigError("config key '" + std::string(key) + "' must be nonnegative");
          }
          this->*member = parse_number<T>(key, v);
        }
      },
      f.member);
}

std::string ExperimentConfig::get(std::string_view key) const {
  const Field& f = find_field(key);
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cv_t<std::remove_reference_t<decltype(this->*member)>>;
        if constexpr (std::is_same_v<T, std::string>) {
          return this->*member;
        } else if constexpr (std::is_same_v<T, bool>) {
          return this->*member ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(this->*member);
        } else {
          return std::to_string(this->*member);
        }
      },
      f.member);
}

void ExperimentConfig::validate() const {
  if (task != "regression1d" && task != "mnist" && task != "celeba") {
    throw ConfigError("task must be regression1d, mnist or celeba, got '" + task + "'");
  }
  if (radius_mode != "pixels" && radius_mode != "fraction") {
    throw ConfigError("radius_mode must be pixels or fraction, got '" + radius_mode + "'");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
  if (!(gamma > 0.0) || !(gamma_1d > 0.0)) throw ConfigError("gamma and gamma_1d must be positive");
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (d_node == 0 || d_geo == 0 || d_msg == 0 || d_att == 0 || d_z == 0 || d_dec == 0) {
    throw ConfigError("model widths must be positive");
  }
  if (!(sigma_min > 0.0) || sigma_min >= 1.0) throw ConfigError("sigma_min must lie in (0, 1)");
  if (min_context < 1 || min_context > max_context || min_context > max_points_1d) {
    throw ConfigError("min_context must lie in [1, min(max_context, max_points_1d)]");
  }
  if (!(gp_lengthscale > 0.0) || !(gp_variance > 0.0) || gp_noise < 0.0) {
    throw ConfigError("GP hyperparameters need lengthscale > 0, variance > 0, noise >= 0");
  }
  if (checkpoint_every == 0 || log_every == 0 || eval_every == 0) {
    throw ConfigError("checkpoint_every, log_every and eval_every must be positive");
  }
  if (keep_checkpoints < 1) throw ConfigError("keep_checkpoints must be at least 1");
  if (eval_size < 1) throw ConfigError("eval_size must be at least 1");
}

double ExperimentConfig::effective_gamma(std::size_t grid_height) const {
  if (!is_image_task()) return gamma_1d;
  if (radius_mode == "fraction") return gamma;
  return gamma / static_cast<double>(grid_height > 1 ? grid_height - 1 : 1);
}

model::ModelConfig ExperimentConfig::model_config(std::size_t x_dim, std::size_t y_dim,
                                                  std::size_t grid_height) const {
  model::ModelConfig m;
  m.x_dim = x_dim;
  m.y_dim = y_dim;
  m.d_node = d_node;
  m.d_geo = d_geo;
  m.d_msg = d_msg;
  m.d_att = d_att;
  m.d_z = d_z;
  m.d_dec = d_dec;
  m.n_layers = n_layers;
  m.gamma = effective_gamma(grid_height);
  m.sigma_min = sigma_min;
  m.beta = beta;
  m.use_graph = use_graph;
  m.use_attention = use_attention;
  m.use_pos_embed = use_pos_embed;
  m.use_ib = use_ib;
  return m;
}

std::string ExperimentConfig::resolved_data_dir() const {
  if (!data_dir.empty()) return data_dir;
  if (const char* env = std::getenv("ORNET_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return "data";
}

ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      cfg.set(trim(s.substr(0, eq)), s.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  return parse_config(in);
}

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  cfg.set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + cfg.get(f.key) + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : fields()) {
    if (f.run_control) continue;
    const std::string kv = std::string(f.key) + "=" + cfg.get(f.key) + "\n";
    for (unsigned char c : kv) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace ornet
