#pragma once

// Training configuration as a plain `key = value` file. Blank lines and
// lines starting with '#' are ignored; unknown keys are errors.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "sauron/losses.hpp"
#include "sauron/pruner.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lambda = 0.5;
  std::size_t omega = 2;
  double tau_max = 0.3;
  std::size_t kappa = 15;
  std::size_t rho = 5;
  double mu = 2.0;
  DeltaNormMode delta_norm_mode = DeltaNormMode::minmax_feature_maps;
  std::size_t levels = 3;
  std::size_t init_filters = 8;
  NormKind norm = NormKind::instance;
  double lr0 = 1e-3;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
  bool pruning_enabled = true;
  bool capture_feature_maps = false;
  bool strict_c2 = false;
  bool flip = false;
  std::size_t probe_images = 4;  // validation images whose maps are dumped per epoch
  // dataset
  std::size_t dataset_size = 200;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t num_classes = 3;
  std::uint64_t data_seed = 0;

  LossConfig loss() const { return {lambda, omega, delta_norm_mode}; }
  PrunerConfig pruner() const { return {tau_max, kappa, rho, mu, strict_c2}; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid config: " + what);
    };
    need(epochs >= 1, "epochs must be >= 1");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(lambda >= 0, "lambda must be >= 0");
    need(omega >= 1, "omega must be >= 1");
    need(tau_max > 0 && tau_max <= 1, "tau_max must be in (0, 1]");
    need(kappa >= 1, "kappa must be >= 1");
    need(mu >= 0, "mu must be >= 0");
    need(levels >= 2, "levels must be >= 2");
    need(init_filters >= 2, "init_filters must be >= 2");
    need(lr0 > 0, "lr0 must be > 0");
    need(weight_decay >= 0, "weight_decay must be >= 0");
    need(dataset_size >= 10, "dataset_size must be >= 10");
    need(num_classes == 2 || num_classes == 3, "num_classes must be 2 or 3");
    const std::size_t d = std::size_t{1} << (levels - 1);
    need(image_height % d == 0 && image_width % d == 0,
         "image size must be divisible by 2^(levels-1) = " + std::to_string(d));
    need(image_height / d >= omega && image_width / d >= omega, "images too small for the pooling window");
  }

  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "epochs = " << epochs << "\nbatch_size = " << batch_size << "\nlambda = " << lambda
       << "\nomega = " << omega << "\ntau_max = " << tau_max << "\nkappa = " << kappa << "\nrho = " << rho
       << "\nmu = " << mu << "\ndelta_norm_mode = " << to_string(delta_norm_mode) << "\nlevels = " << levels
       << "\ninit_filters = " << init_filters << "\nnorm = " << to_string(norm) << "\nlr0 = " << lr0
       << "\nweight_decay = " << weight_decay << "\nseed = " << seed
       << "\npruning_enabled = " << (pruning_enabled ? "true" : "false")
       << "\ncapture_feature_maps = " << (capture_feature_maps ? "true" : "false")
       << "\nstrict_c2 = " << (strict_c2 ? "true" : "false") << "\nflip = " << (flip ? "true" : "false")
       << "\nprobe_images = " << probe_images << "\ndataset_size = " << dataset_size
       << "\nimage_height = " << image_height << "\nimage_width = " << image_width
       << "\nnum_classes = " << num_classes << "\ndata_seed = " << data_seed << "\n";
    return os.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

/// Sets one field by name. Throws ConfigError for unknown keys or bad values.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  using Setter = std::function<void(const std::string&)>;
  auto sz = [&](std::size_t& f) -> Setter { return [&f, key](const std::string& v) { f = parse_number<std::size_t>(key, v); }; };
  auto u64 = [&](std::uint64_t& f) -> Setter { return [&f, key](const std::string& v) { f = parse_number<std::uint64_t>(key, v); }; };
  auto dbl = [&](double& f) -> Setter { return [&f, key](const std::string& v) { f = parse_number<double>(key, v); }; };
  auto bln = [&](bool& f) -> Setter { return [&f, key](const std::string& v) { f = parse_bool(key, v); }; };
  const std::map<std::string, Setter> setters = {
      {"epochs", sz(c.epochs)},
      {"batch_size", sz(c.batch_size)},
      {"lambda", dbl(c.lambda)},
      {"omega", sz(c.omega)},
      {"tau_max", dbl(c.tau_max)},
      {"kappa", sz(c.kappa)},
      {"rho", sz(c.rho)},
      {"mu", dbl(c.mu)},
      {"delta_norm_mode",
       [&c, key](const std::string& v) {
         try {
           c.delta_norm_mode = parse_delta_norm_mode(v);
         } catch (const InvalidArgument& e) {
           throw ConfigError("config key '" + key + "': " + e.what());
         }
       }},
      {"levels", sz(c.levels)},
      {"init_filters", sz(c.init_filters)},
      {"norm",
       [&c, key](const std::string& v) {
         try {
           c.norm = parse_norm(v);
         } catch (const InvalidArgument& e) {
           throw ConfigError("config key '" + key + "': " + e.what());
         }
       }},
      {"lr0", dbl(c.lr0)},
      {"weight_decay", dbl(c.weight_decay)},
      {"seed", u64(c.seed)},
      {"pruning_enabled", bln(c.pruning_enabled)},
      {"capture_feature_maps", bln(c.capture_feature_maps)},
      {"strict_c2", bln(c.strict_c2)},
      {"flip", bln(c.flip)},
      {"probe_images", sz(c.probe_images)},
      {"dataset_size", sz(c.dataset_size)},
      {"image_height", sz(c.image_height)},
      {"image_width", sz(c.image_width)},
      {"num_classes", sz(c.num_classes)},
      {"data_seed", u64(c.data_seed)},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(value);
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace sauron
