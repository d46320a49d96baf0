#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cmalign/error.hpp"
#include "cmalign/io.hpp"

namespace cmalign {

// Full run configuration. Plain-text files with bracketed sections and one
// `key = value` per line; every key listed in the binding table below is
// addressable both from files and from dotted `--set section.key=value`
// overrides. Unknown sections or keys are configuration errors.
struct Config {
  struct Dataset {
    std::string root;  // required by commands that touch data
    int64_t n_identities = 64;
    int64_t images_per_identity = 8;  // per modality
    int64_t height = 36;
    int64_t width = 18;
    int64_t channels = 3;
    int64_t translation_max = 4;   // pixels, uniform in [-t, t]
    double scale_min = 0.85;
    double scale_max = 1.15;
    int64_t occlusion_max = 8;     // max side of occluding rectangle; 0 disables
    double noise_std = 0.02;
    int64_t seed = 1;
  } dataset;

  struct Loss {
    double lambda_ic = 1.0;
    double lambda_dt = 0.5;
    double margin = 0.3;
    double beta = 50.0;
    double gem_p = 3.0;
    bool normalize_dense_triplet = false;
    bool mask_stop_gradient = false;
    bool use_co_attention = true;
  } loss;

  struct Train {
    int64_t identities_per_modality = 8;
    int64_t images_per_identity = 4;  // per modality, within a batch
    int64_t epochs = 80;
    double base_lr_backbone = 1e-2;
    double base_lr_head = 1e-1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int64_t warmup_epochs = 10;
    std::vector<int> decay_epochs = {20, 50};
    double decay_factor = 10.0;
    std::vector<int> cmalign_layers = {4, 5};
    int64_t seed = 1;
  } train;

  struct Eval {
    std::string direction = "a_to_b";  // or "b_to_a"
    int64_t cmc_k = 10;
  } eval;

  struct Match {
    int64_t k = 20;
  } match;

  struct Gradcheck {
    double tol = 1e-4;
    double step = 1e-4;
    int64_t seeds = 10;
    std::string ops = "all";  // comma-separated filter or "all"
    int64_t seed = 1;
  } gradcheck;

  void load_file(const std::filesystem::path& path);
  void apply_override(const std::string& dotted);  // "section.key=value"
  void set_all_seeds(int64_t seed);
  void validate() const;
  std::string serialize() const;  // parseable; basis of resolved-config.txt

 private:
  using Slot = std::variant<int64_t*, double*, bool*, std::string*, std::vector<int>*>;
  struct Binding {
    const char* section;
    const char* key;
    Slot slot;
  };
  std::vector<Binding> bindings();
  std::vector<Binding> bindings() const { return const_cast<Config*>(this)->bindings(); }
  void assign(const std::string& section, const std::string& key, const std::string& value);
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int64_t parse_int(const std::string& v, const std::string& where) {
  size_t used = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  require(used == v.size() && !v.empty(), ErrorKind::config, where, ": expected integer, got '", v, "'");
  return out;
}

inline double parse_double(const std::string& v, const std::string& where) {
  size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  require(used == v.size() && !v.empty(), ErrorKind::config, where, ": expected number, got '", v, "'");
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  raise(ErrorKind::config, where, ": expected true/false, got '", v, "'");
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& where) {
  std::vector<int> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_int(item, where)));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline std::vector<Config::Binding> Config::bindings() {
  return {
      {"dataset", "root", &dataset.root},
      {"dataset", "n_identities", &dataset.n_identities},
      {"dataset", "images_per_identity", &dataset.images_per_identity},
      {"dataset", "height", &dataset.height},
      {"dataset", "width", &dataset.width},
      {"dataset", "channels", &dataset.channels},
      {"dataset", "translation_max", &dataset.translation_max},
      {"dataset", "scale_min", &dataset.scale_min},
      {"dataset", "scale_max", &dataset.scale_max},
      {"dataset", "occlusion_max", &dataset.occlusion_max},
      {"dataset", "noise_std", &dataset.noise_std},
      {"dataset", "seed", &dataset.seed},
      {"loss", "lambda_ic", &loss.lambda_ic},
      {"loss", "lambda_dt", &loss.lambda_dt},
      {"loss", "margin", &loss.margin},
      {"loss", "beta", &loss.beta},
      {"loss", "gem_p", &loss.gem_p},
      {"loss", "normalize_dense_triplet", &loss.normalize_dense_triplet},
      {"loss", "mask_stop_gradient", &loss.mask_stop_gradient},
      {"loss", "use_co_attention", &loss.use_co_attention},
      {"train", "identities_per_modality", &train.identities_per_modality},
      {"train", "images_per_identity", &train.images_per_identity},
      {"train", "epochs", &train.epochs},
      {"train", "base_lr_backbone", &train.base_lr_backbone},
      {"train", "base_lr_head", &train.base_lr_head},
      {"train", "momentum", &train.momentum},
      {"train", "weight_decay", &train.weight_decay},
      {"train", "warmup_epochs", &train.warmup_epochs},
      {"train", "decay_epochs", &train.decay_epochs},
      {"train", "decay_factor", &train.decay_factor},
      {"train", "cmalign_layers", &train.cmalign_layers},
      {"train", "seed", &train.seed},
      {"eval", "direction", &eval.direction},
      {"eval", "cmc_k", &eval.cmc_k},
      {"match", "k", &match.k},
      {"gradcheck", "tol", &gradcheck.tol},
      {"gradcheck", "step", &gradcheck.step},
      {"gradcheck", "seeds", &gradcheck.seeds},
      {"gradcheck", "ops", &gradcheck.ops},
      {"gradcheck", "seed", &gradcheck.seed},
  };
}

inline void Config::assign(const std::string& section, const std::string& key, const std::string& value) {
  std::string where = section + "." + key;
  for (auto& b : bindings()) {
    if (section != b.section || key != b.key) continue;
    std::visit(
        [&](auto* slot) {
          using T = std::remove_pointer_t<decltype(slot)>;
          if constexpr (std::is_same_v<T, int64_t>) {
            *slot = detail::parse_int(value, where);
          } else if constexpr (std::is_same_v<T, double>) {
            *slot = detail::parse_double(value, where);
          } else if constexpr (std::is_same_v<T, bool>) {
            *slot = detail::parse_bool(value, where);
          } else if constexpr (std::is_same_v<T, std::string>) {
            *slot = value;
          } else {
            *slot = detail::parse_int_list(value, where);
          }
        },
        b.slot);
    return;
  }
  raise(ErrorKind::config, "unknown config key: ", where);
}

inline void Config::load_file(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[') {
      require(s.back() == ']', ErrorKind::config, path.string(), ":", lineno, ": malformed section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      require(!section.empty(), ErrorKind::config, path.string(), ":", lineno, ": empty section name");
      continue;
    }
    size_t eq = s.find('=');
    require(eq != std::string::npos, ErrorKind::config, path.string(), ":", lineno, ": expected key = value");
    require(!section.empty(), ErrorKind::config, path.string(), ":", lineno, ": key outside any [section]");
    assign(section, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
}

inline void Config::apply_override(const std::string& dotted) {
  size_t eq = dotted.find('=');
  require(eq != std::string::npos, ErrorKind::config, "override '", dotted, "': expected section.key=value");
  std::string path = detail::trim(dotted.substr(0, eq));
  size_t dot = path.find('.');
  require(dot != std::string::npos, ErrorKind::config, "override '", dotted, "': expected section.key=value");
  assign(path.substr(0, dot), path.substr(dot + 1), detail::trim(dotted.substr(eq + 1)));
}

inline void Config::set_all_seeds(int64_t seed) {
  dataset.seed = seed;
  train.seed = seed;
  gradcheck.seed = seed;
}

inline void Config::validate() const {
  require(dataset.n_identities >= 1, ErrorKind::config, "dataset.n_identities must be >= 1");
  require(dataset.images_per_identity >= 1, ErrorKind::config, "dataset.images_per_identity must be >= 1");
  require(dataset.height >= 1 && dataset.width >= 1 && dataset.channels >= 1, ErrorKind::config,
          "dataset.height/width/channels must be >= 1");
  require(dataset.scale_min > 0 && dataset.scale_min <= dataset.scale_max, ErrorKind::config,
          "dataset.scale_min must be in (0, dataset.scale_max]");
  require(dataset.occlusion_max >= 0, ErrorKind::config, "dataset.occlusion_max must be >= 0");
  require(dataset.noise_std >= 0, ErrorKind::config, "dataset.noise_std must be >= 0");
  require(loss.beta > 0, ErrorKind::config, "loss.beta must be > 0");
  require(loss.gem_p >= 1, ErrorKind::config, "loss.gem_p must be >= 1");
  require(loss.margin >= 0, ErrorKind::config, "loss.margin must be >= 0");
  require(loss.lambda_ic >= 0 && loss.lambda_dt >= 0, ErrorKind::config, "loss weights must be >= 0");
  require(train.identities_per_modality >= 1, ErrorKind::config, "train.identities_per_modality must be >= 1");
  require(train.images_per_identity >= 1, ErrorKind::config, "train.images_per_identity must be >= 1");
  require(train.epochs >= 0, ErrorKind::config, "train.epochs must be >= 0");
  require(train.warmup_epochs >= 0, ErrorKind::config, "train.warmup_epochs must be >= 0");
  require(train.decay_factor > 0, ErrorKind::config, "train.decay_factor must be > 0");
  for (size_t i = 1; i < train.decay_epochs.size(); ++i)
    require(train.decay_epochs[i - 1] < train.decay_epochs[i], ErrorKind::config,
            "train.decay_epochs must be strictly increasing");
  require(!train.cmalign_layers.empty(), ErrorKind::config, "train.cmalign_layers must not be empty");
  for (int layer : train.cmalign_layers)
    require(layer == 4 || layer == 5, ErrorKind::config, "train.cmalign_layers entries must be 4 or 5");
  for (size_t i = 1; i < train.cmalign_layers.size(); ++i)
    require(train.cmalign_layers[i - 1] < train.cmalign_layers[i], ErrorKind::config,
            "train.cmalign_layers must be strictly increasing");
  require(eval.direction == "a_to_b" || eval.direction == "b_to_a", ErrorKind::config,
          "eval.direction must be a_to_b or b_to_a");
  require(eval.cmc_k >= 1, ErrorKind::config, "eval.cmc_k must be >= 1");
  require(match.k >= 1, ErrorKind::config, "match.k must be >= 1");
  require(gradcheck.tol > 0 && gradcheck.step > 0, ErrorKind::config, "gradcheck.tol and gradcheck.step must be > 0");
  require(gradcheck.seeds >= 1, ErrorKind::config, "gradcheck.seeds must be >= 1");
}

inline std::string Config::serialize() const {
  std::string out;
  std::string current;
  for (const auto& b : bindings()) {
    if (current != b.section) {
      if (!out.empty()) out += "\n";
      current = b.section;
      out += "[" + current + "]\n";
    }
    out += std::string(b.key) + " = ";
    std::visit(
        [&](auto* slot) {
          using T = std::remove_pointer_t<decltype(slot)>;
          if constexpr (std::is_same_v<T, int64_t>) {
            out += std::to_string(*slot);
          } else if constexpr (std::is_same_v<T, double>) {
            out += detail::format_double(*slot);
          } else if constexpr (std::is_same_v<T, bool>) {
            out += *slot ? "true" : "false";
          } else if constexpr (std::is_same_v<T, std::string>) {
            out += *slot;
          } else {
            out += detail::format_int_list(*slot);
          }
        },
        b.slot);
    out += "\n";
  }
  return out;
}

}  // namespace cmalign
