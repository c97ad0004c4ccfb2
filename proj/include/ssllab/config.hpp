// Run configuration: a flat key=value text format that fully describes a
// training or evaluation run. A config file is merged with command-line
// overrides, finalized (derived fields filled in), and the resolved result is
// written back out so any run directory can be re-executed verbatim.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssllab/augment.hpp"
#include "ssllab/backbones.hpp"
#include "ssllab/data.hpp"
#include "ssllab/common.hpp"
#include "ssllab/siamese.hpp"
#include "ssllab/train.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// The configuration surface
// ---------------------------------------------------------------------------

/// One dataset block. The same fields describe file-backed corpora
/// (cifar10, stl10: `path` + `split`) and the synthetic generators
/// (synth_shapes, synth_shapes_multilabel, synth_gaussian: geometry + seed).
struct DatasetSpec {
  std::string kind = "synth_shapes";
  std::string path;
  std::string split = "train";
  int64_t count = 512;
  int64_t classes = 4;  // class count k, or attribute count m for multilabel
  int64_t channels = 3;
  int64_t height = 16;
  int64_t width = 16;
  uint64_t seed = 42;
};

struct RunConfig {
  std::string out;
  uint64_t seed = 0;
  int64_t threads = 1;
  std::string task = "auto";  // auto | single | multilabel (eval-time check)

  DatasetSpec dataset;
  DatasetSpec test_dataset{.kind = "", .count = 0};  // empty kind = absent

  BackboneConfig backbone{.in_h = 0, .in_w = 0};  // 0 = derive from dataset
  int64_t projection_dim = 256;
  bool projection_bn_output = false;

  AugmentationPolicy augment;
  TrainConfig train;
};

// ---------------------------------------------------------------------------
// Scalar parsing/rendering
// ---------------------------------------------------------------------------

namespace cfgdetail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline int64_t to_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError("config key '" + key + "': expected integer, got '" + v +
                      "'");
  return static_cast<int64_t>(x);
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || v[0] == '-')
    throw ConfigError("config key '" + key +
                      "': expected unsigned integer, got '" + v + "'");
  return static_cast<uint64_t>(x);
}

inline double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError("config key '" + key + "': expected number, got '" + v +
                      "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" +
                    v + "'");
}

inline std::string render_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace cfgdetail

// ---------------------------------------------------------------------------
// Schema: every known key with its setter and renderer.
// ---------------------------------------------------------------------------

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::vector<ConfigKey> make_config_schema() {
  using cfgdetail::render_double;
  using cfgdetail::to_bool;
  using cfgdetail::to_double;
  using cfgdetail::to_int;
  using cfgdetail::to_u64;
  std::vector<ConfigKey> s;

  auto str = [&s](const std::string& name, std::string RunConfig::* f) {
    s.push_back({name,
                 [f](RunConfig& c, const std::string& v) { c.*f = v; },
                 [f](const RunConfig& c) { return c.*f; }});
  };
  auto u64 = [&s](const std::string& name, uint64_t RunConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.*f = to_u64(name, v);
                 },
                 [f](const RunConfig& c) { return std::to_string(c.*f); }});
  };
  auto i64 = [&s](const std::string& name, int64_t RunConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.*f = to_int(name, v);
                 },
                 [f](const RunConfig& c) { return std::to_string(c.*f); }});
  };
  auto bol = [&s](const std::string& name, bool RunConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.*f = to_bool(name, v);
                 },
                 [f](const RunConfig& c) {
                   return (c.*f) ? std::string("true") : std::string("false");
                 }});
  };

  str("out", &RunConfig::out);
  u64("seed", &RunConfig::seed);
  i64("threads", &RunConfig::threads);
  str("task", &RunConfig::task);

  auto dataset_block = [&s](const std::string& prefix,
                            DatasetSpec RunConfig::* block) {
    auto dstr = [&s, prefix, block](const std::string& leaf,
                                    std::string DatasetSpec::* f) {
      s.push_back({prefix + leaf,
                   [block, f](RunConfig& c, const std::string& v) {
                     c.*block.*f = v;
                   },
                   [block, f](const RunConfig& c) { return c.*block.*f; }});
    };
    auto dint = [&s, prefix, block](const std::string& leaf,
                                    int64_t DatasetSpec::* f) {
      const std::string name = prefix + leaf;
      s.push_back({name,
                   [name, block, f](RunConfig& c, const std::string& v) {
                     c.*block.*f = to_int(name, v);
                   },
                   [block, f](const RunConfig& c) {
                     return std::to_string(c.*block.*f);
                   }});
    };
    auto du64 = [&s, prefix, block](const std::string& leaf,
                                    uint64_t DatasetSpec::* f) {
      const std::string name = prefix + leaf;
      s.push_back({name,
                   [name, block, f](RunConfig& c, const std::string& v) {
                     c.*block.*f = to_u64(name, v);
                   },
                   [block, f](const RunConfig& c) {
                     return std::to_string(c.*block.*f);
                   }});
    };
    dstr("kind", &DatasetSpec::kind);
    dstr("path", &DatasetSpec::path);
    dstr("split", &DatasetSpec::split);
    dint("count", &DatasetSpec::count);
    dint("classes", &DatasetSpec::classes);
    dint("channels", &DatasetSpec::channels);
    dint("height", &DatasetSpec::height);
    dint("width", &DatasetSpec::width);
    du64("seed", &DatasetSpec::seed);
  };
  dataset_block("dataset.", &RunConfig::dataset);
  dataset_block("test_dataset.", &RunConfig::test_dataset);

  // Backbone.
  s.push_back({"backbone.family",
               [](RunConfig& c, const std::string& v) {
                 c.backbone.family = v;
               },
               [](const RunConfig& c) { return c.backbone.family; }});
  auto bb_i64 = [&s](const std::string& name, int64_t BackboneConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.backbone.*f = to_int(name, v);
                 },
                 [f](const RunConfig& c) {
                   return std::to_string(c.backbone.*f);
                 }});
  };
  bb_i64("backbone.channels", &BackboneConfig::in_channels);
  bb_i64("backbone.height", &BackboneConfig::in_h);
  bb_i64("backbone.width", &BackboneConfig::in_w);
  bb_i64("backbone.embed_dim", &BackboneConfig::embed_dim);
  bb_i64("backbone.depth", &BackboneConfig::depth);
  bb_i64("backbone.heads", &BackboneConfig::heads);
  bb_i64("backbone.patch", &BackboneConfig::patch_size);
  s.push_back({"backbone.width_multiplier",
               [](RunConfig& c, const std::string& v) {
                 c.backbone.width_multiplier =
                     to_double("backbone.width_multiplier", v);
               },
               [](const RunConfig& c) {
                 return render_double(c.backbone.width_multiplier);
               }});
  s.push_back({"backbone.mean_pool",
               [](RunConfig& c, const std::string& v) {
                 c.backbone.mean_pool = to_bool("backbone.mean_pool", v);
               },
               [](const RunConfig& c) {
                 return c.backbone.mean_pool ? std::string("true")
                                             : std::string("false");
               }});

  i64("projection.dim", &RunConfig::projection_dim);
  bol("projection.bn_output", &RunConfig::projection_bn_output);

  // Augmentation policy (the two-view recipe for pretraining).
  auto aug_dbl = [&s](const std::string& name, double AugmentationPolicy::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.augment.*f = to_double(name, v);
                 },
                 [f](const RunConfig& c) {
                   return render_double(c.augment.*f);
                 }});
  };
  aug_dbl("augment.crop_scale_min", &AugmentationPolicy::crop_scale_min);
  aug_dbl("augment.crop_scale_max", &AugmentationPolicy::crop_scale_max);
  aug_dbl("augment.flip_p", &AugmentationPolicy::flip_p);
  aug_dbl("augment.jitter_p", &AugmentationPolicy::jitter_p);
  aug_dbl("augment.jitter_brightness", &AugmentationPolicy::jitter_brightness);
  aug_dbl("augment.jitter_contrast", &AugmentationPolicy::jitter_contrast);
  aug_dbl("augment.jitter_saturation", &AugmentationPolicy::jitter_saturation);
  aug_dbl("augment.jitter_hue", &AugmentationPolicy::jitter_hue);
  aug_dbl("augment.grayscale_p", &AugmentationPolicy::grayscale_p);
  aug_dbl("augment.blur_p", &AugmentationPolicy::blur_p);
  aug_dbl("augment.blur_sigma_min", &AugmentationPolicy::blur_sigma_min);
  aug_dbl("augment.blur_sigma_max", &AugmentationPolicy::blur_sigma_max);
  s.push_back({"augment.blur_kernel",
               [](RunConfig& c, const std::string& v) {
                 c.augment.blur_kernel = to_int("augment.blur_kernel", v);
               },
               [](const RunConfig& c) {
                 return std::to_string(c.augment.blur_kernel);
               }});

  // Training loop.
  auto tr_i64 = [&s](const std::string& name, int64_t TrainConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.train.*f = to_int(name, v);
                 },
                 [f](const RunConfig& c) {
                   return std::to_string(c.train.*f);
                 }});
  };
  auto tr_dbl = [&s](const std::string& name, double TrainConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.train.*f = to_double(name, v);
                 },
                 [f](const RunConfig& c) {
                   return render_double(c.train.*f);
                 }});
  };
  auto tr_bol = [&s](const std::string& name, bool TrainConfig::* f) {
    s.push_back({name,
                 [name, f](RunConfig& c, const std::string& v) {
                   c.train.*f = to_bool(name, v);
                 },
                 [f](const RunConfig& c) {
                   return (c.train.*f) ? std::string("true")
                                       : std::string("false");
                 }});
  };
  tr_i64("train.epochs", &TrainConfig::epochs);
  tr_i64("train.batch_size", &TrainConfig::batch_size);
  tr_i64("train.accumulation", &TrainConfig::accumulation);
  tr_dbl("train.base_lr", &TrainConfig::base_lr);
  tr_dbl("train.supervised_lr", &TrainConfig::supervised_lr);
  tr_dbl("train.weight_decay", &TrainConfig::weight_decay);
  tr_bol("train.decoupled_decay", &TrainConfig::decoupled_decay);
  tr_dbl("train.val_fraction", &TrainConfig::val_fraction);
  tr_bol("train.stop_gradient", &TrainConfig::stop_gradient);
  return s;
}

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = make_config_schema();
  return schema;
}

// ---------------------------------------------------------------------------
// Parsing, merging, rendering
// ---------------------------------------------------------------------------

/// Parse `key = value` lines. '#' starts a comment; blank lines are skipped.
/// Throws ConfigError naming the offending 1-based line.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = cfgdetail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    const std::string key = cfgdetail::trim(line.substr(0, eq));
    const std::string value = cfgdetail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    out.emplace_back(key, value);
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> load_config_file(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Apply one assignment; unknown keys are rejected (fail-fast).
inline void apply_assignment(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
  for (const auto& k : config_schema()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key: " + key);
}

inline void apply_assignments(
    RunConfig& cfg,
    const std::vector<std::pair<std::string, std::string>>& kvs) {
  for (const auto& [k, v] : kvs) apply_assignment(cfg, k, v);
}

/// Fill derived fields: backbone geometry defaults to the dataset geometry.
inline void finalize_config(RunConfig& cfg) {
  if (cfg.backbone.in_h == 0) cfg.backbone.in_h = cfg.dataset.height;
  if (cfg.backbone.in_w == 0) cfg.backbone.in_w = cfg.dataset.width;
  if (cfg.backbone.in_channels == 0)
    cfg.backbone.in_channels = cfg.dataset.channels;
  if (cfg.task != "auto" && cfg.task != "single" && cfg.task != "multilabel")
    throw ConfigError("task must be auto, single, or multilabel; got '" +
                      cfg.task + "'");
  if (cfg.threads < 1)
    throw ConfigError("threads must be >= 1");
}

/// Render every schema key in declaration order — the resolved config that
/// run directories persist. Feeding this text back reproduces the run.
inline std::string render_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& k : config_schema()) out << k.name << " = " << k.get(cfg)
                                            << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Builders: config blocks -> live objects
// ---------------------------------------------------------------------------

/// Materialize one dataset block. File-backed kinds validate the path and
/// surface it in the diagnostic; synthetic kinds draw from their seed.
template <typename T = float>
DatasetSource<T> dataset_from_config(const DatasetSpec& d,
                                     const std::string& block = "dataset") {
  const Shape item{d.channels, d.height, d.width};
  if (d.kind == "synth_shapes") return synth_shapes<T>(d.count, item, d.classes, d.seed);
  if (d.kind == "synth_shapes_multilabel")
    return synth_shapes_multilabel<T>(d.count, item, d.classes, d.seed);
  if (d.kind == "synth_gaussian") return synth_gaussian<T>(d.count, item, d.seed);
  if (d.kind == "cifar10") {
    const Cifar10Split split =
        d.split == "test" ? Cifar10Split::test : Cifar10Split::train;
    return load_cifar10<T>(d.path, split);
  }
  if (d.kind == "stl10") {
    const Stl10Split split = d.split == "test"
                                 ? Stl10Split::test
                                 : (d.split == "unlabeled" ? Stl10Split::unlabeled
                                                           : Stl10Split::train);
    return load_stl10<T>(d.path, split);
  }
  throw ConfigError(block + ".kind: unknown dataset kind '" + d.kind + "'");
}

inline AugmentationPolicy policy_from_config(const RunConfig& cfg) {
  AugmentationPolicy p = cfg.augment;
  p.seed = mix_seed(cfg.seed, 0xa06u);
  return p;
}

inline SiameseConfig siamese_from_config(const RunConfig& cfg) {
  SiameseConfig sc;
  sc.backbone = cfg.backbone;
  sc.projection_dim = cfg.projection_dim;
  sc.projection_bn_output = cfg.projection_bn_output;
  return sc;
}

inline TrainConfig train_from_config(const RunConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  return t;
}

}  // namespace ssllab
