#include "scale/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace scale {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

i64 parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    i64 out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': cannot parse integer '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    std::uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': cannot parse unsigned integer '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': cannot parse number '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "': expected on/off, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v,
                          const std::function<T(const std::string&, const std::string&)>& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(one(key, trim(tok)));
  if (out.empty()) throw ConfigError("config: key '" + key + "': empty list");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    auto add = [&](const std::string& name, auto setter, auto getter) {
      k.push_back(Key{name, setter, getter});
    };

    // synthetic generator
    add("synth.seed",
        [](RunConfig& c, const std::string& v) { c.synth.seed = parse_u64("synth.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.seed); });
    add("synth.num_classes",
        [](RunConfig& c, const std::string& v) { c.synth.num_classes = parse_int("synth.num_classes", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.num_classes); });
    add("synth.train_videos_per_class",
        [](RunConfig& c, const std::string& v) { c.synth.train_videos_per_class = parse_int("synth.train_videos_per_class", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.train_videos_per_class); });
    add("synth.eval_videos_per_class",
        [](RunConfig& c, const std::string& v) { c.synth.eval_videos_per_class = parse_int("synth.eval_videos_per_class", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.eval_videos_per_class); });
    add("synth.feature_dim",
        [](RunConfig& c, const std::string& v) { c.synth.feature_dim = parse_int("synth.feature_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.feature_dim); });
    add("synth.clips_per_train_video",
        [](RunConfig& c, const std::string& v) { c.synth.clips_per_train_video = parse_int("synth.clips_per_train_video", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.clips_per_train_video); });
    add("synth.clips_per_eval_video",
        [](RunConfig& c, const std::string& v) { c.synth.clips_per_eval_video = parse_int("synth.clips_per_eval_video", v); },
        [](const RunConfig& c) { return std::to_string(c.synth.clips_per_eval_video); });
    add("synth.base_scale",
        [](RunConfig& c, const std::string& v) { c.synth.base_scale = parse_double("synth.base_scale", v); },
        [](const RunConfig& c) { return fmt_double(c.synth.base_scale); });
    add("synth.drift_scale",
        [](RunConfig& c, const std::string& v) { c.synth.drift_scale = parse_double("synth.drift_scale", v); },
        [](const RunConfig& c) { return fmt_double(c.synth.drift_scale); });
    add("synth.noise_scale",
        [](RunConfig& c, const std::string& v) { c.synth.noise_scale = parse_double("synth.noise_scale", v); },
        [](const RunConfig& c) { return fmt_double(c.synth.noise_scale); });

    // model
    add("model.hidden_dim",
        [](RunConfig& c, const std::string& v) { c.model.hidden_dim = parse_int("model.hidden_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.model.hidden_dim); });
    add("model.layers",
        [](RunConfig& c, const std::string& v) { c.model.layers = parse_int("model.layers", v); },
        [](const RunConfig& c) { return std::to_string(c.model.layers); });
    add("model.heads",
        [](RunConfig& c, const std::string& v) { c.model.heads = parse_int("model.heads", v); },
        [](const RunConfig& c) { return std::to_string(c.model.heads); });
    add("model.proj_dim",
        [](RunConfig& c, const std::string& v) { c.model.proj_dim = parse_int("model.proj_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.model.proj_dim); });
    add("model.temperature",
        [](RunConfig& c, const std::string& v) { c.model.temperature = parse_double("model.temperature", v); },
        [](const RunConfig& c) { return fmt_double(c.model.temperature); });

    // trainer
    add("train.epochs",
        [](RunConfig& c, const std::string& v) { c.train.epochs = parse_int("train.epochs", v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("train.batch_size",
        [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_int("train.batch_size", v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("train.lr_max",
        [](RunConfig& c, const std::string& v) { c.train.lr_max = parse_double("train.lr_max", v); },
        [](const RunConfig& c) { return fmt_double(c.train.lr_max); });
    add("train.lr_min",
        [](RunConfig& c, const std::string& v) { c.train.lr_min = parse_double("train.lr_min", v); },
        [](const RunConfig& c) { return fmt_double(c.train.lr_min); });
    add("train.beta1",
        [](RunConfig& c, const std::string& v) { c.train.beta1 = parse_double("train.beta1", v); },
        [](const RunConfig& c) { return fmt_double(c.train.beta1); });
    add("train.beta2",
        [](RunConfig& c, const std::string& v) { c.train.beta2 = parse_double("train.beta2", v); },
        [](const RunConfig& c) { return fmt_double(c.train.beta2); });
    add("train.eps",
        [](RunConfig& c, const std::string& v) { c.train.eps = parse_double("train.eps", v); },
        [](const RunConfig& c) { return fmt_double(c.train.eps); });
    add("train.weight_decay",
        [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_double("train.weight_decay", v); },
        [](const RunConfig& c) { return fmt_double(c.train.weight_decay); });
    add("train.seed",
        [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("train.mcm_loss",
        [](RunConfig& c, const std::string& v) { c.train.losses.mcm = parse_bool("train.mcm_loss", v); },
        [](const RunConfig& c) { return c.train.losses.mcm ? "on" : "off"; });
    add("train.set_loss",
        [](RunConfig& c, const std::string& v) { c.train.losses.set = parse_bool("train.set_loss", v); },
        [](const RunConfig& c) { return c.train.losses.set ? "on" : "off"; });
    add("train.clips_per_view",
        [](RunConfig& c, const std::string& v) { c.train.clips_per_view = parse_int("train.clips_per_view", v); },
        [](const RunConfig& c) { return std::to_string(c.train.clips_per_view); });
    add("train.mask_ratio",
        [](RunConfig& c, const std::string& v) { c.train.mask_ratio = parse_double("train.mask_ratio", v); },
        [](const RunConfig& c) { return fmt_double(c.train.mask_ratio); });
    add("train.checkpoint_every",
        [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = parse_int("train.checkpoint_every", v); },
        [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); });
    add("train.threads",
        [](RunConfig& c, const std::string& v) { c.train.threads = static_cast<int>(parse_int("train.threads", v)); },
        [](const RunConfig& c) { return std::to_string(c.train.threads); });

    // probes
    add("probe.k",
        [](RunConfig& c, const std::string& v) { c.probe.knn.k = parse_int("probe.k", v); },
        [](const RunConfig& c) { return std::to_string(c.probe.knn.k); });
    add("probe.knn_temperature",
        [](RunConfig& c, const std::string& v) { c.probe.knn.temperature = parse_double("probe.knn_temperature", v); },
        [](const RunConfig& c) { return fmt_double(c.probe.knn.temperature); });
    add("probe.knn_vote",
        [](RunConfig& c, const std::string& v) {
          if (v == "weighted") c.probe.knn.weighted = true;
          else if (v == "majority") c.probe.knn.weighted = false;
          else throw ConfigError("config: probe.knn_vote must be weighted|majority, got '" + v + "'");
        },
        [](const RunConfig& c) { return c.probe.knn.weighted ? "weighted" : "majority"; });
    add("probe.feature",
        [](RunConfig& c, const std::string& v) {
          try { c.probe.feature = knn_feature_from_string(v); }
          catch (const std::exception& e) { throw ConfigError(std::string("config: ") + e.what()); }
        },
        [](const RunConfig& c) { return std::string(to_string(c.probe.feature)); });
    add("probe.linear_mode",
        [](RunConfig& c, const std::string& v) {
          if (v == "scale") c.probe.linear_mode = LinearMode::scale_concat;
          else if (v == "baseline") c.probe.linear_mode = LinearMode::baseline_raw;
          else throw ConfigError("config: probe.linear_mode must be scale|baseline, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return c.probe.linear_mode == LinearMode::scale_concat ? "scale" : "baseline";
        });
    add("probe.init",
        [](RunConfig& c, const std::string& v) {
          if (v == "checkpoint") c.probe.ft_init = FtInit::from_checkpoint;
          else if (v == "random") c.probe.ft_init = FtInit::random;
          else throw ConfigError("config: probe.init must be checkpoint|random, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return c.probe.ft_init == FtInit::from_checkpoint ? "checkpoint" : "random";
        });
    add("probe.lrs",
        [](RunConfig& c, const std::string& v) {
          c.probe.grid.lrs = parse_list<double>("probe.lrs", v, parse_double);
        },
        [](const RunConfig& c) {
          std::string s;
          for (double v : c.probe.grid.lrs) s += (s.empty() ? "" : ",") + fmt_double(v);
          return s;
        });
    add("probe.wds",
        [](RunConfig& c, const std::string& v) {
          c.probe.grid.wds = parse_list<double>("probe.wds", v, parse_double);
        },
        [](const RunConfig& c) {
          std::string s;
          for (double v : c.probe.grid.wds) s += (s.empty() ? "" : ",") + fmt_double(v);
          return s;
        });
    add("probe.batches",
        [](RunConfig& c, const std::string& v) {
          c.probe.grid.batches = parse_list<i64>("probe.batches", v, parse_int);
        },
        [](const RunConfig& c) {
          std::string s;
          for (i64 v : c.probe.grid.batches) s += (s.empty() ? "" : ",") + std::to_string(v);
          return s;
        });
    add("probe.optimizers",
        [](RunConfig& c, const std::string& v) {
          std::function<ProbeOptimizer(const std::string&, const std::string&)> one =
              [](const std::string& key, const std::string& tok) {
                if (tok == "adam") return ProbeOptimizer::adam;
                if (tok == "sgd" || tok == "sgd_momentum") return ProbeOptimizer::sgd_momentum;
                throw ConfigError("config: key '" + key + "': unknown optimizer '" + tok + "'");
              };
          c.probe.grid.optimizers = parse_list<ProbeOptimizer>("probe.optimizers", v, one);
        },
        [](const RunConfig& c) {
          std::string s;
          for (ProbeOptimizer o : c.probe.grid.optimizers)
            s += (s.empty() ? "" : ",") + std::string(to_string(o));
          return s;
        });
    add("probe.epochs",
        [](RunConfig& c, const std::string& v) { c.probe.grid.epochs = parse_int("probe.epochs", v); },
        [](const RunConfig& c) { return std::to_string(c.probe.grid.epochs); });
    add("probe.mlp_hidden",
        [](RunConfig& c, const std::string& v) { c.probe.grid.mlp_hidden = parse_int("probe.mlp_hidden", v); },
        [](const RunConfig& c) { return std::to_string(c.probe.grid.mlp_hidden); });
    add("probe.bn_no_affine",
        [](RunConfig& c, const std::string& v) { c.probe.grid.bn_no_affine = parse_bool("probe.bn_no_affine", v); },
        [](const RunConfig& c) { return c.probe.grid.bn_no_affine ? "on" : "off"; });
    add("probe.seed",
        [](RunConfig& c, const std::string& v) { c.probe.grid.seed = parse_u64("probe.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.probe.grid.seed); });
    return k;
  }();
  return keys;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value,
             const std::string& where) {
  for (const Key& k : registry()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'" + (where.empty() ? "" : " (" + where + ")"));
}

}  // namespace

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::stringstream ss(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + source + ":" + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    set_key(cfg, key, value, source + ":" + std::to_string(lineno));
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  apply_config_text(cfg, ss.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& kv) {
  size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: override must be key=value, got '" + kv + "'");
  std::string key = trim(kv.substr(0, eq));
  std::string value = trim(kv.substr(eq + 1));
  set_key(cfg, key, value, "command line");
}

std::string echo_effective(const RunConfig& cfg) {
  std::ostringstream os;
  for (const Key& k : registry()) os << k.name << " = " << k.get(cfg) << "\n";
  return os.str();
}

ModelConfig resolved_model_config(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  m.feature_dim = 0;  // filled from the store at train time
  m.mask_ratio = cfg.train.mask_ratio;
  m.clips_per_view = cfg.train.clips_per_view;
  return m;
}

}  // namespace scale
