// Command-line entry point wiring stores, training, probes, and ablation
// sweeps into reproducible experiments. Exit codes: 0 success, 1 runtime
// failure, 2 usage/config error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "scale/config.hpp"

namespace {

using namespace scale;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  try {
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const std::string& kv : overrides) apply_override(cfg, kv);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void echo_config(const RunConfig& cfg) {
  std::cout << "# effective config\n" << echo_effective(cfg) << std::flush;
}

// Raw-only representations for probes that never touch the model (baseline
// linear/mlp and mean_raw k-NN); placeholder refined/summary fields.
std::vector<ReprSet> raw_representations(const FeatureStore& store) {
  std::vector<ReprSet> out;
  for (const VideoRecord& v : store.videos) {
    ReprSet r;
    r.id = v.id;
    r.label = v.label;
    const i64 K = static_cast<i64>(v.clips.size());
    const i64 D = static_cast<i64>(store.feature_dim);
    r.raw = Tensor<float>::zeros({K, D});
    for (i64 k = 0; k < K; ++k)
      std::copy(v.clips[static_cast<size_t>(k)].feature.begin(),
                v.clips[static_cast<size_t>(k)].feature.end(), r.raw.row_ptr(k));
    r.refined = Tensor<float>::zeros({K, 1});
    r.summary = {0.f};
    out.push_back(std::move(r));
  }
  return out;
}

int cmd_synth(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_train, const std::string& out_eval) {
  RunConfig cfg = load_run_config(config_path, overrides);
  echo_config(cfg);
  SyntheticStores stores = generate_synthetic(cfg.synth);
  std::uint64_t train_bytes = write_store(stores.train, out_train);
  std::uint64_t eval_bytes = write_store(stores.eval, out_eval);
  std::cout << "wrote " << out_train << " (" << stores.train.videos.size() << " videos, "
            << train_bytes << " bytes)\n";
  std::cout << "wrote " << out_eval << " (" << stores.eval.videos.size() << " videos, "
            << eval_bytes << " bytes)\n";
  return kExitOk;
}

int cmd_import(const std::string& csv, const std::string& dims, i64 dim, const std::string& out) {
  unsigned h = 0, w = 0, t = 0;
  char x1 = 0, x2 = 0;
  std::istringstream ds(dims);
  ds >> h >> x1 >> w >> x2 >> t;
  if (!ds || x1 != 'x' || x2 != 'x' || h == 0 || w == 0 || t == 0)
    throw UsageError("--dims must look like 224x224x160");
  if (dim <= 0) throw UsageError("--dim must be positive");
  FeatureStore store = import_delimited(csv, h, w, t, static_cast<std::uint32_t>(dim));
  std::uint64_t bytes = write_store(store, out);
  std::cout << "imported " << store.videos.size() << " videos (" << store.clip_count()
            << " clips), wrote " << bytes << " bytes to " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& store_path, const std::string& config_path,
              const std::vector<std::string>& overrides, const std::string& out_ckpt,
              const std::string& log_path, const std::string& resume_path) {
  RunConfig cfg = load_run_config(config_path, overrides);
  try {
    cfg.train.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  echo_config(cfg);
  FeatureStore store = read_store(store_path);
  ModelConfig mc = resolved_model_config(cfg);

  std::optional<Checkpoint<float>> resume;
  if (!resume_path.empty()) resume = load_checkpoint<float>(resume_path);

  auto result = train<float>(store, cfg.train, mc, out_ckpt, resume ? &*resume : nullptr,
                             [](const EpochLog& e) {
                               std::cout << "epoch " << e.epoch << " mcm " << e.mcm << " set "
                                         << e.set << " total " << e.total << " lr " << e.lr
                                         << "\n";
                             });
  if (!log_path.empty()) write_text_file(log_path, loss_log_csv(result.log));
  std::cout << "checkpoint: " << out_ckpt << "\n";
  return kExitOk;
}

int cmd_probe(const std::string& kind, const std::string& train_store_path,
              const std::string& eval_store_path, const std::string& ckpt_path,
              const std::string& config_path, const std::vector<std::string>& overrides,
              double lowshot, const std::string& report_path) {
  RunConfig cfg = load_run_config(config_path, overrides);
  echo_config(cfg);

  const bool needs_ckpt =
      kind == "ft" ||
      (kind == "knn" && cfg.probe.feature != KnnFeature::mean_raw) ||
      (kind == "linear" && cfg.probe.linear_mode == LinearMode::scale_concat);
  if (needs_ckpt && ckpt_path.empty())
    throw UsageError("probe kind '" + kind + "' with this configuration requires --ckpt");

  set_num_threads(cfg.train.threads);
  FeatureStore train_store = read_store(train_store_path);
  FeatureStore eval_store = read_store(eval_store_path);
  if (lowshot < 1.0) train_store = lowshot_subsample(train_store, lowshot, cfg.probe.grid.seed);

  std::optional<Checkpoint<float>> ckpt;
  if (!ckpt_path.empty()) ckpt = load_checkpoint<float>(ckpt_path);

  ProbeReport report;
  if (kind == "ft") {
    report = ft_probe(train_store, eval_store, *ckpt, cfg.probe.ft_init, cfg.probe.grid);
  } else {
    std::vector<ReprSet> train_reprs, eval_reprs;
    if (ckpt) {
      train_reprs = extract_representations(train_store, ckpt->params);
      eval_reprs = extract_representations(eval_store, ckpt->params);
    } else {
      train_reprs = raw_representations(train_store);
      eval_reprs = raw_representations(eval_store);
    }
    if (kind == "knn") {
      ProbeOutcome out = knn_probe(train_reprs, eval_reprs, cfg.probe.feature, cfg.probe.knn);
      ProbeRow row;
      row.kind = "knn";
      row.feature = to_string(cfg.probe.feature);
      row.eval = out;
      row.best = true;
      report.rows.push_back(row);
    } else if (kind == "linear") {
      report = linear_probe(train_reprs, eval_reprs, cfg.probe.linear_mode, cfg.probe.grid);
    } else if (kind == "mlp") {
      report = mlp_probe(train_reprs, eval_reprs, cfg.probe.grid);
    } else {
      throw UsageError("unknown probe kind '" + kind + "' (knn|linear|mlp|ft)");
    }
  }

  std::string csv = report.to_csv();
  if (!report_path.empty()) write_text_file(report_path, csv);
  std::cout << csv;
  std::cout << "best eval accuracy: " << report.best().eval.accuracy << "\n";
  return kExitOk;
}

struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};

void apply_axis(RunConfig& cfg, const std::string& axis, const std::string& value) {
  if (axis == "mask")
    apply_override(cfg, "train.mask_ratio=" + value);
  else if (axis == "layers")
    apply_override(cfg, "model.layers=" + value);
  else if (axis == "hidden")
    apply_override(cfg, "model.hidden_dim=" + value);
  else if (axis == "views")
    apply_override(cfg, "train.clips_per_view=" + value);
  else
    throw UsageError("unknown sweep axis '" + axis + "' (mask|layers|hidden|views)");
}

int cmd_sweep(const SweepAxis& axis1, const SweepAxis& axis2, const std::string& config_path,
              const std::vector<std::string>& overrides, const std::string& train_store_path,
              const std::string& eval_store_path, const std::string& report_path) {
  RunConfig base = load_run_config(config_path, overrides);
  echo_config(base);

  FeatureStore train_store, eval_store;
  if (!train_store_path.empty() && !eval_store_path.empty()) {
    train_store = read_store(train_store_path);
    eval_store = read_store(eval_store_path);
  } else {
    SyntheticStores stores = generate_synthetic(base.synth);
    train_store = std::move(stores.train);
    eval_store = std::move(stores.eval);
  }

  std::ostringstream report;
  report.precision(6);
  report << std::fixed;
  report << "axis,value,axis2,value2,final_total_loss,knn_cls_acc,linear_acc\n";

  std::vector<std::string> second = axis2.values.empty() ? std::vector<std::string>{""} : axis2.values;
  for (const std::string& v1 : axis1.values) {
    for (const std::string& v2 : second) {
      RunConfig cfg = base;
      try {
        apply_axis(cfg, axis1.name, v1);
        if (!v2.empty()) apply_axis(cfg, axis2.name, v2);
        cfg.train.validate();
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      std::cout << "sweep point: " << axis1.name << "=" << v1
                << (v2.empty() ? "" : " " + axis2.name + "=" + v2) << "\n";
      auto result = train<float>(train_store, cfg.train, resolved_model_config(cfg));
      auto train_reprs = extract_representations(train_store, result.checkpoint.params);
      auto eval_reprs = extract_representations(eval_store, result.checkpoint.params);
      KnnConfig knn_cfg = cfg.probe.knn;
      knn_cfg.k = std::min<i64>(knn_cfg.k, static_cast<i64>(train_reprs.size()));
      ProbeOutcome knn = knn_probe(train_reprs, eval_reprs, KnnFeature::cls, knn_cfg);
      ProbeReport linear =
          linear_probe(train_reprs, eval_reprs, LinearMode::scale_concat, cfg.probe.grid);
      report << axis1.name << "," << v1 << "," << axis2.name << "," << v2 << ","
             << result.log.back().total << "," << knn.accuracy << ","
             << linear.best().eval.accuracy << "\n";
    }
  }

  std::string csv = report.str();
  if (!report_path.empty()) write_text_file(report_path, csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_inspect(const std::string& store_path) {
  FeatureStore store = read_store(store_path);
  std::cout << format_stats(store_stats(store));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCALE: clip-set video representation pretraining and probing"};
  app.require_subcommand(1);

  std::string config_path, out_train, out_eval, csv_path, dims, out_path;
  std::string store_path, out_ckpt, log_path, resume_path;
  std::string kind, train_store_path, eval_store_path, ckpt_path, report_path;
  std::string axis_name, axis_values, axis2_name, axis2_values;
  std::vector<std::string> overrides;
  i64 dim = 0;
  double lowshot = 1.0;

  auto* synth = app.add_subcommand("synth", "generate synthetic train/eval stores");
  synth->add_option("--config", config_path, "key=value config file");
  synth->add_option("--out-train", out_train, "output train store path")->required();
  synth->add_option("--out-eval", out_eval, "output eval store path")->required();
  synth->add_option("--set", overrides, "override, key=value (repeatable)");

  auto* import = app.add_subcommand("import", "import delimited clip features");
  import->add_option("--csv", csv_path, "input text file")->required();
  import->add_option("--dims", dims, "video dims HxWxT, e.g. 224x224x160")->required();
  import->add_option("--dim", dim, "feature dimension D")->required();
  import->add_option("--out", out_path, "output store path")->required();

  auto* tr = app.add_subcommand("train", "self-supervised pretraining");
  tr->add_option("--store", store_path, "train store")->required();
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--out-ckpt", out_ckpt, "checkpoint output path")->required();
  tr->add_option("--log", log_path, "per-epoch loss log (csv)");
  tr->add_option("--resume", resume_path, "resume from checkpoint");
  tr->add_option("--set", overrides, "override, key=value (repeatable)");
  std::string mcm_flag, set_flag;
  tr->add_option("--mcm-loss", mcm_flag, "on|off");
  tr->add_option("--set-loss", set_flag, "on|off");

  auto* pr = app.add_subcommand("probe", "evaluate representations");
  pr->add_option("--kind", kind, "knn|linear|mlp|ft")->required();
  pr->add_option("--train-store", train_store_path, "labeled train store")->required();
  pr->add_option("--eval-store", eval_store_path, "labeled eval store")->required();
  pr->add_option("--ckpt", ckpt_path, "checkpoint (required for model-based probes)");
  pr->add_option("--config", config_path, "key=value config file");
  pr->add_option("--lowshot", lowshot, "class-balanced train fraction, e.g. 0.1");
  pr->add_option("--report", report_path, "report csv output path");
  std::string init_flag;
  pr->add_option("--init", init_flag, "ft initialization: checkpoint|random");
  pr->add_option("--set", overrides, "override, key=value (repeatable)");

  auto* sw = app.add_subcommand("sweep", "train+probe over an ablation axis");
  sw->add_option("--axis", axis_name, "mask|layers|hidden|views")->required();
  sw->add_option("--values", axis_values, "comma-separated values")->required();
  sw->add_option("--axis2", axis2_name, "optional second axis");
  sw->add_option("--values2", axis2_values, "values for the second axis");
  sw->add_option("--config", config_path, "key=value config file");
  sw->add_option("--train-store", train_store_path, "train store (default: synthetic from config)");
  sw->add_option("--eval-store", eval_store_path, "eval store");
  sw->add_option("--report", report_path, "report csv output path");
  sw->add_option("--set", overrides, "override, key=value (repeatable)");

  auto* insp = app.add_subcommand("inspect", "print store statistics");
  insp->add_option("--store", store_path, "store path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  auto split_values = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
  };

  try {
    if (*synth) return cmd_synth(config_path, overrides, out_train, out_eval);
    if (*import) return cmd_import(csv_path, dims, dim, out_path);
    if (*tr) {
      if (!mcm_flag.empty()) overrides.push_back("train.mcm_loss=" + mcm_flag);
      if (!set_flag.empty()) overrides.push_back("train.set_loss=" + set_flag);
      return cmd_train(store_path, config_path, overrides, out_ckpt, log_path, resume_path);
    }
    if (*pr) {
      if (!init_flag.empty()) overrides.push_back("probe.init=" + init_flag);
      if (!(lowshot > 0.0 && lowshot <= 1.0)) throw UsageError("--lowshot must be in (0, 1]");
      return cmd_probe(kind, train_store_path, eval_store_path, ckpt_path, config_path, overrides,
                       lowshot, report_path);
    }
    if (*sw) {
      SweepAxis a1{axis_name, split_values(axis_values)};
      SweepAxis a2{axis2_name, axis2_name.empty() ? std::vector<std::string>{} : split_values(axis2_values)};
      if (a1.values.empty()) throw UsageError("--values must not be empty");
      if (!axis2_name.empty() && a2.values.empty())
        throw UsageError("--values2 required when --axis2 is given");
      return cmd_sweep(a1, a2, config_path, overrides, train_store_path, eval_store_path,
                       report_path);
    }
    if (*insp) return cmd_inspect(store_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
