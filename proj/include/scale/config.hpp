#pragma once

// Flat key=value run configuration covering the synthetic generator, model,
// trainer, and probes. Parsing is total: unknown keys are rejected and the
// fully resolved config can be echoed for provenance.

#include <string>
#include <vector>

#include "scale/featurestore.hpp"
#include "scale/model.hpp"
#include "scale/probes.hpp"
#include "scale/trainer.hpp"

namespace scale {

struct ProbeOptions {
  KnnConfig knn;
  KnnFeature feature = KnnFeature::cls;
  LinearMode linear_mode = LinearMode::scale_concat;
  FtInit ft_init = FtInit::from_checkpoint;
  ProbeGrid grid;
};

struct RunConfig {
  SyntheticSpec synth;
  ModelConfig model;
  TrainConfig train;
  ProbeOptions probe;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "key = value" lines, '#' comments, blank lines ignored.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source);
void apply_config_file(RunConfig& cfg, const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key_equals_value);

// Every key, including defaults that were filled in.
std::string echo_effective(const RunConfig& cfg);

// The trainer's model config gets its data-coupled fields from train/store.
ModelConfig resolved_model_config(const RunConfig& cfg);

}  // namespace scale
