#pragma once

// Frozen-representation evaluation: k-NN, linear, MLP, and
// predictor-fine-tune probes over eval clip grids, with hyperparameter grid
// search, optional feature standardization, and class-balanced low-shot
// subsampling. Probes never modify stores or checkpoints.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "scale/trainer.hpp"

namespace scale {

struct ReprSet {
  std::string id;
  std::int32_t label = kNoLabel;
  Tensor<float> raw;       // n_clips x D, stored clip features
  Tensor<float> refined;   // n_clips x d_h, predictor outputs
  std::vector<float> summary;  // d_h, CLS output
};

// One encode_set call per video over all of its clips, no masking. The
// mask argument only exists so callers cannot smuggle one in: non-empty is
// rejected here.
std::vector<ReprSet> extract_representations(const FeatureStore& store, ModelParams<float>& params,
                                             const std::vector<i64>& mask = {});

enum class KnnFeature { cls, mean_raw, mean_refined };

const char* to_string(KnnFeature f);
KnnFeature knn_feature_from_string(const std::string& s);

struct KnnConfig {
  i64 k = 20;
  double temperature = 0.07;  // weight = exp(sim / temperature)
  bool weighted = true;       // false = plain majority vote
};

struct ProbeOutcome {
  double accuracy = 0;
  i64 correct = 0;
  i64 total = 0;
};

// Cosine k-NN on l2-normalized video-level features. When an eval video's
// id also appears in the train set, that neighbor is excluded (leave-one-out
// behavior when probing a store against itself).
ProbeOutcome knn_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                       KnnFeature feature, const KnnConfig& config);

enum class ProbeOptimizer { adam, sgd_momentum };
const char* to_string(ProbeOptimizer o);

struct GridPoint {
  double lr = 1e-3;
  double wd = 0;
  i64 batch = 64;
  ProbeOptimizer optimizer = ProbeOptimizer::adam;
};

struct ProbeGrid {
  std::vector<double> lrs = {1e-3, 3e-3, 1e-2};
  std::vector<double> wds = {0.0, 1e-4};
  std::vector<i64> batches = {64, 256};
  std::vector<ProbeOptimizer> optimizers = {ProbeOptimizer::adam, ProbeOptimizer::sgd_momentum};
  i64 epochs = 20;
  i64 mlp_hidden = 256;
  bool bn_no_affine = false;
  std::uint64_t seed = 123;

  std::vector<GridPoint> points() const;
  void validate() const;
};

struct ProbeRow {
  std::string kind;
  std::string feature;
  GridPoint point;
  ProbeOutcome train;
  ProbeOutcome eval;
  bool best = false;
};

struct ProbeReport {
  std::vector<ProbeRow> rows;

  const ProbeRow& best() const;
  std::string to_csv() const;
};

enum class LinearMode { scale_concat, baseline_raw };

// Per-clip softmax head (affine for linear, three-layer MLP for mlp_probe)
// trained with cross-entropy; video prediction is the argmax of the mean
// softmax over the video's clips. Grid search reports one row per point;
// best row maximizes eval accuracy with ties broken toward smaller lr, then
// smaller wd, then smaller batch, then adam before sgd.
ProbeReport linear_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                         LinearMode mode, const ProbeGrid& grid);
ProbeReport mlp_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                      const ProbeGrid& grid);

enum class FtInit { from_checkpoint, random };

// Unfreezes the predictor network and trains it jointly with a linear head
// on concat(refined_clip, summary). init selects SCALE pretraining vs the
// randomly initialized Transformer baseline; everything else is identical.
ProbeReport ft_probe(const FeatureStore& train_store, const FeatureStore& eval_store,
                     const Checkpoint<float>& checkpoint, FtInit init, const ProbeGrid& grid);

// Class-balanced subsample: per class max(1, round(fraction * count)) videos,
// uniform without replacement, original order preserved.
FeatureStore lowshot_subsample(const FeatureStore& store, double fraction, std::uint64_t seed);

// One-sided binomial tail P[X >= k], X ~ Binomial(n, p). Used to compare a
// probe against a baseline accuracy.
double binomial_p_value_geq(i64 n, i64 k, double p);

}  // namespace scale
