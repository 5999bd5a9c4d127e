#include "scale/probes.hpp"

#include <cmath>
#include <set>

namespace scale {

namespace {

i64 num_classes_of(const std::vector<ReprSet>& reprs, const char* who) {
  i64 max_label = -1;
  for (const ReprSet& r : reprs) {
    if (r.label == kNoLabel)
      throw std::invalid_argument(std::string(who) + ": store is unlabeled");
    max_label = std::max<i64>(max_label, r.label);
  }
  if (max_label < 0) throw std::invalid_argument(std::string(who) + ": no videos");
  return max_label + 1;
}

std::vector<float> video_feature(const ReprSet& r, KnnFeature f) {
  auto mean_rows = [](const Tensor<float>& t) {
    std::vector<float> m(static_cast<size_t>(t.cols()), 0.f);
    for (i64 i = 0; i < t.rows(); ++i)
      for (i64 j = 0; j < t.cols(); ++j) m[static_cast<size_t>(j)] += t.at(i, j);
    for (float& v : m) v /= static_cast<float>(t.rows());
    return m;
  };
  switch (f) {
    case KnnFeature::cls: return r.summary;
    case KnnFeature::mean_raw: return mean_rows(r.raw);
    case KnnFeature::mean_refined: return mean_rows(r.refined);
  }
  throw std::logic_error("unknown knn feature");
}

void l2_normalize_inplace(std::vector<float>& v) {
  double sq = 0;
  for (float x : v) sq += static_cast<double>(x) * x;
  double norm = std::sqrt(sq);
  if (norm == 0.0) throw std::domain_error("knn: zero-norm feature");
  for (float& x : v) x = static_cast<float>(x / norm);
}

}  // namespace

const char* to_string(KnnFeature f) {
  switch (f) {
    case KnnFeature::cls: return "cls";
    case KnnFeature::mean_raw: return "mean_raw";
    case KnnFeature::mean_refined: return "mean_refined";
  }
  return "?";
}

KnnFeature knn_feature_from_string(const std::string& s) {
  if (s == "cls") return KnnFeature::cls;
  if (s == "mean_raw") return KnnFeature::mean_raw;
  if (s == "mean_refined") return KnnFeature::mean_refined;
  throw std::invalid_argument("unknown knn feature '" + s + "' (cls|mean_raw|mean_refined)");
}

const char* to_string(ProbeOptimizer o) {
  return o == ProbeOptimizer::adam ? "adam" : "sgd_momentum";
}

std::vector<ReprSet> extract_representations(const FeatureStore& store, ModelParams<float>& params,
                                             const std::vector<i64>& mask) {
  if (!mask.empty())
    throw std::invalid_argument("extract_representations: masking is not allowed here");
  if (store.videos.empty()) return {};
  size_t clip_count = store.videos.front().clips.size();
  for (const VideoRecord& v : store.videos)
    if (v.clips.size() != clip_count)
      throw std::invalid_argument("extract_representations: non-uniform clip count (video '" +
                                  v.id + "' has " + std::to_string(v.clips.size()) + ", expected " +
                                  std::to_string(clip_count) + ")");

  const i64 D = static_cast<i64>(store.feature_dim);
  std::vector<ReprSet> out;
  out.reserve(store.videos.size());
  for (const VideoRecord& video : store.videos) {
    const i64 K = static_cast<i64>(video.clips.size());
    Tensor<float> feats = Tensor<float>::zeros({K, D});
    Tensor<float> coords = Tensor<float>::zeros({K, 6});
    for (i64 k = 0; k < K; ++k) {
      const ClipRecord& clip = video.clips[static_cast<size_t>(k)];
      std::copy(clip.feature.begin(), clip.feature.end(), feats.row_ptr(k));
      auto c6 = normalized_coords(clip.coords, video);
      std::copy(c6.begin(), c6.end(), coords.row_ptr(k));
    }
    Graph<float> g(/*grad_enabled=*/false);
    ReprSet r;
    r.id = video.id;
    r.label = video.label;
    r.raw = feats;
    auto enc = encode_set(g, params, g.constant(std::move(feats)), coords);
    r.refined = g.value(enc.clip_tokens);
    r.summary = g.value(enc.summary).data;
    out.push_back(std::move(r));
  }
  return out;
}

ProbeOutcome knn_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                       KnnFeature feature, const KnnConfig& config) {
  if (config.k < 1) throw std::invalid_argument("knn: k must be >= 1");
  if (config.k > static_cast<i64>(train.size()))
    throw std::invalid_argument("knn: k exceeds train set size");
  i64 classes = num_classes_of(train, "knn_probe");
  num_classes_of(eval, "knn_probe");

  std::vector<std::vector<float>> train_feats;
  train_feats.reserve(train.size());
  for (const ReprSet& r : train) {
    auto f = video_feature(r, feature);
    l2_normalize_inplace(f);
    train_feats.push_back(std::move(f));
  }

  ProbeOutcome outcome;
  outcome.total = static_cast<i64>(eval.size());
  for (const ReprSet& ev : eval) {
    auto f = video_feature(ev, feature);
    l2_normalize_inplace(f);
    std::vector<std::pair<double, i64>> sims;  // (similarity, train index)
    sims.reserve(train.size());
    for (size_t t = 0; t < train.size(); ++t) {
      if (train[t].id == ev.id) continue;  // leave-one-out when probing a store against itself
      double dot = 0;
      for (size_t j = 0; j < f.size(); ++j) dot += static_cast<double>(f[j]) * train_feats[t][j];
      sims.emplace_back(dot, static_cast<i64>(t));
    }
    i64 k = std::min<i64>(config.k, static_cast<i64>(sims.size()));
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    std::vector<double> score(static_cast<size_t>(classes), 0.0);
    for (i64 i = 0; i < k; ++i) {
      const auto& [sim, ti] = sims[static_cast<size_t>(i)];
      double w = config.weighted ? std::exp(sim / config.temperature) : 1.0;
      score[static_cast<size_t>(train[static_cast<size_t>(ti)].label)] += w;
    }
    i64 pred = static_cast<i64>(std::max_element(score.begin(), score.end()) - score.begin());
    if (pred == ev.label) outcome.correct += 1;
  }
  outcome.accuracy =
      outcome.total > 0 ? static_cast<double>(outcome.correct) / static_cast<double>(outcome.total) : 0.0;
  return outcome;
}

std::vector<GridPoint> ProbeGrid::points() const {
  validate();
  std::vector<GridPoint> out;
  for (double lr : lrs)
    for (double wd : wds)
      for (i64 b : batches)
        for (ProbeOptimizer o : optimizers) out.push_back(GridPoint{lr, wd, b, o});
  return out;
}

void ProbeGrid::validate() const {
  if (lrs.empty() || wds.empty() || batches.empty() || optimizers.empty())
    throw std::invalid_argument("probe grid: empty axis");
  if (epochs < 0) throw std::invalid_argument("probe grid: negative epochs");
  for (i64 b : batches)
    if (b < 1) throw std::invalid_argument("probe grid: batch must be >= 1");
}

const ProbeRow& ProbeReport::best() const {
  for (const ProbeRow& r : rows)
    if (r.best) return r;
  throw std::logic_error("probe report: no best row");
}

std::string ProbeReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "kind,feature,lr,wd,batch,optimizer,train_acc,eval_acc,best\n";
  for (const ProbeRow& r : rows)
    os << r.kind << "," << r.feature << "," << r.point.lr << "," << r.point.wd << ","
       << r.point.batch << "," << to_string(r.point.optimizer) << "," << r.train.accuracy << ","
       << r.eval.accuracy << "," << (r.best ? 1 : 0) << "\n";
  return os.str();
}

namespace {

struct ClipDataset {
  Tensor<float> x;               // n_samples x dim
  std::vector<i64> labels;       // per sample
  std::vector<i64> video_of;     // per sample
  std::vector<i64> video_label;  // per video
  i64 classes = 0;
};

ClipDataset build_clip_dataset(const std::vector<ReprSet>& reprs, LinearMode mode) {
  ClipDataset ds;
  ds.classes = num_classes_of(reprs, "probe");
  i64 n_samples = 0;
  for (const ReprSet& r : reprs) n_samples += r.raw.rows();
  i64 dim = mode == LinearMode::baseline_raw
                ? reprs.front().raw.cols()
                : reprs.front().refined.cols() + static_cast<i64>(reprs.front().summary.size());
  ds.x = Tensor<float>::zeros({n_samples, dim});
  i64 row = 0;
  for (size_t v = 0; v < reprs.size(); ++v) {
    const ReprSet& r = reprs[v];
    ds.video_label.push_back(r.label);
    for (i64 c = 0; c < r.raw.rows(); ++c) {
      float* dst = ds.x.row_ptr(row);
      if (mode == LinearMode::baseline_raw) {
        std::copy(r.raw.row_ptr(c), r.raw.row_ptr(c) + r.raw.cols(), dst);
      } else {
        std::copy(r.refined.row_ptr(c), r.refined.row_ptr(c) + r.refined.cols(), dst);
        std::copy(r.summary.begin(), r.summary.end(), dst + r.refined.cols());
      }
      ds.labels.push_back(r.label);
      ds.video_of.push_back(static_cast<i64>(v));
      ++row;
    }
  }
  return ds;
}

// Batch-norm style standardization without affine terms: training batches
// are normalized with their own statistics while running statistics are
// accumulated for evaluation.
struct RunningStandardizer {
  std::vector<double> mean, var;
  double momentum = 0.1;
  static constexpr double eps = 1e-5;

  explicit RunningStandardizer(i64 dim)
      : mean(static_cast<size_t>(dim), 0.0), var(static_cast<size_t>(dim), 1.0) {}

  void normalize_train(Tensor<float>& batch) {
    i64 m = batch.rows(), n = batch.cols();
    for (i64 j = 0; j < n; ++j) {
      double mu = 0;
      for (i64 i = 0; i < m; ++i) mu += batch.at(i, j);
      mu /= static_cast<double>(m);
      double va = 0;
      for (i64 i = 0; i < m; ++i) {
        double d = batch.at(i, j) - mu;
        va += d * d;
      }
      va /= static_cast<double>(m);
      mean[static_cast<size_t>(j)] = (1.0 - momentum) * mean[static_cast<size_t>(j)] + momentum * mu;
      var[static_cast<size_t>(j)] = (1.0 - momentum) * var[static_cast<size_t>(j)] + momentum * va;
      double inv = 1.0 / std::sqrt(va + eps);
      for (i64 i = 0; i < m; ++i)
        batch.at(i, j) = static_cast<float>((batch.at(i, j) - mu) * inv);
    }
  }

  void normalize_eval(Tensor<float>& batch) const {
    i64 m = batch.rows(), n = batch.cols();
    for (i64 j = 0; j < n; ++j) {
      double inv = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + eps);
      for (i64 i = 0; i < m; ++i)
        batch.at(i, j) = static_cast<float>((batch.at(i, j) - mean[static_cast<size_t>(j)]) * inv);
    }
  }
};

struct SgdMomentumState {
  std::vector<Tensor<float>> velocity;

  static SgdMomentumState init(std::span<Parameter<float>* const> params) {
    SgdMomentumState s;
    for (auto* p : params) s.velocity.push_back(Tensor<float>::zeros(p->value.shape));
    return s;
  }
};

void sgd_momentum_step(std::span<Parameter<float>* const> params, SgdMomentumState& state,
                       double lr, double weight_decay, double momentum = 0.9) {
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<float>& p = *params[pi];
    Tensor<float>& vel = state.velocity[pi];
    for (i64 i = 0; i < p.value.numel(); ++i) {
      double g = p.grad.data[i];
      if (!std::isfinite(g)) throw std::runtime_error("sgd step: non-finite gradient in " + p.name);
      double v = momentum * static_cast<double>(vel.data[i]) + g;
      vel.data[i] = static_cast<float>(v);
      double val = static_cast<double>(p.value.data[i]) * (1.0 - lr * weight_decay);
      p.value.data[i] = static_cast<float>(val - lr * v);
    }
  }
}

// Generic optimizer wrapper so head training code is shared.
struct HeadOptimizer {
  GridPoint point;
  AdamState<float> adam;
  SgdMomentumState sgd;

  static HeadOptimizer init(std::span<Parameter<float>* const> params, const GridPoint& gp) {
    HeadOptimizer o;
    o.point = gp;
    if (gp.optimizer == ProbeOptimizer::adam)
      o.adam = AdamState<float>::init(params);
    else
      o.sgd = SgdMomentumState::init(params);
    return o;
  }

  void step(std::span<Parameter<float>* const> params) {
    if (point.optimizer == ProbeOptimizer::adam)
      adam_step(params, adam, point.lr, 0.9, 0.999, 1e-8, point.wd);
    else
      sgd_momentum_step(params, sgd, point.lr, point.wd);
  }
};

Var cross_entropy_mean(Graph<float>& g, Var logits, std::vector<i64> labels) {
  return g.mean_all(g.sub(g.row_logsumexp(logits), g.pick_per_row(logits, std::move(labels))));
}

// Ensembled accuracy: mean softmax over each video's clips, then argmax.
ProbeOutcome ensembled_accuracy(const Tensor<float>& probs, const std::vector<i64>& video_of,
                                const std::vector<i64>& video_label) {
  i64 classes = probs.cols();
  i64 n_videos = static_cast<i64>(video_label.size());
  Tensor<float> votes = Tensor<float>::zeros({n_videos, classes});
  std::vector<i64> counts(static_cast<size_t>(n_videos), 0);
  for (i64 s = 0; s < probs.rows(); ++s) {
    i64 v = video_of[static_cast<size_t>(s)];
    counts[static_cast<size_t>(v)] += 1;
    for (i64 c = 0; c < classes; ++c) votes.at(v, c) += probs.at(s, c);
  }
  ProbeOutcome out;
  out.total = n_videos;
  for (i64 v = 0; v < n_videos; ++v) {
    const float* row = votes.row_ptr(v);
    i64 pred = static_cast<i64>(std::max_element(row, row + classes) - row);
    if (pred == video_label[static_cast<size_t>(v)]) out.correct += 1;
  }
  out.accuracy = out.total ? static_cast<double>(out.correct) / static_cast<double>(out.total) : 0.0;
  return out;
}

struct HeadArch {
  bool mlp = false;
  i64 hidden = 0;
};

ProbeReport head_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                       LinearMode mode, const ProbeGrid& grid, const HeadArch& arch,
                       const std::string& kind) {
  grid.validate();
  if (arch.mlp && arch.hidden < 1)
    throw std::invalid_argument(kind + ": hidden width must be >= 1");
  ClipDataset tr = build_clip_dataset(train, mode);
  ClipDataset ev = build_clip_dataset(eval, mode);
  if (tr.x.cols() != ev.x.cols()) throw std::invalid_argument(kind + ": train/eval dim mismatch");
  i64 classes = std::max(tr.classes, ev.classes);
  const i64 dim = tr.x.cols();

  Rng grid_rng(grid.seed);
  ProbeReport report;
  auto points = grid.points();
  for (size_t gi = 0; gi < points.size(); ++gi) {
    const GridPoint& gp = points[gi];
    Rng rng = grid_rng.fork(static_cast<std::uint64_t>(gi));

    std::vector<Parameter<float>> owned;
    owned.reserve(4);
    if (arch.mlp) {
      owned.emplace_back("head.l1.weight", detail::uniform_fan_in<float>(dim, arch.hidden, rng));
      owned.emplace_back("head.l1.bias", Tensor<float>::zeros({arch.hidden}));
      owned.emplace_back("head.l2.weight", detail::uniform_fan_in<float>(arch.hidden, arch.hidden, rng));
      owned.emplace_back("head.l2.bias", Tensor<float>::zeros({arch.hidden}));
      owned.emplace_back("head.l3.weight", detail::uniform_fan_in<float>(arch.hidden, classes, rng));
      owned.emplace_back("head.l3.bias", Tensor<float>::zeros({classes}));
    } else {
      owned.emplace_back("head.weight", detail::uniform_fan_in<float>(dim, classes, rng));
      owned.emplace_back("head.bias", Tensor<float>::zeros({classes}));
    }
    std::vector<Parameter<float>*> params;
    for (auto& p : owned) params.push_back(&p);

    auto forward_logits = [&](Graph<float>& g, Var x) {
      if (!arch.mlp) return g.add_row(g.matmul(x, g.leaf(owned[0])), g.leaf(owned[1]));
      Var h = g.add_row(g.matmul(x, g.leaf(owned[0])), g.leaf(owned[1]));
      h = g.gelu(h);
      h = g.add_row(g.matmul(h, g.leaf(owned[2])), g.leaf(owned[3]));
      h = g.gelu(h);
      return g.add_row(g.matmul(h, g.leaf(owned[4])), g.leaf(owned[5]));
    };

    RunningStandardizer stats(dim);
    HeadOptimizer opt = HeadOptimizer::init(params, gp);
    const i64 n = tr.x.rows();
    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (i64 epoch = 0; epoch < grid.epochs; ++epoch) {
      rng.shuffle(order);
      for (i64 begin = 0; begin < n; begin += gp.batch) {
        i64 count = std::min<i64>(gp.batch, n - begin);
        Tensor<float> xb = Tensor<float>::zeros({count, dim});
        std::vector<i64> yb(static_cast<size_t>(count));
        for (i64 i = 0; i < count; ++i) {
          i64 s = order[static_cast<size_t>(begin + i)];
          std::copy(tr.x.row_ptr(s), tr.x.row_ptr(s) + dim, xb.row_ptr(i));
          yb[static_cast<size_t>(i)] = tr.labels[static_cast<size_t>(s)];
        }
        if (grid.bn_no_affine) stats.normalize_train(xb);
        Graph<float> g;
        Var loss = cross_entropy_mean(g, forward_logits(g, g.constant(std::move(xb))), yb);
        for (auto* p : params) p->zero_grad();
        g.backward(loss);
        opt.step(params);
      }
    }

    auto evaluate = [&](const ClipDataset& ds) {
      Tensor<float> x = ds.x;
      if (grid.bn_no_affine) stats.normalize_eval(x);
      Graph<float> g(/*grad_enabled=*/false);
      Var probs = g.row_softmax(forward_logits(g, g.constant(std::move(x))), 1.0f);
      return ensembled_accuracy(g.value(probs), ds.video_of, ds.video_label);
    };

    ProbeRow row;
    row.kind = kind;
    row.feature = mode == LinearMode::baseline_raw ? "raw_clip" : "refined_concat_cls";
    row.point = gp;
    row.train = evaluate(tr);
    row.eval = evaluate(ev);
    report.rows.push_back(row);
  }

  // Argmax over eval accuracy; deterministic tie-breaking.
  size_t best = 0;
  for (size_t i = 1; i < report.rows.size(); ++i) {
    const auto& a = report.rows[i];
    const auto& b = report.rows[best];
    auto key = [](const ProbeRow& r) {
      return std::make_tuple(-r.eval.accuracy, r.point.lr, r.point.wd, r.point.batch,
                             static_cast<int>(r.point.optimizer));
    };
    if (key(a) < key(b)) best = i;
  }
  if (!report.rows.empty()) report.rows[best].best = true;
  return report;
}

}  // namespace

ProbeReport linear_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                         LinearMode mode, const ProbeGrid& grid) {
  return head_probe(train, eval, mode, grid, HeadArch{false, 0},
                    mode == LinearMode::baseline_raw ? "linear_baseline" : "linear_scale");
}

ProbeReport mlp_probe(const std::vector<ReprSet>& train, const std::vector<ReprSet>& eval,
                      const ProbeGrid& grid) {
  return head_probe(train, eval, LinearMode::baseline_raw, grid,
                    HeadArch{true, grid.mlp_hidden}, "mlp_baseline");
}

namespace {

struct VideoInputs {
  std::vector<Tensor<float>> feats;   // per video: K x D
  std::vector<Tensor<float>> coords;  // per video: K x 6
  std::vector<i64> labels;
  i64 classes = 0;
};

VideoInputs build_video_inputs(const FeatureStore& store) {
  VideoInputs in;
  i64 max_label = -1;
  for (const VideoRecord& v : store.videos) {
    if (v.label == kNoLabel) throw std::invalid_argument("ft_probe: store is unlabeled");
    max_label = std::max<i64>(max_label, v.label);
    const i64 K = static_cast<i64>(v.clips.size());
    Tensor<float> f = Tensor<float>::zeros({K, static_cast<i64>(store.feature_dim)});
    Tensor<float> c = Tensor<float>::zeros({K, 6});
    for (i64 k = 0; k < K; ++k) {
      std::copy(v.clips[static_cast<size_t>(k)].feature.begin(),
                v.clips[static_cast<size_t>(k)].feature.end(), f.row_ptr(k));
      auto c6 = normalized_coords(v.clips[static_cast<size_t>(k)].coords, v);
      std::copy(c6.begin(), c6.end(), c.row_ptr(k));
    }
    in.feats.push_back(std::move(f));
    in.coords.push_back(std::move(c));
    in.labels.push_back(v.label);
  }
  in.classes = max_label + 1;
  return in;
}

}  // namespace

ProbeReport ft_probe(const FeatureStore& train_store, const FeatureStore& eval_store,
                     const Checkpoint<float>& checkpoint, FtInit init, const ProbeGrid& grid) {
  grid.validate();
  if (static_cast<i64>(train_store.feature_dim) != checkpoint.config.feature_dim)
    throw std::invalid_argument("ft_probe: store feature_dim does not match checkpoint config");
  VideoInputs tr = build_video_inputs(train_store);
  VideoInputs ev = build_video_inputs(eval_store);
  i64 classes = std::max(tr.classes, ev.classes);
  const i64 dh = checkpoint.config.hidden_dim;

  Rng grid_rng(grid.seed);
  ProbeReport report;
  auto points = grid.points();
  for (size_t gi = 0; gi < points.size(); ++gi) {
    const GridPoint& gp = points[gi];
    Rng rng = grid_rng.fork(static_cast<std::uint64_t>(gi));

    ModelParams<float> params = init == FtInit::from_checkpoint
                                    ? checkpoint.params
                                    : init_params<float>(checkpoint.config, rng.next_u64());
    Parameter<float> head_w("ft_head.weight", detail::uniform_fan_in<float>(2 * dh, classes, rng));
    Parameter<float> head_b("ft_head.bias", Tensor<float>::zeros({classes}));
    std::vector<Parameter<float>*> all = params.all_params();
    all.push_back(&head_w);
    all.push_back(&head_b);

    auto forward_batch = [&](Graph<float>& g, const VideoInputs& in, const std::vector<i64>& vids,
                             std::vector<i64>* sample_video, std::vector<i64>* sample_label) {
      std::vector<SetInput<float>> sets;
      for (i64 v : vids) {
        Tensor<float> feats = in.feats[static_cast<size_t>(v)];
        sets.push_back(SetInput<float>{g.constant(std::move(feats)),
                                       in.coords[static_cast<size_t>(v)], {}});
      }
      auto encs = encode_sets(g, params, std::span<const SetInput<float>>(sets));
      std::vector<Var> rows;
      for (size_t s = 0; s < encs.size(); ++s) {
        i64 K = g.value(encs[s].clip_tokens).rows();
        std::vector<i64> rep(static_cast<size_t>(K), 0);
        std::array<Var, 2> parts = {encs[s].clip_tokens, g.gather_rows(encs[s].summary, rep)};
        rows.push_back(g.concat_cols(parts));
        if (sample_video)
          for (i64 k = 0; k < K; ++k) sample_video->push_back(vids[s]);
        if (sample_label)
          for (i64 k = 0; k < K; ++k) sample_label->push_back(in.labels[static_cast<size_t>(vids[s])]);
      }
      Var x = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
      return g.add_row(g.matmul(x, g.leaf(head_w)), g.leaf(head_b));
    };

    HeadOptimizer opt = HeadOptimizer::init(std::span<Parameter<float>* const>(all), gp);
    const i64 n_videos = static_cast<i64>(tr.feats.size());
    std::vector<i64> order(static_cast<size_t>(n_videos));
    std::iota(order.begin(), order.end(), 0);
    for (i64 epoch = 0; epoch < grid.epochs; ++epoch) {
      rng.shuffle(order);
      for (i64 begin = 0; begin < n_videos; begin += gp.batch) {
        i64 count = std::min<i64>(gp.batch, n_videos - begin);
        std::vector<i64> vids(order.begin() + begin, order.begin() + begin + count);
        Graph<float> g;
        std::vector<i64> labels;
        Var logits = forward_batch(g, tr, vids, nullptr, &labels);
        Var loss = cross_entropy_mean(g, logits, labels);
        for (auto* p : all) p->zero_grad();
        g.backward(loss);
        opt.step(std::span<Parameter<float>* const>(all));
      }
    }

    auto evaluate = [&](const VideoInputs& in) {
      std::vector<i64> vids(in.feats.size());
      std::iota(vids.begin(), vids.end(), 0);
      // Forward in chunks to bound graph size.
      std::vector<i64> all_video_of;
      i64 chunk = 64;
      std::vector<Tensor<float>> prob_parts;
      for (i64 begin = 0; begin < static_cast<i64>(vids.size()); begin += chunk) {
        i64 count = std::min<i64>(chunk, static_cast<i64>(vids.size()) - begin);
        std::vector<i64> part(vids.begin() + begin, vids.begin() + begin + count);
        Graph<float> g(/*grad_enabled=*/false);
        std::vector<i64> vof;
        Var logits = forward_batch(g, in, part, &vof, nullptr);
        Var probs = g.row_softmax(logits, 1.0f);
        prob_parts.push_back(g.value(probs));
        all_video_of.insert(all_video_of.end(), vof.begin(), vof.end());
      }
      i64 total_rows = 0;
      for (auto& p : prob_parts) total_rows += p.rows();
      Tensor<float> probs = Tensor<float>::zeros({total_rows, classes});
      i64 r = 0;
      for (auto& p : prob_parts) {
        std::copy(p.data.begin(), p.data.end(), probs.data.begin() + r * classes);
        r += p.rows();
      }
      return ensembled_accuracy(probs, all_video_of, in.labels);
    };

    ProbeRow row;
    row.kind = init == FtInit::from_checkpoint ? "ft_scale" : "ft_random";
    row.feature = "refined_concat_cls";
    row.point = gp;
    row.train = evaluate(tr);
    row.eval = evaluate(ev);
    report.rows.push_back(row);
  }

  size_t best = 0;
  for (size_t i = 1; i < report.rows.size(); ++i) {
    auto key = [](const ProbeRow& r) {
      return std::make_tuple(-r.eval.accuracy, r.point.lr, r.point.wd, r.point.batch,
                             static_cast<int>(r.point.optimizer));
    };
    if (key(report.rows[i]) < key(report.rows[best])) best = i;
  }
  if (!report.rows.empty()) report.rows[best].best = true;
  return report;
}

FeatureStore lowshot_subsample(const FeatureStore& store, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("lowshot: fraction must be in (0, 1]");
  if (!store.labeled()) throw std::invalid_argument("lowshot: store is unlabeled");

  std::map<std::int32_t, std::vector<i64>> by_class;
  for (size_t i = 0; i < store.videos.size(); ++i)
    by_class[store.videos[i].label].push_back(static_cast<i64>(i));

  Rng rng(seed);
  std::set<i64> keep;
  for (auto& [cls, idx] : by_class) {
    i64 n = std::max<i64>(1, std::llround(fraction * static_cast<double>(idx.size())));
    std::vector<i64> order = idx;
    rng.shuffle(order);
    for (i64 i = 0; i < n; ++i) keep.insert(order[static_cast<size_t>(i)]);
  }

  FeatureStore out;
  out.feature_dim = store.feature_dim;
  for (i64 i : keep) out.videos.push_back(store.videos[static_cast<size_t>(i)]);
  return out;
}

double binomial_p_value_geq(i64 n, i64 k, double p) {
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  double tail = 0.0;
  for (i64 i = k; i <= n; ++i) {
    double log_pmf = std::lgamma(static_cast<double>(n) + 1) -
                     std::lgamma(static_cast<double>(i) + 1) -
                     std::lgamma(static_cast<double>(n - i) + 1) +
                     static_cast<double>(i) * std::log(p) +
                     static_cast<double>(n - i) * std::log1p(-p);
    tail += std::exp(log_pmf);
  }
  return std::min(tail, 1.0);
}

}  // namespace scale
