#pragma once

// Self-supervised optimization loop: Adam with decoupled weight decay and
// cosine-annealed learning rate over shuffled epochs, plus SCKP checkpoint
// serialization with bit-exact resume.

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "scale/binio.hpp"
#include "scale/losses.hpp"
#include "scale/sampler.hpp"

namespace scale {

struct TrainConfig {
  i64 epochs = 100;
  i64 batch_size = 64;
  double lr_max = 1e-3;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::uint64_t seed = 42;
  LossToggles losses;
  i64 clips_per_view = 8;
  double mask_ratio = 0.25;
  i64 checkpoint_every = 0;  // epochs; 0 = only at the end
  int threads = 1;           // 1 = serial deterministic mode

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("train config: batch_size must be >= 2");
    if (!(lr_min >= 0 && lr_min <= lr_max))
      throw std::invalid_argument("train config: need 0 <= lr_min <= lr_max");
    losses.validate();
    BatchSpec{batch_size, clips_per_view, mask_ratio}.validate();
  }
};

inline double cosine_lr(i64 step, i64 total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) return lr_min;
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                      static_cast<double>(total_steps)));
}

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // aligned with the parameter list
  i64 step = 0;

  static AdamState init(std::span<Parameter<T>* const> params) {
    AdamState s;
    for (auto* p : params) {
      s.m.push_back(Tensor<T>::zeros(p->value.shape));
      s.v.push_back(Tensor<T>::zeros(p->value.shape));
    }
    return s;
  }
};

// Standard bias-corrected Adam; decoupled weight decay is applied as
// value *= (1 - lr * wd) before the Adam delta. Throws on non-finite
// gradients so a diverged run halts loudly.
template <class T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr,
               double beta1, double beta2, double eps, double weight_decay) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: state/parameter count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<T>& p = *params[pi];
    Tensor<T>& m = state.m[pi];
    Tensor<T>& v = state.v[pi];
    for (i64 i = 0; i < p.value.numel(); ++i) {
      double g = static_cast<double>(p.grad.data[i]);
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in " + p.name);
      double mi = beta1 * static_cast<double>(m.data[i]) + (1.0 - beta1) * g;
      double vi = beta2 * static_cast<double>(v.data[i]) + (1.0 - beta2) * g * g;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      double val = static_cast<double>(p.value.data[i]) * (1.0 - lr * weight_decay);
      val -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      p.value.data[i] = static_cast<T>(val);
    }
  }
}

struct EpochLog {
  i64 epoch = 0;  // 1-based
  double mcm = 0, set = 0, total = 0, lr = 0;
};

inline std::string loss_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,mcm,set,total,lr\n";
  for (const EpochLog& e : log)
    os << e.epoch << "," << e.mcm << "," << e.set << "," << e.total << "," << e.lr << "\n";
  return os.str();
}

template <class T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
  AdamState<T> moments;
  i64 epochs_done = 0;
  Rng rng;
  std::uint64_t config_hash = 0;
};

inline std::uint64_t hash_config(const ModelConfig& m, const TrainConfig& t) {
  std::ostringstream os;
  os << m.feature_dim << "|" << m.hidden_dim << "|" << m.layers << "|" << m.heads << "|"
     << m.proj_dim << "|" << m.temperature << "|" << m.mask_ratio << "|" << m.clips_per_view
     << "|" << t.epochs << "|" << t.batch_size << "|" << t.lr_max << "|" << t.lr_min << "|"
     << t.beta1 << "|" << t.beta2 << "|" << t.eps << "|" << t.weight_decay << "|" << t.seed
     << "|" << t.losses.mcm << "|" << t.losses.set << "|" << t.clips_per_view << "|"
     << t.mask_ratio;
  return binio::fnv1a(os.str());
}

namespace detail {

inline void put_model_config(std::string& out, const ModelConfig& c) {
  binio::put_i64(out, c.feature_dim);
  binio::put_i64(out, c.hidden_dim);
  binio::put_i64(out, c.layers);
  binio::put_i64(out, c.heads);
  binio::put_i64(out, c.proj_dim);
  binio::put_f64(out, c.temperature);
  binio::put_f64(out, c.mask_ratio);
  binio::put_i64(out, c.clips_per_view);
}

inline ModelConfig read_model_config(binio::Cursor& cur) {
  ModelConfig c;
  c.feature_dim = cur.i64v("feature_dim");
  c.hidden_dim = cur.i64v("hidden_dim");
  c.layers = cur.i64v("layers");
  c.heads = cur.i64v("heads");
  c.proj_dim = cur.i64v("proj_dim");
  c.temperature = cur.f64("temperature");
  c.mask_ratio = cur.f64("mask_ratio");
  c.clips_per_view = cur.i64v("clips_per_view");
  return c;
}

template <class T>
void put_tensor(std::string& out, const Tensor<T>& t) {
  binio::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (i64 e : t.shape) binio::put_i64(out, e);
  for (T v : t.data) {
    if constexpr (sizeof(T) == 4)
      binio::put_f32(out, static_cast<float>(v));
    else
      binio::put_f64(out, static_cast<double>(v));
  }
}

template <class T>
Tensor<T> read_tensor(binio::Cursor& cur) {
  std::uint32_t rank = cur.u32("tensor rank");
  std::vector<i64> shape(rank);
  for (auto& e : shape) e = cur.i64v("tensor shape");
  Tensor<T> t = Tensor<T>::zeros(shape);
  for (i64 i = 0; i < t.numel(); ++i) {
    if constexpr (sizeof(T) == 4)
      t.data[i] = static_cast<T>(cur.f32("tensor data"));
    else
      t.data[i] = static_cast<T>(cur.f64("tensor data"));
  }
  return t;
}

}  // namespace detail

// SCKP layout, little-endian:
//   "SCKP" | version u32 | scalar width u32 | config hash u64 | model config
//   | epochs_done i64 | adam step i64 | rng state 4 x u64
//   | named parameter blocks (name, value tensor, adam m, adam v)
//   | fnv1a checksum of everything before it (u64)
template <class T>
void save_checkpoint(const std::string& path, Checkpoint<T>& ckpt) {
  std::string out;
  out.append("SCKP", 4);
  binio::put_u32(out, 1);
  binio::put_u32(out, sizeof(T) == 4 ? 32 : 64);
  binio::put_u64(out, ckpt.config_hash);
  detail::put_model_config(out, ckpt.config);
  binio::put_i64(out, ckpt.epochs_done);
  binio::put_i64(out, ckpt.moments.step);
  for (std::uint64_t w : ckpt.rng.state()) binio::put_u64(out, w);

  auto params = ckpt.params.all_params();
  if (params.size() != ckpt.moments.m.size())
    throw std::runtime_error("save_checkpoint: optimizer state does not match parameters");
  binio::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    binio::put_str(out, params[i]->name);
    detail::put_tensor(out, params[i]->value);
    detail::put_tensor(out, ckpt.moments.m[i]);
    detail::put_tensor(out, ckpt.moments.v[i]);
  }
  binio::put_u64(out, binio::fnv1a(out));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("rename failed: " + path + ": " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();
  if (buf.size() < 8 + 4) throw std::runtime_error("checkpoint too short: " + path);

  const std::string body = buf.substr(0, buf.size() - 8);
  binio::Cursor tail{buf, buf.size() - 8};
  if (tail.u64("checksum") != binio::fnv1a(body))
    throw std::runtime_error("checkpoint checksum mismatch (corrupted file): " + path);

  binio::Cursor cur{buf};
  if (buf.compare(0, 4, "SCKP") != 0) throw std::runtime_error("bad checkpoint magic: " + path);
  cur.pos = 4;
  std::uint32_t version = cur.u32("version");
  if (version != 1) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t width = cur.u32("scalar width");
  if (width != (sizeof(T) == 4 ? 32u : 64u))
    throw std::runtime_error("checkpoint scalar width " + std::to_string(width) +
                             " does not match requested precision");

  Checkpoint<T> ckpt;
  ckpt.config_hash = cur.u64("config hash");
  ckpt.config = detail::read_model_config(cur);
  ckpt.epochs_done = cur.i64v("epochs_done");
  ckpt.moments.step = cur.i64v("adam step");
  std::array<std::uint64_t, 4> rng_state;
  for (auto& w : rng_state) w = cur.u64("rng state");
  ckpt.rng.set_state(rng_state);

  // Recreate the parameter tree for this config, then fill by name.
  ckpt.params = init_params<T>(ckpt.config, 0);
  auto params = ckpt.params.all_params();
  std::uint32_t count = cur.u32("param count");
  if (count != params.size())
    throw std::runtime_error("checkpoint parameter count mismatch: file has " +
                             std::to_string(count) + ", config needs " +
                             std::to_string(params.size()));
  ckpt.moments.m.clear();
  ckpt.moments.v.clear();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = cur.str("param name");
    if (name != params[i]->name)
      throw std::runtime_error("checkpoint parameter order mismatch at '" + name + "'");
    Tensor<T> value = detail::read_tensor<T>(cur);
    if (value.shape != params[i]->value.shape)
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "'");
    params[i]->value = std::move(value);
    ckpt.moments.m.push_back(detail::read_tensor<T>(cur));
    ckpt.moments.v.push_back(detail::read_tensor<T>(cur));
  }
  return ckpt;
}

template <class T>
struct TrainResult {
  Checkpoint<T> checkpoint;
  std::vector<EpochLog> log;
};

// One optimization run over shuffled epochs. When `resume` is non-null,
// training continues from its state and the combined run is bit-identical
// (in serial mode) to an uninterrupted one. `checkpoint_path`, if set, is
// written atomically every checkpoint_every epochs and at the end.
template <class T>
TrainResult<T> train(const FeatureStore& store, const TrainConfig& tc, const ModelConfig& mc_in,
                     const std::string& checkpoint_path = "",
                     const Checkpoint<T>* resume = nullptr,
                     const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  TrainConfig cfg = tc;
  cfg.validate();
  ModelConfig mc = mc_in;
  if (mc.feature_dim == 0) mc.feature_dim = static_cast<i64>(store.feature_dim);
  if (static_cast<i64>(store.feature_dim) != mc.feature_dim)
    throw std::invalid_argument("train: store feature_dim " + std::to_string(store.feature_dim) +
                                " does not match model config " + std::to_string(mc.feature_dim));
  mc.mask_ratio = cfg.mask_ratio;
  mc.clips_per_view = cfg.clips_per_view;
  mc.validate();
  if (store.videos.empty()) throw std::invalid_argument("train: empty store");
  for (const VideoRecord& v : store.videos)
    if (static_cast<i64>(v.clips.size()) < 2 * cfg.clips_per_view)
      throw std::invalid_argument("train: video '" + v.id + "' has fewer than 2K clips");

  set_num_threads(cfg.threads);
  const std::uint64_t config_hash = hash_config(mc, cfg);

  TrainResult<T> result;
  Checkpoint<T>& ckpt = result.checkpoint;
  if (resume) {
    if (resume->config_hash != config_hash)
      throw std::invalid_argument("train: checkpoint config hash does not match this run");
    ckpt = *resume;
  } else {
    ckpt.config = mc;
    ckpt.params = init_params<T>(mc, cfg.seed);
    auto params = ckpt.params.all_params();
    ckpt.moments = AdamState<T>::init(std::span<Parameter<T>* const>(params));
    ckpt.rng = Rng(cfg.seed);
    ckpt.config_hash = config_hash;
  }

  auto params = ckpt.params.all_params();
  const i64 n_videos = static_cast<i64>(store.videos.size());
  const i64 full_batches = n_videos / cfg.batch_size;
  const i64 remainder = n_videos % cfg.batch_size;
  const i64 batches_per_epoch = full_batches + (remainder >= 2 ? 1 : 0);
  if (batches_per_epoch == 0)
    throw std::invalid_argument("train: store smaller than one batch of 2");
  const i64 total_steps = cfg.epochs * batches_per_epoch;

  BatchSpec bspec{cfg.batch_size, cfg.clips_per_view, cfg.mask_ratio};
  const T temperature = static_cast<T>(mc.temperature);

  for (i64 epoch = ckpt.epochs_done; epoch < cfg.epochs; ++epoch) {
    std::vector<i64> order(static_cast<size_t>(n_videos));
    std::iota(order.begin(), order.end(), 0);
    ckpt.rng.shuffle(order);

    double sum_mcm = 0, sum_set = 0;
    double epoch_lr = cosine_lr(ckpt.moments.step, total_steps, cfg.lr_max, cfg.lr_min);
    for (i64 b = 0; b < batches_per_epoch; ++b) {
      i64 begin = b * cfg.batch_size;
      i64 count = std::min<i64>(cfg.batch_size, n_videos - begin);
      std::vector<i64> vids(order.begin() + begin, order.begin() + begin + count);
      PackedBatch batch = assemble_batch(store, vids, bspec, ckpt.rng);

      Graph<T> g;
      const i64 B = batch.batch_videos, K = batch.clips_per_view;
      std::vector<SetInput<T>> sets;
      std::vector<Var> view_targets[2];
      for (i64 v = 0; v < B; ++v) {
        int view_i = 0;
        for (const PackedView* view : {&batch.view1, &batch.view2}) {
          Tensor<T> feats = Tensor<T>::zeros({K, static_cast<i64>(store.feature_dim)});
          Tensor<T> coords = Tensor<T>::zeros({K, 6});
          for (i64 k = 0; k < K; ++k) {
            i64 row = v * K + k;
            for (i64 d = 0; d < feats.cols(); ++d)
              feats.at(k, d) = static_cast<T>(view->features.at(row, d));
            for (i64 d = 0; d < 6; ++d) coords.at(k, d) = static_cast<T>(view->coords.at(row, d));
          }
          Var fv = g.constant(std::move(feats));
          view_targets[view_i].push_back(fv);
          sets.push_back(SetInput<T>{fv, std::move(coords), view->masks[static_cast<size_t>(v)]});
          ++view_i;
        }
      }
      auto encodings = encode_sets(g, ckpt.params, std::span<const SetInput<T>>(sets));

      std::vector<McmSet<T>> mcm_sets;
      std::vector<Var> cls1, cls2;
      for (i64 v = 0; v < B; ++v) {
        mcm_sets.push_back(McmSet<T>{encodings[2 * v].clip_tokens, sets[2 * v].features,
                                     sets[2 * v].mask});
        mcm_sets.push_back(McmSet<T>{encodings[2 * v + 1].clip_tokens, sets[2 * v + 1].features,
                                     sets[2 * v + 1].mask});
        cls1.push_back(encodings[2 * v].summary);
        cls2.push_back(encodings[2 * v + 1].summary);
      }
      Var c1 = g.concat_rows(cls1);
      Var c2 = g.concat_rows(cls2);
      auto loss = total_loss(g, ckpt.params, std::span<const McmSet<T>>(mcm_sets), c1, c2,
                             temperature, cfg.losses);
      if (!std::isfinite(loss.report.total))
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(ckpt.moments.step));

      ckpt.params.zero_grads();
      g.backward(loss.value);
      double lr = cosine_lr(ckpt.moments.step, total_steps, cfg.lr_max, cfg.lr_min);
      adam_step(std::span<Parameter<T>* const>(params), ckpt.moments, lr, cfg.beta1, cfg.beta2,
                cfg.eps, cfg.weight_decay);

      sum_mcm += loss.report.mcm;
      sum_set += loss.report.set;
    }

    ckpt.epochs_done = epoch + 1;
    EpochLog el;
    el.epoch = epoch + 1;
    el.mcm = sum_mcm / static_cast<double>(batches_per_epoch);
    el.set = sum_set / static_cast<double>(batches_per_epoch);
    el.total = el.mcm + el.set;
    el.lr = epoch_lr;
    result.log.push_back(el);
    if (on_epoch) on_epoch(el);

    if (!checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        ckpt.epochs_done % cfg.checkpoint_every == 0 && ckpt.epochs_done < cfg.epochs)
      save_checkpoint(checkpoint_path, ckpt);
  }

  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, ckpt);
  return result;
}

}  // namespace scale
