#pragma once

// The predictor network: input projection, positional MLP, learned MSK and
// CLS tokens, a pre-norm encoder-only transformer, and four contrastive
// projection heads. Multiple clip sets are encoded in one graph so the wide
// affine layers run as single batched matmuls; per-set math is identical to
// encoding the set alone.

#include <span>
#include <vector>

#include "scale/graph.hpp"
#include "scale/rng.hpp"

namespace scale {

struct ModelConfig {
  i64 feature_dim = 64;   // D_in, from the store
  i64 hidden_dim = 256;   // d_h
  i64 layers = 2;         // L
  i64 heads = 4;
  i64 proj_dim = 128;     // d, common contrastive space
  double temperature = 0.1;
  double mask_ratio = 0.25;
  i64 clips_per_view = 8;  // K

  void validate() const {
    if (feature_dim < 1 || hidden_dim < 1 || proj_dim < 1)
      throw std::invalid_argument("model config: dims must be positive");
    if (layers < 1) throw std::invalid_argument("model config: need at least one layer");
    if (heads < 1 || hidden_dim % heads != 0)
      throw std::invalid_argument("model config: hidden_dim must be divisible by heads");
    if (!(temperature > 0)) throw std::invalid_argument("model config: temperature must be > 0");
  }
};

template <class T>
struct AffineLayer {
  Parameter<T> weight;  // in x out
  Parameter<T> bias;    // out
};

template <class T>
struct BlockParams {
  Parameter<T> ln1_gain, ln1_bias;
  AffineLayer<T> wq, wv, wo;
  Parameter<T> wk;  // no key bias: a shared key offset cancels in the softmax
  Parameter<T> ln2_gain, ln2_bias;
  AffineLayer<T> ff1, ff2;
};

// Three affine layers with GELU between; no normalization inside.
template <class T>
struct HeadParams {
  AffineLayer<T> l1, l2, l3;
};

enum class HeadKind { mcm_anchor, mcm_target, set_view1, set_view2 };

template <class T>
struct ModelParams {
  ModelConfig config;
  AffineLayer<T> input_proj;     // D_in -> d_h
  AffineLayer<T> pos1, pos2;     // 6 -> d_h -> d_h
  Parameter<T> msk_token;        // 1 x d_h
  Parameter<T> cls_token;        // 1 x d_h
  std::vector<BlockParams<T>> blocks;
  Parameter<T> final_ln_gain, final_ln_bias;
  HeadParams<T> mcm_anchor;  // theta_A^mcm on refined tokens (d_h in)
  HeadParams<T> mcm_target;  // theta_B^mcm on raw clip features (D_in in)
  HeadParams<T> set_a, set_b;

  HeadParams<T>& head(HeadKind k) {
    switch (k) {
      case HeadKind::mcm_anchor: return mcm_anchor;
      case HeadKind::mcm_target: return mcm_target;
      case HeadKind::set_view1: return set_a;
      case HeadKind::set_view2: return set_b;
    }
    throw std::logic_error("unknown head");
  }

  std::vector<Parameter<T>*> all_params() {
    std::vector<Parameter<T>*> out;
    auto aff = [&](AffineLayer<T>& a) {
      out.push_back(&a.weight);
      out.push_back(&a.bias);
    };
    aff(input_proj);
    aff(pos1);
    aff(pos2);
    out.push_back(&msk_token);
    out.push_back(&cls_token);
    for (auto& blk : blocks) {
      out.push_back(&blk.ln1_gain);
      out.push_back(&blk.ln1_bias);
      aff(blk.wq);
      out.push_back(&blk.wk);
      aff(blk.wv);
      aff(blk.wo);
      out.push_back(&blk.ln2_gain);
      out.push_back(&blk.ln2_bias);
      aff(blk.ff1);
      aff(blk.ff2);
    }
    out.push_back(&final_ln_gain);
    out.push_back(&final_ln_bias);
    for (HeadParams<T>* h : {&mcm_anchor, &mcm_target, &set_a, &set_b}) {
      aff(h->l1);
      aff(h->l2);
      aff(h->l3);
    }
    return out;
  }

  i64 param_count() {
    i64 n = 0;
    for (auto* p : all_params()) n += p->numel();
    return n;
  }

  void zero_grads() {
    for (auto* p : all_params()) p->zero_grad();
  }
};

namespace detail {

template <class T>
Tensor<T> uniform_fan_in(i64 fan_in, i64 fan_out, Rng& rng) {
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> w = Tensor<T>::zeros({fan_in, fan_out});
  for (auto& v : w.data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  return w;
}

template <class T>
AffineLayer<T> init_affine(const std::string& name, i64 in, i64 out, Rng& rng) {
  AffineLayer<T> a;
  a.weight = Parameter<T>(name + ".weight", uniform_fan_in<T>(in, out, rng));
  a.bias = Parameter<T>(name + ".bias", Tensor<T>::zeros({out}));
  return a;
}

template <class T>
HeadParams<T> init_head(const std::string& name, i64 in, i64 hidden, i64 out, Rng& rng) {
  HeadParams<T> h;
  h.l1 = init_affine<T>(name + ".l1", in, hidden, rng);
  h.l2 = init_affine<T>(name + ".l2", hidden, hidden, rng);
  h.l3 = init_affine<T>(name + ".l3", hidden, out, rng);
  return h;
}

}  // namespace detail

template <class T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const i64 dh = config.hidden_dim;
  ModelParams<T> p;
  p.config = config;
  p.input_proj = detail::init_affine<T>("input_proj", config.feature_dim, dh, rng);
  p.pos1 = detail::init_affine<T>("pos_mlp.l1", 6, dh, rng);
  p.pos2 = detail::init_affine<T>("pos_mlp.l2", dh, dh, rng);
  auto token = [&](const std::string& name) {
    Tensor<T> t = Tensor<T>::zeros({1, dh});
    for (auto& v : t.data) v = static_cast<T>(0.02 * rng.normal());
    return Parameter<T>(name, std::move(t));
  };
  p.msk_token = token("msk_token");
  p.cls_token = token("cls_token");
  for (i64 l = 0; l < config.layers; ++l) {
    std::string b = "block" + std::to_string(l);
    BlockParams<T> blk;
    blk.ln1_gain = Parameter<T>(b + ".ln1.gain", Tensor<T>::full({dh}, T(1)));
    blk.ln1_bias = Parameter<T>(b + ".ln1.bias", Tensor<T>::zeros({dh}));
    blk.wq = detail::init_affine<T>(b + ".attn.q", dh, dh, rng);
    blk.wk = Parameter<T>(b + ".attn.k.weight", detail::uniform_fan_in<T>(dh, dh, rng));
    blk.wv = detail::init_affine<T>(b + ".attn.v", dh, dh, rng);
    blk.wo = detail::init_affine<T>(b + ".attn.out", dh, dh, rng);
    blk.ln2_gain = Parameter<T>(b + ".ln2.gain", Tensor<T>::full({dh}, T(1)));
    blk.ln2_bias = Parameter<T>(b + ".ln2.bias", Tensor<T>::zeros({dh}));
    blk.ff1 = detail::init_affine<T>(b + ".ff1", dh, 4 * dh, rng);
    blk.ff2 = detail::init_affine<T>(b + ".ff2", 4 * dh, dh, rng);
    p.blocks.push_back(std::move(blk));
  }
  p.final_ln_gain = Parameter<T>("final_ln.gain", Tensor<T>::full({dh}, T(1)));
  p.final_ln_bias = Parameter<T>("final_ln.bias", Tensor<T>::zeros({dh}));
  p.mcm_anchor = detail::init_head<T>("head.mcm_anchor", dh, dh, config.proj_dim, rng);
  p.mcm_target = detail::init_head<T>("head.mcm_target", config.feature_dim, dh, config.proj_dim, rng);
  p.set_a = detail::init_head<T>("head.set_a", dh, dh, config.proj_dim, rng);
  p.set_b = detail::init_head<T>("head.set_b", dh, dh, config.proj_dim, rng);
  return p;
}

// Positional MLP over normalized crop coordinates. Entries must be in [0,1].
template <class T>
Var embed_positions(Graph<T>& g, ModelParams<T>& p, const Tensor<T>& coords6) {
  if (coords6.cols() != 6) throw std::invalid_argument("embed_positions: expected 6 columns");
  for (T v : coords6.data)
    if (!(v >= T(0) && v <= T(1)))
      throw std::domain_error("embed_positions: coordinate outside [0, 1]");
  Var c = g.constant(coords6);
  return affine(g, g.gelu(affine(g, c, p.pos1.weight, p.pos1.bias)), p.pos2.weight, p.pos2.bias);
}

template <class T>
struct SetInput {
  Var features;             // K x D_in (constant, or leaf-derived when fine-tuning)
  Tensor<T> coords;         // K x 6, normalized
  std::vector<i64> mask;    // masked slots, may be empty
};

template <class T>
struct SetEncoding {
  Var clip_tokens;  // K x d_h
  Var summary;      // 1 x d_h
};

// Encode one or more clip sets through the shared trunk.
template <class T>
std::vector<SetEncoding<T>> encode_sets(Graph<T>& g, ModelParams<T>& p,
                                        std::span<const SetInput<T>> sets) {
  p.config.validate();
  const i64 dh = p.config.hidden_dim;
  const i64 n_heads = p.config.heads;
  const i64 dk = dh / n_heads;

  // Per-set input embedding: project, substitute MSK rows, add positions,
  // prepend CLS (which gets no positional term).
  std::vector<Var> seqs;
  std::vector<i64> offsets;
  std::vector<i64> lengths;
  i64 total = 0;
  for (const SetInput<T>& set : sets) {
    const i64 K = g.value(set.features).rows();
    for (i64 m : set.mask)
      if (m < 0 || m >= K) throw std::invalid_argument("encode_sets: mask slot out of range");
    Var proj = affine(g, set.features, p.input_proj.weight, p.input_proj.bias);
    Var pos = embed_positions(g, p, set.coords);
    if (g.value(pos).rows() != K)
      throw std::invalid_argument("encode_sets: coords/features row mismatch");

    std::vector<i64> pick(static_cast<size_t>(K));
    for (i64 i = 0; i < K; ++i) pick[static_cast<size_t>(i)] = i;
    for (i64 m : set.mask) pick[static_cast<size_t>(m)] = K;  // the MSK row
    std::array<Var, 2> with_msk = {proj, g.leaf(p.msk_token)};
    Var tokens = g.add(g.gather_rows(g.concat_rows(with_msk), pick), pos);
    std::array<Var, 2> with_cls = {g.leaf(p.cls_token), tokens};
    Var seq = g.concat_rows(with_cls);
    seqs.push_back(seq);
    offsets.push_back(total);
    lengths.push_back(K + 1);
    total += K + 1;
  }

  Var x = seqs.size() == 1 ? seqs[0] : g.concat_rows(seqs);

  for (BlockParams<T>& blk : p.blocks) {
    // Attention sublayer (pre-norm). Queries/keys/values are computed over
    // all sets at once; score softmax stays within each set.
    Var h = g.layer_norm(x, g.leaf(blk.ln1_gain), g.leaf(blk.ln1_bias), T(1e-5));
    Var q = affine(g, h, blk.wq.weight, blk.wq.bias);
    Var k = g.matmul(h, g.leaf(blk.wk));
    Var v = affine(g, h, blk.wv.weight, blk.wv.bias);
    std::vector<Var> attended;
    for (size_t s = 0; s < sets.size(); ++s) {
      Var qs = g.slice_rows(q, offsets[s], lengths[s]);
      Var ks = g.slice_rows(k, offsets[s], lengths[s]);
      Var vs = g.slice_rows(v, offsets[s], lengths[s]);
      std::vector<Var> head_outs;
      for (i64 hd = 0; hd < n_heads; ++hd) {
        Var qh = g.slice_cols(qs, hd * dk, dk);
        Var kh = g.slice_cols(ks, hd * dk, dk);
        Var vh = g.slice_cols(vs, hd * dk, dk);
        Var scores = g.matmul(qh, kh, /*trans_b=*/true);
        Var att = g.row_softmax(scores, static_cast<T>(std::sqrt(static_cast<double>(dk))));
        head_outs.push_back(g.matmul(att, vh));
      }
      attended.push_back(g.concat_cols(head_outs));
    }
    Var att_all = attended.size() == 1 ? attended[0] : g.concat_rows(attended);
    x = g.add(x, affine(g, att_all, blk.wo.weight, blk.wo.bias));

    // Feed-forward sublayer.
    Var h2 = g.layer_norm(x, g.leaf(blk.ln2_gain), g.leaf(blk.ln2_bias), T(1e-5));
    Var f = affine(g, g.gelu(affine(g, h2, blk.ff1.weight, blk.ff1.bias)), blk.ff2.weight, blk.ff2.bias);
    x = g.add(x, f);
  }

  x = g.layer_norm(x, g.leaf(p.final_ln_gain), g.leaf(p.final_ln_bias), T(1e-5));

  std::vector<SetEncoding<T>> out;
  for (size_t s = 0; s < sets.size(); ++s) {
    SetEncoding<T> enc;
    enc.summary = g.slice_rows(x, offsets[s], 1);
    enc.clip_tokens = g.slice_rows(x, offsets[s] + 1, lengths[s] - 1);
    out.push_back(enc);
  }
  return out;
}

template <class T>
SetEncoding<T> encode_set(Graph<T>& g, ModelParams<T>& p, Var features, const Tensor<T>& coords6,
                          std::vector<i64> mask = {}) {
  SetInput<T> in{features, coords6, std::move(mask)};
  return encode_sets(g, p, std::span<const SetInput<T>>(&in, 1))[0];
}

// MLP head then L2 normalization; rows of h are projected independently.
template <class T>
Var project(Graph<T>& g, ModelParams<T>& p, Var h, HeadKind kind) {
  HeadParams<T>& head = p.head(kind);
  Var z = affine(g, h, head.l1.weight, head.l1.bias);
  z = g.gelu(z);
  z = affine(g, z, head.l2.weight, head.l2.bias);
  z = g.gelu(z);
  z = affine(g, z, head.l3.weight, head.l3.bias);
  return g.l2_normalize_rows(z);
}

// Closed-form parameter count for a config; kept next to init_params so the
// two stay in sync.
inline i64 expected_param_count(const ModelConfig& c) {
  const i64 dh = c.hidden_dim;
  i64 n = 0;
  n += c.feature_dim * dh + dh;      // input projection
  n += 6 * dh + dh + dh * dh + dh;   // positional MLP
  n += 2 * dh;                       // MSK + CLS
  i64 block = 2 * dh                       // ln1
              + 3 * (dh * dh + dh) + dh * dh  // q,v,out affine; k weight only
              + 2 * dh                       // ln2
              + (dh * 4 * dh + 4 * dh) + (4 * dh * dh + dh);  // ffn
  n += c.layers * block;
  n += 2 * dh;  // final ln
  auto head = [&](i64 in) { return in * dh + dh + dh * dh + dh + dh * c.proj_dim + c.proj_dim; };
  n += head(dh) + head(c.feature_dim) + head(dh) + head(dh);
  return n;
}

}  // namespace scale
