#pragma once

// Symmetric InfoNCE machinery and its two instantiations: masked clip
// modeling over minibatch-wide target pools, and the set-summary loss
// between the two views' CLS tokens. The plain (non-graph) functions give
// the reference arithmetic on already-projected unit vectors; the graph
// builders produce the differentiable training losses.

#include <numeric>
#include <vector>

#include "scale/model.hpp"

namespace scale {

template <class T>
struct ContrastiveBatch {
  Tensor<T> side_a;  // N x d, unit rows
  Tensor<T> side_b;  // N x d, unit rows
  T temperature;

  void validate() const {
    if (side_a.rows() != side_b.rows() || side_a.cols() != side_b.cols())
      throw std::invalid_argument("contrastive batch: sides must have equal shape");
    if (side_a.rows() < 1) throw std::invalid_argument("contrastive batch: empty");
    if (!(temperature > T(0)))
      throw std::invalid_argument("contrastive batch: temperature must be > 0");
    for (const Tensor<T>* side : {&side_a, &side_b})
      for (i64 i = 0; i < side->rows(); ++i) {
        double sq = 0;
        for (i64 j = 0; j < side->cols(); ++j)
          sq += static_cast<double>(side->at(i, j)) * static_cast<double>(side->at(i, j));
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
          throw std::invalid_argument("contrastive batch: row " + std::to_string(i) +
                                      " is not unit norm");
      }
  }
};

namespace detail {
// -log softmax_i of row i of (a . b^T / tau), max-subtracted.
template <class T>
T directed_element(const Tensor<T>& a, const Tensor<T>& b, T temperature, i64 i) {
  const i64 n = a.rows(), d = a.cols();
  std::vector<T> logits(static_cast<size_t>(n));
  for (i64 j = 0; j < n; ++j) {
    T dot = T(0);
    for (i64 c = 0; c < d; ++c) dot += a.at(i, c) * b.at(j, c);
    logits[static_cast<size_t>(j)] = dot / temperature;
  }
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  T sum = T(0);
  for (T v : logits) sum += std::exp(v - mx);
  return (mx + std::log(sum)) - logits[static_cast<size_t>(i)];
}
}  // namespace detail

template <class T>
T per_element_loss(const ContrastiveBatch<T>& batch, i64 i) {
  batch.validate();
  return detail::directed_element(batch.side_a, batch.side_b, batch.temperature, i);
}

template <class T>
T symmetric_element_loss(const ContrastiveBatch<T>& batch, i64 i) {
  batch.validate();
  return detail::directed_element(batch.side_a, batch.side_b, batch.temperature, i) +
         detail::directed_element(batch.side_b, batch.side_a, batch.temperature, i);
}

template <class T>
T contrastive_mean(const ContrastiveBatch<T>& batch) {
  batch.validate();
  T sum = T(0);
  for (i64 i = 0; i < batch.side_a.rows(); ++i)
    sum += detail::directed_element(batch.side_a, batch.side_b, batch.temperature, i) +
           detail::directed_element(batch.side_b, batch.side_a, batch.temperature, i);
  return sum / static_cast<T>(batch.side_a.rows());
}

// ---- graph-side losses ----

namespace detail {
// Per-anchor InfoNCE against a candidate pool: anchors N x d (unit rows),
// candidates M x d (unit rows), positives[i] indexes the candidate row that
// is anchor i's positive. Returns N x 1 of -log p(positive | anchor).
template <class T>
Var directed_info_nce(Graph<T>& g, Var anchors, Var candidates, std::vector<i64> positives, T temperature) {
  Var sim = g.matmul(anchors, candidates, /*trans_b=*/true);
  Var logits = g.scale_by(sim, T(1) / temperature);
  Var lse = g.row_logsumexp(logits);
  Var pos = g.pick_per_row(logits, std::move(positives));
  return g.sub(lse, pos);
}

inline std::vector<i64> iota_idx(i64 n) {
  std::vector<i64> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}
}  // namespace detail

// One (video, view) set's contribution to the MCM pools.
template <class T>
struct McmSet {
  Var refined;             // K x d_h, predictor outputs
  Var targets;             // K x D_in, raw clip features
  std::vector<i64> mask;   // masked slots in this set
};

// Masked clip modeling across the whole minibatch (both views). Forward
// direction contrasts each masked prediction against the projections of
// every clip target in the minibatch (same-video clips act as hard
// negatives); the reverse direction contrasts each masked target against
// all masked predictions. Averaged over masked positions.
template <class T>
Var mcm_loss(Graph<T>& g, ModelParams<T>& p, std::span<const McmSet<T>> sets, T temperature,
             i64* masked_count_out = nullptr) {
  std::vector<Var> anchor_rows;   // masked refined tokens, per set
  std::vector<Var> target_rows;   // all targets, per set
  std::vector<i64> positive_idx;  // anchor -> row in the concatenated targets
  i64 target_offset = 0;
  for (const McmSet<T>& set : sets) {
    const i64 K = g.value(set.targets).rows();
    if (!set.mask.empty()) {
      anchor_rows.push_back(g.gather_rows(set.refined, set.mask));
      for (i64 m : set.mask) positive_idx.push_back(target_offset + m);
    }
    target_rows.push_back(set.targets);
    target_offset += K;
  }
  if (anchor_rows.empty()) throw std::invalid_argument("mcm_loss: no masked positions");
  const i64 masked_total = static_cast<i64>(positive_idx.size());
  if (masked_count_out) *masked_count_out = masked_total;

  Var anchors = anchor_rows.size() == 1 ? anchor_rows[0] : g.concat_rows(anchor_rows);
  Var targets = target_rows.size() == 1 ? target_rows[0] : g.concat_rows(target_rows);

  Var pred_proj = project(g, p, anchors, HeadKind::mcm_anchor);    // M x d
  Var target_proj = project(g, p, targets, HeadKind::mcm_target);  // (sum K) x d

  Var forward = detail::directed_info_nce(g, pred_proj, target_proj, positive_idx, temperature);
  Var masked_targets = g.gather_rows(target_proj, positive_idx);   // M x d
  Var reverse =
      detail::directed_info_nce(g, masked_targets, pred_proj, detail::iota_idx(masked_total), temperature);
  return g.mean_all(g.add(forward, reverse));
}

// Symmetric InfoNCE between the two views' projected summary tokens.
template <class T>
Var set_loss(Graph<T>& g, ModelParams<T>& p, Var cls_view1, Var cls_view2, T temperature) {
  const i64 B = g.value(cls_view1).rows();
  if (g.value(cls_view2).rows() != B)
    throw std::invalid_argument("set_loss: view summary counts differ");
  Var a = project(g, p, cls_view1, HeadKind::set_view1);
  Var b = project(g, p, cls_view2, HeadKind::set_view2);
  Var fwd = detail::directed_info_nce(g, a, b, detail::iota_idx(B), temperature);
  Var rev = detail::directed_info_nce(g, b, a, detail::iota_idx(B), temperature);
  return g.mean_all(g.add(fwd, rev));
}

struct LossReport {
  double mcm = 0;
  double set = 0;
  double total = 0;
  i64 masked_count = 0;
};

struct LossToggles {
  bool mcm = true;
  bool set = true;

  void validate() const {
    if (!mcm && !set) throw std::invalid_argument("loss config: both loss terms disabled");
  }
};

template <class T>
struct TotalLoss {
  Var value;  // scalar graph node
  LossReport report;
};

// Unweighted sum of the enabled terms.
template <class T>
TotalLoss<T> total_loss(Graph<T>& g, ModelParams<T>& p, std::span<const McmSet<T>> mcm_sets,
                        Var cls_view1, Var cls_view2, T temperature, LossToggles toggles) {
  toggles.validate();
  TotalLoss<T> out;
  Var mcm, set;
  if (toggles.mcm) {
    mcm = mcm_loss(g, p, mcm_sets, temperature, &out.report.masked_count);
    out.report.mcm = static_cast<double>(g.value(mcm).data[0]);
  }
  if (toggles.set) {
    set = set_loss(g, p, cls_view1, cls_view2, temperature);
    out.report.set = static_cast<double>(g.value(set).data[0]);
  }
  out.value = toggles.mcm && toggles.set ? g.add(mcm, set) : (toggles.mcm ? mcm : set);
  out.report.total = out.report.mcm + out.report.set;
  return out;
}

}  // namespace scale
