#include "scale/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace scale {

ViewPair split_views(const VideoRecord& video, i64 clips_per_view, Rng& rng) {
  const i64 n = static_cast<i64>(video.clips.size());
  if (n < 2 * clips_per_view)
    throw std::invalid_argument("split_views: video '" + video.id + "' has " + std::to_string(n) +
                                " clips, need " + std::to_string(2 * clips_per_view));
  std::vector<i64> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  ViewPair p;
  p.set1.assign(order.begin(), order.begin() + clips_per_view);
  p.set2.assign(order.begin() + clips_per_view, order.begin() + 2 * clips_per_view);
  return p;
}

i64 mask_size(i64 clips_per_view, double mask_ratio) {
  i64 m = static_cast<i64>(std::llround(mask_ratio * static_cast<double>(clips_per_view)));
  return std::max<i64>(1, m);
}

std::vector<i64> choose_mask(i64 clips_per_view, double mask_ratio, Rng& rng) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw std::invalid_argument("choose_mask: mask_ratio must be in (0, 1)");
  const i64 m = mask_size(clips_per_view, mask_ratio);
  std::vector<i64> order(static_cast<size_t>(clips_per_view));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<i64> mask(order.begin(), order.begin() + m);
  std::sort(mask.begin(), mask.end());
  return mask;
}

MaskPlan choose_masks(i64 clips_per_view, double mask_ratio, Rng& rng) {
  MaskPlan plan;
  plan.m1 = choose_mask(clips_per_view, mask_ratio, rng);
  plan.m2 = choose_mask(clips_per_view, mask_ratio, rng);
  return plan;
}

std::array<float, 6> normalized_coords(const CropBox& b, const VideoRecord& v) {
  const float H = static_cast<float>(v.height);
  const float W = static_cast<float>(v.width);
  const float T = static_cast<float>(v.frames);
  return {b.x / H, b.y / W, b.q / T, (b.x + b.h) / H, (b.y + b.w) / W, (b.q + b.t) / T};
}

PackedBatch assemble_batch(const FeatureStore& store, const std::vector<i64>& video_indices,
                           const BatchSpec& spec, Rng& rng) {
  spec.validate();
  const i64 B = static_cast<i64>(video_indices.size());
  const i64 K = spec.clips_per_view;
  const i64 D = static_cast<i64>(store.feature_dim);

  PackedBatch batch;
  batch.batch_videos = B;
  batch.clips_per_view = K;
  for (PackedView* view : {&batch.view1, &batch.view2}) {
    view->features = Tensor<float>::zeros({B * K, D});
    view->coords = Tensor<float>::zeros({B * K, 6});
    view->masks.resize(static_cast<size_t>(B));
  }

  for (i64 b = 0; b < B; ++b) {
    const VideoRecord& video = store.videos.at(static_cast<size_t>(video_indices[static_cast<size_t>(b)]));
    batch.video_ids.push_back(video.id);
    ViewPair views = split_views(video, K, rng);
    MaskPlan masks = choose_masks(K, spec.mask_ratio, rng);
    batch.view1.masks[static_cast<size_t>(b)] = masks.m1;
    batch.view2.masks[static_cast<size_t>(b)] = masks.m2;

    auto pack = [&](PackedView& view, const std::vector<i64>& clip_idx) {
      for (i64 k = 0; k < K; ++k) {
        const ClipRecord& clip = video.clips[static_cast<size_t>(clip_idx[static_cast<size_t>(k)])];
        i64 row = b * K + k;
        std::copy(clip.feature.begin(), clip.feature.end(), view.features.row_ptr(row));
        auto c6 = normalized_coords(clip.coords, video);
        std::copy(c6.begin(), c6.end(), view.coords.row_ptr(row));
      }
    };
    pack(batch.view1, views.set1);
    pack(batch.view2, views.set2);
  }
  return batch;
}

}  // namespace scale
