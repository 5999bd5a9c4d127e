#pragma once

// Training batch assembly: random disjoint view pairs, mask selection, and
// packing of features plus normalized crop coordinates.

#include <vector>

#include "scale/featurestore.hpp"
#include "scale/rng.hpp"
#include "scale/tensor.hpp"

namespace scale {

struct ViewPair {
  std::vector<i64> set1, set2;  // disjoint clip indices, each of length K
};

struct MaskPlan {
  std::vector<i64> m1, m2;  // masked positions (0..K-1) per view
};

struct BatchSpec {
  i64 videos_per_batch = 64;  // B
  i64 clips_per_view = 8;     // K
  double mask_ratio = 0.25;   // rho

  void validate() const {
    if (videos_per_batch < 2)
      throw std::invalid_argument("batch spec: need >= 2 videos per batch for contrastive negatives");
    if (clips_per_view < 1) throw std::invalid_argument("batch spec: clips_per_view must be >= 1");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw std::invalid_argument("batch spec: mask_ratio must be in (0, 1)");
  }
};

// Uniform random split of 2K distinct stored clips into two K-views.
ViewPair split_views(const VideoRecord& video, i64 clips_per_view, Rng& rng);

// Uniform random subset of size max(1, round(rho * K)); round is
// half-away-from-zero so K=8, rho=0.25 gives exactly 2.
std::vector<i64> choose_mask(i64 clips_per_view, double mask_ratio, Rng& rng);
MaskPlan choose_masks(i64 clips_per_view, double mask_ratio, Rng& rng);

i64 mask_size(i64 clips_per_view, double mask_ratio);

// Normalized 6-vector for a crop inside its video:
// [x/H, y/W, q/T, (x+h)/H, (y+w)/W, (q+t)/T], every entry in [0, 1].
std::array<float, 6> normalized_coords(const CropBox& box, const VideoRecord& video);

struct PackedView {
  Tensor<float> features;          // (B*K) x D, video-major
  Tensor<float> coords;            // (B*K) x 6
  std::vector<std::vector<i64>> masks;  // per video, positions 0..K-1
};

struct PackedBatch {
  i64 batch_videos = 0;  // B
  i64 clips_per_view = 0;
  PackedView view1, view2;
  std::vector<std::string> video_ids;
};

PackedBatch assemble_batch(const FeatureStore& store, const std::vector<i64>& video_indices,
                           const BatchSpec& spec, Rng& rng);

}  // namespace scale
