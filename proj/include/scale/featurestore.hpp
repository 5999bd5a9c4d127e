#pragma once

// Bit-exact binary container ("SCFS") for per-clip backbone features and
// their space-time crop boxes, plus delimited-text ingestion and the seeded
// synthetic generator used for desk-scale experiments.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scale/rng.hpp"
#include "scale/tensor.hpp"

namespace scale {

constexpr std::int32_t kNoLabel = -1;

struct CropBox {
  float x = 0, y = 0;  // spatial origin (pixels), x along height, y along width
  float q = 0;         // temporal origin (frames)
  float h = 0, w = 0;  // spatial extents (pixels)
  float t = 0;         // temporal extent (frames)
};

struct ClipRecord {
  CropBox coords;
  std::vector<float> feature;
};

struct VideoRecord {
  std::string id;
  std::int32_t label = kNoLabel;
  std::uint32_t height = 0, width = 0, frames = 0;
  std::vector<ClipRecord> clips;
};

struct FeatureStore {
  std::uint32_t feature_dim = 0;
  std::vector<VideoRecord> videos;

  bool labeled() const;
  i64 clip_count() const;
};

// Throws StoreError{kind=invalid} if any invariant is violated.
void validate_store(const FeatureStore& store);

enum class StoreErrorKind { io, bad_magic, bad_version, truncated, invalid };

struct StoreError : std::runtime_error {
  StoreErrorKind kind;
  StoreError(StoreErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// SCFS layout, little-endian:
//   "SCFS" | version u32 (=1) | feature_dim u32 | video_count u64
//   per video: id_len u32, id bytes, label i32, H u32, W u32, T u32, clip_count u32
//   per clip: x,y,q,h,w,t as f32, then feature_dim f32
std::uint64_t write_store(const FeatureStore& store, const std::string& path);
FeatureStore read_store(const std::string& path);

// Lines: video_id,label,x,y,q,h,w,t,f1..fD. Groups by id, preserving order.
FeatureStore import_delimited(const std::string& path, std::uint32_t height,
                              std::uint32_t width, std::uint32_t frames,
                              std::uint32_t feature_dim);

struct SyntheticSpec {
  std::uint64_t seed = 42;
  i64 num_classes = 10;
  i64 train_videos_per_class = 200;
  i64 eval_videos_per_class = 50;
  i64 feature_dim = 64;
  i64 clips_per_train_video = 16;
  i64 clips_per_eval_video = 15;  // temporal positions x 3 spatial crops
  double base_scale = 1.0;       // sigma_z, per-video offset
  double drift_scale = 1.0;      // s, class direction drift along time
  double noise_scale = 0.1;      // sigma_eps, per-clip noise

  void validate() const;
};

struct SyntheticStores {
  FeatureStore train;
  FeatureStore eval;
};

// Deterministic in spec.seed. Video dims are fixed at 224x224x160 with
// 16-frame clips; each clip feature is
//   z + (m - 0.5) * drift_scale * u_class + noise,  m = (q + t/2) / T,
// so a single clip is class-ambiguous while the temporal drift of a clip
// set identifies the class.
SyntheticStores generate_synthetic(const SyntheticSpec& spec);

struct StoreStats {
  i64 video_count = 0;
  i64 clip_count = 0;
  std::uint32_t feature_dim = 0;
  bool labeled = false;
  std::map<std::int32_t, i64> label_histogram;
  CropBox coord_min, coord_max;  // meaningful only when clip_count > 0
};

StoreStats store_stats(const FeatureStore& store);
std::string format_stats(const StoreStats& s);

}  // namespace scale
