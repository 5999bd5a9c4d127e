#include <doctest.h>

#include <set>

#include "scale/sampler.hpp"

using namespace scale;

namespace {

VideoRecord video_with_clips(i64 n, i64 dim = 4) {
  VideoRecord v;
  v.id = "v";
  v.height = 224;
  v.width = 224;
  v.frames = 160;
  Rng rng(99);
  for (i64 i = 0; i < n; ++i) {
    ClipRecord c;
    c.coords = {0.f, 0.f, static_cast<float>(i % 100), 112.f, 112.f, 16.f};
    for (i64 d = 0; d < dim; ++d) c.feature.push_back(static_cast<float>(rng.normal()));
    v.clips.push_back(std::move(c));
  }
  return v;
}

}  // namespace

TEST_CASE("split_views produces disjoint K-sets") {
  Rng rng(1);
  auto v = video_with_clips(16);
  auto pair = split_views(v, 8, rng);
  CHECK(pair.set1.size() == 8);
  CHECK(pair.set2.size() == 8);
  std::set<i64> all(pair.set1.begin(), pair.set1.end());
  all.insert(pair.set2.begin(), pair.set2.end());
  CHECK(all.size() == 16);  // disjoint and covering all 16

  auto two = video_with_clips(2);
  auto p2 = split_views(two, 1, rng);
  std::set<i64> s{p2.set1[0], p2.set2[0]};
  CHECK(s == std::set<i64>{0, 1});

  auto four = video_with_clips(4);
  CHECK_THROWS_WITH_AS((void)split_views(four, 3, rng), doctest::Contains("v"),
                       std::invalid_argument);
}

TEST_CASE("split_views is uniformly random over assignments") {
  Rng rng(7);
  auto v = video_with_clips(4);
  std::map<std::set<i64>, int> counts;
  for (int i = 0; i < 3000; ++i) {
    auto p = split_views(v, 2, rng);
    counts[std::set<i64>(p.set1.begin(), p.set1.end())] += 1;
  }
  CHECK(counts.size() == 6);  // all C(4,2) first-view sets occur
  for (const auto& [_, n] : counts) CHECK(n > 350);
}

TEST_CASE("mask sizes follow max(1, round(rho K))") {
  CHECK(mask_size(8, 0.25) == 2);
  CHECK(mask_size(16, 0.25) == 4);
  CHECK(mask_size(4, 0.1) == 1);   // floor-to-one
  CHECK(mask_size(6, 0.25) == 2);  // round(1.5) = 2, half away from zero

  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto m = choose_mask(8, 0.25, rng);
    CHECK(m.size() == 2);
    std::set<i64> uniq(m.begin(), m.end());
    CHECK(uniq.size() == m.size());
    for (i64 p : m) CHECK((p >= 0 && p < 8));
  }
  auto plan = choose_masks(4, 0.1, rng);
  CHECK(plan.m1.size() == 1);
  CHECK(plan.m2.size() == 1);
}

TEST_CASE("normalized coordinates") {
  VideoRecord v;
  v.height = 224;
  v.width = 224;
  v.frames = 160;
  CropBox b{0, 0, 0, 112, 112, 16};
  auto c = normalized_coords(b, v);
  CHECK(c[0] == 0.0f);
  CHECK(c[1] == 0.0f);
  CHECK(c[2] == 0.0f);
  CHECK(c[3] == 0.5f);
  CHECK(c[4] == 0.5f);
  CHECK(c[5] == doctest::Approx(0.1));

  CropBox full{0, 0, 0, 224, 224, 160};
  auto cf = normalized_coords(full, v);
  for (int i = 0; i < 3; ++i) CHECK(cf[i] == 0.0f);
  for (int i = 3; i < 6; ++i) CHECK(cf[i] == 1.0f);
}

TEST_CASE("assemble_batch shapes, ranges, and determinism") {
  FeatureStore store;
  store.feature_dim = 4;
  for (int i = 0; i < 5; ++i) {
    auto v = video_with_clips(10);
    v.id = "v" + std::to_string(i);
    store.videos.push_back(v);
  }
  BatchSpec spec{3, 4, 0.25};
  std::vector<i64> idx{0, 2, 4};

  Rng r1(5), r2(5);
  auto b1 = assemble_batch(store, idx, spec, r1);
  auto b2 = assemble_batch(store, idx, spec, r2);
  CHECK(b1.view1.features.data == b2.view1.features.data);  // bit-reproducible
  CHECK(b1.view2.coords.data == b2.view2.coords.data);
  CHECK(b1.view1.masks == b2.view1.masks);

  CHECK(b1.view1.features.rows() == 12);  // B*K
  CHECK(b1.view1.features.cols() == 4);
  CHECK(b1.view2.coords.rows() == 12);
  CHECK(b1.video_ids == std::vector<std::string>{"v0", "v2", "v4"});

  for (const PackedView* view : {&b1.view1, &b1.view2}) {
    for (i64 r = 0; r < view->coords.rows(); ++r) {
      for (i64 c = 0; c < 6; ++c) {
        float x = view->coords.at(r, c);
        CHECK(x >= 0.0f);
        CHECK(x <= 1.0f);
      }
      // origin + extent form: second triple strictly greater
      for (i64 c = 0; c < 3; ++c) CHECK(view->coords.at(r, c + 3) > view->coords.at(r, c));
    }
    for (const auto& m : view->masks) CHECK(m.size() == 1);  // round(0.25*4)
  }
}
