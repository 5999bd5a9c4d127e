#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "scale/trainer.hpp"

using namespace scale;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("scale_trainer_" + name)).string();
}

FeatureStore tiny_store(i64 videos, i64 clips, i64 dim, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.num_classes = 2;
  spec.train_videos_per_class = videos / 2;
  spec.eval_videos_per_class = 1;
  spec.feature_dim = dim;
  spec.clips_per_train_video = clips;
  return generate_synthetic(spec).train;
}

TrainConfig tiny_train_config() {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.clips_per_view = 2;
  tc.mask_ratio = 0.4;
  tc.seed = 5;
  return tc;
}

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.feature_dim = 0;  // from store
  mc.hidden_dim = 8;
  mc.layers = 1;
  mc.heads = 2;
  mc.proj_dim = 4;
  return mc;
}

}  // namespace

TEST_CASE("cosine_lr closed form") {
  CHECK(cosine_lr(0, 100, 1e-3, 0.0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(150, 100, 1e-3, 1e-5) == 1e-5);  // clamp past the end
}

TEST_CASE("adam_step") {
  SUBCASE("first step moves by about -lr * sign(g)") {
    Parameter<double> p("p", Tensor<double>({1, 3}, {1.0, 2.0, 3.0}));
    p.grad.data = {0.5, -2.0, 1e-3};
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::init(std::span<Parameter<double>* const>(params));
    const double lr = 0.01;
    adam_step(std::span<Parameter<double>* const>(params), state, lr, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p.value.data[0] == doctest::Approx(1.0 - lr).epsilon(1e-3));
    CHECK(p.value.data[1] == doctest::Approx(2.0 + lr).epsilon(1e-3));
    CHECK(p.value.data[2] == doctest::Approx(3.0 - lr).epsilon(1e-2));
    CHECK(state.step == 1);
  }
  SUBCASE("zero gradient and zero decay leaves parameters unchanged") {
    Parameter<double> p("p", Tensor<double>({1, 2}, {1.5, -2.5}));
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::init(std::span<Parameter<double>* const>(params));
    adam_step(std::span<Parameter<double>* const>(params), state, 0.01, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p.value.data[0] == 1.5);
    CHECK(p.value.data[1] == -2.5);
  }
  SUBCASE("decay only scales by 1 - lr*wd") {
    Parameter<double> p("p", Tensor<double>({1, 1}, {4.0}));
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::init(std::span<Parameter<double>* const>(params));
    adam_step(std::span<Parameter<double>* const>(params), state, 0.01, 0.9, 0.999, 1e-8, 0.1);
    CHECK(p.value.data[0] == doctest::Approx(4.0 * 0.999).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient halts loudly") {
    Parameter<double> p("p", Tensor<double>({1, 1}, {1.0}));
    p.grad.data[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::init(std::span<Parameter<double>* const>(params));
    CHECK_THROWS_AS(
        adam_step(std::span<Parameter<double>* const>(params), state, 0.01, 0.9, 0.999, 1e-8, 0.0),
        std::runtime_error);
  }
}

TEST_CASE("training smoke run: finite losses, checkpoint written, log shape") {
  auto store = tiny_store(4, 4, 6, 7);
  auto ckpt_path = temp_path("smoke.sckp");
  auto result = train<float>(store, tiny_train_config(), tiny_model_config(), ckpt_path);
  CHECK(result.log.size() == 2);
  for (const auto& e : result.log) {
    CHECK(std::isfinite(e.total));
    CHECK(e.total == e.mcm + e.set);
    CHECK(e.mcm >= 0);
    CHECK(e.set >= 0);
  }
  CHECK(std::filesystem::exists(ckpt_path));
  CHECK(result.checkpoint.epochs_done == 2);

  // lr trace matches the closed form at each epoch start
  i64 batches_per_epoch = 2;  // 4 videos / batch 2
  for (size_t e = 0; e < result.log.size(); ++e)
    CHECK(result.log[e].lr ==
          doctest::Approx(cosine_lr(static_cast<i64>(e) * batches_per_epoch,
                                    2 * batches_per_epoch, 1e-3, 0.0)).epsilon(1e-12));
  std::filesystem::remove(ckpt_path);
}

TEST_CASE("training is deterministic given seed") {
  auto store = tiny_store(4, 4, 6, 7);
  auto r1 = train<float>(store, tiny_train_config(), tiny_model_config());
  auto r2 = train<float>(store, tiny_train_config(), tiny_model_config());
  CHECK(loss_log_csv(r1.log) == loss_log_csv(r2.log));
  auto p1 = r1.checkpoint.params.all_params();
  auto p2 = r2.checkpoint.params.all_params();
  for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value.data == p2[i]->value.data);
}

TEST_CASE("checkpoint round trip and corruption detection") {
  auto store = tiny_store(4, 4, 6, 9);
  auto path = temp_path("rt.sckp");
  auto result = train<float>(store, tiny_train_config(), tiny_model_config(), path);

  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.epochs_done == result.checkpoint.epochs_done);
  CHECK(loaded.config_hash == result.checkpoint.config_hash);
  CHECK(loaded.rng.state() == result.checkpoint.rng.state());
  auto pa = result.checkpoint.params.all_params();
  auto pb = loaded.params.all_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.data == pb[i]->value.data);
  }
  for (size_t i = 0; i < result.checkpoint.moments.m.size(); ++i) {
    CHECK(result.checkpoint.moments.m[i].data == loaded.moments.m[i].data);
    CHECK(result.checkpoint.moments.v[i].data == loaded.moments.v[i].data);
  }

  // saving the loaded checkpoint reproduces the file byte for byte
  auto path2 = temp_path("rt2.sckp");
  save_checkpoint(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::ostringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  // flip one payload byte: checksum must catch it
  std::string bytes = s1.str();
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
  std::ofstream(path2, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_WITH_AS((void)load_checkpoint<float>(path2), doctest::Contains("checksum"),
                       std::runtime_error);

  // precision mismatch is a distinct error
  CHECK_THROWS_WITH_AS((void)load_checkpoint<double>(path), doctest::Contains("width"),
                       std::runtime_error);

  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("resume at the midpoint equals an uninterrupted run bit-exactly") {
  auto store = tiny_store(6, 4, 6, 11);
  TrainConfig tc = tiny_train_config();
  tc.epochs = 10;
  tc.batch_size = 3;

  auto straight = train<float>(store, tc, tiny_model_config());

  // Same config with periodic checkpoints; grab the epoch-5 snapshot before
  // the final save overwrites it.
  TrainConfig periodic = tc;
  periodic.checkpoint_every = 5;
  auto path = temp_path("resume.sckp");
  auto mid_path = temp_path("resume_mid.sckp");
  train<float>(store, periodic, tiny_model_config(), path, nullptr, [&](const EpochLog& e) {
    if (e.epoch == 6) std::filesystem::copy_file(path, mid_path,
                                                 std::filesystem::copy_options::overwrite_existing);
  });

  auto mid = load_checkpoint<float>(mid_path);
  CHECK(mid.epochs_done == 5);
  auto resumed = train<float>(store, tc, tiny_model_config(), "", &mid);
  CHECK(resumed.log.size() == 5);  // epochs 6..10
  CHECK(resumed.checkpoint.epochs_done == 10);

  auto pa = straight.checkpoint.params.all_params();
  auto pb = resumed.checkpoint.params.all_params();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data == pb[i]->value.data);
  CHECK(straight.checkpoint.rng.state() == resumed.checkpoint.rng.state());
  for (size_t e = 5; e < straight.log.size(); ++e) {
    CHECK(straight.log[e].total == resumed.log[e - 5].total);
    CHECK(straight.log[e].lr == resumed.log[e - 5].lr);
  }

  // config hash mismatch is rejected
  TrainConfig other = tc;
  other.lr_max = 2e-3;
  CHECK_THROWS_WITH_AS((void)train<float>(store, other, tiny_model_config(), "", &mid),
                       doctest::Contains("hash"), std::invalid_argument);
  std::filesystem::remove(path);
  std::filesystem::remove(mid_path);
}

TEST_CASE("train input validation") {
  auto store = tiny_store(4, 4, 6, 13);
  TrainConfig tc = tiny_train_config();
  tc.clips_per_view = 3;  // needs 6 clips, store has 4
  CHECK_THROWS_WITH_AS((void)train<float>(store, tc, tiny_model_config()),
                       doctest::Contains("2K"), std::invalid_argument);

  TrainConfig bad = tiny_train_config();
  bad.losses = LossToggles{false, false};
  CHECK_THROWS_AS((void)train<float>(store, bad, tiny_model_config()), std::invalid_argument);
}
