#include <doctest.h>

#include "scale/grad_check.hpp"
#include "scale/model.hpp"

using namespace scale;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.feature_dim = 6;
  c.hidden_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.proj_dim = 4;
  c.clips_per_view = 3;
  return c;
}

template <class T>
Tensor<T> random_coords(i64 k, Rng& rng) {
  Tensor<T> c = Tensor<T>::zeros({k, 6});
  for (i64 i = 0; i < k; ++i) {
    for (i64 j = 0; j < 3; ++j) {
      double origin = 0.6 * rng.uniform();
      double end = origin + 0.1 + 0.3 * rng.uniform();
      c.at(i, j) = static_cast<T>(origin);
      c.at(i, j + 3) = static_cast<T>(end);
    }
  }
  return c;
}

template <class T>
Tensor<T> random_features(i64 k, i64 d, Rng& rng) {
  Tensor<T> f = Tensor<T>::zeros({k, d});
  for (auto& v : f.data) v = static_cast<T>(rng.normal());
  return f;
}

}  // namespace

TEST_CASE("init_params is deterministic and counts match the closed form") {
  auto cfg = tiny_config();
  auto p1 = init_params<double>(cfg, 7);
  auto p2 = init_params<double>(cfg, 7);
  auto a1 = p1.all_params(), a2 = p2.all_params();
  REQUIRE(a1.size() == a2.size());
  for (size_t i = 0; i < a1.size(); ++i) CHECK(a1[i]->value.data == a2[i]->value.data);

  CHECK(p1.param_count() == expected_param_count(cfg));

  ModelConfig big;
  big.feature_dim = 64;
  big.hidden_dim = 256;
  big.layers = 2;
  big.heads = 4;
  big.proj_dim = 128;
  auto pb = init_params<float>(big, 1);
  CHECK(pb.param_count() == expected_param_count(big));

  ModelConfig bad = tiny_config();
  bad.heads = 5;  // 8 not divisible by 5
  CHECK_THROWS_AS((void)init_params<double>(bad, 1), std::invalid_argument);
}

TEST_CASE("embed_positions") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 3);
  Rng rng(5);

  SUBCASE("zeroed positional MLP maps everything to zero") {
    for (Parameter<double>* p : {&params.pos1.weight, &params.pos1.bias, &params.pos2.weight,
                                 &params.pos2.bias})
      std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    Graph<double> g;
    Var pos = embed_positions(g, params, random_coords<double>(4, rng));
    for (double v : g.value(pos).data) CHECK(v == 0.0);
  }
  SUBCASE("identical crops embed identically") {
    auto c = random_coords<double>(1, rng);
    Tensor<double> two = Tensor<double>::zeros({2, 6});
    for (i64 j = 0; j < 6; ++j) two.at(0, j) = two.at(1, j) = c.at(0, j);
    Graph<double> g;
    auto v = g.value(embed_positions(g, params, two));
    for (i64 j = 0; j < v.cols(); ++j) CHECK(v.at(0, j) == v.at(1, j));
  }
  SUBCASE("out-of-range coordinate rejected") {
    Tensor<double> bad = Tensor<double>::zeros({1, 6});
    bad.at(0, 2) = 1.2;
    Graph<double> g;
    CHECK_THROWS_AS((void)embed_positions(g, params, bad), std::domain_error);
  }
}

TEST_CASE("project maps onto the unit sphere and heads differ") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 11);
  Rng rng(2);
  Graph<double> g;
  Var h = g.constant(random_features<double>(5, cfg.hidden_dim, rng));
  auto pa = g.value(project(g, params, h, HeadKind::set_view1));
  auto pb = g.value(project(g, params, h, HeadKind::set_view2));
  CHECK(pa.cols() == cfg.proj_dim);
  for (i64 i = 0; i < pa.rows(); ++i) {
    double sq = 0;
    for (i64 j = 0; j < pa.cols(); ++j) sq += pa.at(i, j) * pa.at(i, j);
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-6);
  }
  // distinct parameters give generally different outputs
  double diff = 0;
  for (size_t i = 0; i < pa.data.size(); ++i) diff += std::abs(pa.data[i] - pb.data[i]);
  CHECK(diff > 1e-3);
}

TEST_CASE("identity-configured head reduces to l2 normalization") {
  ModelConfig cfg = tiny_config();
  cfg.hidden_dim = 2;
  cfg.heads = 1;
  cfg.proj_dim = 2;
  auto params = init_params<double>(cfg, 1);
  // Identity weights with a +10/-10 bias pair: pre-activations stay large
  // and positive, where gelu(x) == x to double precision, so the head
  // composes to the identity and project() is exactly l2 normalization.
  auto identity = [](Parameter<double>& w) {
    std::fill(w.value.data.begin(), w.value.data.end(), 0.0);
    for (i64 i = 0; i < w.value.rows(); ++i) w.value.at(i, i) = 1.0;
  };
  HeadParams<double>& head = params.set_a;
  identity(head.l1.weight);
  identity(head.l2.weight);
  identity(head.l3.weight);
  std::fill(head.l1.bias.value.data.begin(), head.l1.bias.value.data.end(), 10.0);
  std::fill(head.l2.bias.value.data.begin(), head.l2.bias.value.data.end(), 0.0);
  std::fill(head.l3.bias.value.data.begin(), head.l3.bias.value.data.end(), -10.0);

  Graph<double> g;
  Var h = g.constant(Tensor<double>({1, 2}, {3.0, 4.0}));
  auto out = g.value(project(g, params, h, HeadKind::set_view1));
  CHECK(out.at(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(out.at(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("encode_set permutation equivariance and CLS invariance") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 17);
  Rng rng(23);
  const i64 K = 5;
  auto feats = random_features<double>(K, cfg.feature_dim, rng);
  auto coords = random_coords<double>(K, rng);

  Graph<double> g1;
  auto e1 = encode_set(g1, params, g1.constant(feats), coords);

  // permute clips jointly with their coords
  std::vector<i64> perm{3, 0, 4, 1, 2};
  Tensor<double> pf = Tensor<double>::zeros({K, cfg.feature_dim});
  Tensor<double> pc = Tensor<double>::zeros({K, 6});
  for (i64 i = 0; i < K; ++i) {
    for (i64 d = 0; d < cfg.feature_dim; ++d) pf.at(i, d) = feats.at(perm[i], d);
    for (i64 d = 0; d < 6; ++d) pc.at(i, d) = coords.at(perm[i], d);
  }
  Graph<double> g2;
  auto e2 = encode_set(g2, params, g2.constant(pf), pc);

  auto cls1 = g1.value(e1.summary);
  auto cls2 = g2.value(e2.summary);
  for (i64 j = 0; j < cls1.cols(); ++j)
    CHECK(cls2.at(0, j) == doctest::Approx(cls1.at(0, j)).epsilon(1e-5));

  auto t1 = g1.value(e1.clip_tokens);
  auto t2 = g2.value(e2.clip_tokens);
  for (i64 i = 0; i < K; ++i)
    for (i64 j = 0; j < t1.cols(); ++j)
      CHECK(t2.at(i, j) == doctest::Approx(t1.at(perm[i], j)).epsilon(1e-5));
}

TEST_CASE("masked positions are content-blind") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 29);
  Rng rng(31);
  const i64 K = 4;
  auto feats = random_features<double>(K, cfg.feature_dim, rng);
  auto coords = random_coords<double>(K, rng);
  std::vector<i64> mask{1, 3};

  Graph<double> g1;
  auto e1 = encode_set(g1, params, g1.constant(feats), coords, mask);

  auto perturbed = feats;
  for (i64 d = 0; d < cfg.feature_dim; ++d) {
    perturbed.at(1, d) += 100.0 * rng.normal();
    perturbed.at(3, d) -= 77.0;
  }
  Graph<double> g2;
  auto e2 = encode_set(g2, params, g2.constant(perturbed), coords, mask);

  CHECK(g1.value(e1.summary).data == g2.value(e2.summary).data);          // bit-identical
  CHECK(g1.value(e1.clip_tokens).data == g2.value(e2.clip_tokens).data);
}

TEST_CASE("K=1 fully masked output depends only on MSK, position, CLS") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 41);
  Rng rng(43);
  auto coords = random_coords<double>(1, rng);
  std::vector<i64> mask{0};

  Graph<double> g1, g2;
  auto e1 = encode_set(g1, params, g1.constant(random_features<double>(1, cfg.feature_dim, rng)),
                       coords, mask);
  auto e2 = encode_set(g2, params, g2.constant(random_features<double>(1, cfg.feature_dim, rng)),
                       coords, mask);
  CHECK(g1.value(e1.summary).data == g2.value(e2.summary).data);
  CHECK(g1.value(e1.clip_tokens).data == g2.value(e2.clip_tokens).data);
}

TEST_CASE("two disjoint views of one video give distinct CLS at random init") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 53);
  Rng rng(59);
  Graph<double> g;
  std::vector<SetInput<double>> sets;
  sets.push_back({g.constant(random_features<double>(3, cfg.feature_dim, rng)),
                  random_coords<double>(3, rng), {}});
  sets.push_back({g.constant(random_features<double>(3, cfg.feature_dim, rng)),
                  random_coords<double>(3, rng), {}});
  auto encs = encode_sets(g, params, std::span<const SetInput<double>>(sets));
  auto c1 = g.value(encs[0].summary);
  auto c2 = g.value(encs[1].summary);
  double diff = 0;
  for (size_t i = 0; i < c1.data.size(); ++i) diff += std::abs(c1.data[i] - c2.data[i]);
  CHECK(diff > 1e-8);
}

TEST_CASE("batched encode matches per-set encode bit-exactly") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 61);
  Rng rng(67);
  std::vector<Tensor<double>> feats, coords;
  for (int s = 0; s < 3; ++s) {
    feats.push_back(random_features<double>(4, cfg.feature_dim, rng));
    coords.push_back(random_coords<double>(4, rng));
  }
  Graph<double> gb;
  std::vector<SetInput<double>> sets;
  for (int s = 0; s < 3; ++s)
    sets.push_back({gb.constant(feats[s]), coords[s], s == 1 ? std::vector<i64>{2} : std::vector<i64>{}});
  auto batched = encode_sets(gb, params, std::span<const SetInput<double>>(sets));

  // Not bit-exact: the BLAS backend may pick different kernels for the
  // batched and single-set matmul shapes. Agreement is to rounding only.
  for (int s = 0; s < 3; ++s) {
    Graph<double> gs;
    auto single = encode_set(gs, params, gs.constant(feats[s]), coords[s],
                             s == 1 ? std::vector<i64>{2} : std::vector<i64>{});
    const auto& bs = gb.value(batched[s].summary);
    const auto& ss = gs.value(single.summary);
    for (size_t i = 0; i < ss.data.size(); ++i)
      CHECK(ss.data[i] == doctest::Approx(bs.data[i]).epsilon(1e-9));
    const auto& bt = gb.value(batched[s].clip_tokens);
    const auto& st = gs.value(single.clip_tokens);
    for (size_t i = 0; i < st.data.size(); ++i)
      CHECK(st.data[i] == doctest::Approx(bt.data[i]).epsilon(1e-9));
  }
}

TEST_CASE("encode_set forward+backward passes grad_check") {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 71);
  Rng rng(73);
  const i64 K = 3;
  auto feats = random_features<double>(K, cfg.feature_dim, rng);
  auto coords = random_coords<double>(K, rng);
  std::vector<i64> mask{1};

  auto all = params.all_params();
  Rng mix(79);
  double err = grad_check(std::span<Parameter<double>* const>(all), [&](Graph<double>& g) {
    auto enc = encode_set(g, params, g.constant(feats), coords, mask);
    std::array<Var, 2> parts = {enc.summary, enc.clip_tokens};
    Rng r = mix.fork(1);
    Tensor<double> w = Tensor<double>::zeros({cfg.hidden_dim, 1});
    for (auto& x : w.data) x = r.normal();
    return g.mean_all(g.gelu(g.matmul(g.concat_rows(parts), g.constant(std::move(w)))));
  }, 1e-5);
  CHECK(err <= 1e-4);
}
