#include <doctest.h>

#include "loss_oracle.hpp"
#include "scale/grad_check.hpp"
#include "scale/losses.hpp"

using namespace scale;
using namespace scale::testing;

namespace {

ModelConfig loss_config(i64 d_in = 3, i64 d_h = 5, i64 d_proj = 4) {
  ModelConfig c;
  c.feature_dim = d_in;
  c.hidden_dim = d_h;
  c.layers = 1;
  c.heads = 1;
  c.proj_dim = d_proj;
  return c;
}

Tensor<double> random_rows(i64 r, i64 c, Rng& rng) {
  Tensor<double> t = Tensor<double>::zeros({r, c});
  for (auto& v : t.data) v = rng.normal();
  return t;
}

Tensor<double> random_unit_rows(i64 r, i64 c, Rng& rng) {
  Tensor<double> t = random_rows(r, c, rng);
  for (i64 i = 0; i < r; ++i) {
    double sq = 0;
    for (i64 j = 0; j < c; ++j) sq += t.at(i, j) * t.at(i, j);
    double n = std::sqrt(sq);
    for (i64 j = 0; j < c; ++j) t.at(i, j) /= n;
  }
  return t;
}

}  // namespace

TEST_CASE("per-element loss arithmetic") {
  SUBCASE("N=1 is exactly zero") {
    Rng r1(1), r2(2);
    ContrastiveBatch<double> b{random_unit_rows(1, 3, r1), random_unit_rows(1, 3, r2), 0.5};
    CHECK(per_element_loss(b, 0) == 0.0);
    CHECK(symmetric_element_loss(b, 0) == 0.0);
    CHECK(contrastive_mean(b) == 0.0);
  }
  SUBCASE("N=2 orthonormal aligned pairs") {
    Tensor<double> e({2, 2}, {1.0, 0.0, 0.0, 1.0});
    ContrastiveBatch<double> b{e, e, 1.0};
    double expected = std::log(1.0 + std::exp(-1.0));  // 0.31326...
    CHECK(per_element_loss(b, 0) == doctest::Approx(expected).epsilon(1e-10));
    CHECK(per_element_loss(b, 1) == doctest::Approx(expected).epsilon(1e-10));
    CHECK(symmetric_element_loss(b, 0) == doctest::Approx(2 * expected).epsilon(1e-10));
    CHECK(symmetric_element_loss(b, 0) == doctest::Approx(0.62652).epsilon(1e-4));
    CHECK(contrastive_mean(b) == doctest::Approx(2 * expected).epsilon(1e-10));
  }
  SUBCASE("swapping sides leaves the symmetric loss unchanged") {
    Rng rng(5);
    auto a = random_unit_rows(4, 3, rng);
    auto b = random_unit_rows(4, 3, rng);
    ContrastiveBatch<double> ab{a, b, 0.3};
    ContrastiveBatch<double> ba{b, a, 0.3};
    for (i64 i = 0; i < 4; ++i)
      CHECK(symmetric_element_loss(ab, i) == doctest::Approx(symmetric_element_loss(ba, i)).epsilon(1e-12));
  }
  SUBCASE("dominant positive stays below log N") {
    Tensor<double> a({2, 2}, {1.0, 0.0, 0.0, 1.0});
    ContrastiveBatch<double> b{a, a, 1.0};
    CHECK(per_element_loss(b, 0) < std::log(2.0));
  }
  SUBCASE("all pairs identical: degenerate loss is 2 log N") {
    Tensor<double> same({2, 3}, {1.0, 0.0, 0.0, 1.0, 0.0, 0.0});
    ContrastiveBatch<double> b{same, same, 1.0};
    CHECK(contrastive_mean(b) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(contrastive_mean(b) == doctest::Approx(1.3863).epsilon(1e-4));
  }
  SUBCASE("per-element losses are nonnegative on random batches") {
    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
      i64 n = 1 + static_cast<i64>(rng.bounded(5));
      ContrastiveBatch<double> b{random_unit_rows(n, 4, rng), random_unit_rows(n, 4, rng),
                                 0.05 + rng.uniform()};
      for (i64 i = 0; i < n; ++i) CHECK(per_element_loss(b, i) >= 0.0);
    }
  }
  SUBCASE("non-unit rows are rejected") {
    Tensor<double> bad({1, 2}, {3.0, 4.0});
    ContrastiveBatch<double> b{bad, bad, 1.0};
    CHECK_THROWS_AS((void)per_element_loss(b, 0), std::invalid_argument);
  }
}

TEST_CASE("contrastive mean is invariant under a common orthogonal transform") {
  Rng rng(23);
  auto a = random_unit_rows(5, 3, rng);
  auto b = random_unit_rows(5, 3, rng);
  ContrastiveBatch<double> before{a, b, 0.4};
  double base = contrastive_mean(before);

  // Householder reflection: orthogonal, applied to both sides.
  auto u = l2_normalize(random_rows(1, 3, rng));
  auto reflect = [&](Tensor<double>& m) {
    for (i64 i = 0; i < m.rows(); ++i) {
      double dot = 0;
      for (i64 j = 0; j < 3; ++j) dot += m.at(i, j) * u.data[static_cast<size_t>(j)];
      for (i64 j = 0; j < 3; ++j) m.at(i, j) -= 2.0 * dot * u.data[static_cast<size_t>(j)];
    }
  };
  reflect(a);
  reflect(b);
  ContrastiveBatch<double> after{a, b, 0.4};
  CHECK(contrastive_mean(after) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("mcm_loss matches the exhaustive oracle on all tiny instances") {
  auto cfg = loss_config();
  const double tau = 0.2;
  int instances = 0;
  for (i64 B = 1; B <= 3; ++B) {
    for (i64 K = 1; K <= 3; ++K) {
      for (i64 msize = 1; msize <= K; ++msize) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
          Rng rng(1000 * static_cast<std::uint64_t>(B) + 100 * static_cast<std::uint64_t>(K) +
                  10 * static_cast<std::uint64_t>(msize) + seed);
          auto params = init_params<double>(cfg, rng.next_u64());

          OracleInstance in;
          for (i64 s = 0; s < 2 * B; ++s) {  // two views per video
            in.refined.push_back(random_rows(K, cfg.hidden_dim, rng));
            in.targets.push_back(random_rows(K, cfg.feature_dim, rng));
            std::vector<i64> order(static_cast<size_t>(K));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            std::vector<i64> mask(order.begin(), order.begin() + msize);
            std::sort(mask.begin(), mask.end());
            in.masks.push_back(mask);
          }

          Graph<double> g;
          std::vector<McmSet<double>> sets;
          for (size_t s = 0; s < in.refined.size(); ++s)
            sets.push_back({g.constant(in.refined[s]), g.constant(in.targets[s]), in.masks[s]});
          i64 masked_count = 0;
          Var loss = mcm_loss(g, params, std::span<const McmSet<double>>(sets), tau, &masked_count);
          CHECK(masked_count == 2 * B * msize);

          double expected = oracle_mcm(params, in, tau);
          CHECK(g.value(loss).data[0] == doctest::Approx(expected).epsilon(1e-10));
          ++instances;
        }
      }
    }
  }
  CHECK(instances == 3 * 6 * 3);
}

TEST_CASE("set_loss matches the exhaustive oracle on all tiny instances") {
  auto cfg = loss_config();
  const double tau = 0.15;
  for (i64 B = 1; B <= 3; ++B) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(31 * static_cast<std::uint64_t>(B) + seed);
      auto params = init_params<double>(cfg, rng.next_u64());
      auto cls1 = random_rows(B, cfg.hidden_dim, rng);
      auto cls2 = random_rows(B, cfg.hidden_dim, rng);

      Graph<double> g;
      Var loss = set_loss(g, params, g.constant(cls1), g.constant(cls2), tau);
      double expected = oracle_set(params, cls1, cls2, tau);
      if (B == 1) CHECK(g.value(loss).data[0] == 0.0);
      CHECK(g.value(loss).data[0] == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("mcm edge cases") {
  auto cfg = loss_config();
  auto params = init_params<double>(cfg, 3);

  SUBCASE("B=1, K=1, one view, one mask: both pools collapse to one candidate") {
    Rng rng(7);
    Graph<double> g;
    std::vector<McmSet<double>> sets;
    sets.push_back({g.constant(random_rows(1, cfg.hidden_dim, rng)),
                    g.constant(random_rows(1, cfg.feature_dim, rng)),
                    {0}});
    Var loss = mcm_loss(g, params, std::span<const McmSet<double>>(sets), 0.2);
    CHECK(g.value(loss).data[0] == 0.0);
  }
  SUBCASE("no masked positions is an error") {
    Rng rng(8);
    Graph<double> g;
    std::vector<McmSet<double>> sets;
    sets.push_back({g.constant(random_rows(2, cfg.hidden_dim, rng)),
                    g.constant(random_rows(2, cfg.feature_dim, rng)),
                    {}});
    CHECK_THROWS_AS((void)mcm_loss(g, params, std::span<const McmSet<double>>(sets), 0.2),
                    std::invalid_argument);
  }
  SUBCASE("perturbing an unmasked target changes the loss (it is a negative)") {
    Rng rng(9);
    auto refined = random_rows(2, cfg.hidden_dim, rng);
    auto targets = random_rows(2, cfg.feature_dim, rng);
    auto run = [&](const Tensor<double>& t) {
      Graph<double> g;
      std::vector<McmSet<double>> sets;
      sets.push_back({g.constant(refined), g.constant(t), {0}});  // slot 1 unmasked
      return g.value(mcm_loss(g, params, std::span<const McmSet<double>>(sets), 0.2)).data[0];
    };
    double base = run(targets);
    auto perturbed = targets;
    perturbed.at(1, 0) += 0.5;
    CHECK(run(perturbed) != base);
  }
}

TEST_CASE("set_loss duplicate video increases the loss") {
  // Fixed vectors through identity heads: aligned orthonormal pairs give a
  // near-zero loss; duplicating a video makes its copy a perfectly
  // confusable negative and drives the per-element loss up to log 2.
  ModelConfig cfg = loss_config(3, 2, 2);
  auto params = init_params<double>(cfg, 11);
  for (HeadParams<double>* head : {&params.set_a, &params.set_b}) {
    for (AffineLayer<double>* l : {&head->l1, &head->l2, &head->l3}) {
      std::fill(l->weight.value.data.begin(), l->weight.value.data.end(), 0.0);
      for (i64 i = 0; i < l->weight.value.rows(); ++i) l->weight.value.at(i, i) = 1.0;
      std::fill(l->bias.value.data.begin(), l->bias.value.data.end(), 0.0);
    }
    std::fill(head->l1.bias.value.data.begin(), head->l1.bias.value.data.end(), 10.0);
    std::fill(head->l3.bias.value.data.begin(), head->l3.bias.value.data.end(), -10.0);
  }
  Tensor<double> aligned({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Graph<double> g1;
  double base =
      g1.value(set_loss(g1, params, g1.constant(aligned), g1.constant(aligned), 0.2)).data[0];

  Tensor<double> dup({2, 2}, {1.0, 0.0, 1.0, 0.0});  // video 0 duplicated
  Graph<double> g2;
  double dup_loss = g2.value(set_loss(g2, params, g2.constant(dup), g2.constant(dup), 0.2)).data[0];
  CHECK(dup_loss > base);
  CHECK(dup_loss == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("set_loss with identity heads reproduces the hand-set arithmetic") {
  ModelConfig cfg = loss_config(3, 2, 2);
  auto params = init_params<double>(cfg, 1);
  for (HeadParams<double>* head : {&params.set_a, &params.set_b}) {
    for (AffineLayer<double>* l : {&head->l1, &head->l2, &head->l3}) {
      std::fill(l->weight.value.data.begin(), l->weight.value.data.end(), 0.0);
      for (i64 i = 0; i < l->weight.value.rows(); ++i) l->weight.value.at(i, i) = 1.0;
      std::fill(l->bias.value.data.begin(), l->bias.value.data.end(), 0.0);
    }
    std::fill(head->l1.bias.value.data.begin(), head->l1.bias.value.data.end(), 10.0);
    std::fill(head->l3.bias.value.data.begin(), head->l3.bias.value.data.end(), -10.0);
  }
  // projections become l2-normalized inputs: orthonormal aligned pairs
  Tensor<double> e({2, 2}, {2.0, 0.0, 0.0, 2.0});
  Graph<double> g;
  double loss = g.value(set_loss(g, params, g.constant(e), g.constant(e), 1.0)).data[0];
  CHECK(loss == doctest::Approx(2.0 * std::log(1.0 + std::exp(-1.0))).epsilon(1e-10));
  CHECK(loss == doctest::Approx(0.62652).epsilon(1e-4));
}

TEST_CASE("total_loss toggles") {
  auto cfg = loss_config();
  auto params = init_params<double>(cfg, 19);
  Rng rng(21);
  Graph<double> g;
  std::vector<McmSet<double>> sets;
  for (int s = 0; s < 4; ++s)
    sets.push_back({g.constant(random_rows(2, cfg.hidden_dim, rng)),
                    g.constant(random_rows(2, cfg.feature_dim, rng)),
                    {static_cast<i64>(s % 2)}});
  Var cls1 = g.constant(random_rows(2, cfg.hidden_dim, rng));
  Var cls2 = g.constant(random_rows(2, cfg.hidden_dim, rng));
  auto span = std::span<const McmSet<double>>(sets);

  auto both = total_loss(g, params, span, cls1, cls2, 0.2, LossToggles{true, true});
  CHECK(both.report.total == both.report.mcm + both.report.set);
  CHECK(both.report.mcm > 0);
  CHECK(both.report.set > 0);
  CHECK(both.report.masked_count == 4);

  auto mcm_only = total_loss(g, params, span, cls1, cls2, 0.2, LossToggles{true, false});
  CHECK(mcm_only.report.total == mcm_only.report.mcm);
  CHECK(mcm_only.report.set == 0);

  auto set_only = total_loss(g, params, span, cls1, cls2, 0.2, LossToggles{false, true});
  CHECK(set_only.report.total == set_only.report.set);

  CHECK_THROWS_AS((void)total_loss(g, params, span, cls1, cls2, 0.2, LossToggles{false, false}),
                  std::invalid_argument);
}

TEST_CASE("end-to-end total loss gradient matches finite differences") {
  // whole pipeline: encode two views of two videos, mcm + set loss
  ModelConfig cfg;
  cfg.feature_dim = 4;
  cfg.hidden_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.proj_dim = 4;
  auto params = init_params<double>(cfg, 101);
  Rng rng(103);

  const i64 B = 2, K = 2;
  std::vector<Tensor<double>> feats, coords;
  for (i64 s = 0; s < 2 * B; ++s) {
    feats.push_back(random_rows(K, cfg.feature_dim, rng));
    Tensor<double> c = Tensor<double>::zeros({K, 6});
    for (i64 i = 0; i < K; ++i)
      for (i64 j = 0; j < 3; ++j) {
        c.at(i, j) = 0.5 * rng.uniform();
        c.at(i, j + 3) = c.at(i, j) + 0.1 + 0.3 * rng.uniform();
      }
    coords.push_back(c);
  }

  auto build = [&](Graph<double>& g) {
    std::vector<SetInput<double>> sets;
    for (i64 s = 0; s < 2 * B; ++s)
      sets.push_back({g.constant(feats[static_cast<size_t>(s)]), coords[static_cast<size_t>(s)],
                      {s % K}});
    auto encs = encode_sets(g, params, std::span<const SetInput<double>>(sets));
    std::vector<McmSet<double>> mcm_sets;
    std::vector<Var> cls1, cls2;
    for (i64 v = 0; v < B; ++v) {
      mcm_sets.push_back({encs[2 * v].clip_tokens, sets[2 * v].features, sets[2 * v].mask});
      mcm_sets.push_back({encs[2 * v + 1].clip_tokens, sets[2 * v + 1].features, sets[2 * v + 1].mask});
      cls1.push_back(encs[2 * v].summary);
      cls2.push_back(encs[2 * v + 1].summary);
    }
    auto loss = total_loss(g, params, std::span<const McmSet<double>>(mcm_sets),
                           g.concat_rows(cls1), g.concat_rows(cls2), 0.1, LossToggles{});
    return loss.value;
  };

  auto all = params.all_params();
  double err = grad_check(std::span<Parameter<double>* const>(all), build, 1e-5);
  CHECK(err <= 1e-4);
}
