// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "unitrans/errors.hpp"
#include "unitrans/rng.hpp"

using namespace unitrans;

namespace {

Tensor rand_tensor(Shape s, uint64_t seed, float stdev = 1.0f,
                   bool requires_grad = false) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, stdev, requires_grad);
}

// Routing-only pair: alpha and logits filled in, feature slots left empty.
TranslationPair route_pair(std::vector<float> alpha, std::vector<float> logits,
                           uint64_t nbr_mod, uint64_t ego_mod,
                           bool requires_grad = false) {
  TranslationPair p;
  p.neighbor_modality = nbr_mod;
  p.ego_modality = ego_mod;
  const int ka = static_cast<int>(alpha.size());
  const int kl = static_cast<int>(logits.size());
  p.alpha = Tensor::from({ka}, std::move(alpha), requires_grad);
  p.logits = Tensor::from({kl}, std::move(logits), requires_grad);
  return p;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("feature distillation measures summed squared error") {
  SUBCASE("identical maps give exactly zero") {
    Tensor a = rand_tensor({3, 4, 5}, 100);
    CHECK(feat_distill_loss(a, a).item() == 0.0f);
  }

  SUBCASE("unit offset on every cell counts each cell once") {
    Tensor a = rand_tensor({3, 4, 5}, 101);
    std::vector<float> shifted(a.values().begin(), a.values().end());
    for (float& v : shifted) v += 1.0f;
    Tensor b = Tensor::from({3, 4, 5}, std::move(shifted));
    CHECK(feat_distill_loss(a, b).item() == doctest::Approx(60.0).epsilon(1e-6));
  }

  SUBCASE("gradient matches 2 (a - b)") {
    Tensor a = rand_tensor({2, 3, 3}, 102, 1.0f, true);
    Tensor b = rand_tensor({2, 3, 3}, 103);
    Tape tape;
    Tensor loss = feat_distill_loss(a, b);
    tape.backward(loss);
    REQUIRE(!a.grad().empty());
    for (size_t i = 0; i < a.numel(); ++i) {
      double want = 2.0 * (a.values()[i] - b.values()[i]);
      CHECK(a.grad()[i] == doctest::Approx(want).epsilon(1e-5));
    }
  }

  SUBCASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(
        feat_distill_loss(rand_tensor({2, 2, 2}, 1), rand_tensor({2, 2, 3}, 2)),
        std::invalid_argument);
  }
}

TEST_CASE("routing contrast groups pairs by mapping label") {
  SUBCASE("one matched couple against one stranger, by hand") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({1.0f, 0.0f}, {0.0f, 0.0f}, 5, 7));
    pairs.push_back(route_pair({1.0f, 0.0f}, {0.0f, 0.0f}, 5, 7));
    pairs.push_back(route_pair({0.0f, 1.0f}, {0.0f, 0.0f}, 7, 5));
    const float tau = 0.9f;
    // Anchors 0 and 1 see one positive at cosine 1 and one negative at
    // cosine 0; anchor 2 has no positive and is skipped.
    double e = std::exp(1.0 / tau);
    double expect = 2.0 * -std::log(e / (e + 1.0));
    CHECK(routing_contrastive_loss(pairs, tau).item() ==
          doctest::Approx(expect).epsilon(1e-5));
  }

  SUBCASE("a single shared label makes every ratio one") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({0.7f, 0.3f}, {0.0f, 0.0f}, 3, 8));
    pairs.push_back(route_pair({0.2f, 0.8f}, {0.0f, 0.0f}, 3, 8));
    pairs.push_back(route_pair({0.5f, 0.5f}, {0.0f, 0.0f}, 3, 8));
    CHECK(std::abs(routing_contrastive_loss(pairs, 0.9f).item()) < 1e-6f);
  }

  SUBCASE("pair order does not matter") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({0.9f, 0.1f}, {}, 1, 2));
    pairs.push_back(route_pair({0.6f, 0.4f}, {}, 1, 2));
    pairs.push_back(route_pair({0.3f, 0.7f}, {}, 2, 1));
    pairs.push_back(route_pair({0.2f, 0.8f}, {}, 2, 1));
    float forward = routing_contrastive_loss(pairs, 0.9f).item();
    std::reverse(pairs.begin(), pairs.end());
    CHECK(routing_contrastive_loss(pairs, 0.9f).item() ==
          doctest::Approx(forward).epsilon(1e-5));
  }

  SUBCASE("all labels distinct leaves nothing to contrast") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({1.0f, 0.0f}, {}, 1, 2));
    pairs.push_back(route_pair({0.0f, 1.0f}, {}, 2, 1));
    pairs.push_back(route_pair({0.5f, 0.5f}, {}, 1, 3));
    CHECK_THROWS_AS(routing_contrastive_loss(pairs, 0.9f),
                    DegenerateBatchError);
  }

  SUBCASE("fewer than two pairs is rejected") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({1.0f, 0.0f}, {}, 1, 2));
    CHECK_THROWS_AS(routing_contrastive_loss(pairs, 0.9f),
                    std::invalid_argument);
  }
}

TEST_CASE("importance sums coefficients and load counts selections") {
  SUBCASE("hand-set batch of two") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({0.8f, 0.2f}, {}, 1, 2, true));
    pairs.push_back(route_pair({0.3f, 0.7f}, {}, 2, 1, true));
    Tape tape;
    auto [imp, load] = importance_load(pairs, 1);
    REQUIRE(imp.numel() == 2);
    CHECK(imp.values()[0] == doctest::Approx(1.1).epsilon(1e-6));
    CHECK(imp.values()[1] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(load.values()[0] == 1.0f);
    CHECK(load.values()[1] == 1.0f);
    CHECK(imp.requires_grad());
    CHECK_FALSE(load.requires_grad());
  }

  SUBCASE("exact ties resolve toward the lower index") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({0.5f, 0.5f}, {}, 1, 2));
    pairs.push_back(route_pair({0.5f, 0.5f}, {}, 2, 1));
    auto [imp, load] = importance_load(pairs, 1);
    CHECK(load.values()[0] == 2.0f);
    CHECK(load.values()[1] == 0.0f);
  }

  SUBCASE("totals are pinned by the batch size") {
    Rng rng(77);
    std::vector<TranslationPair> pairs;
    for (int i = 0; i < 6; ++i) {
      std::vector<float> raw(4);
      for (float& v : raw) v = rng.normal();
      Tensor u = Tensor::from({4}, std::move(raw));
      Tensor a = reshape(softmax(reshape(u, {1, 4}), 1), {4});
      TranslationPair p;
      p.alpha = a;
      pairs.push_back(p);
    }
    auto [imp, load] = importance_load(pairs, 3);
    float imp_total = 0.0f, load_total = 0.0f;
    for (size_t i = 0; i < 4; ++i) {
      imp_total += imp.values()[i];
      load_total += load.values()[i];
    }
    CHECK(imp_total == doctest::Approx(6.0).epsilon(1e-5));
    CHECK(load_total == 18.0f);
  }

  SUBCASE("empty batch is rejected") {
    std::vector<TranslationPair> none;
    CHECK_THROWS_AS(importance_load(none, 1), std::invalid_argument);
  }
}

TEST_CASE("router regularizer matches hand-computed values") {
  SUBCASE("uniform coefficients, zero logits") {
    std::vector<TranslationPair> pairs;
    pairs.push_back(route_pair({0.5f, 0.5f}, {0.0f, 0.0f}, 1, 2));
    pairs.push_back(route_pair({0.5f, 0.5f}, {0.0f, 0.0f}, 2, 1));
    // Balance: (2 / 4) * (1 * 2 + 1 * 0) = 1. Penalty: log(2) squared.
    double l2 = std::log(2.0);
    CHECK(router_reg_loss(pairs, 1).item() ==
          doctest::Approx(1.0 + l2 * l2).epsilon(1e-4));
  }

  SUBCASE("saturated opposing logits") {
    std::vector<TranslationPair> pairs;
    float e = 1.0f / (1.0f + std::exp(-20.0f));
    pairs.push_back(route_pair({e, 1.0f - e}, {10.0f, -10.0f}, 1, 2));
    pairs.push_back(route_pair({1.0f - e, e}, {-10.0f, 10.0f}, 2, 1));
    // Balance stays 1; each row's log-sum-exp is essentially 10.
    CHECK(router_reg_loss(pairs, 1).item() ==
          doctest::Approx(101.0).epsilon(1e-3));
  }

  SUBCASE("backward agrees with finite differences through the routing") {
    std::vector<float> base = {0.3f, -0.2f, 0.5f, -0.1f, 0.4f, 0.1f};
    auto build = [](const std::vector<float>& raw, bool grad,
                    std::vector<Tensor>* leaves) {
      std::vector<TranslationPair> pairs;
      for (int r = 0; r < 2; ++r) {
        std::vector<float> vals(raw.begin() + 3 * r, raw.begin() + 3 * r + 3);
        Tensor u = Tensor::from({3}, std::move(vals), grad);
        if (leaves) leaves->push_back(u);
        TranslationPair p;
        p.logits = u;
        p.alpha = reshape(softmax(reshape(u, {1, 3}), 1), {3});
        p.neighbor_modality = static_cast<uint64_t>(r);
        pairs.push_back(std::move(p));
      }
      return pairs;
    };

    std::vector<Tensor> leaves;
    Tape tape;
    auto pairs = build(base, true, &leaves);
    Tensor loss = router_reg_loss(pairs, 2);
    tape.backward(loss);

    const double h = 1e-2;
    for (size_t i = 0; i < base.size(); ++i) {
      std::vector<float> up = base, dn = base;
      up[i] += static_cast<float>(h);
      dn[i] -= static_cast<float>(h);
      NoGradGuard ng;
      auto pu = build(up, false, nullptr);
      auto pd = build(dn, false, nullptr);
      double fd = (router_reg_loss(pu, 2).item() -
                   router_reg_loss(pd, 2).item()) /
                  (2.0 * h);
      double got = leaves[i / 3].grad()[i % 3];
      CHECK(got == doctest::Approx(fd).epsilon(2e-3).scale(1.0));
    }
  }
}

TEST_CASE("task loss is mean binary cross entropy on logits") {
  SUBCASE("confident correct predictions cost almost nothing") {
    Tensor logits = Tensor::from({4}, {20.0f, -20.0f, 20.0f, -20.0f});
    Tensor labels = Tensor::from({4}, {1.0f, 0.0f, 1.0f, 0.0f});
    CHECK(task_loss(logits, labels).item() < 1e-6f);
  }

  SUBCASE("zero logits cost log 2 regardless of labels") {
    Tensor logits = Tensor::zeros({2, 5});
    Tensor labels = Tensor::from({2, 5}, std::vector<float>(10, 1.0f));
    CHECK(task_loss(logits, labels).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  SUBCASE("gradient is the calibration gap over the cell count") {
    Tensor logits = rand_tensor({3, 4}, 200, 1.5f, true);
    std::vector<float> lv(12);
    Rng rng(201);
    for (float& v : lv) v = rng.uniform_int(0, 1) ? 1.0f : 0.0f;
    Tensor labels = Tensor::from({3, 4}, std::move(lv));
    Tape tape;
    tape.backward(task_loss(logits, labels));
    REQUIRE(!logits.grad().empty());
    for (size_t i = 0; i < 12; ++i) {
      double want =
          (sigmoid(logits.values()[i]) - labels.values()[i]) / 12.0;
      CHECK(logits.grad()[i] == doctest::Approx(want).epsilon(1e-4));
    }
  }

  SUBCASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(
        task_loss(Tensor::zeros({3}), Tensor::zeros({4})),
        std::invalid_argument);
  }
}

TEST_CASE("fusion takes the elementwise maximum over arriving maps") {
  Tensor ego = Tensor::from({1, 2, 2}, {1.0f, 5.0f, -2.0f, 0.0f});
  Tensor other = Tensor::from({1, 2, 2}, {3.0f, 2.0f, -1.0f, 0.5f});

  SUBCASE("no neighbors returns the ego map untouched") {
    Tensor fused = fuse(ego, {});
    for (size_t i = 0; i < 4; ++i)
      CHECK(fused.values()[i] == ego.values()[i]);
  }

  SUBCASE("pairwise maximum, order independent, idempotent") {
    std::vector<Tensor> one = {other};
    Tensor fused = fuse(ego, one);
    float want[4] = {3.0f, 5.0f, -1.0f, 0.5f};
    for (size_t i = 0; i < 4; ++i) CHECK(fused.values()[i] == want[i]);

    std::vector<Tensor> both = {other, ego};
    std::vector<Tensor> swapped = {ego, other};
    Tensor a = fuse(ego, both);
    Tensor b = fuse(ego, swapped);
    for (size_t i = 0; i < 4; ++i) CHECK(a.values()[i] == b.values()[i]);

    std::vector<Tensor> twice = {ego, ego};
    Tensor same = fuse(ego, twice);
    for (size_t i = 0; i < 4; ++i) CHECK(same.values()[i] == ego.values()[i]);
  }

  SUBCASE("gradient routes to the winning map") {
    Tensor a = Tensor::from({1, 1, 2}, {1.0f, 5.0f}, true);
    Tensor b = Tensor::from({1, 1, 2}, {3.0f, 2.0f}, true);
    Tape tape;
    std::vector<Tensor> in = {b};
    Tensor fused = fuse(a, in);
    tape.backward(reduce_sum(fused, {0, 1, 2}));
    CHECK(a.grad()[0] == 0.0f);
    CHECK(a.grad()[1] == 1.0f);
    CHECK(b.grad()[0] == 1.0f);
    CHECK(b.grad()[1] == 0.0f);
  }

  SUBCASE("shape mismatch is rejected") {
    std::vector<Tensor> bad = {Tensor::zeros({1, 2, 3})};
    CHECK_THROWS_AS(fuse(ego, bad), std::invalid_argument);
  }
}

TEST_CASE("task head applies a per-cell linear readout") {
  SUBCASE("initialization is seeded and starts unbiased") {
    TaskHead h1 = head_init(16, 42);
    TaskHead h2 = head_init(16, 42);
    TaskHead h3 = head_init(16, 43);
    REQUIRE(h1.w.numel() == 16);
    REQUIRE(h1.b.numel() == 1);
    CHECK(h1.b.values()[0] == 0.0f);
    bool differs = false;
    for (size_t i = 0; i < 16; ++i) {
      CHECK(h1.w.values()[i] == h2.w.values()[i]);
      differs |= h1.w.values()[i] != h3.w.values()[i];
    }
    CHECK(differs);
    CHECK(h1.w.requires_grad());
    CHECK(h1.b.requires_grad());
  }

  SUBCASE("logits match a direct double-precision loop") {
    TaskHead head;
    head.w = Tensor::from({2}, {0.5f, -1.5f});
    head.b = Tensor::from({1}, {0.25f});
    Tensor fused = rand_tensor({2, 2, 3}, 300);
    Tensor logits = head_logits(head, fused);
    REQUIRE(logits.numel() == 6);
    for (int cell = 0; cell < 6; ++cell) {
      double want = 0.25;
      for (int c = 0; c < 2; ++c)
        want += static_cast<double>(head.w.values()[static_cast<size_t>(c)]) *
                fused.values()[static_cast<size_t>(c * 6 + cell)];
      CHECK(logits.values()[static_cast<size_t>(cell)] ==
            doctest::Approx(want).epsilon(1e-6));
    }
  }

  SUBCASE("channel mismatch is rejected") {
    TaskHead head = head_init(4, 1);
    CHECK_THROWS_AS(head_logits(head, Tensor::zeros({5, 2, 2})),
                    std::invalid_argument);
  }

  SUBCASE("named round trip preserves every value") {
    TaskHead head = head_init(8, 9);
    TaskHead back = head_from_named(head_to_named(head));
    for (size_t i = 0; i < 8; ++i)
      CHECK(back.w.values()[i] == head.w.values()[i]);
    CHECK(back.b.values()[0] == head.b.values()[0]);

    NamedTensors missing = {{"head/w", head.w}};
    CHECK_THROWS_AS(head_from_named(missing), CheckpointError);

    NamedTensors bad = {{"head/w", Tensor::zeros({2, 4})},
                        {"head/b", head.b}};
    CHECK_THROWS_AS(head_from_named(bad), CheckpointMismatchError);
  }
}

namespace {

// Compact end-to-end rig: small maps and a small bank keep each training
// step cheap while exercising every loss term.
struct TrainRig {
  WorkbenchConfig wc;
  Workbench wb;
  MieParams mie;
  ModalitySplit split;
  MctArchitecture arch;

  TrainRig()
      : wc{.grid = 16, .channels = 8, .agents = 4},
        wb(wc),
        mie(mie_init(8, 8, 10, 501)),
        split(make_split(11, 8, 2, 0, 40, 40, 48)),
        arch{.channels = 8, .window = 4, .heads = 4, .n_blocks = 2} {}

  Stage2Config config() const {
    Stage2Config cfg;
    cfg.top_k = 2;
    cfg.batch_scenes = 2;
    cfg.steps = 120;
    cfg.report_every = 40;
    cfg.seed = 902;
    return cfg;
  }
};

}  // namespace

TEST_CASE("joint training drives the objective down with the encoder frozen") {
  TrainRig rig;
  ExpertBank bank = bank_init(rig.arch, 4, 601);
  MmrParams mmr = mmr_init(8, 4, 602);
  Stage2Config cfg = rig.config();

  Stage2Result run = stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg);

  REQUIRE(run.curve.size() == 120);
  CHECK(run.pairs_per_step == 24);

  SUBCASE("reported totals decompose into the four weighted terms") {
    for (const Stage2StepRow& r : run.curve) {
      double recon = r.l_task + cfg.lambda_feat * r.l_feat +
                     cfg.lambda_ctr * r.l_ctr + cfg.lambda_r * r.l_r;
      CHECK(std::abs(recon - r.total) <=
            1e-5 * std::max(1.0, std::abs(recon)));
    }
  }

  SUBCASE("the objective at least halves over the run") {
    CHECK(run.curve.back().total < 0.5f * run.curve.front().total);
    CHECK(run.curve.back().l_feat < 0.5f * run.curve.front().l_feat);
  }

  SUBCASE("the intrinsic encoder is untouched") {
    CHECK(run.mie_checksum_before == run.mie_checksum_after);
    CHECK(run.mie_checksum_before ==
          tensors_checksum(mie_to_named(rig.mie)));
  }

  SUBCASE("importance stays spread across the bank") {
    REQUIRE(run.importance_windows.size() == 3);
    for (const std::vector<float>& w : run.importance_windows) {
      REQUIRE(w.size() == 4);
      float total = std::accumulate(w.begin(), w.end(), 0.0f);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-3));
    }
    const std::vector<float>& last = run.importance_windows.back();
    CHECK(*std::min_element(last.begin(), last.end()) > 0.01f);
  }

  SUBCASE("metrics render as one csv row per step") {
    std::string csv = stage2_metrics_csv(run);
    std::istringstream is(csv);
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "step,L_task,L_feat,L_ctr,L_r,total,min_imp,max_imp");
    int rows = 0;
    while (std::getline(is, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == 120);
    CHECK(csv.find("\n0,") != std::string::npos);
  }
}

TEST_CASE("short reruns of the same seed reproduce the curve exactly") {
  TrainRig rig;
  Stage2Config cfg = rig.config();
  cfg.steps = 3;
  cfg.report_every = 3;

  std::vector<float> totals;
  for (int rep = 0; rep < 2; ++rep) {
    ExpertBank bank = bank_init(rig.arch, 4, 601);
    MmrParams mmr = mmr_init(8, 4, 602);
    Stage2Result run =
        stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg);
    for (const Stage2StepRow& r : run.curve) totals.push_back(r.total);
  }
  REQUIRE(totals.size() == 6);
  for (int i = 0; i < 3; ++i) CHECK(totals[i] == totals[i + 3]);
}

TEST_CASE("training rejects bad configurations and reports blowups") {
  TrainRig rig;

  SUBCASE("configuration checks") {
    ExpertBank bank = bank_init(rig.arch, 4, 601);
    MmrParams mmr = mmr_init(8, 4, 602);
    Stage2Config cfg = rig.config();
    cfg.top_k = 0;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    ConfigError);
    cfg = rig.config();
    cfg.top_k = 5;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    ConfigError);
    cfg = rig.config();
    cfg.lambda_feat = -1.0f;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    ConfigError);
    cfg = rig.config();
    cfg.batch_scenes = 0;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    ConfigError);
    cfg = rig.config();
    cfg.lr = 0.0f;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    ConfigError);

    ModalitySplit empty = rig.split;
    empty.train_modalities.clear();
    CHECK_THROWS_AS(
        stage2_train(rig.wb, rig.mie, bank, mmr, empty, rig.config()),
        ConfigError);
  }

  SUBCASE("an absurd learning rate is reported as divergence") {
    ExpertBank bank = bank_init(rig.arch, 4, 601);
    MmrParams mmr = mmr_init(8, 4, 602);
    Stage2Config cfg = rig.config();
    cfg.lr = 1e30f;
    cfg.steps = 5;
    CHECK_THROWS_AS(stage2_train(rig.wb, rig.mie, bank, mmr, rig.split, cfg),
                    DivergenceError);
  }
}
