// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/mie.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "test_helpers.hpp"
#include "unitrans/checkpoint.hpp"
#include "unitrans/errors.hpp"
#include "unitrans/rng.hpp"
#include "unitrans/tensor.hpp"
#include "unitrans/workbench.hpp"

using namespace unitrans;

namespace {

FeatureMap map_from(int c, int h, int w, std::vector<float> vals) {
  FeatureMap f;
  f.c = c;
  f.h = h;
  f.w = w;
  f.values = std::move(vals);
  return f;
}

Tensor rand_codes(Shape s, uint64_t seed, float stdev = 1.0f) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, stdev);
}

// One shared stage-1 run; several cases probe different facets of it.
struct Stage1Fixture {
  Workbench wb;
  ModalitySplit split;
  Stage1Result run;
};

const Stage1Fixture& trained() {
  static Stage1Fixture* fx = [] {
    auto* f = new Stage1Fixture();
    f->split = make_split(11, 8, 2, 0, 40, 40, 48);
    Stage1Config cfg;
    cfg.seed = 11;
    f->run = stage1_train(f->wb, f->split, cfg);
    return f;
  }();
  return *fx;
}

std::vector<uint64_t> heldout_scenes(const ModalitySplit& split) {
  std::vector<uint64_t> ids;
  for (uint64_t s = split.test_scene_lo; s < split.test_scene_hi; ++s)
    ids.push_back(s);
  return ids;
}

// Codes and modality labels over (scene, agent, modality) triples.
void encode_grid(const Workbench& wb, const MieParams& p,
                 std::span<const uint64_t> mods,
                 std::span<const uint64_t> scenes,
                 std::vector<std::vector<float>>& codes,
                 std::vector<int>& labels) {
  std::vector<FeatureMap> feats;
  for (uint64_t sid : scenes) {
    Scene scene = wb.generate_scene(sid);
    for (int a = 0; a < wb.config().agents; ++a) {
      Observation obs = wb.make_observation(scene, a);
      for (size_t m = 0; m < mods.size(); ++m) {
        feats.push_back(wb.encode_feature(wb.make_modality_spec(mods[m]), obs));
        labels.push_back(static_cast<int>(m));
      }
    }
  }
  Tensor z = mie_encode(p, feats);
  const int d = z.dim(1);
  for (int i = 0; i < z.dim(0); ++i) {
    auto row = z.values().subspan(static_cast<size_t>(i) * d, d);
    codes.emplace_back(row.begin(), row.end());
  }
}

}  // namespace

TEST_CASE("channel moments match closed forms") {
  SUBCASE("constant map") {
    auto [mu, sigma] = channel_moments(feature_tensor(map_from(
        2, 2, 2, {3.5f, 3.5f, 3.5f, 3.5f, -1.0f, -1.0f, -1.0f, -1.0f})));
    CHECK(mu.values()[0] == doctest::Approx(3.5));
    CHECK(mu.values()[1] == doctest::Approx(-1.0));
    CHECK(sigma.values()[0] == doctest::Approx(0.0));
    CHECK(sigma.values()[1] == doctest::Approx(0.0));
  }
  SUBCASE("two-level channel") {
    auto [mu, sigma] =
        channel_moments(feature_tensor(map_from(1, 2, 2, {0, 2, 0, 2})));
    CHECK(mu.values()[0] == doctest::Approx(1.0));
    CHECK(sigma.values()[0] == doctest::Approx(1.0));
  }
  SUBCASE("random map against a double loop") {
    Workbench wb;
    FeatureMap f = wb.encode_feature(wb.make_modality_spec(4),
                                     wb.make_observation(wb.generate_scene(3), 1));
    auto [mu, sigma] = channel_moments(feature_tensor(f));
    const size_t plane = static_cast<size_t>(f.h) * f.w;
    for (int c = 0; c < f.c; ++c) {
      double m = 0.0;
      for (size_t i = 0; i < plane; ++i) m += f.values[c * plane + i];
      m /= static_cast<double>(plane);
      double v = 0.0;
      for (size_t i = 0; i < plane; ++i) {
        double d = f.values[c * plane + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(plane);
      CHECK(mu.values()[static_cast<size_t>(c)] == doctest::Approx(m).epsilon(1e-5));
      CHECK(sigma.values()[static_cast<size_t>(c)] ==
            doctest::Approx(std::sqrt(v)).epsilon(1e-5));
    }
  }
  SUBCASE("a single cell is rejected") {
    CHECK_THROWS_AS(channel_moments(feature_tensor(map_from(2, 1, 1, {1, 2}))),
                    std::invalid_argument);
  }
}

TEST_CASE("gram descriptor is the pooled channel outer product") {
  SUBCASE("two channels, one cell") {
    Tensor tri = gram_descriptor(feature_tensor(map_from(2, 1, 1, {1, 2})), 1, 1);
    REQUIRE(tri.numel() == 3);
    CHECK(tri.values()[0] == doctest::Approx(1.0));
    CHECK(tri.values()[1] == doctest::Approx(2.0));
    CHECK(tri.values()[2] == doctest::Approx(4.0));
  }
  SUBCASE("zero map") {
    Tensor tri = gram_descriptor(
        feature_tensor(map_from(3, 4, 4, std::vector<float>(48, 0.0f))), 2, 2);
    for (float v : tri.values()) CHECK(v == 0.0f);
  }
  SUBCASE("positive semidefinite on a random 4x4 case") {
    Rng rng(77);
    std::vector<float> vals(4 * 8 * 8);
    for (float& v : vals) v = rng.uniform(-2.0f, 2.0f);
    Tensor tri = gram_descriptor(feature_tensor(map_from(4, 8, 8, vals)), 2, 2);
    REQUIRE(tri.numel() == 10);
    std::vector<double> g(16, 0.0);
    int at = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i; j < 4; ++j) {
        g[static_cast<size_t>(i) * 4 + j] = tri.values()[static_cast<size_t>(at)];
        g[static_cast<size_t>(j) * 4 + i] = tri.values()[static_cast<size_t>(at)];
        ++at;
      }
    for (double ev : jacobi_eigenvalues(g, 4)) CHECK(ev >= -1e-5);
  }
  SUBCASE("ambient width") {
    Workbench wb;
    FeatureMap f = wb.encode_feature(wb.make_modality_spec(4),
                                     wb.make_observation(wb.generate_scene(3), 1));
    CHECK(gram_descriptor(feature_tensor(f)).numel() == 136);
  }
  SUBCASE("pool grid must divide the map") {
    CHECK_THROWS_AS(gram_descriptor(
                        feature_tensor(map_from(1, 3, 3, std::vector<float>(9, 1.0f))), 2, 2),
                    std::invalid_argument);
  }
}

TEST_CASE("response features take channel max and mean magnitude") {
  SUBCASE("constant positive map") {
    Tensor r = response_features(
        feature_tensor(map_from(2, 2, 2, std::vector<float>(8, 0.75f))));
    REQUIRE(r.numel() == 4);
    for (float v : r.values()) CHECK(v == doctest::Approx(0.75));
  }
  SUBCASE("single spike") {
    std::vector<float> vals(16, 0.0f);
    vals[5] = 9.0f;
    Tensor r = response_features(feature_tensor(map_from(1, 4, 4, vals)));
    CHECK(r.values()[0] == doctest::Approx(9.0));
    CHECK(r.values()[1] == doctest::Approx(9.0 / 16.0));
  }
  SUBCASE("spatial permutation invariance") {
    std::vector<float> vals(16);
    std::iota(vals.begin(), vals.end(), -6.0f);
    std::vector<float> shuffled(vals.rbegin(), vals.rend());
    Tensor a = response_features(feature_tensor(map_from(1, 4, 4, vals)));
    Tensor b = response_features(feature_tensor(map_from(1, 4, 4, shuffled)));
    CHECK(a.values()[0] == b.values()[0]);
    CHECK(a.values()[1] == doctest::Approx(b.values()[1]));
  }
}

TEST_CASE("encoding is deterministic and pooled-stat invariant") {
  MieParams p = mie_init(3, 4, 4, 21);
  std::vector<float> vals(3 * 16);
  for (size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<float>((i * 7 + (i / 16) * 3) % 5);
  std::vector<FeatureMap> feats = {map_from(3, 4, 4, vals)};

  SUBCASE("same input, same code") {
    Tensor z1 = mie_encode(p, feats, 2, 2);
    Tensor z2 = mie_encode(p, feats, 2, 2);
    REQUIRE(z1.shape() == Shape{1, 4});
    for (int i = 0; i < 4; ++i) CHECK(z1.values()[static_cast<size_t>(i)] ==
                                      z2.values()[static_cast<size_t>(i)]);
  }
  SUBCASE("init is seed-deterministic") {
    MieParams q = mie_init(3, 4, 4, 21);
    CHECK(tensors_checksum(mie_to_named(p)) == tensors_checksum(mie_to_named(q)));
    MieParams r = mie_init(3, 4, 4, 22);
    CHECK(tensors_checksum(mie_to_named(p)) != tensors_checksum(mie_to_named(r)));
  }
  SUBCASE("spatial shuffles cannot move 1x1-pooled codes") {
    // integer-valued cells keep every pooled statistic exact, so the codes
    // must agree bit for bit
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 15; i > 0; --i) std::swap(perm[static_cast<size_t>(i)],
                                           perm[static_cast<size_t>((i * 11 + 3) % (i + 1))]);
    std::vector<float> shuffled(vals.size());
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i)
        shuffled[static_cast<size_t>(c) * 16 + perm[static_cast<size_t>(i)]] =
            vals[static_cast<size_t>(c) * 16 + i];
    std::vector<FeatureMap> sh = {map_from(3, 4, 4, shuffled)};
    Tensor z1 = mie_encode(p, feats, 1, 1);
    Tensor z2 = mie_encode(p, sh, 1, 1);
    for (int i = 0; i < 4; ++i) CHECK(z1.values()[static_cast<size_t>(i)] ==
                                      z2.values()[static_cast<size_t>(i)]);
  }
  SUBCASE("wrapper equals the descriptor-row path") {
    MieDescriptors d = mie_descriptors(feats[0], 1, 1);
    Tensor z1 = mie_encode(p, feats, 1, 1);
    Tensor z2 = mie_encode_rows(p, Tensor::from({1, 12}, d.stats),
                                Tensor::from({1, 6}, d.gram_tri));
    for (int i = 0; i < 4; ++i) CHECK(z1.values()[static_cast<size_t>(i)] ==
                                      z2.values()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("contrastive loss agrees with hand evaluation") {
  Tensor codes = Tensor::from({3, 2}, {1, 0, 1, 0, 0, 1});
  std::vector<int> labels = {0, 0, 1};
  float loss = info_nce(codes, labels, 1.0f).item();
  double expect = 2.0 * std::log(1.0 + std::exp(-1.0));
  CHECK(loss == doctest::Approx(expect).epsilon(1e-4));
}

TEST_CASE("contrastive loss properties") {
  SUBCASE("identical codes of one modality score zero") {
    Tensor codes = Tensor::from({3, 2}, {2, 1, 2, 1, 2, 1});
    std::vector<int> labels = {4, 4, 4};
    CHECK(info_nce(codes, labels, 0.9f).item() == 0.0f);
  }
  SUBCASE("all-singleton batches are degenerate") {
    Tensor codes = rand_codes({3, 4}, 5);
    std::vector<int> labels = {0, 1, 2};
    CHECK_THROWS_AS(info_nce(codes, labels, 0.9f), DegenerateBatchError);
  }
  SUBCASE("nonnegative on random batches") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Tensor codes = rand_codes({12, 4}, seed);
      std::vector<int> labels;
      Rng rng(seed + 100);
      for (int i = 0; i < 12; ++i) labels.push_back(rng.uniform_int(0, 3));
      bool any_pair = false;
      for (int i = 0; i < 12 && !any_pair; ++i)
        for (int j = i + 1; j < 12; ++j)
          if (labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
            any_pair = true;
            break;
          }
      if (!any_pair) continue;
      CHECK(info_nce(codes, labels, 0.9f).item() >= 0.0f);
    }
  }
  SUBCASE("invariant under global rotation") {
    Tensor codes = rand_codes({6, 3}, 9);
    std::vector<int> labels = {0, 1, 0, 2, 1, 2};
    float base = info_nce(codes, labels, 0.9f).item();
    // Gram-Schmidt over a fixed well-spread triple
    double basis[3][3] = {{1, 2, -1}, {0, 1, 3}, {2, -1, 1}};
    double r[3][3];
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) r[i][k] = basis[i][k];
      for (int j = 0; j < i; ++j) {
        double dot = 0;
        for (int k = 0; k < 3; ++k) dot += r[i][k] * r[j][k];
        for (int k = 0; k < 3; ++k) r[i][k] -= dot * r[j][k];
      }
      double norm = 0;
      for (int k = 0; k < 3; ++k) norm += r[i][k] * r[i][k];
      norm = std::sqrt(norm);
      for (int k = 0; k < 3; ++k) r[i][k] /= norm;
    }
    std::vector<float> rotated(6 * 3);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k)
          acc += r[j][k] * codes.values()[static_cast<size_t>(i) * 3 + k];
        rotated[static_cast<size_t>(i) * 3 + j] = static_cast<float>(acc);
      }
    float turned = info_nce(Tensor::from({6, 3}, rotated), labels, 0.9f).item();
    CHECK(std::abs(turned - base) < 1e-5);
  }
  SUBCASE("gradient matches finite differences") {
    std::vector<int> labels = {0, 1, 0, 1, 2};
    auto f = [&](std::vector<Tensor>& pt) {
      return info_nce(pt[0], labels, 0.9f);
    };
    auto rep = grad_check(f, {rand_codes({5, 3}, 31)}, 1e-3, 1e-3);
    CHECK(rep.pass);
  }
}

TEST_CASE("modality head loss") {
  SUBCASE("confident one-hot logits") {
    MieParams p = mie_init(2, 4, 4, 3);
    std::fill(p.head_w.values_mut().begin(), p.head_w.values_mut().end(), 0.0f);
    for (int i = 0; i < 4; ++i) p.head_w.values_mut()[static_cast<size_t>(i) * 4 + i] = 20.0f;
    Tensor codes = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0,
                                         0, 0, 1, 0, 0, 0, 0, 1});
    std::vector<int> labels = {0, 1, 2, 3};
    CHECK(modality_cls_loss(p, codes, labels).item() == doctest::Approx(0.0));
  }
  SUBCASE("an all-zero head is exactly the uniform posterior") {
    MieParams p = mie_init(16, 4, 8, 3);
    std::fill(p.head_w.values_mut().begin(), p.head_w.values_mut().end(), 0.0f);
    Tensor codes = rand_codes({5, 4}, 8);
    std::vector<int> labels = {0, 3, 7, 2, 5};
    CHECK(modality_cls_loss(p, codes, labels).item() == std::log(8.0f));
  }
  SUBCASE("labels outside the training set are rejected") {
    MieParams p = mie_init(2, 4, 4, 3);
    Tensor codes = rand_codes({2, 4}, 8);
    std::vector<int> bad = {0, 4};
    CHECK_THROWS_AS(modality_cls_loss(p, codes, bad), std::invalid_argument);
  }
  SUBCASE("gradient matches finite differences") {
    MieParams p = mie_init(2, 3, 4, 3);
    std::vector<int> labels = {0, 1, 2, 3, 1};
    auto f = [&](std::vector<Tensor>& pt) {
      return modality_cls_loss(p, pt[0], labels);
    };
    auto rep = grad_check(f, {rand_codes({5, 3}, 19)}, 1e-3, 1e-3);
    CHECK(rep.pass);
  }
}

TEST_CASE("silhouette scores") {
  SUBCASE("hand-evaluated asymmetric pair") {
    std::vector<std::vector<float>> pts = {{0, 0}, {0, 1}, {10, 10}, {10, 11}};
    std::vector<int> labels = {0, 0, 1, 1};
    std::vector<float> s =
        silhouette_samples(pts, labels, SilhouetteMetric::kEuclidean);
    double b = (std::sqrt(200.0) + std::sqrt(221.0)) / 2.0;
    CHECK(s[0] == doctest::Approx((b - 1.0) / b).epsilon(1e-6));
    CHECK(s[0] == doctest::Approx(0.9310).epsilon(1e-3));
  }
  SUBCASE("tight clusters far apart") {
    std::vector<std::vector<float>> pts = {{0, 0}, {0, 0}, {50, 50}, {50, 50}};
    std::vector<int> labels = {0, 0, 1, 1};
    CHECK(silhouette(pts, labels, SilhouetteMetric::kEuclidean) == 1.0f);
  }
  SUBCASE("random labels on one blob stay near zero") {
    Rng rng(15);
    std::vector<std::vector<float>> pts;
    std::vector<int> labels;
    for (int i = 0; i < 500; ++i) {
      std::vector<float> p(8);
      for (float& v : p) v = rng.normal();
      pts.push_back(std::move(p));
      labels.push_back(rng.uniform_int(0, 1));
    }
    CHECK(std::abs(silhouette(pts, labels, SilhouetteMetric::kEuclidean)) < 0.1f);
  }
  SUBCASE("invariant to relabeling and euclidean scaling") {
    Rng rng(16);
    std::vector<std::vector<float>> pts, scaled;
    std::vector<int> labels, relabeled;
    for (int i = 0; i < 40; ++i) {
      int cluster = i % 3;
      std::vector<float> p(4);
      for (size_t k = 0; k < p.size(); ++k)
        p[k] = rng.normal() + 4.0f * static_cast<float>(cluster == static_cast<int>(k));
      std::vector<float> q(p);
      for (float& v : q) v *= 3.7f;
      pts.push_back(std::move(p));
      scaled.push_back(std::move(q));
      labels.push_back(cluster);
      relabeled.push_back(cluster == 0 ? 9 : cluster == 1 ? -2 : 4);
    }
    float base = silhouette(pts, labels, SilhouetteMetric::kEuclidean);
    CHECK(silhouette(pts, relabeled, SilhouetteMetric::kEuclidean) == base);
    CHECK(silhouette(scaled, labels, SilhouetteMetric::kEuclidean) ==
          doctest::Approx(base).epsilon(1e-5));
  }
  SUBCASE("singletons score zero") {
    std::vector<std::vector<float>> pts = {{0, 0}, {0, 1}, {9, 9}};
    std::vector<int> labels = {0, 0, 1};
    std::vector<float> s =
        silhouette_samples(pts, labels, SilhouetteMetric::kEuclidean);
    CHECK(s[2] == 0.0f);
  }
  SUBCASE("a single cluster is rejected") {
    std::vector<std::vector<float>> pts = {{0, 0}, {0, 1}};
    std::vector<int> labels = {3, 3};
    CHECK_THROWS_AS(silhouette(pts, labels, SilhouetteMetric::kEuclidean),
                    std::invalid_argument);
  }
}

TEST_CASE("stage-1 training is reproducible") {
  Workbench wb;
  ModalitySplit split = make_split(11, 8, 2, 0, 40, 40, 48);
  Stage1Config cfg;
  cfg.seed = 11;
  cfg.steps = 30;
  Stage1Result a = stage1_train(wb, split, cfg);
  Stage1Result b = stage1_train(wb, split, cfg);
  CHECK(a.curve == b.curve);
  CHECK(tensors_checksum(mie_to_named(a.params)) ==
        tensors_checksum(mie_to_named(b.params)));
}

TEST_CASE("stage-1 training halves its loss") {
  const Stage1Fixture& fx = trained();
  REQUIRE(fx.run.curve.size() == 200);
  for (float v : fx.run.curve) CHECK(std::isfinite(v));
  CHECK(fx.run.curve.back() < 0.5f * fx.run.curve.front());
}

TEST_CASE("trained codes are finite with positive norms") {
  const Stage1Fixture& fx = trained();
  std::vector<std::vector<float>> codes;
  std::vector<int> labels;
  std::vector<uint64_t> scenes = heldout_scenes(fx.split);
  encode_grid(fx.wb, fx.run.params, fx.split.train_modalities, scenes, codes,
              labels);
  for (const auto& z : codes) {
    double norm = 0.0;
    for (float v : z) {
      CHECK(std::isfinite(v));
      norm += static_cast<double>(v) * v;
    }
    CHECK(norm > 0.0);
  }
}

TEST_CASE("codes organize modalities better than raw statistics") {
  const Stage1Fixture& fx = trained();
  std::vector<uint64_t> scenes = heldout_scenes(fx.split);
  IntrinsicSpaceReport rep = intrinsic_space_report(
      fx.wb, fx.run.params, fx.split.train_modalities, scenes);
  CHECK(rep.silhouette_code - rep.silhouette_raw > 0.1f);
  CHECK(rep.same_mod_dist_code < rep.same_mod_dist_raw);
  CHECK(rep.cross_mod_dist_code > rep.cross_mod_dist_raw);

  std::string csv = rep.to_csv();
  CHECK(csv.find("metric,raw,intrinsic\n") == 0);
  CHECK(csv.find("modality_silhouette,") != std::string::npos);
  CHECK(csv.find("same_modality_distance,") != std::string::npos);
  CHECK(csv.find("cross_modality_distance,") != std::string::npos);
}

TEST_CASE("emerging modalities land in their own clusters") {
  const Stage1Fixture& fx = trained();
  std::vector<uint64_t> mods = fx.split.train_modalities;
  size_t first_emerging = mods.size();
  mods.insert(mods.end(), fx.split.emerging_modalities.begin(),
              fx.split.emerging_modalities.end());
  std::vector<std::vector<float>> codes;
  std::vector<int> labels;
  std::vector<uint64_t> scenes = heldout_scenes(fx.split);
  encode_grid(fx.wb, fx.run.params, mods, scenes, codes, labels);
  std::vector<float> s =
      silhouette_samples(codes, labels, SilhouetteMetric::kCosine);
  double acc = 0.0;
  int n = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (static_cast<size_t>(labels[i]) >= first_emerging) {
      acc += s[i];
      ++n;
    }
  }
  REQUIRE(n > 0);
  CHECK(acc / n > 0.0);
}

TEST_CASE("stage-1 guards its preconditions") {
  Workbench wb;
  SUBCASE("too few modalities") {
    ModalitySplit split;
    split.train_modalities = {42};
    split.train_scene_lo = 0;
    split.train_scene_hi = 8;
    CHECK_THROWS_AS(stage1_train(wb, split, Stage1Config{}), ConfigError);
  }
  SUBCASE("empty scene range") {
    ModalitySplit split;
    split.train_modalities = {1, 2, 3, 4};
    split.train_scene_lo = 8;
    split.train_scene_hi = 8;
    CHECK_THROWS_AS(stage1_train(wb, split, Stage1Config{}), ConfigError);
  }
  SUBCASE("a runaway learning rate raises divergence") {
    ModalitySplit split = make_split(11, 8, 2, 0, 8, 8, 12);
    Stage1Config cfg;
    cfg.seed = 11;
    cfg.steps = 6;
    cfg.lr = 1e30f;
    CHECK_THROWS_AS(stage1_train(wb, split, cfg), DivergenceError);
  }
}

TEST_CASE("encoder parameters survive a checkpoint round trip") {
  MieParams p = mie_init(16, 4, 8, 77);
  p.tau = 0.8f;
  p.lambda_cls = 0.25f;
  std::string path = test_tmp_path("mie.utck");
  save_checkpoint(path, mie_to_named(p));
  MieParams q = mie_from_named(load_checkpoint(path));
  std::remove(path.c_str());
  CHECK(tensors_checksum(mie_to_named(p)) == tensors_checksum(mie_to_named(q)));
  CHECK(q.tau == 0.8f);
  CHECK(q.lambda_cls == 0.25f);
  CHECK(q.channels() == 16);
  CHECK(q.code_dim() == 4);
  CHECK(q.n_modalities() == 8);
}

TEST_CASE("mismatched checkpoints are refused") {
  MieParams p = mie_init(4, 4, 4, 5);
  NamedTensors named = mie_to_named(p);
  SUBCASE("missing tensor") {
    named.erase(named.begin());
    CHECK_THROWS_AS(mie_from_named(named), CheckpointError);
  }
  SUBCASE("wrong shape") {
    for (auto& [name, t] : named)
      if (name == "mie/gram_w2") t = Tensor::zeros({32, 15});
    CHECK_THROWS_AS(mie_from_named(named), CheckpointMismatchError);
  }
}
