// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/mie.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <tuple>

#include "unitrans/errors.hpp"
#include "unitrans/optim.hpp"
#include "unitrans/rng.hpp"
#include "unitrans/util.hpp"

namespace unitrans {

namespace {

int tri_count(int c) { return c * (c + 1) / 2; }

Tensor init_weight(Shape s, uint64_t seed, const char* name, int fan_in,
                   float gain = 1.0f) {
  Rng rng = rng_for(seed, name);
  float stdev = gain / std::sqrt(static_cast<float>(fan_in));
  return Tensor::randn(std::move(s), rng, stdev, true);
}

// Entry layers start at a quarter of the usual scale. Over whitened
// descriptors that keeps the trunk close to linear, so modalities outside
// the training set inherit the separation their descriptors already have
// instead of snapping onto the nearest training cluster.
constexpr float kEntryGain = 0.25f;

void check_feature_rank(const Tensor& fmap, const char* who) {
  if (fmap.shape().size() != 3)
    throw std::invalid_argument(std::string(who) + ": expected a [C, H, W] map");
}

}  // namespace

std::vector<Tensor> MieParams::trainable() const {
  return {gram_w1, gram_b1,      gram_w2,      gram_b2,
          fuse_w1_stats, fuse_w1_gram, fuse_b1, fuse_w2,
          fuse_b2, head_w,       head_b};
}

void MieParams::set_requires_grad(bool on) {
  auto params = trainable();
  for (Tensor& t : params) t.data->requires_grad = on;
}

MieParams mie_init(int channels, int code_dim, int n_modalities,
                   uint64_t seed) {
  if (channels < 1 || code_dim < 1)
    throw std::invalid_argument("mie_init: channels and code_dim must be positive");
  if (n_modalities < 2)
    throw std::invalid_argument("mie_init: need at least two modalities");
  const int tri = tri_count(channels);
  const int stats = 4 * channels;
  const int fuse_in = stats + 16;
  MieParams p;
  p.stat_shift = Tensor::zeros({stats});
  p.stat_scale = Tensor::full({stats}, 1.0f);
  p.tri_shift = Tensor::zeros({tri});
  p.tri_scale = Tensor::full({tri}, 1.0f);
  p.gram_w1 = init_weight({tri, 32}, seed, "mie/gram_w1", tri, kEntryGain);
  p.gram_b1 = Tensor::zeros({32}, true);
  p.gram_w2 = init_weight({32, 16}, seed, "mie/gram_w2", 32);
  p.gram_b2 = Tensor::zeros({16}, true);
  p.fuse_w1_stats =
      init_weight({stats, 64}, seed, "mie/fuse_w1_stats", fuse_in, kEntryGain);
  p.fuse_w1_gram =
      init_weight({16, 64}, seed, "mie/fuse_w1_gram", fuse_in, kEntryGain);
  p.fuse_b1 = Tensor::zeros({64}, true);
  p.fuse_w2 = init_weight({64, code_dim}, seed, "mie/fuse_w2", 64);
  p.fuse_b2 = Tensor::zeros({code_dim}, true);
  p.head_w = init_weight({code_dim, n_modalities}, seed, "mie/head_w", code_dim);
  p.head_b = Tensor::zeros({n_modalities}, true);
  return p;
}

NamedTensors mie_to_named(const MieParams& p) {
  NamedTensors named;
  named.emplace_back("mie/stat_shift", p.stat_shift);
  named.emplace_back("mie/stat_scale", p.stat_scale);
  named.emplace_back("mie/tri_shift", p.tri_shift);
  named.emplace_back("mie/tri_scale", p.tri_scale);
  named.emplace_back("mie/gram_w1", p.gram_w1);
  named.emplace_back("mie/gram_b1", p.gram_b1);
  named.emplace_back("mie/gram_w2", p.gram_w2);
  named.emplace_back("mie/gram_b2", p.gram_b2);
  named.emplace_back("mie/fuse_w1_stats", p.fuse_w1_stats);
  named.emplace_back("mie/fuse_w1_gram", p.fuse_w1_gram);
  named.emplace_back("mie/fuse_b1", p.fuse_b1);
  named.emplace_back("mie/fuse_w2", p.fuse_w2);
  named.emplace_back("mie/fuse_b2", p.fuse_b2);
  named.emplace_back("mie/head_w", p.head_w);
  named.emplace_back("mie/head_b", p.head_b);
  named.emplace_back("mie/tau", Tensor::from({1}, {p.tau}));
  named.emplace_back("mie/lambda_cls", Tensor::from({1}, {p.lambda_cls}));
  return named;
}

MieParams mie_from_named(const NamedTensors& named) {
  MieParams p;
  p.stat_shift = require_tensor(named, "mie/stat_shift");
  p.stat_scale = require_tensor(named, "mie/stat_scale");
  p.tri_shift = require_tensor(named, "mie/tri_shift");
  p.tri_scale = require_tensor(named, "mie/tri_scale");
  p.gram_w1 = require_tensor(named, "mie/gram_w1");
  p.gram_b1 = require_tensor(named, "mie/gram_b1");
  p.gram_w2 = require_tensor(named, "mie/gram_w2");
  p.gram_b2 = require_tensor(named, "mie/gram_b2");
  p.fuse_w1_stats = require_tensor(named, "mie/fuse_w1_stats");
  p.fuse_w1_gram = require_tensor(named, "mie/fuse_w1_gram");
  p.fuse_b1 = require_tensor(named, "mie/fuse_b1");
  p.fuse_w2 = require_tensor(named, "mie/fuse_w2");
  p.fuse_b2 = require_tensor(named, "mie/fuse_b2");
  p.head_w = require_tensor(named, "mie/head_w");
  p.head_b = require_tensor(named, "mie/head_b");
  p.tau = require_tensor(named, "mie/tau").item();
  p.lambda_cls = require_tensor(named, "mie/lambda_cls").item();

  auto want = [](const Tensor& t, Shape s, const char* name) {
    if (t.shape() != s)
      throw CheckpointMismatchError(std::string("mie checkpoint: bad shape for ") + name);
  };
  const int stats = p.fuse_w1_stats.dim(0);
  if (stats % 4 != 0)
    throw CheckpointMismatchError("mie checkpoint: stats width is not 4*C");
  const int c = stats / 4;
  const int d = p.fuse_w2.dim(1);
  const int m = p.head_b.numel();
  want(p.stat_shift, {stats}, "stat_shift");
  want(p.stat_scale, {stats}, "stat_scale");
  want(p.tri_shift, {tri_count(c)}, "tri_shift");
  want(p.tri_scale, {tri_count(c)}, "tri_scale");
  want(p.gram_w1, {tri_count(c), 32}, "gram_w1");
  want(p.gram_b1, {32}, "gram_b1");
  want(p.gram_w2, {32, 16}, "gram_w2");
  want(p.gram_b2, {16}, "gram_b2");
  want(p.fuse_w1_gram, {16, 64}, "fuse_w1_gram");
  want(p.fuse_b1, {64}, "fuse_b1");
  want(p.fuse_w2, {64, d}, "fuse_w2");
  want(p.fuse_b2, {d}, "fuse_b2");
  want(p.head_w, {d, m}, "head_w");
  if (!(p.tau > 0.0f))
    throw CheckpointMismatchError("mie checkpoint: tau must be positive");
  return p;
}

Tensor feature_tensor(const FeatureMap& f) {
  if (f.c < 1 || f.h < 1 || f.w < 1 ||
      f.values.size() != static_cast<size_t>(f.c) * f.h * f.w)
    throw std::invalid_argument("feature_tensor: inconsistent map dimensions");
  return Tensor::from({f.c, f.h, f.w}, f.values);
}

std::pair<Tensor, Tensor> channel_moments(const Tensor& fmap) {
  check_feature_rank(fmap, "channel_moments");
  if (fmap.dim(1) * fmap.dim(2) < 2)
    throw std::invalid_argument("channel_moments: need at least two cells");
  Tensor mu = reduce_mean(fmap, {1, 2});
  Tensor sigma = sqrt(add_const(reduce_variance(fmap, {1, 2}), 1e-12f));
  return {mu, sigma};
}

Tensor gram_descriptor(const Tensor& fmap, int pool_h, int pool_w) {
  check_feature_rank(fmap, "gram_descriptor");
  if (pool_h < 1 || pool_w < 1 || fmap.dim(1) % pool_h != 0 ||
      fmap.dim(2) % pool_w != 0)
    throw std::invalid_argument("gram_descriptor: pool grid must divide the map");
  const int c = fmap.dim(0);
  const int n = pool_h * pool_w;
  Tensor flat = reshape(avg_pool2d(fmap, pool_h, pool_w), {c, n});
  Tensor g = scale(matmul(flat, transpose2d(flat)), 1.0f / static_cast<float>(n));
  auto idx = std::make_shared<std::vector<int>>();
  idx->reserve(tri_count(c));
  for (int i = 0; i < c; ++i)
    for (int j = i; j < c; ++j) idx->push_back(i * c + j);
  return gather(g, idx, {tri_count(c)});
}

Tensor response_features(const Tensor& fmap) {
  check_feature_rank(fmap, "response_features");
  std::array<Tensor, 2> parts = {reduce_max(fmap, {1, 2}),
                                 reduce_mean(abs(fmap), {1, 2})};
  return concat_1d(parts);
}

MieDescriptors mie_descriptors(const FeatureMap& f, int pool_h, int pool_w) {
  Tensor x = feature_tensor(f);
  auto [mu, sigma] = channel_moments(x);
  Tensor r = response_features(x);
  Tensor tri = gram_descriptor(x, pool_h, pool_w);
  MieDescriptors d;
  d.stats.reserve(4 * static_cast<size_t>(f.c));
  d.stats.insert(d.stats.end(), mu.values().begin(), mu.values().end());
  d.stats.insert(d.stats.end(), sigma.values().begin(), sigma.values().end());
  d.stats.insert(d.stats.end(), r.values().begin(), r.values().end());
  d.gram_tri.assign(tri.values().begin(), tri.values().end());
  return d;
}

Tensor mie_encode_rows(const MieParams& p, const Tensor& stats,
                       const Tensor& gram_tri) {
  Tensor st = div(sub(stats, p.stat_shift), p.stat_scale);
  Tensor tr = div(sub(gram_tri, p.tri_shift), p.tri_scale);
  Tensor h1 = gelu(add(matmul(tr, p.gram_w1), p.gram_b1));
  Tensor psi = add(matmul(h1, p.gram_w2), p.gram_b2);
  Tensor mixed = add(matmul(st, p.fuse_w1_stats), matmul(psi, p.fuse_w1_gram));
  Tensor h2 = gelu(add(mixed, p.fuse_b1));
  return add(matmul(h2, p.fuse_w2), p.fuse_b2);
}

Tensor mie_encode(const MieParams& p, std::span<const FeatureMap> feats,
                  int pool_h, int pool_w) {
  if (feats.empty()) throw std::invalid_argument("mie_encode: empty batch");
  const int c = p.channels();
  std::vector<float> stats, tri;
  stats.reserve(feats.size() * 4 * c);
  tri.reserve(feats.size() * tri_count(c));
  for (const FeatureMap& f : feats) {
    if (f.c != c)
      throw std::invalid_argument("mie_encode: feature channels do not match the encoder");
    MieDescriptors d = mie_descriptors(f, pool_h, pool_w);
    stats.insert(stats.end(), d.stats.begin(), d.stats.end());
    tri.insert(tri.end(), d.gram_tri.begin(), d.gram_tri.end());
  }
  const int n = static_cast<int>(feats.size());
  return mie_encode_rows(p, Tensor::from({n, 4 * c}, std::move(stats)),
                         Tensor::from({n, tri_count(c)}, std::move(tri)));
}

Tensor info_nce(const Tensor& codes, std::span<const int> labels, float tau) {
  if (codes.shape().size() != 2)
    throw std::invalid_argument("info_nce: codes must be [n, d]");
  const int n = codes.dim(0);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("info_nce: one label per code");
  if (n < 2) throw std::invalid_argument("info_nce: need at least two codes");
  if (!(tau > 0.0f)) throw std::invalid_argument("info_nce: tau must be positive");

  std::vector<float> pos(static_cast<size_t>(n) * n, 0.0f);
  std::vector<float> offdiag(static_cast<size_t>(n) * n, 0.0f);
  std::vector<float> keep(n, 0.0f);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      offdiag[static_cast<size_t>(a) * n + b] = 1.0f;
      if (labels[a] == labels[b]) {
        pos[static_cast<size_t>(a) * n + b] = 1.0f;
        keep[a] = 1.0f;
      }
    }
  }
  if (std::none_of(keep.begin(), keep.end(), [](float k) { return k > 0.0f; }))
    throw DegenerateBatchError("info_nce: degenerate batch, no anchor has a positive partner");

  Tensor zn = div(codes, sqrt(add_const(reduce_sum(square(codes), {1}, true), 1e-12f)));
  Tensor e = exp(scale(matmul(zn, transpose2d(zn)), 1.0f / tau));
  Tensor den = reduce_sum(mul(e, Tensor::from({n, n}, std::move(offdiag))), {1});
  Tensor num = reduce_sum(mul(e, Tensor::from({n, n}, std::move(pos))), {1});
  // Anchors without positives read log 1 here and are masked from the sum.
  std::vector<float> pad(n);
  for (int a = 0; a < n; ++a) pad[a] = 1.0f - keep[a];
  Tensor num_safe = add(num, Tensor::from({n}, std::move(pad)));
  Tensor kept = Tensor::from({n}, std::move(keep));
  return reduce_sum(mul(kept, sub(log(den), log(num_safe))), {0});
}

Tensor modality_cls_loss(const MieParams& p, const Tensor& codes,
                         std::span<const int> labels) {
  if (codes.shape().size() != 2)
    throw std::invalid_argument("modality_cls_loss: codes must be [n, d]");
  const int n = codes.dim(0);
  const int m = p.n_modalities();
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("modality_cls_loss: one label per code");
  for (int a = 0; a < n; ++a)
    if (labels[a] < 0 || labels[a] >= m)
      throw std::invalid_argument("modality_cls_loss: label outside the training set");

  Tensor logits = add(matmul(codes, p.head_w), p.head_b);
  Tensor mx = reduce_max(logits, {1}, true);
  Tensor lse = add(reshape(mx, {n}), log(reduce_sum(exp(sub(logits, mx)), {1})));
  auto idx = std::make_shared<std::vector<int>>(n);
  for (int a = 0; a < n; ++a) (*idx)[a] = a * m + labels[a];
  Tensor truth = gather(logits, idx, {n});
  return reduce_mean(sub(lse, truth), {0});
}

Stage1Result stage1_train(const Workbench& wb, const ModalitySplit& split,
                          const Stage1Config& cfg) {
  const int n_mods = static_cast<int>(split.train_modalities.size());
  if (n_mods < 2)
    throw ConfigError("stage1_train: need at least two training modalities");
  if (split.train_scene_lo >= split.train_scene_hi)
    throw ConfigError("stage1_train: empty training scene range");
  if (cfg.steps < 1 || cfg.scenes_per_step < 1)
    throw ConfigError("stage1_train: steps and scenes_per_step must be positive");
  if (!(cfg.tau > 0.0f) || cfg.lambda_cls < 0.0f)
    throw ConfigError("stage1_train: tau must be positive, lambda_cls >= 0");

  const int channels = wb.config().channels;
  const int agents = wb.config().agents;
  MieParams p = mie_init(channels, cfg.code_dim, n_mods, cfg.seed);
  p.tau = cfg.tau;
  p.lambda_cls = cfg.lambda_cls;
  Adam opt(p.trainable(), cfg.lr);

  std::vector<ModalitySpec> specs;
  specs.reserve(n_mods);
  for (uint64_t seed : split.train_modalities)
    specs.push_back(wb.make_modality_spec(seed));

  // Every (scene, agent, modality) triple recurs across steps; the encoder
  // only ever sees the pooled descriptors, so those are what gets cached.
  std::map<std::pair<uint64_t, int>, Observation> views;
  std::map<std::tuple<uint64_t, int, int>, MieDescriptors> descs;
  auto descriptors_for = [&](uint64_t scene_id, int agent,
                             int mod) -> const MieDescriptors& {
    auto key = std::make_tuple(scene_id, agent, mod);
    if (auto it = descs.find(key); it != descs.end()) return it->second;
    auto vkey = std::make_pair(scene_id, agent);
    auto vit = views.find(vkey);
    if (vit == views.end()) {
      Scene scene = wb.generate_scene(scene_id);
      vit = views.emplace(vkey, wb.make_observation(scene, agent)).first;
    }
    FeatureMap f = wb.encode_feature(specs[mod], vit->second);
    return descs.emplace(key, mie_descriptors(f)).first->second;
  };

  // Whitening constants come from a strided sweep of the training split, so
  // every later encode sees descriptor dimensions on a common scale. Held-out
  // scenes and emerging modalities go through the same constants.
  {
    std::vector<const MieDescriptors*> cal;
    for (uint64_t sc = split.train_scene_lo; sc < split.train_scene_hi; sc += 5)
      for (int a = 0; a < agents; ++a)
        for (int m = 0; m < n_mods; ++m) cal.push_back(&descriptors_for(sc, a, m));
    auto fit = [&](Tensor& shift, Tensor& sc, auto member) {
      std::span<float> mu = shift.values_mut();
      std::span<float> sd = sc.values_mut();
      std::vector<double> acc(mu.size(), 0.0);
      for (const MieDescriptors* d : cal) {
        const std::vector<float>& row = d->*member;
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += row[i];
      }
      for (size_t i = 0; i < acc.size(); ++i)
        mu[i] = static_cast<float>(acc[i] / static_cast<double>(cal.size()));
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const MieDescriptors* d : cal) {
        const std::vector<float>& row = d->*member;
        for (size_t i = 0; i < acc.size(); ++i) {
          double cdev = static_cast<double>(row[i]) - mu[i];
          acc[i] += cdev * cdev;
        }
      }
      for (size_t i = 0; i < acc.size(); ++i)
        sd[i] = static_cast<float>(
                    std::sqrt(acc[i] / static_cast<double>(cal.size()))) +
                1e-6f;
    };
    fit(p.stat_shift, p.stat_scale, &MieDescriptors::stats);
    fit(p.tri_shift, p.tri_scale, &MieDescriptors::gram_tri);
  }

  Stage1Result out;
  out.curve.reserve(cfg.steps);
  const uint64_t scene_span = split.train_scene_hi - split.train_scene_lo;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = rng_for(cfg.seed, "stage1-batch", static_cast<uint64_t>(step));
    std::vector<float> stats, tri;
    std::vector<int> labels;
    for (int s = 0; s < cfg.scenes_per_step; ++s) {
      uint64_t scene_id = split.train_scene_lo + rng.next_u64() % scene_span;
      for (int a = 0; a < agents; ++a) {
        int mod = rng.uniform_int(0, n_mods - 1);
        const MieDescriptors& d = descriptors_for(scene_id, a, mod);
        stats.insert(stats.end(), d.stats.begin(), d.stats.end());
        tri.insert(tri.end(), d.gram_tri.begin(), d.gram_tri.end());
        labels.push_back(mod);
      }
    }
    const int n = static_cast<int>(labels.size());
    float value = std::numeric_limits<float>::quiet_NaN();
    try {
      Tape tape;
      Tensor st = Tensor::from({n, 4 * channels}, std::move(stats));
      Tensor tr = Tensor::from({n, tri_count(channels)}, std::move(tri));
      Tensor z = mie_encode_rows(p, st, tr);
      Tensor loss = add(info_nce(z, labels, p.tau),
                        scale(modality_cls_loss(p, z, labels), p.lambda_cls));
      value = loss.item();
      if (std::isfinite(value)) {
        backward(loss);
        opt.step();
      }
    } catch (const DegenerateBatchError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      // Shapes are fixed across steps, so a math-domain failure here means
      // activations blew past the engine's numeric range.
      throw DivergenceError("stage1_train: diverged at step " +
                            std::to_string(step) + " (" + e.what() + ")");
    }
    if (!std::isfinite(value))
      throw DivergenceError("stage1_train: loss is not finite at step " +
                            std::to_string(step));
    out.curve.push_back(value);
  }
  out.params = p;
  return out;
}

namespace {

double pair_distance(std::span<const float> a, std::span<const float> b,
                     SilhouetteMetric metric) {
  if (metric == SilhouetteMetric::kEuclidean) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return 1.0 - dot / (std::sqrt(na * nb) + 1e-12);
}

}  // namespace

std::vector<float> silhouette_samples(
    const std::vector<std::vector<float>>& points,
    const std::vector<int>& labels, SilhouetteMetric metric) {
  const size_t n = points.size();
  if (labels.size() != n)
    throw std::invalid_argument("silhouette: one label per point");
  if (n < 2) throw std::invalid_argument("silhouette: need at least two points");
  std::map<int, std::vector<size_t>> clusters;
  for (size_t i = 0; i < n; ++i) clusters[labels[i]].push_back(i);
  if (clusters.size() < 2)
    throw std::invalid_argument("silhouette: need at least two clusters");

  std::vector<float> scores(n, 0.0f);
  for (size_t i = 0; i < n; ++i) {
    const auto& own = clusters[labels[i]];
    if (own.size() < 2) continue;  // singleton scores 0
    double intra = 0.0;
    for (size_t j : own)
      if (j != i) intra += pair_distance(points[i], points[j], metric);
    intra /= static_cast<double>(own.size() - 1);
    double nearest = std::numeric_limits<double>::infinity();
    for (const auto& [label, members] : clusters) {
      if (label == labels[i]) continue;
      double acc = 0.0;
      for (size_t j : members) acc += pair_distance(points[i], points[j], metric);
      nearest = std::min(nearest, acc / static_cast<double>(members.size()));
    }
    double denom = std::max(intra, nearest);
    scores[i] = denom > 0.0 ? static_cast<float>((nearest - intra) / denom) : 0.0f;
  }
  return scores;
}

float silhouette(const std::vector<std::vector<float>>& points,
                 const std::vector<int>& labels, SilhouetteMetric metric) {
  std::vector<float> scores = silhouette_samples(points, labels, metric);
  double acc = 0.0;
  for (float s : scores) acc += s;
  return static_cast<float>(acc / static_cast<double>(scores.size()));
}

std::string IntrinsicSpaceReport::to_csv() const {
  std::string s = "metric,raw,intrinsic\n";
  s += "modality_silhouette," + fmt_float(silhouette_raw) + "," +
       fmt_float(silhouette_code) + "\n";
  s += "same_modality_distance," + fmt_float(same_mod_dist_raw) + "," +
       fmt_float(same_mod_dist_code) + "\n";
  s += "cross_modality_distance," + fmt_float(cross_mod_dist_raw) + "," +
       fmt_float(cross_mod_dist_code) + "\n";
  return s;
}

IntrinsicSpaceReport intrinsic_space_report(
    const Workbench& wb, const MieParams& p,
    std::span<const uint64_t> modality_seeds,
    std::span<const uint64_t> scene_ids) {
  if (modality_seeds.size() < 2)
    throw std::invalid_argument("intrinsic_space_report: need at least two modalities");
  if (scene_ids.size() < 2)
    throw std::invalid_argument("intrinsic_space_report: need at least two scenes");
  const int channels = wb.config().channels;
  const int agents = wb.config().agents;
  const int n_mods = static_cast<int>(modality_seeds.size());

  std::vector<ModalitySpec> specs;
  specs.reserve(n_mods);
  for (uint64_t seed : modality_seeds) specs.push_back(wb.make_modality_spec(seed));

  struct Key {
    int scene_ix, agent, mod;
  };
  std::vector<Key> keys;
  std::vector<std::vector<float>> raw;
  std::vector<int> mod_labels;
  std::vector<float> stats, tri;
  for (size_t s = 0; s < scene_ids.size(); ++s) {
    Scene scene = wb.generate_scene(scene_ids[s]);
    for (int a = 0; a < agents; ++a) {
      Observation obs = wb.make_observation(scene, a);
      for (int m = 0; m < n_mods; ++m) {
        FeatureMap f = wb.encode_feature(specs[m], obs);
        MieDescriptors d = mie_descriptors(f);
        raw.emplace_back(d.stats.begin(), d.stats.begin() + 2 * channels);
        stats.insert(stats.end(), d.stats.begin(), d.stats.end());
        tri.insert(tri.end(), d.gram_tri.begin(), d.gram_tri.end());
        keys.push_back({static_cast<int>(s), a, m});
        mod_labels.push_back(m);
      }
    }
  }
  const int n = static_cast<int>(keys.size());
  std::vector<std::vector<float>> codes(n);
  {
    NoGradGuard ng;
    Tensor z = mie_encode_rows(p, Tensor::from({n, 4 * channels}, std::move(stats)),
                               Tensor::from({n, tri_count(channels)}, std::move(tri)));
    const int d = z.dim(1);
    for (int i = 0; i < n; ++i) {
      auto row = z.values().subspan(static_cast<size_t>(i) * d, d);
      codes[i].assign(row.begin(), row.end());
    }
  }

  IntrinsicSpaceReport rep;
  rep.silhouette_raw = silhouette(raw, mod_labels, SilhouetteMetric::kCosine);
  rep.silhouette_code = silhouette(codes, mod_labels, SilhouetteMetric::kCosine);

  double same_raw = 0.0, same_code = 0.0, cross_raw = 0.0, cross_code = 0.0;
  int64_t same_n = 0, cross_n = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      bool same_mod = keys[i].mod == keys[j].mod;
      bool same_scene = keys[i].scene_ix == keys[j].scene_ix;
      if (same_mod && !same_scene) {
        same_raw += pair_distance(raw[i], raw[j], SilhouetteMetric::kCosine);
        same_code += pair_distance(codes[i], codes[j], SilhouetteMetric::kCosine);
        ++same_n;
      } else if (!same_mod && same_scene && keys[i].agent == keys[j].agent) {
        cross_raw += pair_distance(raw[i], raw[j], SilhouetteMetric::kCosine);
        cross_code += pair_distance(codes[i], codes[j], SilhouetteMetric::kCosine);
        ++cross_n;
      }
    }
  }
  rep.same_mod_dist_raw = static_cast<float>(same_raw / static_cast<double>(same_n));
  rep.same_mod_dist_code = static_cast<float>(same_code / static_cast<double>(same_n));
  rep.cross_mod_dist_raw = static_cast<float>(cross_raw / static_cast<double>(cross_n));
  rep.cross_mod_dist_code = static_cast<float>(cross_code / static_cast<double>(cross_n));
  return rep;
}

}  // namespace unitrans
