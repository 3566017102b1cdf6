// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unitrans/checkpoint.hpp"
#include "unitrans/tensor.hpp"
#include "unitrans/workbench.hpp"

namespace unitrans {

// Modality-intrinsic encoder: maps a feature map to a short code that
// identifies how the map was sensed, not what it shows. A batch of codes is
// a [n, d] tensor; modality labels travel beside it as plain ints.

// Two small MLPs around pooled channel statistics. The 4C-dim stats block
// (mean, std, max, mean-abs per channel) and the Gram upper triangle feed a
// fused trunk; the logical first fusion layer is (4C + 16) -> 64, stored as
// the two input-block slices fuse_w1_stats and fuse_w1_gram. Descriptors are
// whitened per dimension before either branch; the constants are identity
// until stage 1 calibrates them on its training split, and they are carried
// by the checkpoint, not touched by gradients.
struct MieParams {
  Tensor stat_shift, stat_scale;  // [4C] whitening over the stats block
  Tensor tri_shift, tri_scale;    // [tri(C)] whitening over the Gram triangle
  Tensor gram_w1, gram_b1;        // tri(C) -> 32
  Tensor gram_w2, gram_b2;        // 32 -> 16
  Tensor fuse_w1_stats;           // 4C -> 64 slice
  Tensor fuse_w1_gram;            // 16 -> 64 slice
  Tensor fuse_b1;
  Tensor fuse_w2, fuse_b2;  // 64 -> d
  Tensor head_w, head_b;    // d -> |train modalities|, used in stage 1 only
  float tau = 0.9f;
  float lambda_cls = 0.1f;

  int channels() const { return fuse_w1_stats.dim(0) / 4; }
  int code_dim() const { return fuse_w2.dim(1); }
  int n_modalities() const { return head_b.numel(); }
  std::vector<Tensor> trainable() const;
  void set_requires_grad(bool on);
};

MieParams mie_init(int channels, int code_dim, int n_modalities,
                   uint64_t seed);
// Names carry the "mie/" prefix; tau and lambda_cls ride along as scalars.
NamedTensors mie_to_named(const MieParams& p);
MieParams mie_from_named(const NamedTensors& named);

// Constant [C, H, W] tensor over the map's storage.
Tensor feature_tensor(const FeatureMap& f);

// Per-channel spatial mean and standard deviation (population, over H*W).
// Variance gets +1e-12 before the root so flat channels stay differentiable.
std::pair<Tensor, Tensor> channel_moments(const Tensor& fmap);

// Upper triangle (with diagonal) of the channel Gram matrix of the map
// pooled to pool_h x pool_w; length C*(C+1)/2.
Tensor gram_descriptor(const Tensor& fmap, int pool_h = 8, int pool_w = 8);

// Per-channel spatial max of F and spatial mean of |F|, concatenated; 2C.
Tensor response_features(const Tensor& fmap);

// Flattened inputs for one map: stats = (mean | std | response), 4C floats,
// and the Gram triangle. Cheap to cache per (scene, agent, modality).
struct MieDescriptors {
  std::vector<float> stats;
  std::vector<float> gram_tri;
};
MieDescriptors mie_descriptors(const FeatureMap& f, int pool_h = 8,
                               int pool_w = 8);

// Codes from pre-assembled descriptor rows, [n, 4C] and [n, tri(C)].
Tensor mie_encode_rows(const MieParams& p, const Tensor& stats,
                       const Tensor& gram_tri);
// Convenience wrapper over mie_descriptors + mie_encode_rows; [n, d].
Tensor mie_encode(const MieParams& p, std::span<const FeatureMap> feats,
                  int pool_h = 8, int pool_w = 8);

// Supervised contrastive loss over cosine similarity, summed over anchors;
// anchors with no positive partner are skipped. Throws DegenerateBatchError
// when every anchor is skipped.
Tensor info_nce(const Tensor& codes, std::span<const int> labels, float tau);

// Mean negative log-likelihood of the linear modality head.
Tensor modality_cls_loss(const MieParams& p, const Tensor& codes,
                         std::span<const int> labels);

struct Stage1Config {
  int steps = 200;
  int scenes_per_step = 8;  // every agent of every sampled scene contributes
  float lr = 1e-3f;
  int code_dim = 4;
  float tau = 0.9f;         // contrastive temperature, carried into the params
  float lambda_cls = 0.1f;  // weight of the modality-head term
  uint64_t seed = 1;
};

struct Stage1Result {
  MieParams params;
  std::vector<float> curve;  // contrastive + weighted head loss per step
};

// Fits the encoder on the training modalities of the split. Whitening
// constants are calibrated on training-split descriptors first; scenes and
// per-agent modalities are resampled every step from a seeded stream, so a
// fixed seed reproduces the curve bitwise in single-threaded runs. A step
// whose loss turns non-finite, or whose activations blow past the engine's
// numeric domain, raises DivergenceError.
Stage1Result stage1_train(const Workbench& wb, const ModalitySplit& split,
                          const Stage1Config& cfg);

enum class SilhouetteMetric { kCosine, kEuclidean };

// Classic silhouette scores; singleton clusters score 0 by convention.
std::vector<float> silhouette_samples(
    const std::vector<std::vector<float>>& points,
    const std::vector<int>& labels, SilhouetteMetric metric);
float silhouette(const std::vector<std::vector<float>>& points,
                 const std::vector<int>& labels, SilhouetteMetric metric);

// How the code space organizes modalities, against the raw (mean, std)
// descriptors as the baseline. Distances are cosine; "same modality" pairs
// differ in scene, "cross modality" pairs share a scene and an agent.
struct IntrinsicSpaceReport {
  float silhouette_raw = 0.0f;
  float silhouette_code = 0.0f;
  float same_mod_dist_raw = 0.0f;
  float same_mod_dist_code = 0.0f;
  float cross_mod_dist_raw = 0.0f;
  float cross_mod_dist_code = 0.0f;
  std::string to_csv() const;  // metric,raw,intrinsic
};

IntrinsicSpaceReport intrinsic_space_report(
    const Workbench& wb, const MieParams& p,
    std::span<const uint64_t> modality_seeds,
    std::span<const uint64_t> scene_ids);

}  // namespace unitrans
