// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "unitrans/checkpoint.hpp"
#include "unitrans/mie.hpp"
#include "unitrans/tensor.hpp"
#include "unitrans/translator.hpp"
#include "unitrans/workbench.hpp"

namespace unitrans {

// Second training stage: the router and expert bank learn jointly from a
// four-part objective (task supervision on fused features, feature
// distillation against ego-encoder teachers, a routing contrast across
// mapping labels, and a router regularizer), while the intrinsic encoder
// stays frozen.

struct Stage2Config {
  float lambda_feat = 5.0f;
  float lambda_ctr = 0.01f;
  float lambda_r = 0.001f;
  float tau_alpha = 0.9f;
  float lr = 1e-3f;
  int top_k = 3;
  int batch_scenes = 2;
  int steps = 500;
  uint64_t seed = 0;
  // Importance histograms are emitted once per this many steps.
  int report_every = 50;
  float clip_norm = 5.0f;
};

// One ego-neighbor translation with everything the losses need: the mapping
// label (neighbor modality, ego modality), the translated and teacher maps,
// and the routing that produced the translator.
struct TranslationPair {
  int ego = 0;
  int neighbor = 0;
  uint64_t neighbor_modality = 0;
  uint64_t ego_modality = 0;
  Tensor translated;  // [C, H, W]
  Tensor teacher;     // [C, H, W]
  Tensor alpha;       // [K]
  Tensor logits;      // [K]
};

// Summed squared difference over all elements; one scalar per pair.
Tensor feat_distill_loss(const Tensor& translated, const Tensor& teacher);

// InfoNCE over routing vectors with cosine similarity; positives share the
// (neighbor, ego) modality label, anchors without positives are skipped,
// terms are summed. Throws DegenerateBatchError when every anchor is
// skipped.
Tensor routing_contrastive_loss(std::span<const TranslationPair> pairs,
                                float tau_alpha);

// Per-expert mixing mass and TopK membership counts over a batch. The
// importance tensor carries gradient when the alphas do; the load counts are
// constants (the indicator is piecewise constant).
std::pair<Tensor, Tensor> importance_load(
    std::span<const TranslationPair> pairs, int top_k);

// K * sum_k (imp_k/B)(load_k/B) plus the mean squared log-sum-exp of the
// routing logits.
Tensor router_reg_loss(std::span<const TranslationPair> pairs, int top_k);

// Mean binary cross-entropy of per-cell logits against {0,1} labels.
Tensor task_loss(const Tensor& logits, const Tensor& labels);

// Elementwise maximum of the ego map and every translated map; with no
// neighbors the ego map passes through unchanged.
Tensor fuse(const Tensor& ego, std::span<const Tensor> translated);

// Per-cell linear readout from fused features to occupancy logits. The head
// is a stage-2 adapter trained alongside the bank and router.
struct TaskHead {
  Tensor w;  // [C]
  Tensor b;  // [1]

  std::vector<Tensor> trainable() const { return {w, b}; }
};

TaskHead head_init(int channels, uint64_t seed);
NamedTensors head_to_named(const TaskHead& head);
TaskHead head_from_named(const NamedTensors& named);
// [H*W] logits from a [C, H, W] fused map.
Tensor head_logits(const TaskHead& head, const Tensor& fused);

struct Stage2StepRow {
  int step = 0;
  float l_task = 0.0f;
  float l_feat = 0.0f;  // mean over pairs of the per-pair sum
  float l_ctr = 0.0f;
  float l_r = 0.0f;
  float total = 0.0f;
  float min_imp = 0.0f;  // min_k imp_k / B this step
  float max_imp = 0.0f;
};

struct Stage2Result {
  std::vector<Stage2StepRow> curve;
  // One row per reporting window: mean over the window of imp_k / B.
  std::vector<std::vector<float>> importance_windows;
  TaskHead head;
  int pairs_per_step = 0;
  // The encoder must come out bit-identical; both sides are recorded so
  // callers can assert it.
  uint64_t mie_checksum_before = 0;
  uint64_t mie_checksum_after = 0;
};

// Runs the stage-2 loop on training scenes and training modalities. The
// bank and router are updated in place together with a fresh task head;
// the encoder is used read-only. Throws DivergenceError when the loss
// leaves the finite range.
Stage2Result stage2_train(const Workbench& wb, const MieParams& mie,
                          ExpertBank& bank, MmrParams& mmr,
                          const ModalitySplit& split,
                          const Stage2Config& cfg);

std::string stage2_metrics_csv(const Stage2Result& result);

}  // namespace unitrans
