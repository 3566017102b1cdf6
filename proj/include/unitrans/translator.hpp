// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unitrans/checkpoint.hpp"
#include "unitrans/mie.hpp"
#include "unitrans/tensor.hpp"
#include "unitrans/workbench.hpp"

namespace unitrans {

// Feature translator: a bank of expert parameter sets over a fixed windowed
// cross-attention backbone, a router that turns a pair of intrinsic codes
// into mixing coefficients, and the single-pass instantiation that combines
// them into one translator per mapping.

struct MctArchitecture {
  int channels = 16;
  int window = 4;
  int heads = 4;
  int n_blocks = 2;

  int head_dim() const { return channels / heads; }
  int ffn_hidden() const { return 2 * channels; }
};

struct ManifestEntry {
  std::string name;  // "blk<i>/<win|grid>/<tensor>"
  Shape shape;
};

// Fixed parameter order shared by every expert; mixing is positional.
std::vector<ManifestEntry> mct_manifest(const MctArchitecture& arch);

// Shared set plus K expert sets, each aligned with the manifest.
struct ExpertBank {
  MctArchitecture arch;
  std::vector<Tensor> shared;
  std::vector<std::vector<Tensor>> experts;
  // Ablation hook: a frozen shared set stays out of trainable() and keeps
  // requires_grad off, so mixing reduces to the expert sum alone once the
  // shared tensors are zeroed.
  bool shared_frozen = false;

  int n_experts() const { return static_cast<int>(experts.size()); }
  std::vector<Tensor> trainable() const;
  void set_requires_grad(bool on);
};

// Shared expert at the usual small-variance scale; expert weights at a tenth
// of that so the shared path dominates until routing differentiates. Expert
// gains and biases start at zero (they are deviations from the shared set).
ExpertBank bank_init(const MctArchitecture& arch, int n_experts,
                     uint64_t seed);
NamedTensors bank_to_named(const ExpertBank& bank);
ExpertBank bank_from_named(const NamedTensors& named);

// Router: g projects the 3d pair geometry (source, target, source - target)
// to a 16-wide descriptor, h maps that to one logit per expert. Bias-free.
struct MmrParams {
  Tensor g;  // [3d, 16]
  Tensor h;  // [16, K]

  int code_dim() const { return g.dim(0) / 3; }
  int n_experts() const { return h.dim(1); }
  std::vector<Tensor> trainable() const { return {g, h}; }
  void set_requires_grad(bool on);
};

MmrParams mmr_init(int code_dim, int n_experts, uint64_t seed);
NamedTensors mmr_to_named(const MmrParams& p);
MmrParams mmr_from_named(const NamedTensors& named);

// Projected pair geometry for source codes z_src and target codes z_dst,
// rows [n, 16]. Directed: swapping the arguments flips the difference block.
Tensor mapping_descriptor(const MmrParams& p, const Tensor& z_src,
                          const Tensor& z_dst);

struct Routing {
  Tensor alpha;   // [n, K] softmax rows
  Tensor logits;  // [n, K] pre-softmax, kept for the load regularizer
};

Routing route(const MmrParams& p, const Tensor& descriptor);

// One mixed parameter set: shared + sum_k alpha[k] * expert_k per entry.
// alpha is a length-K vector; gradients reach alpha and every expert.
std::vector<Tensor> instantiate(const ExpertBank& bank, const Tensor& alpha);

// Translator backbone. Per block: pre-norm windowed cross attention (neighbor
// tokens query, ego tokens key/value), residual, pre-norm FFN, residual, then
// the same pair of sublayers over the complementary grid layout where token
// position g of every window forms one group. Ego tokens are the fixed
// reference at every stage. Returns a [C, H, W] tensor; increments the
// backbone pass counter once.
Tensor mct_forward(const MctArchitecture& arch, std::span<const Tensor> params,
                   const Tensor& f_neighbor, const Tensor& f_ego);

// Counts full backbone executions (thread-local, like the madd counter).
struct PassCounter {
  static void reset();
  static uint64_t total();
};

struct TranslateResult {
  Tensor feature;  // [C, H, W]
  Tensor alpha;    // [K]
  Tensor logits;   // [K]
  Tensor z_src, z_dst;
};

// Codes -> descriptor -> routing -> instantiate -> one backbone pass.
TranslateResult translate_with_codes(const ExpertBank& bank,
                                     const MmrParams& mmr, const Tensor& z_src,
                                     const Tensor& z_dst,
                                     const Tensor& f_neighbor,
                                     const Tensor& f_ego);

// Convenience wrapper that encodes both maps first (MIE under no-grad).
TranslateResult translate(const ExpertBank& bank, const MmrParams& mmr,
                          const MieParams& mie, const FeatureMap& f_neighbor,
                          const FeatureMap& f_ego);

// Indices of the top_k largest coefficients, ties resolved toward the lower
// index. alpha is a length-K vector.
std::vector<int> topk_experts(const Tensor& alpha, int top_k);

// Output-mixing baseline: one backbone pass per TopK expert (parameters
// shared + expert_k), outputs blended by renormalized routing weight. Ties
// pick the lower expert index.
Tensor classic_moe_forward(const ExpertBank& bank, const MmrParams& mmr,
                           const MieParams& mie, const FeatureMap& f_neighbor,
                           const FeatureMap& f_ego, int top_k = 3);

}  // namespace unitrans
