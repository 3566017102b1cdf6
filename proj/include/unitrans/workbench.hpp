// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace unitrans {

// Desk-scale cooperative-perception stand-in: seeded rectangle scenes on a
// G x G occupancy grid, four agents with partial views, and a family of
// seeded sensing pipelines ("modalities") that all draw content from one
// shared channel lift so features stay mutually translatable.

struct WorkbenchConfig {
  int grid = 32;        // G; features are C x G x G
  int channels = 16;    // C
  int agents = 4;
  float noise_max = 0.05f;
};

struct SceneRect {
  int r = 0, c = 0, h = 0, w = 0;
};

struct Scene {
  uint64_t scene_id = 0;
  int grid = 0;
  std::vector<SceneRect> objects;
  std::vector<uint8_t> cells;  // G*G occupancy
};

struct Observation {
  uint64_t scene_id = 0;
  int agent_id = 0;
  int grid = 0;
  std::vector<uint8_t> view_mask;    // G*G, 1 = visible
  std::vector<float> masked_grid;    // occupancy AND view
  std::vector<uint8_t> scene_cells;  // full occupancy, label source
};

enum class Nonlinearity { kRelu, kGelu, kTanh };

struct ModalitySpec {
  uint64_t modality_seed = 0;
  int channels = 0;
  std::vector<float> channel_mix;  // C x C, condition kept < 100 by build
  std::vector<float> gain;         // C, in [0.5, 1.5]
  std::vector<float> bias;         // C, in [-0.3, 0.3]
  Nonlinearity nonlinearity = Nonlinearity::kRelu;
  int blur_radius = 0;             // box blur, 0..2
  float noise_scale = 0.0f;        // std of additive noise, <= noise_max
};

struct FeatureMap {
  uint64_t scene_id = 0;
  int agent_id = 0;
  uint64_t modality_seed = 0;
  int c = 0, h = 0, w = 0;
  std::vector<float> values;  // row-major [c][h][w]
};

struct ModalitySplit {
  std::vector<uint64_t> train_modalities;
  std::vector<uint64_t> emerging_modalities;
  uint64_t train_scene_lo = 0, train_scene_hi = 0;
  uint64_t test_scene_lo = 0, test_scene_hi = 0;
};

class Workbench {
 public:
  explicit Workbench(WorkbenchConfig cfg = {});

  const WorkbenchConfig& config() const { return cfg_; }

  // Every generated artifact is a pure function of its seeds.
  Scene generate_scene(uint64_t scene_id) const;
  Observation make_observation(const Scene& scene, int agent_id) const;
  ModalitySpec make_modality_spec(uint64_t modality_seed) const;

  // F = blur(noise + nonlinearity(channel_mix . lift(masked_grid)) * gain
  //          + bias); noise stream keyed by (scene, agent, modality).
  FeatureMap encode_feature(const ModalitySpec& spec,
                            const Observation& obs) const;
  // Ego pipeline applied to the neighbor's observation. Identical to
  // encode_feature bit for bit, including the noise stream, so a
  // same-modality teacher equals the source feature exactly.
  FeatureMap teacher_feature(const ModalitySpec& ego_spec,
                             const Observation& neighbor_obs) const;

  // Full-scene occupancy (not the masked view) at oh x ow; a block is
  // positive when at least half its cells are occupied.
  std::vector<float> task_labels(const Observation& obs, int oh, int ow) const;

  // Shared 1 -> C cell lift: occupancy channel plus occupancy-gated
  // sinusoidal positional channels, optionally re-mixed by a learned
  // C x C matrix. Empty cells lift to zero.
  std::vector<float> lift_cell(float occupancy, int r, int c) const;
  const std::vector<float>& lift_weight() const { return lift_weight_; }
  void set_lift_weight(std::vector<float> w);

 private:
  WorkbenchConfig cfg_;
  std::vector<float> lift_weight_;  // C x C, identity unless pretrained
  bool lift_identity_ = true;
};

ModalitySplit make_split(uint64_t seed, int n_train, int n_emerging,
                         uint64_t train_lo, uint64_t train_hi,
                         uint64_t test_lo, uint64_t test_hi);
std::string split_to_json(const ModalitySplit& split);
ModalitySplit split_from_json(const std::string& json_text);

// Optional 200-step probe pretraining of the shared lift matrix: per-modality
// linear probes and the lift are fit jointly on occupancy BCE over pre-blur
// features. Off by default; the analytic lift already satisfies the probe
// floor.
void probe_pretrain_lift(Workbench& wb, const ModalitySplit& split,
                         uint64_t seed, int steps = 200);

// Debug dump through the checkpoint container: scene/<id>/grid and
// feat/<scene>/<agent>/<modality>.
void dump_bundle(const std::string& path, std::span<const Scene> scenes,
                 std::span<const FeatureMap> feats);

}  // namespace unitrans
