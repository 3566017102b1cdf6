// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unitrans/mie.hpp"
#include "unitrans/trainer.hpp"
#include "unitrans/translator.hpp"
#include "unitrans/workbench.hpp"

namespace unitrans {

// Zero-shot protocol: every ordered modality pair that touches at least one
// emerging modality is scored on the held-out scenes, with the raw neighbor
// feature (identity pass-through) as the baseline under identical
// conditions. Same-modality pairs are excluded; there the teacher equals
// the source bit for bit and the comparison is vacuous.

struct EvalRow {
  uint64_t ego_mod = 0;
  uint64_t nbr_mod = 0;
  double mse_translated = 0.0;  // per-cell mean squared error to the teacher
  double mse_identity = 0.0;    // same, for the untranslated neighbor map
  double f1_ego = 0.0;          // per-cell F1, ego feature alone
  double f1_raw = 0.0;          // fusion with raw neighbor maps
  double f1_translated = 0.0;   // fusion with translated maps
  double alpha_consistency = 0.0;  // mean pairwise cosine of this pair's alpha
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double silhouette_all = 0.0;       // codes of every modality, test scenes
  double silhouette_emerging = 0.0;  // emerging codes against training clusters
  double mean_mse_translated = 0.0;
  double mean_mse_identity = 0.0;

  std::string to_csv() const;
};

// trained_modalities is the provenance record of what stage 1 and stage 2
// actually saw; any overlap with the split's emerging set stops the run.
EvalReport zero_shot_eval(const Workbench& wb, const MieParams& mie,
                          const ExpertBank& bank, const MmrParams& mmr,
                          const TaskHead& head, const ModalitySplit& split,
                          std::span<const uint64_t> trained_modalities);

// Routing coherence: one alpha per (directed modality pair, test scene),
// compared within and across mapping labels by cosine. A label with fewer
// than two samples has no within statistic and is reported as absent.
struct MappingStat {
  uint64_t nbr_mod = 0;
  uint64_t ego_mod = 0;
  int samples = 0;
  bool within_defined = false;
  double within = 0.0;
};

struct RoutingReport {
  std::vector<MappingStat> mappings;
  double within_mean = 0.0;   // over labels with a defined statistic
  double across_mean = 0.0;   // over alpha pairs with different labels
  std::string to_csv() const;  // nbr_mod,ego_mod,samples,within
};

RoutingReport routing_consistency(const Workbench& wb, const MieParams& mie,
                                  const ExpertBank& bank, const MmrParams& mmr,
                                  const ModalitySplit& split);

// Closed-form multiply-add count of one backbone pass on an [C, h, w] map,
// mirroring exactly what the instrumentation hook counts (projection and
// attention matmuls; normalization and activations are not counted).
uint64_t mct_pass_madds(const MctArchitecture& arch, int h, int w);

struct ProfileRow {
  std::string method;
  uint64_t madds = 0;          // per translation
  uint64_t passes = 0;         // backbone executions per translation
  double wall_ms_median = 0.0; // median over the timed calls
};

struct ProfileReport {
  ProfileRow unitrans;
  ProfileRow classic;
  double ratio = 0.0;  // madds(unitrans) / madds(classic)
  uint64_t backbone_madds_counted = 0;
  uint64_t backbone_madds_formula = 0;
  std::string to_csv() const;  // method,madds,passes,wall_ms_median
};

// Times and counts one translation per method on a fixed held-out pair.
// Single instantiation runs the backbone once; the output-mixing baseline
// runs it top_k times.
ProfileReport profile(const Workbench& wb, const MieParams& mie,
                      const ExpertBank& bank, const MmrParams& mmr,
                      int top_k, int trials = 100);

// One full small-scale pipeline (stage 1, stage 2, zero-shot scores) per
// axis value, all stages reseeded identically so rows differ only in the
// swept quantity.
struct AblationConfig {
  WorkbenchConfig workbench;
  MctArchitecture arch;
  int n_experts = 8;
  ModalitySplit split;
  Stage1Config stage1;
  Stage2Config stage2;
};

// axis is one of "d", "K", "shared", "loss-term". Values are decimal
// numbers for the first three and term names (feat, ctr, r) for the last.
// Returns CSV rows: axis,value,mse_translated,mse_identity,f1_translated.
std::string ablation_sweep(const std::string& axis,
                           std::span<const std::string> values,
                           const AblationConfig& base);

}  // namespace unitrans
