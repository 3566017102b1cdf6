// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unitrans/errors.hpp"
#include "unitrans/optim.hpp"
#include "unitrans/rng.hpp"

namespace unitrans {

namespace {

Tensor stack_field(std::span<const TranslationPair> pairs, bool logits) {
  std::vector<Tensor> rows;
  rows.reserve(pairs.size());
  for (const TranslationPair& p : pairs)
    rows.push_back(logits ? p.logits : p.alpha);
  return stack_rows(rows);
}

Tensor take_row(const Tensor& m, int r) {
  const int d = m.dim(1);
  std::vector<int> idx(static_cast<size_t>(d));
  std::iota(idx.begin(), idx.end(), r * d);
  return gather(m, std::make_shared<const std::vector<int>>(std::move(idx)),
                {1, d});
}

std::vector<int> all_axes(const Tensor& x) {
  std::vector<int> axes(static_cast<size_t>(x.ndim()));
  std::iota(axes.begin(), axes.end(), 0);
  return axes;
}

}  // namespace

Tensor feat_distill_loss(const Tensor& translated, const Tensor& teacher) {
  if (!translated.defined() || !teacher.defined() ||
      translated.shape() != teacher.shape())
    throw std::invalid_argument("feat_distill_loss: shape mismatch");
  Tensor diff = sub(translated, teacher);
  return reduce_sum(square(diff), all_axes(diff));
}

Tensor routing_contrastive_loss(std::span<const TranslationPair> pairs,
                                float tau_alpha) {
  if (pairs.size() < 2)
    throw std::invalid_argument(
        "routing_contrastive_loss: need at least two pairs");
  std::map<std::pair<uint64_t, uint64_t>, int> ids;
  std::vector<int> labels;
  labels.reserve(pairs.size());
  for (const TranslationPair& p : pairs) {
    auto key = std::make_pair(p.neighbor_modality, p.ego_modality);
    auto [it, inserted] = ids.emplace(key, static_cast<int>(ids.size()));
    labels.push_back(it->second);
  }
  return info_nce(stack_field(pairs, false), labels, tau_alpha);
}

std::pair<Tensor, Tensor> importance_load(
    std::span<const TranslationPair> pairs, int top_k) {
  if (pairs.empty())
    throw std::invalid_argument("importance_load: empty batch");
  const int k = static_cast<int>(pairs.front().alpha.numel());
  Tensor imp = reduce_sum(stack_field(pairs, false), {0});
  std::vector<float> counts(static_cast<size_t>(k), 0.0f);
  for (const TranslationPair& p : pairs)
    for (int idx : topk_experts(p.alpha, top_k))
      counts[static_cast<size_t>(idx)] += 1.0f;
  Tensor load = Tensor::from({k}, std::move(counts));
  return {imp, load};
}

Tensor router_reg_loss(std::span<const TranslationPair> pairs, int top_k) {
  auto [imp, load] = importance_load(pairs, top_k);
  const float b = static_cast<float>(pairs.size());
  const float k = static_cast<float>(imp.numel());
  Tensor balance = scale(reduce_sum(mul(imp, load), {0}), k / (b * b));

  Tensor u = stack_field(pairs, true);
  Tensor mx = reduce_max(u, {1}, true);
  Tensor lse = add(reshape(mx, {static_cast<int>(pairs.size())}),
                   log(reduce_sum(exp(sub(u, mx)), {1})));
  Tensor penalty = reduce_mean(square(lse), {0});
  return add(balance, penalty);
}

Tensor task_loss(const Tensor& logits, const Tensor& labels) {
  if (!logits.defined() || !labels.defined() ||
      logits.shape() != labels.shape())
    throw std::invalid_argument("task_loss: shape mismatch");
  Tensor per_cell = sub(softplus(logits), mul(logits, labels));
  return reduce_mean(per_cell, all_axes(per_cell));
}

Tensor fuse(const Tensor& ego, std::span<const Tensor> translated) {
  Tensor out = ego;
  for (const Tensor& t : translated) {
    if (!t.defined() || t.shape() != ego.shape())
      throw std::invalid_argument("fuse: shape mismatch");
    out = maximum(out, t);
  }
  return out;
}

TaskHead head_init(int channels, uint64_t seed) {
  TaskHead head;
  Rng rng = rng_for(seed, "head/w");
  head.w = Tensor::randn({channels}, rng,
                         1.0f / std::sqrt(static_cast<float>(channels)), true);
  head.b = Tensor::zeros({1}, true);
  return head;
}

NamedTensors head_to_named(const TaskHead& head) {
  return {{"head/b", head.b}, {"head/w", head.w}};
}

TaskHead head_from_named(const NamedTensors& named) {
  TaskHead head;
  head.w = require_tensor(named, "head/w");
  head.b = require_tensor(named, "head/b");
  if (head.w.ndim() != 1 || head.b.numel() != 1)
    throw CheckpointMismatchError("head checkpoint: bad readout shapes");
  return head;
}

Tensor head_logits(const TaskHead& head, const Tensor& fused) {
  if (!fused.defined() || fused.ndim() != 3 ||
      fused.dim(0) != head.w.dim(0))
    throw std::invalid_argument("head_logits: fused map must be [C, H, W]");
  const int c = fused.dim(0);
  const int hw = fused.dim(1) * fused.dim(2);
  Tensor flat = transpose2d(reshape(fused, {c, hw}));  // [HW, C]
  Tensor out = add(matmul(flat, reshape(head.w, {c, 1})), head.b);
  return reshape(out, {hw});
}

namespace {

void validate(const Stage2Config& cfg, int n_experts) {
  if (cfg.lambda_feat < 0 || cfg.lambda_ctr < 0 || cfg.lambda_r < 0)
    throw ConfigError("stage2: loss weights must be non-negative");
  if (!(cfg.tau_alpha > 0))
    throw ConfigError("stage2: tau_alpha must be positive");
  if (cfg.top_k < 1 || cfg.top_k > n_experts)
    throw ConfigError("stage2: top_k must be in [1, K]");
  if (cfg.steps < 1 || cfg.batch_scenes < 1 || cfg.report_every < 1)
    throw ConfigError("stage2: steps, batch_scenes, report_every must be >= 1");
  if (!(cfg.lr > 0) || !std::isfinite(cfg.lr))
    throw ConfigError("stage2: lr must be positive and finite");
}

}  // namespace

Stage2Result stage2_train(const Workbench& wb, const MieParams& mie,
                          ExpertBank& bank, MmrParams& mmr,
                          const ModalitySplit& split,
                          const Stage2Config& cfg) {
  validate(cfg, bank.n_experts());
  const uint64_t n_scenes = split.train_scene_hi - split.train_scene_lo;
  const size_t n_mods = split.train_modalities.size();
  if (n_scenes == 0 || n_mods == 0)
    throw ConfigError("stage2: split has no training scenes or modalities");

  const int agents = wb.config().agents;
  const int grid = wb.config().grid;
  const int channels = wb.config().channels;
  const int k = bank.n_experts();

  Stage2Result out;
  out.mie_checksum_before = tensors_checksum(mie_to_named(mie));
  out.head = head_init(channels, cfg.seed);
  out.pairs_per_step = cfg.batch_scenes * agents * (agents - 1);

  bank.set_requires_grad(true);
  mmr.set_requires_grad(true);
  std::vector<Tensor> params = bank.trainable();
  for (Tensor t : mmr.trainable()) params.push_back(t);
  for (Tensor t : out.head.trainable()) params.push_back(t);
  Adam opt(params, cfg.lr);

  std::map<uint64_t, ModalitySpec> specs;
  for (uint64_t m : split.train_modalities) specs.emplace(m, wb.make_modality_spec(m));

  std::vector<double> window(static_cast<size_t>(k), 0.0);
  int window_steps = 0;
  auto flush_window = [&] {
    if (window_steps == 0) return;
    std::vector<float> row(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
      row[static_cast<size_t>(i)] =
          static_cast<float>(window[static_cast<size_t>(i)] / window_steps);
    out.importance_windows.push_back(std::move(row));
    window.assign(static_cast<size_t>(k), 0.0);
    window_steps = 0;
  };

  for (int step = 0; step < cfg.steps; ++step) {
    Stage2StepRow row;
    row.step = step;
    float total_value = std::numeric_limits<float>::quiet_NaN();
    try {
      // Batch assembly: scenes, per-agent modality draws, features, and
      // frozen codes. Everything here is data preparation outside the tape.
      Rng rs = rng_for(cfg.seed, "stage2/batch", static_cast<uint64_t>(step));
      struct SceneBatch {
        std::vector<Observation> obs;
        std::vector<uint64_t> mods;
        std::vector<Tensor> feats;
        Tensor codes;  // [agents, d]
      };
      std::vector<SceneBatch> batch;
      for (int b = 0; b < cfg.batch_scenes; ++b) {
        SceneBatch sb;
        uint64_t sid = split.train_scene_lo + rs.next_u64() % n_scenes;
        Scene scene = wb.generate_scene(sid);
        std::vector<FeatureMap> maps;
        for (int a = 0; a < agents; ++a) {
          sb.obs.push_back(wb.make_observation(scene, a));
          uint64_t mod = split.train_modalities[static_cast<size_t>(
              rs.uniform_int(0, static_cast<int>(n_mods) - 1))];
          sb.mods.push_back(mod);
          maps.push_back(wb.encode_feature(specs.at(mod), sb.obs.back()));
        }
        {
          NoGradGuard ng;
          sb.codes = mie_encode(mie, maps);
        }
        for (const FeatureMap& m : maps) sb.feats.push_back(feature_tensor(m));
        batch.push_back(std::move(sb));
      }

      Tape tape;
      std::vector<TranslationPair> pairs;
      pairs.reserve(static_cast<size_t>(out.pairs_per_step));
      std::vector<Tensor> ego_logits, ego_labels;
      for (SceneBatch& sb : batch) {
        // translated[i] collects the maps arriving at ego i.
        std::vector<std::vector<Tensor>> arriving(
            static_cast<size_t>(agents));
        for (int i = 0; i < agents; ++i)
          for (int j = 0; j < agents; ++j) {
            if (i == j) continue;
            TranslateResult tr = translate_with_codes(
                bank, mmr, take_row(sb.codes, j), take_row(sb.codes, i),
                sb.feats[static_cast<size_t>(j)],
                sb.feats[static_cast<size_t>(i)]);
            FeatureMap teacher = wb.teacher_feature(
                specs.at(sb.mods[static_cast<size_t>(i)]),
                sb.obs[static_cast<size_t>(j)]);
            TranslationPair p;
            p.ego = i;
            p.neighbor = j;
            p.neighbor_modality = sb.mods[static_cast<size_t>(j)];
            p.ego_modality = sb.mods[static_cast<size_t>(i)];
            p.translated = tr.feature;
            p.teacher = feature_tensor(teacher);
            p.alpha = tr.alpha;
            p.logits = tr.logits;
            arriving[static_cast<size_t>(i)].push_back(tr.feature);
            pairs.push_back(std::move(p));
          }
        for (int i = 0; i < agents; ++i) {
          Tensor fused = fuse(sb.feats[static_cast<size_t>(i)],
                              arriving[static_cast<size_t>(i)]);
          ego_logits.push_back(head_logits(out.head, fused));
          std::vector<float> lab =
              wb.task_labels(sb.obs[static_cast<size_t>(i)], grid, grid);
          ego_labels.push_back(Tensor::from({grid * grid}, std::move(lab)));
        }
      }

      Tensor l_task = task_loss(stack_rows(ego_logits), stack_rows(ego_labels));
      Tensor l_feat = feat_distill_loss(pairs[0].translated, pairs[0].teacher);
      for (size_t a = 1; a < pairs.size(); ++a)
        l_feat = add(l_feat,
                     feat_distill_loss(pairs[a].translated, pairs[a].teacher));
      l_feat = scale(l_feat, 1.0f / static_cast<float>(pairs.size()));
      Tensor l_ctr;
      try {
        l_ctr = routing_contrastive_loss(pairs, cfg.tau_alpha);
      } catch (const DegenerateBatchError&) {
        // Every mapping label is unique this batch; the contrast is an
        // empty sum and contributes nothing.
        l_ctr = Tensor::scalar(0.0f);
      }
      Tensor l_r = router_reg_loss(pairs, cfg.top_k);

      Tensor total = add(add(l_task, scale(l_feat, cfg.lambda_feat)),
                         add(scale(l_ctr, cfg.lambda_ctr),
                             scale(l_r, cfg.lambda_r)));

      row.l_task = l_task.item();
      row.l_feat = l_feat.item();
      row.l_ctr = l_ctr.item();
      row.l_r = l_r.item();
      total_value = total.item();
      row.total = total_value;

      auto [imp, load] = importance_load(pairs, cfg.top_k);
      const float inv_b = 1.0f / static_cast<float>(pairs.size());
      float lo = std::numeric_limits<float>::infinity(), hi = 0.0f;
      for (int e = 0; e < k; ++e) {
        float share = imp.values()[static_cast<size_t>(e)] * inv_b;
        lo = std::min(lo, share);
        hi = std::max(hi, share);
        window[static_cast<size_t>(e)] += share;
      }
      row.min_imp = lo;
      row.max_imp = hi;
      ++window_steps;

      if (std::isfinite(total_value)) {
        tape.backward(total);
        clip_global_norm(params, cfg.clip_norm);
        opt.step();
      }
    } catch (const DegenerateBatchError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      // Shapes are loop-invariant, so a domain error here means the
      // numerics blew up before the loss could materialize.
      throw DivergenceError("stage2_train: diverged at step " +
                            std::to_string(step) + " (" + e.what() + ")");
    }
    if (!std::isfinite(total_value))
      throw DivergenceError("stage2_train: non-finite loss at step " +
                            std::to_string(step));
    out.curve.push_back(row);
    if (window_steps == cfg.report_every) flush_window();
  }
  flush_window();

  out.mie_checksum_after = tensors_checksum(mie_to_named(mie));
  return out;
}

std::string stage2_metrics_csv(const Stage2Result& result) {
  std::ostringstream os;
  os << "step,L_task,L_feat,L_ctr,L_r,total,min_imp,max_imp\n";
  for (const Stage2StepRow& r : result.curve)
    os << r.step << ',' << r.l_task << ',' << r.l_feat << ',' << r.l_ctr
       << ',' << r.l_r << ',' << r.total << ',' << r.min_imp << ','
       << r.max_imp << '\n';
  return os.str();
}

}  // namespace unitrans
