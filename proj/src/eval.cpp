// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unitrans/errors.hpp"

namespace unitrans {

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

double mean_pairwise_cosine(const std::vector<std::vector<float>>& rows) {
  double total = 0.0;
  int count = 0;
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = i + 1; j < rows.size(); ++j) {
      total += cosine(rows[i], rows[j]);
      ++count;
    }
  return count > 0 ? total / count : 0.0;
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
  double total = 0.0;
  for (size_t i = 0; i < static_cast<size_t>(a.numel()); ++i) {
    double d = static_cast<double>(a.values()[i]) - b.values()[i];
    total += d * d;
  }
  return total / static_cast<double>(a.numel());
}

struct F1Counts {
  uint64_t tp = 0, fp = 0, fn = 0;
  void tally(const Tensor& logits, const std::vector<float>& labels) {
    for (size_t i = 0; i < labels.size(); ++i) {
      bool pred = logits.values()[i] > 0.0f;
      bool truth = labels[i] > 0.5f;
      if (pred && truth)
        ++tp;
      else if (pred)
        ++fp;
      else if (truth)
        ++fn;
    }
  }
  double f1() const {
    uint64_t denom = 2 * tp + fp + fn;
    return denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom)
                     : 0.0;
  }
};

std::vector<float> row_values(const Tensor& m, int r) {
  const int d = m.dim(1);
  std::vector<float> out(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i)
    out[static_cast<size_t>(i)] =
        m.values()[static_cast<size_t>(r * d + i)];
  return out;
}

Tensor code_row(const Tensor& m, int r) {
  const int d = m.dim(1);
  std::vector<float> vals = row_values(m, r);
  return Tensor::from({1, d}, std::move(vals));
}

void print_csv_value(std::ostringstream& os, double v) {
  os << std::setprecision(9) << v;
}

// Mean cosine-distance silhouette of the emerging points, with the
// neighboring cluster restricted to training modalities.
double emerging_silhouette(const std::vector<std::vector<float>>& points,
                           const std::vector<int>& labels, int n_train_labels,
                           int n_labels) {
  auto dist = [&](size_t i, size_t j) { return 1.0 - cosine(points[i], points[j]); };
  double total = 0.0;
  int count = 0;
  for (size_t i = 0; i < points.size(); ++i) {
    if (labels[i] < n_train_labels) continue;
    double a = 0.0;
    int a_n = 0;
    std::vector<double> b_sum(static_cast<size_t>(n_labels), 0.0);
    std::vector<int> b_n(static_cast<size_t>(n_labels), 0);
    for (size_t j = 0; j < points.size(); ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        a += dist(i, j);
        ++a_n;
      } else if (labels[j] < n_train_labels) {
        b_sum[static_cast<size_t>(labels[j])] += dist(i, j);
        ++b_n[static_cast<size_t>(labels[j])];
      }
    }
    if (a_n == 0) continue;
    a /= a_n;
    double b = std::numeric_limits<double>::infinity();
    for (int l = 0; l < n_train_labels; ++l)
      if (b_n[static_cast<size_t>(l)] > 0)
        b = std::min(b, b_sum[static_cast<size_t>(l)] /
                            b_n[static_cast<size_t>(l)]);
    if (!std::isfinite(b)) continue;
    double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
    ++count;
  }
  return count > 0 ? total / count : 0.0;
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "ego_mod,nbr_mod,mse_translated,mse_identity,f1_ego,f1_raw,"
        "f1_translated,alpha_consistency\n";
  for (const EvalRow& r : rows) {
    os << r.ego_mod << ',' << r.nbr_mod << ',';
    print_csv_value(os, r.mse_translated);
    os << ',';
    print_csv_value(os, r.mse_identity);
    os << ',';
    print_csv_value(os, r.f1_ego);
    os << ',';
    print_csv_value(os, r.f1_raw);
    os << ',';
    print_csv_value(os, r.f1_translated);
    os << ',';
    print_csv_value(os, r.alpha_consistency);
    os << '\n';
  }
  return os.str();
}

EvalReport zero_shot_eval(const Workbench& wb, const MieParams& mie,
                          const ExpertBank& bank, const MmrParams& mmr,
                          const TaskHead& head, const ModalitySplit& split,
                          std::span<const uint64_t> trained_modalities) {
  for (uint64_t em : split.emerging_modalities) {
    for (uint64_t tr : trained_modalities)
      if (em == tr)
        throw LeakageError("zero_shot_eval: emerging modality " +
                           std::to_string(em) +
                           " appears in the training provenance");
    for (uint64_t tr : split.train_modalities)
      if (em == tr)
        throw LeakageError("zero_shot_eval: emerging modality " +
                           std::to_string(em) + " is in the training split");
  }
  if (split.test_scene_hi <= split.test_scene_lo)
    throw ConfigError("zero_shot_eval: split has no test scenes");

  std::vector<uint64_t> all_mods = split.train_modalities;
  all_mods.insert(all_mods.end(), split.emerging_modalities.begin(),
                  split.emerging_modalities.end());
  const int n_train = static_cast<int>(split.train_modalities.size());
  const int n_all = static_cast<int>(all_mods.size());
  auto is_emerging = [&](int idx) { return idx >= n_train; };

  // Ordered pairs touching at least one emerging modality, ego first.
  std::vector<std::pair<int, int>> pair_idx;
  for (int i = 0; i < n_all; ++i)
    for (int j = 0; j < n_all; ++j)
      if (i != j && (is_emerging(i) || is_emerging(j)))
        pair_idx.emplace_back(i, j);

  std::map<uint64_t, ModalitySpec> specs;
  for (uint64_t m : all_mods) specs.emplace(m, wb.make_modality_spec(m));

  const int agents = wb.config().agents;
  const int grid = wb.config().grid;
  const uint64_t scene_lo = split.test_scene_lo;
  const uint64_t scene_hi = split.test_scene_hi;
  const int n_scenes = static_cast<int>(scene_hi - scene_lo);

  struct PairAccum {
    double sq_translated = 0.0;
    double sq_identity = 0.0;
    int terms = 0;
    F1Counts ego, raw, translated;
    std::vector<std::vector<float>> alphas;
  };
  std::vector<PairAccum> acc(pair_idx.size());

  // Codes of agent-0 observations per (modality, scene) feed the
  // silhouette diagnostics.
  std::vector<std::vector<float>> sil_points;
  std::vector<int> sil_labels;

  NoGradGuard ng;
  for (uint64_t sid = scene_lo; sid < scene_hi; ++sid) {
    Scene scene = wb.generate_scene(sid);
    std::vector<Observation> obs;
    for (int a = 0; a < agents; ++a) obs.push_back(wb.make_observation(scene, a));
    std::vector<float> labels0 = wb.task_labels(obs[0], grid, grid);

    // Features and codes for every (modality, agent) cell, batched so the
    // encoder runs once per scene.
    std::vector<FeatureMap> maps;
    maps.reserve(static_cast<size_t>(n_all * agents));
    for (int m = 0; m < n_all; ++m)
      for (int a = 0; a < agents; ++a)
        maps.push_back(
            wb.encode_feature(specs.at(all_mods[static_cast<size_t>(m)]),
                              obs[static_cast<size_t>(a)]));
    Tensor codes = mie_encode(mie, maps);
    std::vector<Tensor> feats;
    feats.reserve(maps.size());
    for (const FeatureMap& m : maps) feats.push_back(feature_tensor(m));
    auto cell = [&](int m, int a) { return m * agents + a; };

    for (int m = 0; m < n_all; ++m) {
      sil_points.push_back(row_values(codes, cell(m, 0)));
      sil_labels.push_back(m);
    }

    for (size_t p = 0; p < pair_idx.size(); ++p) {
      const auto [mi, mj] = pair_idx[p];
      const Tensor& ego_feat = feats[static_cast<size_t>(cell(mi, 0))];
      Tensor z_ego = code_row(codes, cell(mi, 0));
      std::vector<Tensor> translated, raw;
      for (int a = 1; a < agents; ++a) {
        const Tensor& nbr_feat = feats[static_cast<size_t>(cell(mj, a))];
        // The teacher is the ego encoder on the neighbor's observation,
        // which is exactly the (ego modality, neighbor agent) cell.
        const Tensor& teacher = feats[static_cast<size_t>(cell(mi, a))];
        TranslateResult tr =
            translate_with_codes(bank, mmr, code_row(codes, cell(mj, a)),
                                 z_ego, nbr_feat, ego_feat);
        acc[p].sq_translated += mean_sq_diff(tr.feature, teacher);
        acc[p].sq_identity += mean_sq_diff(nbr_feat, teacher);
        ++acc[p].terms;
        acc[p].alphas.push_back(
            std::vector<float>(tr.alpha.values().begin(),
                               tr.alpha.values().end()));
        translated.push_back(tr.feature);
        raw.push_back(nbr_feat);
      }
      acc[p].ego.tally(head_logits(head, ego_feat), labels0);
      acc[p].raw.tally(head_logits(head, fuse(ego_feat, raw)), labels0);
      acc[p].translated.tally(head_logits(head, fuse(ego_feat, translated)),
                              labels0);
    }
  }

  EvalReport report;
  for (size_t p = 0; p < pair_idx.size(); ++p) {
    const auto [mi, mj] = pair_idx[p];
    EvalRow row;
    row.ego_mod = all_mods[static_cast<size_t>(mi)];
    row.nbr_mod = all_mods[static_cast<size_t>(mj)];
    row.mse_translated = acc[p].sq_translated / acc[p].terms;
    row.mse_identity = acc[p].sq_identity / acc[p].terms;
    row.f1_ego = acc[p].ego.f1();
    row.f1_raw = acc[p].raw.f1();
    row.f1_translated = acc[p].translated.f1();
    row.alpha_consistency = mean_pairwise_cosine(acc[p].alphas);
    report.mean_mse_translated += row.mse_translated;
    report.mean_mse_identity += row.mse_identity;
    report.rows.push_back(row);
  }
  if (!report.rows.empty()) {
    report.mean_mse_translated /= static_cast<double>(report.rows.size());
    report.mean_mse_identity /= static_cast<double>(report.rows.size());
  }
  if (n_scenes > 1) {
    report.silhouette_all =
        silhouette(sil_points, sil_labels, SilhouetteMetric::kCosine);
    report.silhouette_emerging =
        emerging_silhouette(sil_points, sil_labels, n_train, n_all);
  }
  return report;
}

std::string RoutingReport::to_csv() const {
  std::ostringstream os;
  os << "nbr_mod,ego_mod,samples,within\n";
  for (const MappingStat& m : mappings) {
    os << m.nbr_mod << ',' << m.ego_mod << ',' << m.samples << ',';
    if (m.within_defined) print_csv_value(os, m.within);
    os << '\n';
  }
  return os.str();
}

RoutingReport routing_consistency(const Workbench& wb, const MieParams& mie,
                                  const ExpertBank& bank, const MmrParams& mmr,
                                  const ModalitySplit& split) {
  (void)bank;
  if (split.test_scene_hi <= split.test_scene_lo)
    throw ConfigError("routing_consistency: split has no test scenes");
  std::vector<uint64_t> all_mods = split.train_modalities;
  all_mods.insert(all_mods.end(), split.emerging_modalities.begin(),
                  split.emerging_modalities.end());
  const int n_all = static_cast<int>(all_mods.size());
  if (n_all < 2)
    throw ConfigError("routing_consistency: need at least two modalities");

  std::map<uint64_t, ModalitySpec> specs;
  for (uint64_t m : all_mods) specs.emplace(m, wb.make_modality_spec(m));

  std::vector<std::vector<float>> alphas;
  std::vector<int> labels;
  NoGradGuard ng;
  for (uint64_t sid = split.test_scene_lo; sid < split.test_scene_hi; ++sid) {
    Scene scene = wb.generate_scene(sid);
    Observation obs = wb.make_observation(scene, 0);
    std::vector<FeatureMap> maps;
    for (int m = 0; m < n_all; ++m)
      maps.push_back(
          wb.encode_feature(specs.at(all_mods[static_cast<size_t>(m)]), obs));
    Tensor codes = mie_encode(mie, maps);
    for (int a = 0; a < n_all; ++a)
      for (int b = 0; b < n_all; ++b) {
        if (a == b) continue;
        Routing r =
            route(mmr, mapping_descriptor(mmr, code_row(codes, a),
                                          code_row(codes, b)));
        alphas.push_back(row_values(r.alpha, 0));
        labels.push_back(a * n_all + b);
      }
  }

  RoutingReport report;
  double across_total = 0.0;
  uint64_t across_count = 0;
  for (size_t i = 0; i < alphas.size(); ++i)
    for (size_t j = i + 1; j < alphas.size(); ++j)
      if (labels[i] != labels[j]) {
        across_total += cosine(alphas[i], alphas[j]);
        ++across_count;
      }
  report.across_mean = across_count > 0 ? across_total / across_count : 0.0;

  double within_total = 0.0;
  int within_defined = 0;
  for (int a = 0; a < n_all; ++a)
    for (int b = 0; b < n_all; ++b) {
      if (a == b) continue;
      std::vector<std::vector<float>> group;
      for (size_t i = 0; i < alphas.size(); ++i)
        if (labels[i] == a * n_all + b) group.push_back(alphas[i]);
      MappingStat stat;
      stat.nbr_mod = all_mods[static_cast<size_t>(a)];
      stat.ego_mod = all_mods[static_cast<size_t>(b)];
      stat.samples = static_cast<int>(group.size());
      if (group.size() >= 2) {
        stat.within = mean_pairwise_cosine(group);
        stat.within_defined = true;
        within_total += stat.within;
        ++within_defined;
      }
      report.mappings.push_back(stat);
    }
  report.within_mean =
      within_defined > 0 ? within_total / within_defined : 0.0;
  return report;
}

uint64_t mct_pass_madds(const MctArchitecture& arch, int h, int w) {
  const uint64_t c = static_cast<uint64_t>(arch.channels);
  const uint64_t hw = static_cast<uint64_t>(h) * static_cast<uint64_t>(w);
  const uint64_t cells = static_cast<uint64_t>(arch.window) * arch.window;
  const uint64_t nwin = hw / cells;
  const uint64_t hidden = static_cast<uint64_t>(arch.ffn_hidden());
  const uint64_t proj = 4 * hw * c * c;       // q, k, v, o projections
  const uint64_t ffn = 2 * hw * c * hidden;   // two feed-forward matmuls
  const uint64_t win_attn = 2 * nwin * cells * cells * c;
  const uint64_t grid_attn = 2 * cells * nwin * nwin * c;
  return static_cast<uint64_t>(arch.n_blocks) *
         (2 * (proj + ffn) + win_attn + grid_attn);
}

std::string ProfileReport::to_csv() const {
  std::ostringstream os;
  os << "method,madds,passes,wall_ms_median\n";
  for (const ProfileRow* r : {&unitrans, &classic}) {
    os << r->method << ',' << r->madds << ',' << r->passes << ',';
    print_csv_value(os, r->wall_ms_median);
    os << '\n';
  }
  return os.str();
}

ProfileReport profile(const Workbench& wb, const MieParams& mie,
                      const ExpertBank& bank, const MmrParams& mmr,
                      int top_k, int trials) {
  if (trials < 1) throw ConfigError("profile: trials must be >= 1");
  if (top_k < 1 || top_k > bank.n_experts())
    throw ConfigError("profile: top_k must be in [1, K]");

  NoGradGuard ng;
  Scene scene = wb.generate_scene(0);
  ModalitySpec ego_spec = wb.make_modality_spec(1);
  ModalitySpec nbr_spec = wb.make_modality_spec(2);
  FeatureMap f_ego = wb.encode_feature(ego_spec, wb.make_observation(scene, 0));
  FeatureMap f_nbr = wb.encode_feature(nbr_spec, wb.make_observation(scene, 1));

  auto timed = [&](auto&& call) {
    std::vector<double> ms;
    ms.reserve(static_cast<size_t>(trials));
    for (int t = 0; t < trials; ++t) {
      auto t0 = std::chrono::steady_clock::now();
      call();
      auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::nth_element(ms.begin(), ms.begin() + ms.size() / 2, ms.end());
    return ms[ms.size() / 2];
  };

  ProfileReport report;
  report.unitrans.method = "unitrans";
  MaddCounter::reset();
  PassCounter::reset();
  translate(bank, mmr, mie, f_nbr, f_ego);
  report.unitrans.madds = MaddCounter::total();
  report.unitrans.passes = PassCounter::total();
  report.unitrans.wall_ms_median =
      timed([&] { translate(bank, mmr, mie, f_nbr, f_ego); });

  report.classic.method = "classic_moe";
  MaddCounter::reset();
  PassCounter::reset();
  classic_moe_forward(bank, mmr, mie, f_nbr, f_ego, top_k);
  report.classic.madds = MaddCounter::total();
  report.classic.passes = PassCounter::total();
  report.classic.wall_ms_median =
      timed([&] { classic_moe_forward(bank, mmr, mie, f_nbr, f_ego, top_k); });

  TranslateResult tr = translate(bank, mmr, mie, f_nbr, f_ego);
  std::vector<Tensor> phi = instantiate(bank, tr.alpha);
  MaddCounter::reset();
  mct_forward(bank.arch, phi, feature_tensor(f_nbr), feature_tensor(f_ego));
  report.backbone_madds_counted = MaddCounter::total();
  report.backbone_madds_formula =
      mct_pass_madds(bank.arch, wb.config().grid, wb.config().grid);

  report.ratio = static_cast<double>(report.unitrans.madds) /
                 static_cast<double>(report.classic.madds);
  return report;
}

std::string ablation_sweep(const std::string& axis,
                           std::span<const std::string> values,
                           const AblationConfig& base) {
  if (axis != "d" && axis != "K" && axis != "shared" && axis != "loss-term")
    throw ConfigError("ablation_sweep: unknown axis " + axis);
  if (values.empty()) throw ConfigError("ablation_sweep: no values");

  auto parse_int = [&](const std::string& v) {
    try {
      size_t used = 0;
      int n = std::stoi(v, &used);
      if (used != v.size() || n < 1)
        throw std::invalid_argument("not a positive integer");
      return n;
    } catch (const std::exception&) {
      throw ConfigError("ablation_sweep: bad value '" + v + "' for axis " +
                        axis);
    }
  };

  Workbench wb(base.workbench);
  std::ostringstream os;
  os << "axis,value,mse_translated,mse_identity,f1_translated\n";

  // Stage 1 is only affected by the code-dimension axis; other sweeps
  // reuse one pretrained encoder.
  MieParams shared_mie;
  bool have_shared_mie = false;

  for (const std::string& v : values) {
    Stage1Config s1 = base.stage1;
    Stage2Config s2 = base.stage2;
    int n_experts = base.n_experts;
    bool drop_shared = false;

    if (axis == "d") {
      s1.code_dim = parse_int(v);
    } else if (axis == "K") {
      n_experts = parse_int(v);
    } else if (axis == "shared") {
      int flag = 0;
      if (v == "0")
        flag = 0;
      else if (v == "1")
        flag = 1;
      else
        throw ConfigError("ablation_sweep: shared axis takes 0 or 1, got '" +
                          v + "'");
      drop_shared = flag == 0;
    } else {
      if (v == "feat")
        s2.lambda_feat = 0.0f;
      else if (v == "ctr")
        s2.lambda_ctr = 0.0f;
      else if (v == "r")
        s2.lambda_r = 0.0f;
      else if (v != "none")
        throw ConfigError(
            "ablation_sweep: loss-term axis takes feat, ctr, r, or none, "
            "got '" +
            v + "'");
    }
    if (s2.top_k > n_experts) s2.top_k = n_experts;

    MieParams mie;
    if (axis == "d") {
      mie = stage1_train(wb, base.split, s1).params;
    } else {
      if (!have_shared_mie) {
        shared_mie = stage1_train(wb, base.split, s1).params;
        have_shared_mie = true;
      }
      mie = shared_mie;
    }

    ExpertBank bank = bank_init(base.arch, n_experts, s2.seed);
    if (drop_shared) {
      for (Tensor& t : bank.shared)
        std::fill(t.data->values.begin(), t.data->values.end(), 0.0f);
      bank.shared_frozen = true;
    }
    MmrParams mmr = mmr_init(s1.code_dim, n_experts, s2.seed + 1);

    Stage2Result run = stage2_train(wb, mie, bank, mmr, base.split, s2);
    EvalReport report = zero_shot_eval(wb, mie, bank, mmr, run.head,
                                       base.split, base.split.train_modalities);
    double f1 = 0.0;
    for (const EvalRow& r : report.rows) f1 += r.f1_translated;
    if (!report.rows.empty()) f1 /= static_cast<double>(report.rows.size());

    os << axis << ',' << v << ',';
    print_csv_value(os, report.mean_mse_translated);
    os << ',';
    print_csv_value(os, report.mean_mse_identity);
    os << ',';
    print_csv_value(os, f1);
    os << '\n';
  }
  return os.str();
}

}  // namespace unitrans
