// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/workbench.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "unitrans/checkpoint.hpp"
#include "unitrans/optim.hpp"
#include "unitrans/rng.hpp"
#include "unitrans/tensor.hpp"

namespace unitrans {

namespace {

float apply_nl(Nonlinearity nl, float x) {
  switch (nl) {
    case Nonlinearity::kRelu: return x > 0.0f ? x : 0.0f;
    case Nonlinearity::kGelu:
      return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865475f));
    case Nonlinearity::kTanh: return std::tanh(x);
  }
  return x;
}

// Low integer frequency pairs for the positional channels; shared by every
// modality so cross-modality features describe the same underlying cells.
struct Freq {
  int fr, fc;
};
constexpr Freq kFreqs[] = {
    {1, 0}, {0, 1}, {1, 1}, {2, 0}, {0, 2}, {2, 1}, {1, 2}, {2, 2},
    {3, 0}, {0, 3}, {3, 1}, {1, 3}, {3, 2}, {2, 3}, {3, 3}, {4, 1},
    {1, 4}, {4, 3}, {3, 4}, {4, 4}, {5, 1}, {1, 5}, {5, 2}, {2, 5},
    {5, 4}, {4, 5}, {5, 5}, {6, 1}, {1, 6}, {6, 5}, {5, 6}, {6, 6},
};

// Rows of a seeded Gaussian matrix, Gram-Schmidt orthonormalized.
std::vector<float> random_orthogonal(int n, Rng& rng) {
  std::vector<double> q(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    while (true) {
      for (int j = 0; j < n; ++j)
        q[static_cast<size_t>(i) * n + j] = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (int k = 0; k < i; ++k) {
          double dot = 0;
          for (int j = 0; j < n; ++j)
            dot += q[static_cast<size_t>(i) * n + j] *
                   q[static_cast<size_t>(k) * n + j];
          for (int j = 0; j < n; ++j)
            q[static_cast<size_t>(i) * n + j] -=
                dot * q[static_cast<size_t>(k) * n + j];
        }
      }
      double norm = 0;
      for (int j = 0; j < n; ++j) {
        double v = q[static_cast<size_t>(i) * n + j];
        norm += v * v;
      }
      if (norm > 1e-8) {
        double inv = 1.0 / std::sqrt(norm);
        for (int j = 0; j < n; ++j) q[static_cast<size_t>(i) * n + j] *= inv;
        break;
      }
    }
  }
  std::vector<float> out(q.size());
  for (size_t i = 0; i < q.size(); ++i) out[i] = static_cast<float>(q[i]);
  return out;
}

void box_blur(std::vector<float>& vals, int c, int h, int w, int radius) {
  if (radius <= 0) return;
  std::vector<float> tmp(static_cast<size_t>(h) * w);
  for (int ci = 0; ci < c; ++ci) {
    float* plane = vals.data() + static_cast<size_t>(ci) * h * w;
    for (int r = 0; r < h; ++r) {
      for (int col = 0; col < w; ++col) {
        double acc = 0;
        int cnt = 0;
        for (int dr = -radius; dr <= radius; ++dr) {
          int rr = r + dr;
          if (rr < 0 || rr >= h) continue;
          for (int dc = -radius; dc <= radius; ++dc) {
            int cc = col + dc;
            if (cc < 0 || cc >= w) continue;
            acc += plane[rr * w + cc];
            cnt++;
          }
        }
        tmp[static_cast<size_t>(r) * w + col] =
            static_cast<float>(acc / cnt);
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

}  // namespace

Workbench::Workbench(WorkbenchConfig cfg) : cfg_(cfg) {
  if (cfg_.grid < 8 || cfg_.grid % 4 != 0)
    throw std::invalid_argument("workbench: grid must be >= 8 and divisible by 4");
  if (cfg_.channels < 2 ||
      cfg_.channels - 1 > static_cast<int>(std::size(kFreqs)))
    throw std::invalid_argument("workbench: unsupported channel count");
  if (cfg_.agents < 2) throw std::invalid_argument("workbench: need >= 2 agents");
  int c = cfg_.channels;
  lift_weight_.assign(static_cast<size_t>(c) * c, 0.0f);
  for (int i = 0; i < c; ++i) lift_weight_[static_cast<size_t>(i) * c + i] = 1.0f;
}

void Workbench::set_lift_weight(std::vector<float> w) {
  int c = cfg_.channels;
  if (static_cast<int>(w.size()) != c * c)
    throw std::invalid_argument("workbench: lift weight must be C*C");
  lift_weight_ = std::move(w);
  lift_identity_ = true;
  for (int i = 0; i < c && lift_identity_; ++i)
    for (int k = 0; k < c; ++k) {
      float want = i == k ? 1.0f : 0.0f;
      if (lift_weight_[static_cast<size_t>(i) * c + k] != want) {
        lift_identity_ = false;
        break;
      }
    }
}

std::vector<float> Workbench::lift_cell(float occupancy, int r, int c) const {
  int ch = cfg_.channels;
  double g = cfg_.grid;
  std::vector<float> base(static_cast<size_t>(ch));
  base[0] = occupancy;
  // Positional channels are gated by occupancy: an empty cell lifts to the
  // zero vector, so blank views map to pure bias-plus-noise features.
  for (int k = 1; k < ch; ++k) {
    const Freq& f = kFreqs[k - 1];
    double arg = 6.283185307179586 * (f.fr * r + f.fc * c) / g + 0.7 * k;
    base[static_cast<size_t>(k)] =
        occupancy * static_cast<float>(std::sin(arg));
  }
  if (lift_identity_) return base;
  std::vector<float> out(static_cast<size_t>(ch), 0.0f);
  for (int i = 0; i < ch; ++i) {
    double acc = 0;
    for (int k = 0; k < ch; ++k)
      acc += lift_weight_[static_cast<size_t>(i) * ch + k] * base[static_cast<size_t>(k)];
    out[static_cast<size_t>(i)] = static_cast<float>(acc);
  }
  return out;
}

Scene Workbench::generate_scene(uint64_t scene_id) const {
  Rng rng = rng_for(scene_id, "scene-objects");
  int g = cfg_.grid;
  Scene s;
  s.scene_id = scene_id;
  s.grid = g;
  s.cells.assign(static_cast<size_t>(g) * g, 0);
  int n_obj = rng.uniform_int(3, 8);
  int max_side = std::max(3, (9 * g) / 32);
  for (int i = 0; i < n_obj; ++i) {
    SceneRect rect;
    rect.h = rng.uniform_int(3, max_side);
    rect.w = rng.uniform_int(3, max_side);
    rect.r = rng.uniform_int(0, g - rect.h);
    rect.c = rng.uniform_int(0, g - rect.w);
    s.objects.push_back(rect);
    for (int r = rect.r; r < rect.r + rect.h; ++r)
      for (int c = rect.c; c < rect.c + rect.w; ++c)
        s.cells[static_cast<size_t>(r) * g + c] = 1;
  }
  return s;
}

Observation Workbench::make_observation(const Scene& scene,
                                        int agent_id) const {
  if (agent_id < 0 || agent_id >= cfg_.agents)
    throw std::invalid_argument("make_observation: agent_id out of range");
  if (scene.grid != cfg_.grid || scene.cells.empty())
    throw std::invalid_argument("make_observation: scene does not match config");
  int g = cfg_.grid;
  Rng rng = rng_for(scene.scene_id, "view-mask", static_cast<uint64_t>(agent_id));
  double theta = (agent_id + rng.uniform(-0.12f, 0.12f)) *
                 (6.283185307179586 / cfg_.agents);
  double dr = std::cos(theta), dc = std::sin(theta);
  double jitter = g / 16.0;
  double cr = g / 2.0 + rng.uniform(static_cast<float>(-jitter),
                                    static_cast<float>(jitter));
  double cc = g / 2.0 + rng.uniform(static_cast<float>(-jitter),
                                    static_cast<float>(jitter));
  double margin = g / 16.0;
  double ar = g / 2.0 + rng.uniform(static_cast<float>(-g / 4.0),
                                    static_cast<float>(g / 4.0));
  double ac = g / 2.0 + rng.uniform(static_cast<float>(-g / 4.0),
                                    static_cast<float>(g / 4.0));
  double radius = rng.uniform(0.19f * g, 0.31f * g);
  double r2 = radius * radius;

  Observation obs;
  obs.scene_id = scene.scene_id;
  obs.agent_id = agent_id;
  obs.grid = g;
  obs.view_mask.assign(static_cast<size_t>(g) * g, 0);
  obs.masked_grid.assign(static_cast<size_t>(g) * g, 0.0f);
  obs.scene_cells = scene.cells;
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      bool half = dr * (r - cr) + dc * (c - cc) >= -margin;
      double ddr = r - ar, ddc = c - ac;
      bool disk = ddr * ddr + ddc * ddc <= r2;
      if (half || disk) {
        size_t at = static_cast<size_t>(r) * g + c;
        obs.view_mask[at] = 1;
        obs.masked_grid[at] = scene.cells[at] ? 1.0f : 0.0f;
      }
    }
  }
  return obs;
}

ModalitySpec Workbench::make_modality_spec(uint64_t modality_seed) const {
  int c = cfg_.channels;
  Rng rng = rng_for(modality_seed, "modality-spec");
  ModalitySpec spec;
  spec.modality_seed = modality_seed;
  spec.channels = c;
  // channel_mix = Q1 . diag(D) . Q2 with D in [0.5, 2]; orthogonal factors
  // keep the condition number at most 4, well under the soundness bound.
  std::vector<float> q1 = random_orthogonal(c, rng);
  std::vector<float> q2 = random_orthogonal(c, rng);
  std::vector<float> d(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) d[static_cast<size_t>(i)] = rng.uniform(0.5f, 2.0f);
  spec.channel_mix.assign(static_cast<size_t>(c) * c, 0.0f);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      double acc = 0;
      for (int k = 0; k < c; ++k)
        acc += static_cast<double>(q1[static_cast<size_t>(i) * c + k]) *
               d[static_cast<size_t>(k)] * q2[static_cast<size_t>(k) * c + j];
      spec.channel_mix[static_cast<size_t>(i) * c + j] = static_cast<float>(acc);
    }
  spec.gain.resize(static_cast<size_t>(c));
  spec.bias.resize(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    spec.gain[static_cast<size_t>(i)] = rng.uniform(0.5f, 1.5f);
    spec.bias[static_cast<size_t>(i)] = rng.uniform(-0.3f, 0.3f);
  }
  int nl = rng.uniform_int(0, 2);
  spec.nonlinearity = nl == 0 ? Nonlinearity::kRelu
                              : (nl == 1 ? Nonlinearity::kGelu
                                         : Nonlinearity::kTanh);
  spec.blur_radius = rng.uniform_int(0, 2);
  spec.noise_scale = rng.uniform(0.0f, cfg_.noise_max);
  return spec;
}

FeatureMap Workbench::encode_feature(const ModalitySpec& spec,
                                     const Observation& obs) const {
  int c = cfg_.channels;
  int g = cfg_.grid;
  if (spec.channels != c)
    throw std::invalid_argument("encode_feature: spec channel mismatch");
  if (obs.grid != g)
    throw std::invalid_argument("encode_feature: observation grid mismatch");
  FeatureMap f;
  f.scene_id = obs.scene_id;
  f.agent_id = obs.agent_id;
  f.modality_seed = spec.modality_seed;
  f.c = c;
  f.h = g;
  f.w = g;
  f.values.assign(static_cast<size_t>(c) * g * g, 0.0f);
  Rng noise = rng_for(spec.modality_seed, "feature-noise", obs.scene_id,
                      static_cast<uint64_t>(obs.agent_id));
  std::vector<float> noise_buf(f.values.size());
  for (float& v : noise_buf) v = noise.normal(0.0f, spec.noise_scale);
  for (int r = 0; r < g; ++r) {
    for (int col = 0; col < g; ++col) {
      std::vector<float> lifted =
          lift_cell(obs.masked_grid[static_cast<size_t>(r) * g + col], r, col);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        const float* mrow = spec.channel_mix.data() + static_cast<size_t>(ch) * c;
        for (int k = 0; k < c; ++k) acc += static_cast<double>(mrow[k]) * lifted[static_cast<size_t>(k)];
        float v = apply_nl(spec.nonlinearity, static_cast<float>(acc));
        size_t at = (static_cast<size_t>(ch) * g + r) * g + col;
        f.values[at] = noise_buf[at] + v * spec.gain[static_cast<size_t>(ch)] +
                       spec.bias[static_cast<size_t>(ch)];
      }
    }
  }
  box_blur(f.values, c, g, g, spec.blur_radius);
  return f;
}

FeatureMap Workbench::teacher_feature(const ModalitySpec& ego_spec,
                                      const Observation& neighbor_obs) const {
  return encode_feature(ego_spec, neighbor_obs);
}

std::vector<float> Workbench::task_labels(const Observation& obs, int oh,
                                          int ow) const {
  int g = cfg_.grid;
  if (oh <= 0 || ow <= 0 || g % oh != 0 || g % ow != 0)
    throw std::invalid_argument("task_labels: output dims must divide grid");
  int bh = g / oh, bw = g / ow;
  std::vector<float> labels(static_cast<size_t>(oh) * ow, 0.0f);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      int occupied = 0;
      for (int r = i * bh; r < (i + 1) * bh; ++r)
        for (int c = j * bw; c < (j + 1) * bw; ++c)
          occupied += obs.scene_cells[static_cast<size_t>(r) * g + c];
      labels[static_cast<size_t>(i) * ow + j] =
          2 * occupied >= bh * bw ? 1.0f : 0.0f;
    }
  return labels;
}

ModalitySplit make_split(uint64_t seed, int n_train, int n_emerging,
                         uint64_t train_lo, uint64_t train_hi,
                         uint64_t test_lo, uint64_t test_hi) {
  if (n_train < 4 || n_emerging < 2)
    throw std::invalid_argument("make_split: need >= 4 train and >= 2 emerging");
  if (train_lo >= train_hi || test_lo >= test_hi)
    throw std::invalid_argument("make_split: empty scene range");
  bool overlap = train_lo < test_hi && test_lo < train_hi;
  if (overlap)
    throw std::invalid_argument("make_split: train and test scenes overlap");
  Rng rng = rng_for(seed, "modality-split");
  std::set<uint64_t> used;
  auto draw = [&] {
    while (true) {
      uint64_t v = rng.next_u64();
      if (v != 0 && used.insert(v).second) return v;
    }
  };
  ModalitySplit split;
  for (int i = 0; i < n_train; ++i) split.train_modalities.push_back(draw());
  for (int i = 0; i < n_emerging; ++i)
    split.emerging_modalities.push_back(draw());
  split.train_scene_lo = train_lo;
  split.train_scene_hi = train_hi;
  split.test_scene_lo = test_lo;
  split.test_scene_hi = test_hi;
  return split;
}

std::string split_to_json(const ModalitySplit& split) {
  nlohmann::json j;
  j["train_modalities"] = split.train_modalities;
  j["emerging_modalities"] = split.emerging_modalities;
  j["train_scenes"] = {split.train_scene_lo, split.train_scene_hi};
  j["test_scenes"] = {split.test_scene_lo, split.test_scene_hi};
  return j.dump(2) + "\n";
}

ModalitySplit split_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  ModalitySplit split;
  split.train_modalities = j.at("train_modalities").get<std::vector<uint64_t>>();
  split.emerging_modalities =
      j.at("emerging_modalities").get<std::vector<uint64_t>>();
  split.train_scene_lo = j.at("train_scenes").at(0).get<uint64_t>();
  split.train_scene_hi = j.at("train_scenes").at(1).get<uint64_t>();
  split.test_scene_lo = j.at("test_scenes").at(0).get<uint64_t>();
  split.test_scene_hi = j.at("test_scenes").at(1).get<uint64_t>();
  return split;
}

void probe_pretrain_lift(Workbench& wb, const ModalitySplit& split,
                         uint64_t seed, int steps) {
  int c = wb.config().channels;
  int g = wb.config().grid;
  int cells = g * g;
  std::vector<ModalitySpec> specs;
  for (uint64_t m : split.train_modalities)
    specs.push_back(wb.make_modality_spec(m));

  Tensor lift = Tensor::from({c, c}, wb.lift_weight(), true);
  std::vector<Tensor> probes, biases;
  Rng init = rng_for(seed, "lift-probe-init");
  for (size_t m = 0; m < specs.size(); ++m) {
    probes.push_back(Tensor::randn({1, c}, init, 0.1f, true));
    biases.push_back(Tensor::zeros({1}, true));
  }
  std::vector<Tensor> params = {lift};
  for (size_t m = 0; m < specs.size(); ++m) {
    params.push_back(probes[m]);
    params.push_back(biases[m]);
  }
  Adam opt(params, 1e-3f);
  Rng pick = rng_for(seed, "lift-probe-batch");
  for (int step = 0; step < steps; ++step) {
    uint64_t scene_id =
        split.train_scene_lo +
        static_cast<uint64_t>(pick.uniform_int(
            0, static_cast<int>(split.train_scene_hi - split.train_scene_lo) - 1));
    Scene scene = wb.generate_scene(scene_id);
    Observation obs =
        wb.make_observation(scene, pick.uniform_int(0, wb.config().agents - 1));
    // raw lift inputs, before the learned re-mix
    std::vector<float> base(static_cast<size_t>(c) * cells);
    {
      Workbench probe_wb(wb.config());  // identity lift for the raw basis
      for (int r = 0; r < g; ++r)
        for (int col = 0; col < g; ++col) {
          auto cell = probe_wb.lift_cell(
              obs.masked_grid[static_cast<size_t>(r) * g + col], r, col);
          for (int ch = 0; ch < c; ++ch)
            base[static_cast<size_t>(ch) * cells + r * g + col] =
                cell[static_cast<size_t>(ch)];
        }
    }
    Tensor basis = Tensor::from({c, cells}, base);
    Tensor labels = Tensor::from({1, cells}, wb.task_labels(obs, g, g));
    Tape tape;
    Tensor mixed = matmul(lift, basis);  // [c, cells]
    Tensor total;
    for (size_t m = 0; m < specs.size(); ++m) {
      const ModalitySpec& spec = specs[m];
      Tensor y = matmul(Tensor::from({c, c}, spec.channel_mix), mixed);
      Tensor v;
      switch (spec.nonlinearity) {
        case Nonlinearity::kRelu: v = relu(y); break;
        case Nonlinearity::kGelu: v = gelu(y); break;
        case Nonlinearity::kTanh: v = tanh(y); break;
      }
      Tensor feat = add(mul(v, Tensor::from({c, 1}, spec.gain)),
                        Tensor::from({c, 1}, spec.bias));
      Tensor logits = add(matmul(probes[m], feat), biases[m]);
      Tensor bce = reduce_mean(sub(softplus(logits), mul(logits, labels)),
                               {0, 1});
      total = total.defined() ? add(total, bce) : bce;
    }
    tape.backward(total);
    opt.step();
  }
  wb.set_lift_weight(
      std::vector<float>(lift.values().begin(), lift.values().end()));
}

void dump_bundle(const std::string& path, std::span<const Scene> scenes,
                 std::span<const FeatureMap> feats) {
  NamedTensors named;
  for (const Scene& s : scenes) {
    std::vector<float> grid(s.cells.begin(), s.cells.end());
    named.emplace_back("scene/" + std::to_string(s.scene_id) + "/grid",
                       Tensor::from({s.grid, s.grid}, std::move(grid)));
  }
  for (const FeatureMap& f : feats) {
    named.emplace_back("feat/" + std::to_string(f.scene_id) + "/" +
                           std::to_string(f.agent_id) + "/" +
                           std::to_string(f.modality_seed),
                       Tensor::from({f.c, f.h, f.w}, f.values));
  }
  save_checkpoint(path, std::move(named));
}

}  // namespace unitrans
