// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/translator.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

#include "unitrans/errors.hpp"
#include "unitrans/rng.hpp"

namespace unitrans {

namespace {

thread_local uint64_t g_backbone_passes = 0;

const char* kStageNames[2] = {"win", "grid"};
const char* kTensorNames[12] = {"ln1_g", "ln1_b", "wq",     "wk",
                                "wv",    "wo",    "ln2_g",  "ln2_b",
                                "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"};
constexpr int kPerStage = 12;

bool is_gain(const std::string& name) {
  return name.ends_with("ln1_g") || name.ends_with("ln2_g");
}

bool is_weight(const std::string& name) {
  return name.ends_with("wq") || name.ends_with("wk") ||
         name.ends_with("wv") || name.ends_with("wo") ||
         name.ends_with("ffn_w1") || name.ends_with("ffn_w2");
}

// Expert sets are deviations from the shared set: their gains and biases
// start at zero and only their weight matrices carry (small) noise.
Tensor init_entry(const ManifestEntry& e, uint64_t seed,
                  const std::string& full_name, float weight_gain,
                  bool deviation) {
  if (is_gain(e.name))
    return Tensor::full(e.shape, deviation ? 0.0f : 1.0f, true);
  if (is_weight(e.name)) {
    Rng rng = rng_for(seed, full_name.c_str());
    float stdev = weight_gain / std::sqrt(static_cast<float>(e.shape[0]));
    return Tensor::randn(e.shape, rng, stdev, true);
  }
  return Tensor::zeros(e.shape, true);  // biases
}

using IdxPtr = std::shared_ptr<const std::vector<int>>;

IdxPtr make_idx(std::vector<int> v) {
  return std::make_shared<const std::vector<int>>(std::move(v));
}

// Index plans for one spatial extent. Tokens live in window order: token
// t = wi * N + pos with N = w*w window cells; the grid order regroups equal
// positions across windows (row pos * nW + wi).
struct TokenPlans {
  int n_tok = 0, n_win = 0, n_cell = 0;
  IdxPtr to_tokens;   // [C,H,W] -> [n_tok, C], window order
  IdxPtr to_feature;  // [n_tok, C] -> [C,H,W]
  IdxPtr win_to_grid;  // row permutation, flat over [n_tok, C]
  IdxPtr grid_to_win;
  IdxPtr split_win, merge_win;    // head split/merge for B = n_win, M = n_cell
  IdxPtr split_grid, merge_grid;  // head split/merge for B = n_cell, M = n_win
};

std::pair<IdxPtr, IdxPtr> head_plans(int groups, int tokens, int heads,
                                     int hd) {
  const int c = heads * hd;
  std::vector<int> split(static_cast<size_t>(groups) * tokens * c);
  std::vector<int> merge(split.size());
  for (int b = 0; b < groups; ++b)
    for (int t = 0; t < tokens; ++t)
      for (int h = 0; h < heads; ++h)
        for (int d = 0; d < hd; ++d) {
          int row_major = ((b * tokens + t) * c) + h * hd + d;
          int head_major = (((b * heads + h) * tokens) + t) * hd + d;
          split[static_cast<size_t>(head_major)] = row_major;
          merge[static_cast<size_t>(row_major)] = head_major;
        }
  return {make_idx(std::move(split)), make_idx(std::move(merge))};
}

TokenPlans build_plans(const MctArchitecture& arch, int h, int w) {
  const int c = arch.channels, win = arch.window;
  TokenPlans p;
  p.n_cell = win * win;
  p.n_win = (h / win) * (w / win);
  p.n_tok = h * w;
  const int gw = w / win;  // windows per row

  std::vector<int> to_tok(static_cast<size_t>(p.n_tok) * c);
  std::vector<int> to_feat(to_tok.size());
  for (int gy = 0; gy < h / win; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int py = 0; py < win; ++py)
        for (int px = 0; px < win; ++px) {
          int t = (gy * gw + gx) * p.n_cell + py * win + px;
          int pix = (gy * win + py) * w + gx * win + px;
          for (int ch = 0; ch < c; ++ch) {
            to_tok[static_cast<size_t>(t) * c + ch] = ch * p.n_tok + pix;
            to_feat[static_cast<size_t>(ch) * p.n_tok + pix] = t * c + ch;
          }
        }
  p.to_tokens = make_idx(std::move(to_tok));
  p.to_feature = make_idx(std::move(to_feat));

  std::vector<int> w2g(static_cast<size_t>(p.n_tok) * c);
  std::vector<int> g2w(w2g.size());
  for (int wi = 0; wi < p.n_win; ++wi)
    for (int pos = 0; pos < p.n_cell; ++pos) {
      int win_row = wi * p.n_cell + pos;
      int grid_row = pos * p.n_win + wi;
      for (int ch = 0; ch < c; ++ch) {
        w2g[static_cast<size_t>(grid_row) * c + ch] = win_row * c + ch;
        g2w[static_cast<size_t>(win_row) * c + ch] = grid_row * c + ch;
      }
    }
  p.win_to_grid = make_idx(std::move(w2g));
  p.grid_to_win = make_idx(std::move(g2w));

  auto [sw, mw] = head_plans(p.n_win, p.n_cell, arch.heads, arch.head_dim());
  p.split_win = sw;
  p.merge_win = mw;
  auto [sg, mg] = head_plans(p.n_cell, p.n_win, arch.heads, arch.head_dim());
  p.split_grid = sg;
  p.merge_grid = mg;
  return p;
}

// One attention + FFN pair over pre-grouped token rows. tj carries the
// residual stream; ti is the fixed reference providing keys and values.
Tensor run_stage(const Tensor& tj, const Tensor& ti,
                 std::span<const Tensor> sp, int groups, int tokens, int heads,
                 int hd, const IdxPtr& split, const IdxPtr& merge) {
  const Tensor &ln1_g = sp[0], &ln1_b = sp[1], &wq = sp[2], &wk = sp[3],
               &wv = sp[4], &wo = sp[5], &ln2_g = sp[6], &ln2_b = sp[7],
               &ffn_w1 = sp[8], &ffn_b1 = sp[9], &ffn_w2 = sp[10],
               &ffn_b2 = sp[11];
  const int c = heads * hd;
  Tensor qn = layernorm(tj, ln1_g, ln1_b);
  Tensor kn = layernorm(ti, ln1_g, ln1_b);
  Shape head_shape{groups * heads, tokens, hd};
  Tensor q = gather(matmul(qn, wq), split, head_shape);
  Tensor k = gather(matmul(kn, wk), split, head_shape);
  Tensor v = gather(matmul(kn, wv), split, head_shape);
  Tensor att = softmax(scale(bmm(q, k, true), 1.0f / std::sqrt(
                                                  static_cast<float>(hd))),
                       2);
  Tensor o = gather(bmm(att, v), merge, {groups * tokens, c});
  Tensor after_attn = add(tj, matmul(o, wo));
  Tensor fn = layernorm(after_attn, ln2_g, ln2_b);
  Tensor ffn = add(matmul(gelu(add(matmul(fn, ffn_w1), ffn_b1)), ffn_w2),
                   ffn_b2);
  return add(after_attn, ffn);
}

void check_map(const MctArchitecture& arch, const Tensor& t,
               const char* who) {
  if (t.ndim() != 3)
    throw std::invalid_argument(std::string(who) + ": expected [C, H, W]");
  if (t.dim(0) != arch.channels)
    throw std::invalid_argument(std::string(who) + ": channel mismatch");
  if (t.dim(1) % arch.window != 0 || t.dim(2) % arch.window != 0)
    throw std::invalid_argument(std::string(who) +
                                ": spatial dims must divide the window");
}

Tensor row_block(const Tensor& m, int row_lo, int rows) {
  const int cols = m.dim(1);
  std::vector<int> idx(static_cast<size_t>(rows) * cols);
  std::iota(idx.begin(), idx.end(), row_lo * cols);
  return gather(m, make_idx(std::move(idx)), {rows, cols});
}

}  // namespace

std::vector<ManifestEntry> mct_manifest(const MctArchitecture& arch) {
  if (arch.channels % arch.heads != 0)
    throw std::invalid_argument("mct_manifest: heads must divide channels");
  const int c = arch.channels, f = arch.ffn_hidden();
  const Shape shapes[kPerStage] = {{c},    {c},    {c, c}, {c, c},
                                   {c, c}, {c, c}, {c},    {c},
                                   {c, f}, {f},    {f, c}, {c}};
  std::vector<ManifestEntry> out;
  out.reserve(static_cast<size_t>(arch.n_blocks) * 2 * kPerStage);
  for (int b = 0; b < arch.n_blocks; ++b)
    for (const char* stage : kStageNames)
      for (int i = 0; i < kPerStage; ++i)
        out.push_back({"blk" + std::to_string(b) + "/" + stage + "/" +
                           kTensorNames[i],
                       shapes[i]});
  return out;
}

std::vector<Tensor> ExpertBank::trainable() const {
  std::vector<Tensor> out;
  if (!shared_frozen) out = shared;
  for (const auto& e : experts) out.insert(out.end(), e.begin(), e.end());
  return out;
}

void ExpertBank::set_requires_grad(bool on) {
  for (Tensor t : shared) t.data->requires_grad = on && !shared_frozen;
  for (const auto& e : experts)
    for (Tensor t : e) t.data->requires_grad = on;
}

ExpertBank bank_init(const MctArchitecture& arch, int n_experts,
                     uint64_t seed) {
  if (n_experts < 1) throw std::invalid_argument("bank_init: need K >= 1");
  ExpertBank bank;
  bank.arch = arch;
  auto manifest = mct_manifest(arch);
  bank.shared.reserve(manifest.size());
  for (const auto& e : manifest)
    bank.shared.push_back(
        init_entry(e, seed, "tpb/shared/" + e.name, 1.0f, false));
  bank.experts.resize(static_cast<size_t>(n_experts));
  for (int k = 0; k < n_experts; ++k) {
    bank.experts[static_cast<size_t>(k)].reserve(manifest.size());
    for (const auto& e : manifest)
      bank.experts[static_cast<size_t>(k)].push_back(init_entry(
          e, seed, "tpb/e" + std::to_string(k) + "/" + e.name, 0.1f, true));
  }
  return bank;
}

NamedTensors bank_to_named(const ExpertBank& bank) {
  NamedTensors named;
  named.emplace_back(
      "mct/arch",
      Tensor::from({4}, {static_cast<float>(bank.arch.channels),
                         static_cast<float>(bank.arch.window),
                         static_cast<float>(bank.arch.heads),
                         static_cast<float>(bank.arch.n_blocks)}));
  auto manifest = mct_manifest(bank.arch);
  for (size_t i = 0; i < manifest.size(); ++i)
    named.emplace_back("tpb/shared/" + manifest[i].name, bank.shared[i]);
  for (int k = 0; k < bank.n_experts(); ++k)
    for (size_t i = 0; i < manifest.size(); ++i)
      named.emplace_back("tpb/e" + std::to_string(k) + "/" + manifest[i].name,
                         bank.experts[static_cast<size_t>(k)][i]);
  return named;
}

ExpertBank bank_from_named(const NamedTensors& named) {
  Tensor arch_t = require_tensor(named, "mct/arch");
  if (arch_t.numel() != 4)
    throw CheckpointMismatchError("bank checkpoint: bad arch record");
  ExpertBank bank;
  bank.arch.channels = static_cast<int>(arch_t.values()[0]);
  bank.arch.window = static_cast<int>(arch_t.values()[1]);
  bank.arch.heads = static_cast<int>(arch_t.values()[2]);
  bank.arch.n_blocks = static_cast<int>(arch_t.values()[3]);
  if (bank.arch.channels < 1 || bank.arch.heads < 1 || bank.arch.window < 1 ||
      bank.arch.n_blocks < 1 || bank.arch.channels % bank.arch.heads != 0)
    throw CheckpointMismatchError("bank checkpoint: inconsistent arch record");

  int n_experts = 0;
  for (const auto& [name, t] : named)
    if (name.starts_with("tpb/e")) {
      size_t slash = name.find('/', 5);
      if (slash == std::string::npos) continue;
      try {
        n_experts =
            std::max(n_experts, std::stoi(name.substr(5, slash - 5)) + 1);
      } catch (const std::exception&) {
        throw CheckpointMismatchError("bank checkpoint: bad expert name " +
                                      name);
      }
    }
  if (n_experts < 1)
    throw CheckpointMismatchError("bank checkpoint: no experts found");

  auto manifest = mct_manifest(bank.arch);
  auto fetch = [&](const std::string& prefix) {
    std::vector<Tensor> set;
    set.reserve(manifest.size());
    for (const auto& e : manifest) {
      Tensor t = require_tensor(named, prefix + e.name);
      if (t.shape() != e.shape)
        throw CheckpointMismatchError("bank checkpoint: bad shape for " +
                                      prefix + e.name);
      set.push_back(t);
    }
    return set;
  };
  bank.shared = fetch("tpb/shared/");
  bank.experts.reserve(static_cast<size_t>(n_experts));
  for (int k = 0; k < n_experts; ++k)
    bank.experts.push_back(fetch("tpb/e" + std::to_string(k) + "/"));
  return bank;
}

void MmrParams::set_requires_grad(bool on) {
  g.data->requires_grad = on;
  h.data->requires_grad = on;
}

MmrParams mmr_init(int code_dim, int n_experts, uint64_t seed) {
  if (code_dim < 1 || n_experts < 1)
    throw std::invalid_argument("mmr_init: bad dimensions");
  MmrParams p;
  Rng rg = rng_for(seed, "mmr/g");
  p.g = Tensor::randn({3 * code_dim, 16}, rg,
                      1.0f / std::sqrt(3.0f * static_cast<float>(code_dim)),
                      true);
  Rng rh = rng_for(seed, "mmr/h");
  p.h = Tensor::randn({16, n_experts}, rh, 1.0f / 4.0f, true);
  return p;
}

NamedTensors mmr_to_named(const MmrParams& p) {
  return {{"mmr/g", p.g}, {"mmr/h", p.h}};
}

MmrParams mmr_from_named(const NamedTensors& named) {
  MmrParams p;
  p.g = require_tensor(named, "mmr/g");
  p.h = require_tensor(named, "mmr/h");
  if (p.g.ndim() != 2 || p.h.ndim() != 2 || p.g.dim(0) % 3 != 0 ||
      p.g.dim(1) != 16 || p.h.dim(0) != 16)
    throw CheckpointMismatchError("mmr checkpoint: bad projector shapes");
  return p;
}

Tensor mapping_descriptor(const MmrParams& p, const Tensor& z_src,
                          const Tensor& z_dst) {
  if (z_src.ndim() != 2 || z_dst.ndim() != 2 ||
      z_src.shape() != z_dst.shape())
    throw std::invalid_argument(
        "mapping_descriptor: codes must be [n, d] of equal shape");
  const int d = z_src.dim(1);
  if (d != p.code_dim())
    throw std::invalid_argument("mapping_descriptor: code dim mismatch");
  // [src | dst | src - dst] @ g, written as three row blocks of g so no
  // column concat is needed.
  Tensor ga = row_block(p.g, 0, d);
  Tensor gb = row_block(p.g, d, d);
  Tensor gc = row_block(p.g, 2 * d, d);
  Tensor diff = sub(z_src, z_dst);
  return add(add(matmul(z_src, ga), matmul(z_dst, gb)), matmul(diff, gc));
}

Routing route(const MmrParams& p, const Tensor& descriptor) {
  Routing r;
  r.logits = matmul(descriptor, p.h);
  r.alpha = softmax(r.logits, r.logits.ndim() - 1);
  return r;
}

std::vector<Tensor> instantiate(const ExpertBank& bank, const Tensor& alpha) {
  if (alpha.numel() != bank.n_experts())
    throw std::invalid_argument("instantiate: alpha length must equal K");
  std::vector<Tensor> out;
  out.reserve(bank.shared.size());
  std::vector<Tensor> slots(static_cast<size_t>(bank.n_experts()));
  for (size_t i = 0; i < bank.shared.size(); ++i) {
    for (int k = 0; k < bank.n_experts(); ++k)
      slots[static_cast<size_t>(k)] = bank.experts[static_cast<size_t>(k)][i];
    out.push_back(mix_params(alpha, &bank.shared[i], slots));
  }
  return out;
}

void PassCounter::reset() { g_backbone_passes = 0; }
uint64_t PassCounter::total() { return g_backbone_passes; }

Tensor mct_forward(const MctArchitecture& arch, std::span<const Tensor> params,
                   const Tensor& f_neighbor, const Tensor& f_ego) {
  check_map(arch, f_neighbor, "mct_forward");
  check_map(arch, f_ego, "mct_forward");
  if (f_neighbor.shape() != f_ego.shape())
    throw std::invalid_argument("mct_forward: neighbor/ego shape mismatch");
  const size_t expected = static_cast<size_t>(arch.n_blocks) * 2 * kPerStage;
  if (params.size() != expected)
    throw std::invalid_argument("mct_forward: parameter count mismatch");
  ++g_backbone_passes;

  const int h = f_neighbor.dim(1), w = f_neighbor.dim(2);
  const int heads = arch.heads, hd = arch.head_dim(), c = arch.channels;
  TokenPlans plans = build_plans(arch, h, w);

  Shape tok_shape{plans.n_tok, c};
  Tensor tj = gather(f_neighbor, plans.to_tokens, tok_shape);
  Tensor ti = gather(f_ego, plans.to_tokens, tok_shape);
  Tensor ti_grid = gather(ti, plans.win_to_grid, tok_shape);

  for (int b = 0; b < arch.n_blocks; ++b) {
    std::span<const Tensor> win =
        params.subspan(static_cast<size_t>(b) * 2 * kPerStage, kPerStage);
    std::span<const Tensor> grid = params.subspan(
        static_cast<size_t>(b) * 2 * kPerStage + kPerStage, kPerStage);
    tj = run_stage(tj, ti, win, plans.n_win, plans.n_cell, heads, hd,
                   plans.split_win, plans.merge_win);
    tj = gather(tj, plans.win_to_grid, tok_shape);
    tj = run_stage(tj, ti_grid, grid, plans.n_cell, plans.n_win, heads, hd,
                   plans.split_grid, plans.merge_grid);
    tj = gather(tj, plans.grid_to_win, tok_shape);
  }
  return gather(tj, plans.to_feature, {c, h, w});
}

TranslateResult translate_with_codes(const ExpertBank& bank,
                                     const MmrParams& mmr, const Tensor& z_src,
                                     const Tensor& z_dst,
                                     const Tensor& f_neighbor,
                                     const Tensor& f_ego) {
  const int d = mmr.code_dim();
  Tensor zs = z_src.ndim() == 1 ? reshape(z_src, {1, d}) : z_src;
  Tensor zd = z_dst.ndim() == 1 ? reshape(z_dst, {1, d}) : z_dst;
  Routing r = route(mmr, mapping_descriptor(mmr, zs, zd));
  const int k = bank.n_experts();
  TranslateResult out;
  out.alpha = reshape(r.alpha, {k});
  out.logits = reshape(r.logits, {k});
  out.z_src = zs;
  out.z_dst = zd;
  out.feature = mct_forward(bank.arch, instantiate(bank, out.alpha),
                            f_neighbor, f_ego);
  return out;
}

TranslateResult translate(const ExpertBank& bank, const MmrParams& mmr,
                          const MieParams& mie, const FeatureMap& f_neighbor,
                          const FeatureMap& f_ego) {
  std::vector<FeatureMap> maps{f_neighbor, f_ego};
  Tensor z = mie_encode(mie, maps);
  Tensor zs = row_block(z, 0, 1);
  Tensor zd = row_block(z, 1, 1);
  return translate_with_codes(bank, mmr, zs, zd, feature_tensor(f_neighbor),
                              feature_tensor(f_ego));
}

std::vector<int> topk_experts(const Tensor& alpha, int top_k) {
  const int k = static_cast<int>(alpha.numel());
  if (top_k < 1 || top_k > k)
    throw std::invalid_argument("topk_experts: top_k must be in [1, K]");
  std::vector<int> order(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    float va = alpha.values()[static_cast<size_t>(a)];
    float vb = alpha.values()[static_cast<size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  order.resize(static_cast<size_t>(top_k));
  return order;
}

Tensor classic_moe_forward(const ExpertBank& bank, const MmrParams& mmr,
                           const MieParams& mie, const FeatureMap& f_neighbor,
                           const FeatureMap& f_ego, int top_k) {
  const int k = bank.n_experts();
  if (top_k < 1 || top_k > k)
    throw std::invalid_argument("classic_moe_forward: top_k must be in [1, K]");
  std::vector<FeatureMap> maps{f_neighbor, f_ego};
  Tensor z = mie_encode(mie, maps);
  Routing r = route(mmr, mapping_descriptor(mmr, row_block(z, 0, 1),
                                            row_block(z, 1, 1)));
  Tensor alpha = reshape(r.alpha, {k});
  std::vector<int> order = topk_experts(alpha, top_k);

  Tensor picked = gather(alpha, make_idx(std::vector<int>(order)), {top_k});
  Tensor weights = div(picked, reduce_sum(picked, {0}, true));

  Tensor nbr = feature_tensor(f_neighbor);
  Tensor ego = feature_tensor(f_ego);
  Tensor out;
  for (int s = 0; s < top_k; ++s) {
    int expert = order[static_cast<size_t>(s)];
    std::vector<Tensor> phi;
    phi.reserve(bank.shared.size());
    for (size_t i = 0; i < bank.shared.size(); ++i)
      phi.push_back(add(bank.shared[i],
                        bank.experts[static_cast<size_t>(expert)][i]));
    Tensor pass = mct_forward(bank.arch, phi, nbr, ego);
    Tensor weighted = mul(pass, gather(weights, make_idx({s}), {1}));
    out = out.defined() ? add(out, weighted) : weighted;
  }
  return out;
}

}  // namespace unitrans
