// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line orchestrator: JSON config in, checkpoints and CSV reports
// out, with a fixed exit-code taxonomy (0 ok, 2 config, 3 divergence,
// 4 checkpoint mismatch, 5 leakage).
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unitrans/checkpoint.hpp"
#include "unitrans/errors.hpp"
#include "unitrans/eval.hpp"
#include "unitrans/mie.hpp"
#include "unitrans/optim.hpp"
#include "unitrans/rng.hpp"
#include "unitrans/tensor.hpp"
#include "unitrans/trainer.hpp"
#include "unitrans/translator.hpp"
#include "unitrans/workbench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unitrans;

namespace {

constexpr const char* kVersion = "unitrans 1.0.0";

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitLeakage = 5;

uint64_t fnv1a(std::string_view text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Config: strict JSON. Unknown keys are rejected, missing keys fall back to
// the documented defaults, and the seed is mandatory.
// ---------------------------------------------------------------------------

struct RunConfig {
  WorkbenchConfig workbench;
  uint64_t split_seed = 0;
  int n_train = 8;
  int n_emerging = 2;
  uint64_t train_scene_lo = 0, train_scene_hi = 40;
  uint64_t test_scene_lo = 40, test_scene_hi = 48;
  Stage1Config stage1;
  int bank_k = 8;
  int bank_shared = 1;
  MctArchitecture arch;
  Stage2Config stage2;
  uint64_t seed = 0;
  std::string out_dir = "out";
  json raw;  // parsed document, hashed into provenance
};

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("config: unknown key '" +
                        (where.empty() ? it.key() : where + "." + it.key()) +
                        "'");
  }
}

const json kEmptyObject = json::object();

const json& section(const json& j, const char* name) {
  if (!j.contains(name)) return kEmptyObject;
  const json& s = j.at(name);
  if (!s.is_object())
    throw ConfigError("config: '" + std::string(name) +
                      "' must be an object");
  return s;
}

double get_number(const json& s, const std::string& where, const char* key,
                  double dflt) {
  if (!s.contains(key)) return dflt;
  const json& v = s.at(key);
  if (!v.is_number())
    throw ConfigError("config: '" + where + "." + key + "' must be a number");
  return v.get<double>();
}

int get_int(const json& s, const std::string& where, const char* key,
            int dflt) {
  if (!s.contains(key)) return dflt;
  const json& v = s.at(key);
  if (!v.is_number_integer())
    throw ConfigError("config: '" + where + "." + key +
                      "' must be an integer");
  return v.get<int>();
}

uint64_t get_u64(const json& s, const std::string& where, const char* key,
                 uint64_t dflt) {
  if (!s.contains(key)) return dflt;
  const json& v = s.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<int64_t>() < 0))
    throw ConfigError("config: '" + where + "." + key +
                      "' must be a non-negative integer");
  return v.get<uint64_t>();
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: root must be an object");
  reject_unknown(j, "", {"workbench", "split", "mie", "bank", "stage2",
                         "seed", "out_dir"});
  if (!j.contains("seed"))
    throw ConfigError("config: missing mandatory field 'seed'");

  RunConfig rc;
  rc.raw = j;
  rc.seed = get_u64(j, "", "seed", 0);
  if (j.contains("out_dir")) {
    if (!j.at("out_dir").is_string())
      throw ConfigError("config: 'out_dir' must be a string");
    rc.out_dir = j.at("out_dir").get<std::string>();
  }

  const json& wbj = section(j, "workbench");
  reject_unknown(wbj, "workbench", {"grid", "channels", "agents", "noise_max"});
  rc.workbench.grid = get_int(wbj, "workbench", "grid", 32);
  rc.workbench.channels = get_int(wbj, "workbench", "channels", 16);
  rc.workbench.agents = get_int(wbj, "workbench", "agents", 4);
  rc.workbench.noise_max = static_cast<float>(
      get_number(wbj, "workbench", "noise_max", 0.05));

  const json& spj = section(j, "split");
  reject_unknown(spj, "split",
                 {"seed", "n_train", "n_emerging", "train_scene_lo",
                  "train_scene_hi", "test_scene_lo", "test_scene_hi"});
  rc.split_seed = get_u64(spj, "split", "seed", rc.seed);
  rc.n_train = get_int(spj, "split", "n_train", 8);
  rc.n_emerging = get_int(spj, "split", "n_emerging", 2);
  rc.train_scene_lo = get_u64(spj, "split", "train_scene_lo", 0);
  rc.train_scene_hi = get_u64(spj, "split", "train_scene_hi", 40);
  rc.test_scene_lo = get_u64(spj, "split", "test_scene_lo", 40);
  rc.test_scene_hi = get_u64(spj, "split", "test_scene_hi", 48);

  const json& mij = section(j, "mie");
  reject_unknown(mij, "mie",
                 {"d", "tau", "lambda_is", "steps", "scenes_per_step", "lr"});
  rc.stage1.code_dim = get_int(mij, "mie", "d", 8);
  rc.stage1.tau = static_cast<float>(get_number(mij, "mie", "tau", 0.9));
  rc.stage1.lambda_cls =
      static_cast<float>(get_number(mij, "mie", "lambda_is", 0.1));
  rc.stage1.steps = get_int(mij, "mie", "steps", 200);
  rc.stage1.scenes_per_step = get_int(mij, "mie", "scenes_per_step", 8);
  rc.stage1.lr = static_cast<float>(get_number(mij, "mie", "lr", 1e-3));
  rc.stage1.seed = rc.seed;

  const json& bkj = section(j, "bank");
  reject_unknown(bkj, "bank", {"K", "shared", "blocks", "window", "heads"});
  rc.bank_k = get_int(bkj, "bank", "K", 8);
  rc.bank_shared = get_int(bkj, "bank", "shared", 1);
  if (rc.bank_shared != 0 && rc.bank_shared != 1)
    throw ConfigError("config: 'bank.shared' must be 0 or 1");
  rc.arch.channels = rc.workbench.channels;
  rc.arch.n_blocks = get_int(bkj, "bank", "blocks", 2);
  rc.arch.window = get_int(bkj, "bank", "window", 4);
  rc.arch.heads = get_int(bkj, "bank", "heads", 4);

  const json& s2j = section(j, "stage2");
  reject_unknown(s2j, "stage2",
                 {"lambda_feat", "lambda_ctr", "lambda_r", "tau_alpha",
                  "top_k", "steps", "lr", "batch_scenes", "report_every"});
  rc.stage2.lambda_feat =
      static_cast<float>(get_number(s2j, "stage2", "lambda_feat", 5.0));
  rc.stage2.lambda_ctr =
      static_cast<float>(get_number(s2j, "stage2", "lambda_ctr", 0.01));
  rc.stage2.lambda_r =
      static_cast<float>(get_number(s2j, "stage2", "lambda_r", 0.001));
  rc.stage2.tau_alpha =
      static_cast<float>(get_number(s2j, "stage2", "tau_alpha", 0.9));
  rc.stage2.top_k = get_int(s2j, "stage2", "top_k", 3);
  rc.stage2.steps = get_int(s2j, "stage2", "steps", 500);
  rc.stage2.lr = static_cast<float>(get_number(s2j, "stage2", "lr", 1e-3));
  rc.stage2.batch_scenes = get_int(s2j, "stage2", "batch_scenes", 2);
  rc.stage2.report_every = get_int(s2j, "stage2", "report_every", 50);
  rc.stage2.seed = rc.seed;
  return rc;
}

ModalitySplit split_of(const RunConfig& rc) {
  return make_split(rc.split_seed, rc.n_train, rc.n_emerging,
                    rc.train_scene_lo, rc.train_scene_hi, rc.test_scene_lo,
                    rc.test_scene_hi);
}

// ---------------------------------------------------------------------------
// Artifact plumbing.
// ---------------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_provenance(const fs::path& path, const char* command,
                      const RunConfig& rc, const ModalitySplit& split) {
  json p;
  p["command"] = command;
  p["version"] = kVersion;
  p["seed"] = rc.seed;
  p["config_hash"] = hex64(fnv1a(rc.raw.dump()));
  p["train_modalities"] = split.train_modalities;
  p["emerging_modalities"] = split.emerging_modalities;
  p["train_scenes"] = {split.train_scene_lo, split.train_scene_hi};
  p["test_scenes"] = {split.test_scene_lo, split.test_scene_hi};
  write_text(path, p.dump(2) + "\n");
}

std::vector<uint64_t> trained_modalities_of(const fs::path& ckpt_dir) {
  fs::path path = ckpt_dir / "provenance.json";
  std::ifstream in(path);
  if (!in)
    throw ConfigError("eval: no provenance.json in " + ckpt_dir.string() +
                      "; cannot verify the leakage guard");
  json p;
  try {
    p = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval: bad provenance.json: ") + e.what());
  }
  if (!p.contains("train_modalities") || !p["train_modalities"].is_array())
    throw ConfigError("eval: provenance.json lacks train_modalities");
  std::vector<uint64_t> out;
  for (const json& v : p["train_modalities"]) out.push_back(v.get<uint64_t>());
  return out;
}

ExpertBank build_bank(const RunConfig& rc) {
  ExpertBank bank = bank_init(rc.arch, rc.bank_k, rc.seed);
  if (rc.bank_shared == 0) {
    for (Tensor& t : bank.shared)
      std::fill(t.data->values.begin(), t.data->values.end(), 0.0f);
    bank.shared_frozen = true;
  }
  return bank;
}

MieParams load_mie(const fs::path& path, const RunConfig& rc) {
  MieParams mie = mie_from_named(load_checkpoint(path.string()));
  if (mie.code_dim() != rc.stage1.code_dim)
    throw CheckpointMismatchError(
        "stage-1 checkpoint has d = " + std::to_string(mie.code_dim()) +
        " but the config says d = " + std::to_string(rc.stage1.code_dim));
  if (mie.channels() != rc.workbench.channels)
    throw CheckpointMismatchError(
        "stage-1 checkpoint has " + std::to_string(mie.channels()) +
        " channels but the config says " +
        std::to_string(rc.workbench.channels));
  return mie;
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

int cmd_pretrain_stage1(const std::string& config_path) {
  RunConfig rc = load_config(config_path);
  Workbench wb(rc.workbench);
  ModalitySplit split = split_of(rc);

  Stage1Result res = stage1_train(wb, split, rc.stage1);

  fs::create_directories(rc.out_dir);
  fs::path out(rc.out_dir);
  save_checkpoint((out / "mie.ckpt").string(), mie_to_named(res.params));

  std::ostringstream curve;
  curve << "step,loss\n";
  for (size_t i = 0; i < res.curve.size(); ++i)
    curve << i << ',' << res.curve[i] << '\n';
  write_text(out / "stage1_loss.csv", curve.str());

  std::vector<uint64_t> test_scenes;
  for (uint64_t s = split.test_scene_lo; s < split.test_scene_hi; ++s)
    test_scenes.push_back(s);
  IntrinsicSpaceReport report = intrinsic_space_report(
      wb, res.params, split.train_modalities, test_scenes);
  write_text(out / "intrinsic_report.csv", report.to_csv());

  write_provenance(out / "provenance.json", "pretrain-stage1", rc, split);

  std::cout << "stage 1 done: " << res.curve.size() << " steps, final loss "
            << res.curve.back() << "\n"
            << "intrinsic silhouette " << report.silhouette_code
            << " (raw " << report.silhouette_raw << ")\n"
            << "wrote " << (out / "mie.ckpt").string() << ", "
            << (out / "stage1_loss.csv").string() << ", "
            << (out / "intrinsic_report.csv").string() << "\n";
  return kExitOk;
}

int cmd_train_stage2(const std::string& config_path,
                     const std::string& stage1_path) {
  RunConfig rc = load_config(config_path);
  Workbench wb(rc.workbench);
  ModalitySplit split = split_of(rc);
  fs::path out(rc.out_dir);

  fs::path mie_path =
      stage1_path.empty() ? out / "mie.ckpt" : fs::path(stage1_path);
  MieParams mie = load_mie(mie_path, rc);

  ExpertBank bank = build_bank(rc);
  MmrParams mmr = mmr_init(rc.stage1.code_dim, rc.bank_k, rc.seed + 1);

  Stage2Result run = stage2_train(wb, mie, bank, mmr, split, rc.stage2);

  fs::create_directories(rc.out_dir);
  NamedTensors named = bank_to_named(bank);
  for (auto& [name, t] : mmr_to_named(mmr)) named.emplace_back(name, t);
  for (auto& [name, t] : head_to_named(run.head)) named.emplace_back(name, t);
  save_checkpoint((out / "translator.ckpt").string(), std::move(named));
  write_text(out / "stage2_metrics.csv", stage2_metrics_csv(run));
  write_provenance(out / "provenance.json", "train-stage2", rc, split);

  const Stage2StepRow& last = run.curve.back();
  std::cout << "stage 2 done: " << run.curve.size() << " steps, total "
            << last.total << " (task " << last.l_task << ", feat "
            << last.l_feat << ", ctr " << last.l_ctr << ", reg " << last.l_r
            << ")\n"
            << "encoder frozen: checksum "
            << (run.mie_checksum_before == run.mie_checksum_after
                    ? "constant"
                    : "CHANGED")
            << "\n"
            << "wrote " << (out / "translator.ckpt").string() << ", "
            << (out / "stage2_metrics.csv").string() << "\n";
  if (run.mie_checksum_before != run.mie_checksum_after) return kExitError;
  return kExitOk;
}

std::vector<std::string> parse_values(const std::string& axis,
                                      const std::string& values_csv) {
  if (!values_csv.empty()) {
    std::vector<std::string> out;
    std::istringstream is(values_csv);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(item);
    return out;
  }
  if (axis == "d") return {"2", "4", "8", "16"};
  if (axis == "K") return {"1", "2", "4", "8"};
  if (axis == "shared") return {"0", "1"};
  return {"feat", "ctr", "r", "none"};
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_dir_arg,
             const std::string& mode, const std::string& values_csv,
             int trials) {
  RunConfig rc = load_config(config_path);
  Workbench wb(rc.workbench);
  ModalitySplit split = split_of(rc);
  fs::create_directories(rc.out_dir);
  fs::path out(rc.out_dir);
  fs::path ckpt_dir(ckpt_dir_arg.empty() ? rc.out_dir : ckpt_dir_arg);

  if (mode.rfind("ablate:", 0) == 0) {
    std::string axis = mode.substr(7);
    AblationConfig base;
    base.workbench = rc.workbench;
    base.arch = rc.arch;
    base.n_experts = rc.bank_k;
    base.split = split;
    base.stage1 = rc.stage1;
    base.stage2 = rc.stage2;
    std::string csv = ablation_sweep(axis, parse_values(axis, values_csv),
                                     base);
    fs::path path = out / ("ablate_" + axis + ".csv");
    write_text(path, csv);
    write_provenance(out / "eval_provenance.json", "eval", rc, split);
    std::cout << "ablation over " << axis << ":\n" << csv
              << "wrote " << path.string() << "\n";
    return kExitOk;
  }

  MieParams mie = load_mie(ckpt_dir / "mie.ckpt", rc);
  NamedTensors named = load_checkpoint((ckpt_dir / "translator.ckpt").string());
  ExpertBank bank = bank_from_named(named);
  MmrParams mmr = mmr_from_named(named);
  TaskHead head = head_from_named(named);

  if (mode == "zeroshot") {
    std::vector<uint64_t> trained = trained_modalities_of(ckpt_dir);
    EvalReport report =
        zero_shot_eval(wb, mie, bank, mmr, head, split, trained);
    write_text(out / "zeroshot.csv", report.to_csv());
    RoutingReport routing = routing_consistency(wb, mie, bank, mmr, split);
    write_text(out / "routing.csv", routing.to_csv());
    write_provenance(out / "eval_provenance.json", "eval", rc, split);

    double gain = report.mean_mse_identity > 0.0
                      ? 1.0 - report.mean_mse_translated /
                                  report.mean_mse_identity
                      : 0.0;
    std::cout << "zero-shot over " << report.rows.size() << " pairs:\n"
              << "  teacher MSE " << report.mean_mse_translated
              << " translated vs " << report.mean_mse_identity
              << " identity (" << 100.0 * gain << "% lower)\n"
              << "  emerging silhouette " << report.silhouette_emerging
              << " (all modalities " << report.silhouette_all << ")\n"
              << "  routing cosine within " << routing.within_mean
              << " vs across " << routing.across_mean << "\n"
              << "wrote " << (out / "zeroshot.csv").string() << ", "
              << (out / "routing.csv").string() << "\n";
    return kExitOk;
  }

  if (mode == "profile") {
    ProfileReport report =
        profile(wb, mie, bank, mmr, rc.stage2.top_k, trials);
    write_text(out / "profile.csv", report.to_csv());
    write_provenance(out / "eval_provenance.json", "eval", rc, split);
    std::cout << "profile (top_k " << rc.stage2.top_k << ", " << trials
              << " trials):\n"
              << "  unitrans " << report.unitrans.madds << " madds, "
              << report.unitrans.passes << " pass, "
              << report.unitrans.wall_ms_median << " ms\n"
              << "  classic  " << report.classic.madds << " madds, "
              << report.classic.passes << " passes, "
              << report.classic.wall_ms_median << " ms\n"
              << "  ratio " << report.ratio << "\n"
              << "wrote " << (out / "profile.csv").string() << "\n";
    if (report.unitrans.passes != 1 ||
        report.classic.passes != static_cast<uint64_t>(rc.stage2.top_k)) {
      std::cerr << "pass-count invariant violated\n";
      return kExitError;
    }
    return kExitOk;
  }

  throw ConfigError("eval: unknown mode '" + mode +
                    "' (expected zeroshot, profile, or ablate:<axis>)");
}

// ---------------------------------------------------------------------------
// Selftest: fast hermetic invariant checks.
// ---------------------------------------------------------------------------

int cmd_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok, const std::string& detail = "") {
    std::cout << (ok ? "[ok]   " : "[FAIL] ") << name;
    if (!ok && !detail.empty()) std::cout << ": " << detail;
    std::cout << "\n";
    if (!ok) ++failures;
  };
  auto near = [](double got, double want, double tol) {
    return std::abs(got - want) <= tol;
  };

  {
    Tensor x = Tensor::from({2, 3}, {0.5f, -1.0f, 2.0f, 3.0f, 3.0f, 3.0f});
    Tensor s = softmax(x, 1);
    double r0 = s.values()[0] + s.values()[1] + s.values()[2];
    double r1 = s.values()[3] + s.values()[4] + s.values()[5];
    Tensor shifted = softmax(add(x, Tensor::full({2, 3}, 100.0f)), 1);
    double drift = 0.0;
    for (size_t i = 0; i < 6; ++i)
      drift = std::max(drift, std::abs(static_cast<double>(s.values()[i]) -
                                       shifted.values()[i]));
    check("softmax rows sum to one and shift out the max",
          near(r0, 1.0, 1e-6) && near(r1, 1.0, 1e-6) && drift < 1e-6);
  }

  {
    Rng rng(31);
    Tensor x = Tensor::randn({4, 8}, rng, 3.0f);
    Tensor y = layernorm(x, Tensor::full({8}, 1.0f), Tensor::zeros({8}));
    double worst_mean = 0.0, worst_var = 0.0;
    for (int r = 0; r < 4; ++r) {
      double m = 0.0, v = 0.0;
      for (int c = 0; c < 8; ++c) m += y.values()[static_cast<size_t>(r * 8 + c)];
      m /= 8.0;
      for (int c = 0; c < 8; ++c) {
        double d = y.values()[static_cast<size_t>(r * 8 + c)] - m;
        v += d * d;
      }
      v /= 8.0;
      worst_mean = std::max(worst_mean, std::abs(m));
      worst_var = std::max(worst_var, std::abs(v - 1.0));
    }
    check("layernorm rows are standardized",
          worst_mean < 1e-5 && worst_var < 1e-3);
  }

  {
    double want = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    Tensor g = gelu(Tensor::from({2}, {1.0f, 0.0f}));
    check("gelu matches the exact error-function form",
          near(g.values()[0], want, 1e-6) && g.values()[1] == 0.0f);
  }

  {
    Rng rng(32);
    Tensor a = Tensor::from({3, 4}, [&] {
      std::vector<float> v(12);
      for (float& x : v) x = rng.normal();
      return v;
    }(), true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0f);
    Tape tape;
    Tensor loss = reduce_sum(square(matmul(a, b)), {0, 1});
    tape.backward(loss);
    bool ok = true;
    const double h = 1e-3;
    for (size_t i = 0; i < 12 && ok; i += 5) {
      std::vector<float> up(a.values().begin(), a.values().end());
      std::vector<float> dn = up;
      up[i] += static_cast<float>(h);
      dn[i] -= static_cast<float>(h);
      double fu =
          reduce_sum(square(matmul(Tensor::from({3, 4}, std::move(up)), b)),
                     {0, 1})
              .item();
      double fd =
          reduce_sum(square(matmul(Tensor::from({3, 4}, std::move(dn)), b)),
                     {0, 1})
              .item();
      double want = (fu - fd) / (2.0 * h);
      double got = a.grad()[i];
      ok = std::abs(got - want) <= 1e-3 * std::max(1.0, std::abs(want));
    }
    check("matmul gradient agrees with finite differences", ok);
  }

  {
    Tensor codes = Tensor::from({3, 2}, {1, 0, 1, 0, 0, 1});
    std::vector<int> labels = {0, 0, 1};
    double want = 2.0 * std::log(1.0 + std::exp(-1.0));
    check("contrastive loss three-code value",
          near(info_nce(codes, labels, 1.0f).item(), want, 1e-3));
  }

  {
    std::vector<TranslationPair> pairs(2);
    pairs[0].alpha = Tensor::from({2}, {0.5f, 0.5f});
    pairs[0].logits = Tensor::zeros({2});
    pairs[1].alpha = Tensor::from({2}, {0.5f, 0.5f});
    pairs[1].logits = Tensor::zeros({2});
    double l2 = std::log(2.0);
    check("router regularizer uniform-batch value",
          near(router_reg_loss(pairs, 1).item(), 1.0 + l2 * l2, 1e-3));
    auto [imp, load] = importance_load(pairs, 1);
    double imp_total = imp.values()[0] + imp.values()[1];
    double load_total = load.values()[0] + load.values()[1];
    check("importance and load totals are pinned by the batch",
          near(imp_total, 2.0, 1e-5) && load_total == 2.0);
  }

  {
    MctArchitecture arch{.channels = 4, .window = 2, .heads = 2, .n_blocks = 1};
    ExpertBank bank = bank_init(arch, 3, 77);
    Tensor one_hot = Tensor::from({3}, {0.0f, 1.0f, 0.0f});
    std::vector<Tensor> phi = instantiate(bank, one_hot);
    bool exact = true;
    for (size_t i = 0; i < phi.size() && exact; ++i) {
      Tensor want = add(bank.shared[i], bank.experts[1][i]);
      for (size_t v = 0; v < static_cast<size_t>(phi[i].numel()); ++v)
        if (phi[i].values()[v] != want.values()[v]) {
          exact = false;
          break;
        }
    }
    check("one-hot instantiation is the shared plus one expert", exact);

    Tensor mix = Tensor::from({3}, {0.25f, 0.5f, 0.25f});
    std::vector<Tensor> blend = instantiate(bank, mix);
    double worst = 0.0;
    for (size_t i = 0; i < blend.size(); ++i)
      for (size_t v = 0; v < static_cast<size_t>(blend[i].numel()); ++v) {
        double want = bank.shared[i].values()[v];
        for (int k = 0; k < 3; ++k)
          want += mix.values()[static_cast<size_t>(k)] *
                  bank.experts[static_cast<size_t>(k)][i].values()[v];
        worst = std::max(worst,
                         std::abs(want - blend[i].values()[v]));
      }
    check("convex mixing is linear in the experts", worst < 1e-6);
  }

  {
    MctArchitecture arch{.channels = 4, .window = 2, .heads = 2, .n_blocks = 1};
    std::vector<Tensor> inert;
    for (const ManifestEntry& e : mct_manifest(arch)) {
      bool gain = e.name.ends_with("ln1/g") || e.name.ends_with("ln2/g");
      inert.push_back(gain ? Tensor::full(e.shape, 1.0f)
                           : Tensor::zeros(e.shape));
    }
    Rng rng(78);
    Tensor nbr = Tensor::randn({4, 4, 4}, rng, 1.0f);
    Tensor ego = Tensor::randn({4, 4, 4}, rng, 1.0f);
    Tensor y = mct_forward(arch, inert, nbr, ego);
    bool identity = true;
    for (size_t i = 0; i < static_cast<size_t>(y.numel()); ++i)
      if (y.values()[i] != nbr.values()[i]) {
        identity = false;
        break;
      }
    check("zero-weight backbone is the identity map", identity);
  }

  {
    fs::path dir = fs::temp_directory_path() /
                   ("unitrans-selftest-" + std::to_string(fnv1a(kVersion)));
    fs::create_directories(dir);
    fs::path good = dir / "roundtrip.ckpt";
    Rng rng(79);
    NamedTensors named = {{"a/w", Tensor::randn({3, 5}, rng, 1.0f)},
                          {"b/v", Tensor::randn({7}, rng, 0.5f)}};
    save_checkpoint(good.string(), named);
    NamedTensors back = load_checkpoint(good.string());
    bool exact = back.size() == named.size();
    uint64_t before = tensors_checksum(named);
    uint64_t after = tensors_checksum(back);
    check("checkpoint round trip is bit-exact", exact && before == after);

    fs::path bad = dir / "corrupt.ckpt";
    write_text(bad, "XXXX not a checkpoint");
    bool threw = false;
    try {
      load_checkpoint(bad.string());
    } catch (const CheckpointError&) {
      threw = true;
    }
    check("corrupted magic raises the checkpoint error", threw);
    fs::remove_all(dir);
  }

  std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
  return failures == 0 ? kExitOk : kExitError;
}

int run_guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const CheckpointMismatchError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const LeakageError& e) {
    std::cerr << "leakage: " << e.what() << "\n";
    return kExitLeakage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("UNITRANS_THREADS")) {
    char* end = nullptr;
    long n = std::strtol(threads, &end, 10);
    if (end == threads || *end != '\0' || n < 1) {
      std::cerr << "config error: UNITRANS_THREADS must be a positive "
                   "integer, got '"
                << threads << "'\n";
      return kExitConfig;
    }
    // The engine is single-threaded; any cap of one or more is satisfied.
  }

  CLI::App app{"any-to-any feature translation runner"};
  app.require_subcommand(1);

  std::string config_path, stage1_path, ckpt_dir, mode = "zeroshot", values;
  int trials = 100;

  CLI::App* s1 =
      app.add_subcommand("pretrain-stage1", "fit the intrinsic encoder");
  s1->add_option("config", config_path, "JSON run configuration")->required();

  CLI::App* s2 = app.add_subcommand(
      "train-stage2", "fit the router, expert bank, and task head");
  s2->add_option("config", config_path, "JSON run configuration")->required();
  s2->add_option("--stage1", stage1_path,
                 "stage-1 checkpoint (default <out_dir>/mie.ckpt)");

  CLI::App* ev = app.add_subcommand("eval", "score trained checkpoints");
  ev->add_option("config", config_path, "JSON run configuration")->required();
  ev->add_option("--ckpt", ckpt_dir,
                 "checkpoint directory (default <out_dir>)");
  ev->add_option("--mode", mode, "zeroshot | profile | ablate:<axis>");
  ev->add_option("--values", values, "comma-separated ablation values");
  ev->add_option("--trials", trials, "timed calls for the profiler");

  CLI::App* st =
      app.add_subcommand("selftest", "run the fast invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (s1->parsed())
    return run_guarded([&] { return cmd_pretrain_stage1(config_path); });
  if (s2->parsed())
    return run_guarded(
        [&] { return cmd_train_stage2(config_path, stage1_path); });
  if (ev->parsed())
    return run_guarded(
        [&] { return cmd_eval(config_path, ckpt_dir, mode, values, trials); });
  if (st->parsed()) return run_guarded([&] { return cmd_selftest(); });
  return kExitConfig;
}
