// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace unitrans {

class Rng;

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Single-precision, row-major storage. Gradient buffer stays empty until the
// backward pass touches it.
struct TensorData {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0f);
  }
};

// Cheap value handle over shared storage. Ops are free functions.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : data(std::move(d)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, float v, bool requires_grad = false);
  static Tensor from(Shape s, std::vector<float> vals, bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);
  static Tensor randn(Shape s, Rng& rng, float stdev, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data); }
  const Shape& shape() const { return data->shape; }
  int ndim() const { return static_cast<int>(data->shape.size()); }
  int dim(int i) const;  // negative indices count from the back
  int64_t numel() const { return data->numel(); }
  float item() const;  // scalar tensors only

  std::span<const float> values() const { return data->values; }
  std::span<float> values_mut() { return data->values; }
  std::span<const float> grad() const { return data->grad; }
  bool requires_grad() const { return data->requires_grad; }
  void set_requires_grad(bool rg) { data->requires_grad = rg; }
  void zero_grad();

  std::shared_ptr<TensorData> data;
};

// Scoped recording of operations for reverse-mode differentiation. Tapes nest
// (inner scope shadows outer) and are thread-local; they are never shared
// between threads.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::shared_ptr<TensorData> out, std::function<void()> backward);
  // Seeds d(root)/d(root) = 1 and replays recorded ops in reverse, visiting
  // each exactly once. Root must be a scalar produced under this tape.
  void backward(const Tensor& root);
  size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorData> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
  Tape* prev_;
};

// Disables recording for its lifetime; forward values still computed.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Thread-local multiply-add counter fed by matmul-family forwards.
struct MaddCounter {
  static void add(uint64_t n);
  static uint64_t total();
  static void reset();
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);   // rejects inputs <= 0
Tensor sqrt(const Tensor& x);  // rejects inputs < 0
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor scale(const Tensor& x, float c);
Tensor add_const(const Tensor& x, float c);

// ---- linear algebra ----
// a [..., P] x w [P, N] -> [..., N]; leading dims of a are flattened rows.
Tensor matmul(const Tensor& a, const Tensor& w);
// a [B, M, P] x b [B, P, N] -> [B, M, N]; transpose_b treats b as [B, N, P].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor transpose2d(const Tensor& x);

// ---- structured ----
Tensor softmax(const Tensor& x, int axis);
// Normalizes over the last axis; gain and bias have that axis's length.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-5f);
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes,
                  bool keepdims = false);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes,
                   bool keepdims = false);
// Ties resolve to the first (lowest flat index) maximum.
Tensor reduce_max(const Tensor& x, const std::vector<int>& axes,
                  bool keepdims = false);
// Population variance (divides by the reduced count).
Tensor reduce_variance(const Tensor& x, const std::vector<int>& axes,
                       bool keepdims = false);
// x [C, H, W] -> [C, oh, ow]; H % oh == 0 and W % ow == 0.
Tensor avg_pool2d(const Tensor& x, int oh, int ow);

// Same element count, new dims; copies storage.
Tensor reshape(const Tensor& x, Shape new_shape);
// out[i] = x[idx[i]]; backward scatter-adds. idx entries are flat indices.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<int>> idx,
              Shape out_shape);
Tensor concat_1d(std::span<const Tensor> parts);
// n tensors of shape [d] -> [n, d]
Tensor stack_rows(std::span<const Tensor> rows);

// out = shared + sum_k alpha[k] * experts[k] (shared may be null).
Tensor mix_params(const Tensor& alpha, const Tensor* shared,
                  std::span<const Tensor> experts);

void backward(const Tensor& root);

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t n_checked = 0;
  bool pass = false;
};

// Central differences against one reverse pass. Relative error is
// |a - n| / max(|a|, |n|, 1).
GradCheckReport grad_check(
    const std::function<Tensor(std::vector<Tensor>&)>& f,
    std::vector<Tensor> point, double step = 1e-3, double tol = 1e-4);

}  // namespace unitrans
