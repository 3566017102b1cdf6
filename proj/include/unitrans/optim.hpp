// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "unitrans/tensor.hpp"

namespace unitrans {

// Adam with bias correction. step() consumes and clears gradients; parameters
// without an accumulated gradient this step are left untouched.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, float lr = 1e-3f,
                float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

  void step();
  void zero_grad();
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  float lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace unitrans
