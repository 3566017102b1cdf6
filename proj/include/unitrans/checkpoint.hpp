// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unitrans/tensor.hpp"

namespace unitrans {

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Binary container: magic "UTCK", u32 version, u32 count, then per tensor
// u16 name length + name bytes + u8 dtype (0 = f32) + u8 ndim + u32 dims +
// raw little-endian f32 payload. Entries are written sorted by name so a
// save/load/save round trip is bit-exact.
void save_checkpoint(const std::string& path, NamedTensors named);
NamedTensors load_checkpoint(const std::string& path);

// nullptr when absent.
const Tensor* find_tensor(const NamedTensors& named, const std::string& name);
// Throws CheckpointError when absent.
Tensor require_tensor(const NamedTensors& named, const std::string& name);

// FNV-1a over the value bytes of every tensor, in the given order.
uint64_t tensors_checksum(const NamedTensors& named);

}  // namespace unitrans
