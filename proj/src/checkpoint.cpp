// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace unitrans {

namespace {

constexpr char kMagic[4] = {'U', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, NamedTensors named) {
  std::sort(named.begin(), named.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 1; i < named.size(); ++i)
    if (named[i].first == named[i - 1].first)
      throw CheckpointError(path + ": duplicate tensor name '" +
                            named[i].first + "'");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(path + ": cannot open for writing");
  os.write(kMagic, 4);
  put<uint32_t>(os, kVersion);
  put<uint32_t>(os, static_cast<uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    if (!t.defined())
      throw CheckpointError(path + ": undefined tensor '" + name + "'");
    if (name.size() > 0xffff)
      throw CheckpointError(path + ": tensor name too long");
    put<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint8_t>(os, 0);  // f32
    put<uint8_t>(os, static_cast<uint8_t>(t.ndim()));
    for (int d : t.shape()) put<uint32_t>(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!os) throw CheckpointError(path + ": write failed");
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(path + ": cannot open");
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(path + ": bad magic, not a checkpoint file");
  uint32_t version = get<uint32_t>(is, path);
  if (version != kVersion)
    throw CheckpointError(path + ": unsupported version " +
                          std::to_string(version));
  uint32_t count = get<uint32_t>(is, path);
  NamedTensors out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = get<uint16_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError(path + ": truncated checkpoint");
    uint8_t dtype = get<uint8_t>(is, path);
    if (dtype != 0)
      throw CheckpointError(path + ": unsupported dtype " +
                            std::to_string(dtype));
    uint8_t ndim = get<uint8_t>(is, path);
    Shape shape(ndim);
    int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      uint32_t v = get<uint32_t>(is, path);
      if (v == 0 || v > 0x7fffffffu)
        throw CheckpointError(path + ": invalid dim");
      shape[static_cast<size_t>(d)] = static_cast<int>(v);
      numel *= v;
    }
    std::vector<float> vals(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw CheckpointError(path + ": truncated checkpoint");
    out.emplace_back(std::move(name), Tensor::from(shape, std::move(vals)));
  }
  return out;
}

const Tensor* find_tensor(const NamedTensors& named, const std::string& name) {
  for (const auto& [n, t] : named)
    if (n == name) return &t;
  return nullptr;
}

Tensor require_tensor(const NamedTensors& named, const std::string& name) {
  const Tensor* t = find_tensor(named, name);
  if (t == nullptr)
    throw CheckpointError("missing tensor '" + name + "' in checkpoint");
  return *t;
}

uint64_t tensors_checksum(const NamedTensors& named) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named) {
    for (char c : name) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ull;
    }
    const auto vals = t.values();
    const auto* bytes = reinterpret_cast<const uint8_t*>(vals.data());
    for (size_t i = 0; i < vals.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace unitrans
