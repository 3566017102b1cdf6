// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace unitrans {

// Exit-code taxonomy for the command-line surface: 2 = config, 3 =
// divergence, 4 = checkpoint mismatch, 5 = emerging-modality leakage.

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what)
      : std::runtime_error(what) {}
};

class CheckpointMismatchError : public std::runtime_error {
 public:
  explicit CheckpointMismatchError(const std::string& what)
      : std::runtime_error(what) {}
};

class LeakageError : public std::runtime_error {
 public:
  explicit LeakageError(const std::string& what) : std::runtime_error(what) {}
};

// A contrastive batch in which no anchor has a positive partner.
class DegenerateBatchError : public std::runtime_error {
 public:
  explicit DegenerateBatchError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace unitrans
