// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>

namespace unitrans {

// %.9g rendering; round-trips float32 values and keeps CSV output stable.
std::string fmt_float(double v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// UNITRANS_THREADS, default 1. Values < 1 clamp to 1.
int worker_threads();

// Splits [0, n) into contiguous chunks. With worker_threads() == 1 this runs
// inline; output slots must be disjoint per index so results do not depend on
// the thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace unitrans
