// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <vector>

namespace unitrans {

std::string fmt_float(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << content;
  if (!os) throw std::runtime_error(path + ": write failed");
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int worker_threads() {
  const char* env = std::getenv("UNITRANS_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  int workers = worker_threads();
  if (workers <= 1 || n <= 1) {
    body(0, n);
    return;
  }
  int64_t chunks = std::min<int64_t>(workers, n);
  int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> threads;
  for (int64_t c = 0; c < chunks; ++c) {
    int64_t lo = c * per;
    int64_t hi = std::min(n, lo + per);
    if (lo >= hi) break;
    threads.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace unitrans
