// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "unitrans/rng.hpp"

namespace unitrans {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local uint64_t g_madds = 0;

constexpr float kInvSqrt2 = 0.7071067811865475f;
constexpr float kInvSqrt2Pi = 0.3989422804014327f;

[[noreturn]] void fail(const std::string& op, const std::string& why) {
  throw std::invalid_argument(op + ": " + why);
}

void check(bool ok, const std::string& op, const std::string& why) {
  if (!ok) fail(op, why);
}

std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      fail(op, "shapes " + shape_str(a) + " and " + shape_str(b) +
                   " do not broadcast");
    out[n - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed through `out`, zero on broadcast dims.
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> native = row_strides(s);
  std::vector<int64_t> st(out.size(), 0);
  for (size_t i = 0; i < s.size(); ++i) {
    size_t oi = out.size() - s.size() + i;
    st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : native[i];
  }
  return st;
}

bool grad_enabled_for(std::initializer_list<const Tensor*> ins) {
  if (g_current_tape == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->data->requires_grad) return true;
  return false;
}

Tensor make_out(Shape shape, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values.assign(static_cast<size_t>(shape_numel(d->shape)), 0.0f);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

void record(std::shared_ptr<TensorData> out, std::function<void()> fn) {
  g_current_tape->record(std::move(out), std::move(fn));
}

// C[R,N] (+)= A[R,P] . W[P,N]
void mm(const float* a, const float* w, float* c, int64_t r_n, int64_t p_n,
        int64_t n_n) {
  for (int64_t r = 0; r < r_n; ++r) {
    float* crow = c + r * n_n;
    const float* arow = a + r * p_n;
    for (int64_t p = 0; p < p_n; ++p) {
      float av = arow[p];
      if (av == 0.0f) continue;
      const float* wrow = w + p * n_n;
      for (int64_t n = 0; n < n_n; ++n) crow[n] += av * wrow[n];
    }
  }
}

// dA[R,P] += dC[R,N] . W[P,N]^T
void mm_nt(const float* dc, const float* w, float* da, int64_t r_n,
           int64_t p_n, int64_t n_n) {
  for (int64_t r = 0; r < r_n; ++r) {
    const float* crow = dc + r * n_n;
    float* arow = da + r * p_n;
    for (int64_t p = 0; p < p_n; ++p) {
      const float* wrow = w + p * n_n;
      float acc = 0.0f;
      for (int64_t n = 0; n < n_n; ++n) acc += crow[n] * wrow[n];
      arow[p] += acc;
    }
  }
}

// dW[P,N] += A[R,P]^T . dC[R,N]
void mm_tn(const float* a, const float* dc, float* dw, int64_t r_n,
           int64_t p_n, int64_t n_n) {
  for (int64_t r = 0; r < r_n; ++r) {
    const float* arow = a + r * p_n;
    const float* crow = dc + r * n_n;
    for (int64_t p = 0; p < p_n; ++p) {
      float av = arow[p];
      if (av == 0.0f) continue;
      float* wrow = dw + p * n_n;
      for (int64_t n = 0; n < n_n; ++n) wrow[n] += av * crow[n];
    }
  }
}

enum class Unary {
  kNeg,
  kExp,
  kLog,
  kSqrt,
  kAbs,
  kSquare,
  kRelu,
  kGelu,
  kTanh,
  kSoftplus,
  kScale,
  kAddConst,
};

float unary_fwd(Unary k, float x, float c) {
  switch (k) {
    case Unary::kNeg: return -x;
    case Unary::kExp: return std::exp(x);
    case Unary::kLog: return std::log(x);
    case Unary::kSqrt: return std::sqrt(x);
    case Unary::kAbs: return std::fabs(x);
    case Unary::kSquare: return x * x;
    case Unary::kRelu: return x > 0.0f ? x : 0.0f;
    case Unary::kGelu: return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2));
    case Unary::kTanh: return std::tanh(x);
    case Unary::kSoftplus:
      return x > 0.0f ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    case Unary::kScale: return c * x;
    case Unary::kAddConst: return x + c;
  }
  return 0.0f;
}

float unary_bwd(Unary k, float x, float y, float c) {
  switch (k) {
    case Unary::kNeg: return -1.0f;
    case Unary::kExp: return y;
    case Unary::kLog: return 1.0f / x;
    case Unary::kSqrt: return 0.5f / y;
    case Unary::kAbs: return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
    case Unary::kSquare: return 2.0f * x;
    case Unary::kRelu: return x > 0.0f ? 1.0f : 0.0f;
    case Unary::kGelu: {
      float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
      float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
      return cdf + x * pdf;
    }
    case Unary::kTanh: return 1.0f - y * y;
    case Unary::kSoftplus: return 1.0f / (1.0f + std::exp(-x));
    case Unary::kScale: return c;
    case Unary::kAddConst: return 1.0f;
  }
  return 0.0f;
}

Tensor unary_op(const char* name, Unary k, const Tensor& x, float c = 0.0f) {
  check(x.defined(), name, "undefined input");
  if (k == Unary::kLog) {
    for (float v : x.values())
      if (!(v > 0.0f)) fail(name, "domain error: input must be > 0");
  }
  if (k == Unary::kSqrt) {
    for (float v : x.values())
      if (v < 0.0f) fail(name, "domain error: input must be >= 0");
  }
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out(x.shape(), rg);
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = unary_fwd(k, xv[i], c);
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    record(od, [xd, od, k, c, n] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      const float* xv2 = xd->values.data();
      const float* yv2 = od->values.data();
      float* xg = xd->grad.data();
      for (int64_t i = 0; i < n; ++i)
        xg[i] += g[i] * unary_bwd(k, xv2[i], yv2[i], c);
    });
  }
  return out;
}

enum class Binary { kAdd, kSub, kMul, kDiv, kMax };

Tensor binary_op(const char* name, Binary k, const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined(), name, "undefined input");
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  bool rg = grad_enabled_for({&a, &b});
  Tensor out = make_out(os, rg);
  int64_t n = out.numel();
  const float* av = a.data->values.data();
  const float* bv = b.data->values.data();
  float* ov = out.data->values.data();

  auto fwd = [k](float x, float y) {
    switch (k) {
      case Binary::kAdd: return x + y;
      case Binary::kSub: return x - y;
      case Binary::kMul: return x * y;
      case Binary::kDiv: return x / y;
      case Binary::kMax: return x >= y ? x : y;
    }
    return 0.0f;
  };

  bool same = a.shape() == b.shape();
  std::vector<int64_t> sa, sb;
  std::vector<int64_t> ost;
  if (same) {
    for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    sa = bcast_strides(a.shape(), os);
    sb = bcast_strides(b.shape(), os);
    ost = row_strides(os);
    size_t nd = os.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
      ov[i] = fwd(av[ia], bv[ib]);
      for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
        size_t ud = static_cast<size_t>(d);
        idx[ud]++;
        ia += sa[ud];
        ib += sb[ud];
        if (idx[ud] < os[ud]) break;
        idx[ud] = 0;
        ia -= sa[ud] * os[ud];
        ib -= sb[ud] * os[ud];
      }
    }
  }

  if (rg) {
    auto ad = a.data;
    auto bd = b.data;
    auto od = out.data;
    Shape osc = os;
    record(od, [ad, bd, od, k, n, same, osc] {
      const float* g = od->grad.data();
      const float* av2 = ad->values.data();
      const float* bv2 = bd->values.data();
      bool need_a = ad->requires_grad;
      bool need_b = bd->requires_grad;
      if (need_a) ad->ensure_grad();
      if (need_b) bd->ensure_grad();
      auto acc = [&](int64_t i, int64_t ia, int64_t ib) {
        float gi = g[i];
        switch (k) {
          case Binary::kAdd:
            if (need_a) ad->grad[static_cast<size_t>(ia)] += gi;
            if (need_b) bd->grad[static_cast<size_t>(ib)] += gi;
            break;
          case Binary::kSub:
            if (need_a) ad->grad[static_cast<size_t>(ia)] += gi;
            if (need_b) bd->grad[static_cast<size_t>(ib)] -= gi;
            break;
          case Binary::kMul:
            if (need_a) ad->grad[static_cast<size_t>(ia)] += gi * bv2[ib];
            if (need_b) bd->grad[static_cast<size_t>(ib)] += gi * av2[ia];
            break;
          case Binary::kDiv: {
            float inv = 1.0f / bv2[ib];
            if (need_a) ad->grad[static_cast<size_t>(ia)] += gi * inv;
            if (need_b)
              bd->grad[static_cast<size_t>(ib)] -= gi * av2[ia] * inv * inv;
            break;
          }
          case Binary::kMax:
            if (av2[ia] >= bv2[ib]) {
              if (need_a) ad->grad[static_cast<size_t>(ia)] += gi;
            } else if (need_b) {
              bd->grad[static_cast<size_t>(ib)] += gi;
            }
            break;
        }
      };
      if (same) {
        for (int64_t i = 0; i < n; ++i) acc(i, i, i);
      } else {
        auto sa2 = bcast_strides(ad->shape, osc);
        auto sb2 = bcast_strides(bd->shape, osc);
        size_t nd = osc.size();
        std::vector<int64_t> idx(nd, 0);
        int64_t ia = 0, ib = 0;
        for (int64_t i = 0; i < n; ++i) {
          acc(i, ia, ib);
          for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            size_t ud = static_cast<size_t>(d);
            idx[ud]++;
            ia += sa2[ud];
            ib += sb2[ud];
            if (idx[ud] < osc[ud]) break;
            idx[ud] = 0;
            ia -= sa2[ud] * osc[ud];
            ib -= sb2[ud] * osc[ud];
          }
        }
      }
    });
  }
  return out;
}

struct ReduceSpec {
  Shape out_shape;
  std::vector<int64_t> out_index;  // out slot per input element
  int64_t count = 1;               // elements per out slot
};

ReduceSpec reduce_spec(const char* name, const Shape& in,
                       const std::vector<int>& axes, bool keepdims) {
  size_t nd = in.size();
  std::vector<bool> red(nd, false);
  for (int ax : axes) {
    int a = ax < 0 ? ax + static_cast<int>(nd) : ax;
    check(a >= 0 && a < static_cast<int>(nd), name, "axis out of range");
    check(!red[static_cast<size_t>(a)], name, "duplicate axis");
    red[static_cast<size_t>(a)] = true;
  }
  ReduceSpec sp;
  for (size_t d = 0; d < nd; ++d) {
    if (red[d]) {
      sp.count *= in[d];
      if (keepdims) sp.out_shape.push_back(1);
    } else {
      sp.out_shape.push_back(in[d]);
    }
  }
  int64_t n = shape_numel(in);
  sp.out_index.resize(static_cast<size_t>(n));
  std::vector<int64_t> idx(nd, 0);
  std::vector<int64_t> ost;
  {
    Shape kept;
    for (size_t d = 0; d < nd; ++d) kept.push_back(red[d] ? 1 : in[d]);
    ost = row_strides(kept);
    for (size_t d = 0; d < nd; ++d)
      if (red[d]) ost[d] = 0;
  }
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    sp.out_index[static_cast<size_t>(i)] = oi;
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      oi += ost[ud];
      if (idx[ud] < in[ud]) break;
      idx[ud] = 0;
      oi -= ost[ud] * in[ud];
    }
  }
  return sp;
}

enum class Reduce { kSum, kMean, kMax, kVariance };

Tensor reduce_op(const char* name, Reduce k, const Tensor& x,
                 const std::vector<int>& axes, bool keepdims) {
  check(x.defined(), name, "undefined input");
  ReduceSpec sp = reduce_spec(name, x.shape(), axes, keepdims);
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out(sp.out_shape, rg);
  int64_t n = x.numel();
  int64_t on = out.numel();
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();

  auto argmax = std::make_shared<std::vector<int64_t>>();
  auto means = std::make_shared<std::vector<double>>();

  switch (k) {
    case Reduce::kSum:
    case Reduce::kMean: {
      std::vector<double> acc(static_cast<size_t>(on), 0.0);
      for (int64_t i = 0; i < n; ++i)
        acc[static_cast<size_t>(sp.out_index[static_cast<size_t>(i)])] += xv[i];
      double inv = k == Reduce::kMean ? 1.0 / static_cast<double>(sp.count) : 1.0;
      for (int64_t o = 0; o < on; ++o)
        ov[o] = static_cast<float>(acc[static_cast<size_t>(o)] * inv);
      break;
    }
    case Reduce::kMax: {
      argmax->assign(static_cast<size_t>(on), -1);
      for (int64_t i = 0; i < n; ++i) {
        int64_t o = sp.out_index[static_cast<size_t>(i)];
        int64_t& am = (*argmax)[static_cast<size_t>(o)];
        if (am < 0 || xv[i] > xv[am]) {
          am = i;
          ov[o] = xv[i];
        }
      }
      break;
    }
    case Reduce::kVariance: {
      std::vector<double> acc(static_cast<size_t>(on), 0.0);
      for (int64_t i = 0; i < n; ++i)
        acc[static_cast<size_t>(sp.out_index[static_cast<size_t>(i)])] += xv[i];
      means->resize(static_cast<size_t>(on));
      for (int64_t o = 0; o < on; ++o)
        (*means)[static_cast<size_t>(o)] =
            acc[static_cast<size_t>(o)] / static_cast<double>(sp.count);
      std::vector<double> sq(static_cast<size_t>(on), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        int64_t o = sp.out_index[static_cast<size_t>(i)];
        double d = xv[i] - (*means)[static_cast<size_t>(o)];
        sq[static_cast<size_t>(o)] += d * d;
      }
      for (int64_t o = 0; o < on; ++o)
        ov[o] = static_cast<float>(sq[static_cast<size_t>(o)] /
                                   static_cast<double>(sp.count));
      break;
    }
  }

  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    auto oidx = std::make_shared<std::vector<int64_t>>(std::move(sp.out_index));
    int64_t cnt = sp.count;
    record(od, [xd, od, oidx, argmax, means, k, n, on, cnt] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* xg = xd->grad.data();
      const float* xv2 = xd->values.data();
      switch (k) {
        case Reduce::kSum:
          for (int64_t i = 0; i < n; ++i)
            xg[i] += g[(*oidx)[static_cast<size_t>(i)]];
          break;
        case Reduce::kMean: {
          float inv = 1.0f / static_cast<float>(cnt);
          for (int64_t i = 0; i < n; ++i)
            xg[i] += g[(*oidx)[static_cast<size_t>(i)]] * inv;
          break;
        }
        case Reduce::kMax:
          for (int64_t o = 0; o < on; ++o)
            xg[(*argmax)[static_cast<size_t>(o)]] += g[o];
          break;
        case Reduce::kVariance: {
          float inv = 2.0f / static_cast<float>(cnt);
          for (int64_t i = 0; i < n; ++i) {
            int64_t o = (*oidx)[static_cast<size_t>(i)];
            float d = xv2[i] -
                      static_cast<float>((*means)[static_cast<size_t>(o)]);
            xg[i] += g[o] * inv * d;
          }
          break;
        }
      }
    });
  }
  return out;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  for (int d : s)
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim");
  return make_out(std::move(s), requires_grad);
}

Tensor Tensor::full(Shape s, float v, bool requires_grad) {
  Tensor t = zeros(std::move(s), requires_grad);
  std::fill(t.data->values.begin(), t.data->values.end(), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<float> vals, bool requires_grad) {
  if (shape_numel(s) != static_cast<int64_t>(vals.size()))
    throw std::invalid_argument("Tensor::from: value count " +
                                std::to_string(vals.size()) +
                                " does not match shape " + shape_str(s));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(s);
  d->values = std::move(vals);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape s, Rng& rng, float stdev, bool requires_grad) {
  Tensor t = zeros(std::move(s), requires_grad);
  for (float& v : t.data->values) v = rng.normal(0.0f, stdev);
  return t;
}

int Tensor::dim(int i) const {
  int nd = ndim();
  if (i < 0) i += nd;
  if (i < 0 || i >= nd)
    throw std::invalid_argument("Tensor::dim: index out of range");
  return data->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " +
                                shape_str(shape()));
  return data->values[0];
}

void Tensor::zero_grad() {
  if (!data->grad.empty())
    std::fill(data->grad.begin(), data->grad.end(), 0.0f);
}

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::shared_ptr<TensorData> out, std::function<void()> fn) {
  entries_.push_back({std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw std::invalid_argument("backward: root must be a defined scalar");
  int64_t at = -1;
  for (int64_t i = static_cast<int64_t>(entries_.size()) - 1; i >= 0; --i) {
    if (entries_[static_cast<size_t>(i)].out.get() == root.data.get()) {
      at = i;
      break;
    }
  }
  if (at < 0)
    throw std::invalid_argument("backward: root was not recorded on this tape");
  root.data->ensure_grad();
  root.data->grad[0] = 1.0f;
  for (int64_t i = at; i >= 0; --i) {
    Entry& e = entries_[static_cast<size_t>(i)];
    if (!e.out->grad.empty()) e.fn();
  }
}

NoGradGuard::NoGradGuard() : saved_(g_current_tape) { g_current_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_current_tape = saved_; }

void MaddCounter::add(uint64_t n) { g_madds += n; }
uint64_t MaddCounter::total() { return g_madds; }
void MaddCounter::reset() { g_madds = 0; }

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", Binary::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", Binary::kDiv, a, b); }
Tensor maximum(const Tensor& a, const Tensor& b) { return binary_op("maximum", Binary::kMax, a, b); }

Tensor neg(const Tensor& x) { return unary_op("neg", Unary::kNeg, x); }
Tensor exp(const Tensor& x) { return unary_op("exp", Unary::kExp, x); }
Tensor log(const Tensor& x) { return unary_op("log", Unary::kLog, x); }
Tensor sqrt(const Tensor& x) { return unary_op("sqrt", Unary::kSqrt, x); }
Tensor abs(const Tensor& x) { return unary_op("abs", Unary::kAbs, x); }
Tensor square(const Tensor& x) { return unary_op("square", Unary::kSquare, x); }
Tensor relu(const Tensor& x) { return unary_op("relu", Unary::kRelu, x); }
Tensor gelu(const Tensor& x) { return unary_op("gelu", Unary::kGelu, x); }
Tensor tanh(const Tensor& x) { return unary_op("tanh", Unary::kTanh, x); }
Tensor softplus(const Tensor& x) { return unary_op("softplus", Unary::kSoftplus, x); }
Tensor scale(const Tensor& x, float c) { return unary_op("scale", Unary::kScale, x, c); }
Tensor add_const(const Tensor& x, float c) { return unary_op("add_const", Unary::kAddConst, x, c); }

Tensor matmul(const Tensor& a, const Tensor& w) {
  check(a.defined() && w.defined(), "matmul", "undefined input");
  if (a.ndim() == 3 && w.ndim() == 3) return bmm(a, w, false);
  check(w.ndim() == 2, "matmul", "rhs must be 2-d, got " + shape_str(w.shape()));
  check(a.ndim() >= 1, "matmul", "lhs must have rank >= 1");
  int64_t p = a.dim(-1);
  check(p == w.dim(0), "matmul",
        "inner dims differ: " + shape_str(a.shape()) + " x " +
            shape_str(w.shape()));
  int64_t rows = a.numel() / p;
  int64_t n = w.dim(1);
  Shape os(a.shape().begin(), a.shape().end() - 1);
  os.push_back(static_cast<int>(n));
  bool rg = grad_enabled_for({&a, &w});
  Tensor out = make_out(os, rg);
  mm(a.data->values.data(), w.data->values.data(), out.data->values.data(),
     rows, p, n);
  MaddCounter::add(static_cast<uint64_t>(rows * p * n));
  if (rg) {
    auto ad = a.data;
    auto wd = w.data;
    auto od = out.data;
    record(od, [ad, wd, od, rows, p, n] {
      const float* g = od->grad.data();
      if (ad->requires_grad) {
        ad->ensure_grad();
        mm_nt(g, wd->values.data(), ad->grad.data(), rows, p, n);
      }
      if (wd->requires_grad) {
        wd->ensure_grad();
        mm_tn(ad->values.data(), g, wd->grad.data(), rows, p, n);
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  check(a.defined() && b.defined(), "bmm", "undefined input");
  check(a.ndim() == 3 && b.ndim() == 3, "bmm", "inputs must be 3-d");
  int64_t bs = a.dim(0);
  check(b.dim(0) == bs, "bmm", "batch dims differ");
  int64_t m = a.dim(1);
  int64_t p = a.dim(2);
  int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  int64_t bp = transpose_b ? b.dim(2) : b.dim(1);
  check(bp == p, "bmm",
        "inner dims differ: " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()));
  bool rg = grad_enabled_for({&a, &b});
  Tensor out = make_out({static_cast<int>(bs), static_cast<int>(m),
                         static_cast<int>(n)},
                        rg);
  const float* av = a.data->values.data();
  const float* bv = b.data->values.data();
  float* ov = out.data->values.data();
  for (int64_t bi = 0; bi < bs; ++bi) {
    const float* ab = av + bi * m * p;
    const float* bb = bv + bi * p * n;
    float* ob = ov + bi * m * n;
    if (!transpose_b) {
      mm(ab, bb, ob, m, p, n);
    } else {
      for (int64_t i = 0; i < m; ++i) {
        const float* arow = ab + i * p;
        float* orow = ob + i * n;
        for (int64_t j = 0; j < n; ++j) {
          const float* brow = bb + j * p;
          float acc = 0.0f;
          for (int64_t kk = 0; kk < p; ++kk) acc += arow[kk] * brow[kk];
          orow[j] = acc;
        }
      }
    }
  }
  MaddCounter::add(static_cast<uint64_t>(bs * m * p * n));
  if (rg) {
    auto ad = a.data;
    auto bd = b.data;
    auto od = out.data;
    record(od, [ad, bd, od, bs, m, p, n, transpose_b] {
      const float* g = od->grad.data();
      const float* av2 = ad->values.data();
      const float* bv2 = bd->values.data();
      if (ad->requires_grad) ad->ensure_grad();
      if (bd->requires_grad) bd->ensure_grad();
      for (int64_t bi = 0; bi < bs; ++bi) {
        const float* gb = g + bi * m * n;
        const float* ab = av2 + bi * m * p;
        const float* bb = bv2 + bi * p * n;
        if (!transpose_b) {
          if (ad->requires_grad)
            mm_nt(gb, bb, ad->grad.data() + bi * m * p, m, p, n);
          if (bd->requires_grad)
            mm_tn(ab, gb, bd->grad.data() + bi * p * n, m, p, n);
        } else {
          // out = A . B^T with B stored [n, p]
          if (ad->requires_grad)
            mm(gb, bb, ad->grad.data() + bi * m * p, m, n, p);
          if (bd->requires_grad)
            mm_tn(gb, ab, bd->grad.data() + bi * n * p, m, n, p);
        }
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  check(x.defined() && x.ndim() == 2, "transpose2d", "input must be 2-d");
  int64_t m = x.dim(0), n = x.dim(1);
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out({static_cast<int>(n), static_cast<int>(m)}, rg);
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    record(od, [xd, od, m, n] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* xg = xd->grad.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) xg[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  check(x.defined(), "softmax", "undefined input");
  int nd = x.ndim();
  int a = axis < 0 ? axis + nd : axis;
  check(a >= 0 && a < nd, "softmax", "axis out of range");
  int64_t n_ax = x.dim(a);
  int64_t inner = 1;
  for (int d = a + 1; d < nd; ++d) inner *= x.dim(d);
  int64_t outer = x.numel() / (n_ax * inner);
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out(x.shape(), rg);
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const float* xr = xv + o * n_ax * inner + in;
      float* yr = ov + o * n_ax * inner + in;
      float mx = xr[0];
      for (int64_t j = 1; j < n_ax; ++j)
        mx = std::max(mx, xr[j * inner]);
      double denom = 0.0;
      for (int64_t j = 0; j < n_ax; ++j) {
        float e = std::exp(xr[j * inner] - mx);
        yr[j * inner] = e;
        denom += e;
      }
      float inv = static_cast<float>(1.0 / denom);
      for (int64_t j = 0; j < n_ax; ++j) yr[j * inner] *= inv;
    }
  }
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    record(od, [xd, od, outer, n_ax, inner] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      const float* y = od->values.data();
      float* xg = xd->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n_ax * inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < n_ax; ++j)
            dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
          for (int64_t j = 0; j < n_ax; ++j) {
            int64_t at = base + j * inner;
            xg[at] += (g[at] - static_cast<float>(dot)) * y[at];
          }
        }
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps) {
  check(x.defined() && gain.defined() && bias.defined(), "layernorm",
        "undefined input");
  int64_t c = x.dim(-1);
  check(gain.ndim() == 1 && gain.dim(0) == c, "layernorm",
        "gain shape mismatch");
  check(bias.ndim() == 1 && bias.dim(0) == c, "layernorm",
        "bias shape mismatch");
  int64_t rows = x.numel() / c;
  bool rg = grad_enabled_for({&x, &gain, &bias});
  Tensor out = make_out(x.shape(), rg);
  const float* xv = x.data->values.data();
  const float* gv = gain.data->values.data();
  const float* bv = bias.data->values.data();
  float* ov = out.data->values.data();
  auto normed = std::make_shared<std::vector<float>>(
      static_cast<size_t>(rows * c));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = xv + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<size_t>(r)] = inv;
    float* nr = normed->data() + r * c;
    float* yr = ov + r * c;
    for (int64_t j = 0; j < c; ++j) {
      float nj = (xr[j] - static_cast<float>(mu)) * inv;
      nr[j] = nj;
      yr[j] = gv[j] * nj + bv[j];
    }
  }
  if (rg) {
    auto xd = x.data;
    auto gd = gain.data;
    auto bd = bias.data;
    auto od = out.data;
    record(od, [xd, gd, bd, od, normed, inv_std, rows, c] {
      const float* g = od->grad.data();
      const float* gv2 = gd->values.data();
      if (xd->requires_grad) xd->ensure_grad();
      if (gd->requires_grad) gd->ensure_grad();
      if (bd->requires_grad) bd->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* gr = g + r * c;
        const float* nr = normed->data() + r * c;
        if (gd->requires_grad || bd->requires_grad) {
          for (int64_t j = 0; j < c; ++j) {
            if (gd->requires_grad) gd->grad[static_cast<size_t>(j)] += gr[j] * nr[j];
            if (bd->requires_grad) bd->grad[static_cast<size_t>(j)] += gr[j];
          }
        }
        if (xd->requires_grad) {
          float inv = (*inv_std)[static_cast<size_t>(r)];
          double sum_dy = 0.0, sum_dyn = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            double dy = static_cast<double>(gr[j]) * gv2[j];
            sum_dy += dy;
            sum_dyn += dy * nr[j];
          }
          float m1 = static_cast<float>(sum_dy / static_cast<double>(c));
          float m2 = static_cast<float>(sum_dyn / static_cast<double>(c));
          float* xg = xd->grad.data() + r * c;
          for (int64_t j = 0; j < c; ++j) {
            float dy = gr[j] * gv2[j];
            xg[j] += inv * (dy - m1 - nr[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_op("reduce_sum", Reduce::kSum, x, axes, keepdims);
}
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_op("reduce_mean", Reduce::kMean, x, axes, keepdims);
}
Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_op("reduce_max", Reduce::kMax, x, axes, keepdims);
}
Tensor reduce_variance(const Tensor& x, const std::vector<int>& axes,
                       bool keepdims) {
  return reduce_op("reduce_variance", Reduce::kVariance, x, axes, keepdims);
}

Tensor avg_pool2d(const Tensor& x, int oh, int ow) {
  check(x.defined() && x.ndim() == 3, "avg_pool2d", "input must be [C,H,W]");
  int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  check(oh > 0 && ow > 0 && h % oh == 0 && w % ow == 0, "avg_pool2d",
        "output dims must evenly divide input dims");
  int64_t bh = h / oh, bw = w / ow;
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out({static_cast<int>(c), oh, ow}, rg);
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();
  float inv = 1.0f / static_cast<float>(bh * bw);
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int64_t di = 0; di < bh; ++di) {
          const float* row = xv + ci * h * w + (i * bh + di) * w + j * bw;
          for (int64_t dj = 0; dj < bw; ++dj) acc += row[dj];
        }
        ov[ci * oh * ow + i * ow + j] = static_cast<float>(acc) * inv;
      }
    }
  }
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    record(od, [xd, od, c, h, w, oh, ow, bh, bw, inv] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* xg = xd->grad.data();
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j) {
            float gv = g[ci * oh * ow + i * ow + j] * inv;
            for (int64_t di = 0; di < bh; ++di) {
              float* row = xg + ci * h * w + (i * bh + di) * w + j * bw;
              for (int64_t dj = 0; dj < bw; ++dj) row[dj] += gv;
            }
          }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  check(x.defined(), "reshape", "undefined input");
  check(shape_numel(new_shape) == x.numel(), "reshape",
        "element count mismatch: " + shape_str(x.shape()) + " -> " +
            shape_str(new_shape));
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out(std::move(new_shape), rg);
  std::memcpy(out.data->values.data(), x.data->values.data(),
              static_cast<size_t>(x.numel()) * sizeof(float));
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    int64_t n = x.numel();
    record(od, [xd, od, n] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* xg = xd->grad.data();
      for (int64_t i = 0; i < n; ++i) xg[i] += g[i];
    });
  }
  return out;
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<int>> idx,
              Shape out_shape) {
  check(x.defined() && idx != nullptr, "gather", "undefined input");
  check(shape_numel(out_shape) == static_cast<int64_t>(idx->size()), "gather",
        "index count does not match output shape");
  int64_t n = static_cast<int64_t>(idx->size());
  int64_t xn = x.numel();
  for (int i : *idx)
    check(i >= 0 && i < xn, "gather", "index out of range");
  bool rg = grad_enabled_for({&x});
  Tensor out = make_out(std::move(out_shape), rg);
  const float* xv = x.data->values.data();
  float* ov = out.data->values.data();
  const int* iv = idx->data();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[iv[i]];
  if (rg) {
    auto xd = x.data;
    auto od = out.data;
    record(od, [xd, od, idx, n] {
      if (!xd->requires_grad) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* xg = xd->grad.data();
      const int* iv2 = idx->data();
      for (int64_t i = 0; i < n; ++i) xg[iv2[i]] += g[i];
    });
  }
  return out;
}

Tensor concat_1d(std::span<const Tensor> parts) {
  check(!parts.empty(), "concat_1d", "no inputs");
  int64_t total = 0;
  bool rg = false;
  for (const Tensor& t : parts) {
    check(t.defined() && t.ndim() == 1, "concat_1d", "inputs must be 1-d");
    total += t.numel();
    rg = rg || t.requires_grad();
  }
  rg = rg && Tape::current() != nullptr;
  Tensor out = make_out({static_cast<int>(total)}, rg);
  float* ov = out.data->values.data();
  int64_t at = 0;
  for (const Tensor& t : parts) {
    std::memcpy(ov + at, t.data->values.data(),
                static_cast<size_t>(t.numel()) * sizeof(float));
    at += t.numel();
  }
  if (rg) {
    std::vector<std::shared_ptr<TensorData>> ins;
    for (const Tensor& t : parts) ins.push_back(t.data);
    auto od = out.data;
    record(od, [ins, od] {
      const float* g = od->grad.data();
      int64_t at2 = 0;
      for (const auto& in : ins) {
        int64_t n = in->numel();
        if (in->requires_grad) {
          in->ensure_grad();
          for (int64_t i = 0; i < n; ++i) in->grad[static_cast<size_t>(i)] += g[at2 + i];
        }
        at2 += n;
      }
    });
  }
  return out;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  check(!rows.empty(), "stack_rows", "no inputs");
  int64_t d = rows.front().numel();
  bool rg = false;
  for (const Tensor& t : rows) {
    check(t.defined() && t.ndim() == 1 && t.numel() == d, "stack_rows",
          "inputs must be 1-d with equal length");
    rg = rg || t.requires_grad();
  }
  rg = rg && Tape::current() != nullptr;
  Tensor out = make_out({static_cast<int>(rows.size()), static_cast<int>(d)}, rg);
  float* ov = out.data->values.data();
  for (size_t r = 0; r < rows.size(); ++r)
    std::memcpy(ov + static_cast<int64_t>(r) * d, rows[r].data->values.data(),
                static_cast<size_t>(d) * sizeof(float));
  if (rg) {
    std::vector<std::shared_ptr<TensorData>> ins;
    for (const Tensor& t : rows) ins.push_back(t.data);
    auto od = out.data;
    record(od, [ins, od, d] {
      const float* g = od->grad.data();
      for (size_t r = 0; r < ins.size(); ++r) {
        if (!ins[r]->requires_grad) continue;
        ins[r]->ensure_grad();
        for (int64_t i = 0; i < d; ++i)
          ins[r]->grad[static_cast<size_t>(i)] += g[static_cast<int64_t>(r) * d + i];
      }
    });
  }
  return out;
}

Tensor mix_params(const Tensor& alpha, const Tensor* shared,
                  std::span<const Tensor> experts) {
  check(alpha.defined() && alpha.ndim() == 1, "mix_params",
        "alpha must be 1-d");
  check(!experts.empty(), "mix_params", "no experts");
  check(alpha.numel() == static_cast<int64_t>(experts.size()), "mix_params",
        "alpha length does not match expert count");
  const Shape& es = experts.front().shape();
  for (const Tensor& e : experts)
    check(e.shape() == es, "mix_params", "expert shapes differ");
  if (shared != nullptr)
    check(shared->shape() == es, "mix_params", "shared shape differs");
  int64_t n = shape_numel(es);
  int64_t k = alpha.numel();
  bool rg = false;
  {
    if (alpha.requires_grad()) rg = true;
    if (shared && shared->requires_grad()) rg = true;
    for (const Tensor& e : experts)
      if (e.requires_grad()) rg = true;
    rg = rg && Tape::current() != nullptr;
  }
  Tensor out = make_out(es, rg);
  float* ov = out.data->values.data();
  if (shared != nullptr)
    std::memcpy(ov, shared->data->values.data(),
                static_cast<size_t>(n) * sizeof(float));
  const float* av = alpha.data->values.data();
  for (int64_t kk = 0; kk < k; ++kk) {
    float ak = av[kk];
    const float* ev = experts[static_cast<size_t>(kk)].data->values.data();
    for (int64_t i = 0; i < n; ++i) ov[i] += ak * ev[i];
  }
  MaddCounter::add(static_cast<uint64_t>(k * n));
  if (rg) {
    auto ad = alpha.data;
    std::shared_ptr<TensorData> sd = shared ? shared->data : nullptr;
    std::vector<std::shared_ptr<TensorData>> eds;
    for (const Tensor& e : experts) eds.push_back(e.data);
    auto od = out.data;
    record(od, [ad, sd, eds, od, n, k] {
      const float* g = od->grad.data();
      if (sd && sd->requires_grad) {
        sd->ensure_grad();
        for (int64_t i = 0; i < n; ++i) sd->grad[static_cast<size_t>(i)] += g[i];
      }
      const float* av2 = ad->values.data();
      bool need_alpha = ad->requires_grad;
      if (need_alpha) ad->ensure_grad();
      for (int64_t kk = 0; kk < k; ++kk) {
        const auto& ed = eds[static_cast<size_t>(kk)];
        const float* ev = ed->values.data();
        if (ed->requires_grad) {
          ed->ensure_grad();
          float ak = av2[kk];
          for (int64_t i = 0; i < n; ++i) ed->grad[static_cast<size_t>(i)] += ak * g[i];
        }
        if (need_alpha) {
          double acc = 0.0;
          for (int64_t i = 0; i < n; ++i)
            acc += static_cast<double>(g[i]) * ev[i];
          ad->grad[static_cast<size_t>(kk)] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

void backward(const Tensor& root) {
  Tape* t = Tape::current();
  if (t == nullptr)
    throw std::invalid_argument("backward: no active tape");
  t->backward(root);
}

GradCheckReport grad_check(
    const std::function<Tensor(std::vector<Tensor>&)>& f,
    std::vector<Tensor> point, double step, double tol) {
  GradCheckReport rep;
  std::vector<std::vector<float>> analytic;
  {
    Tape tape;
    for (Tensor& t : point) t.set_requires_grad(true);
    Tensor y = f(point);
    if (y.numel() != 1)
      throw std::invalid_argument("grad_check: f must return a scalar");
    tape.backward(y);
    for (Tensor& t : point) {
      if (t.grad().empty()) {
        analytic.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
      } else {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      }
      t.zero_grad();
    }
  }
  NoGradGuard ng;
  double h = step;
  for (size_t ti = 0; ti < point.size(); ++ti) {
    Tensor& t = point[ti];
    float* vals = t.data->values.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
      float keep = vals[i];
      vals[i] = static_cast<float>(keep + h);
      double fp = f(point).item();
      vals[i] = static_cast<float>(keep - h);
      double fm = f(point).item();
      vals[i] = keep;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[ti][static_cast<size_t>(i)];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1.0});
      double rel = std::fabs(a - numeric) / denom;
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      rep.n_checked++;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace unitrans
