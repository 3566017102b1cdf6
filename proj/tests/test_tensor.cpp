// Copyright (c) 2026, the unitrans authors
// SPDX-License-Identifier: Apache-2.0
#include "unitrans/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "unitrans/checkpoint.hpp"
#include "unitrans/optim.hpp"
#include "unitrans/rng.hpp"

using namespace unitrans;

namespace {

Tensor rand_uniform(Shape s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t = Tensor::zeros(std::move(s));
  for (float& v : t.values_mut()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise add and mul basics") {
  Tensor a = Tensor::from({2}, {1.0f, 2.0f});
  Tensor b = Tensor::from({2}, {3.0f, 4.0f});
  Tensor s = add(a, b);
  CHECK(s.values()[0] == doctest::Approx(4.0f));
  CHECK(s.values()[1] == doctest::Approx(6.0f));

  Tensor ones = Tensor::full({2}, 1.0f);
  Tensor m = mul(a, ones);
  CHECK(m.values()[0] == a.values()[0]);
  CHECK(m.values()[1] == a.values()[1]);
}

TEST_CASE("square gradient at x=3 is 6") {
  Tape tape;
  Tensor x = Tensor::scalar(3.0f, true);
  Tensor y = square(x);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0f));
}

TEST_CASE("broadcast add of [2,3] and [3]") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3}, {10, 20, 30});
  Tensor s = add(a, b);
  std::vector<float> want = {11, 22, 33, 14, 25, 36};
  for (int i = 0; i < 6; ++i) CHECK(s.values()[i] == doctest::Approx(want[i]));
}

TEST_CASE("broadcast gradient reduces over broadcast dims") {
  Tape tape;
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from({2}, {5, 6}, true);
  Tensor y = reduce_sum(mul(a, b), {0, 1});
  tape.backward(y);
  // d/db_j = sum over rows of a[:, j]
  CHECK(b.grad()[0] == doctest::Approx(4.0f));
  CHECK(b.grad()[1] == doctest::Approx(6.0f));
  CHECK(a.grad()[0] == doctest::Approx(5.0f));
  CHECK(a.grad()[3] == doctest::Approx(6.0f));
}

TEST_CASE("shape mismatch throws") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)matmul(a, b), std::invalid_argument);
}

TEST_CASE("log and sqrt domain errors") {
  Tensor bad = Tensor::from({2}, {1.0f, -1.0f});
  CHECK_THROWS_AS((void)log(bad), std::invalid_argument);
  CHECK_THROWS_AS((void)sqrt(bad), std::invalid_argument);
  Tensor zero = Tensor::from({1}, {0.0f});
  CHECK_THROWS_AS((void)log(zero), std::invalid_argument);
  CHECK_NOTHROW((void)sqrt(zero));
}

TEST_CASE("matmul against identity and dot product") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor p = matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(p.values()[i] == a.values()[i]);

  Tensor v = Tensor::from({3}, {1, 2, 3});
  Tensor w = Tensor::from({3, 1}, {4, 5, 6});
  Tensor d = matmul(v, w);
  CHECK(d.item() == doctest::Approx(32.0f));
}

TEST_CASE("matmul gradient equals row sums of the other factor") {
  Tape tape;
  Tensor a = Tensor::from({1, 2}, {1, 2}, true);
  Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Tensor y = reduce_sum(matmul(a, b), {0, 1});
  tape.backward(y);
  // dA[0,p] = sum_n B[p,n]
  CHECK(a.grad()[0] == doctest::Approx(3.0f));
  CHECK(a.grad()[1] == doctest::Approx(7.0f));
  // dB[p,n] = A[0,p]
  CHECK(b.grad()[0] == doctest::Approx(1.0f));
  CHECK(b.grad()[1] == doctest::Approx(1.0f));
  CHECK(b.grad()[2] == doctest::Approx(2.0f));
  CHECK(b.grad()[3] == doctest::Approx(2.0f));
}

TEST_CASE("bmm matches per-slice matmul, both layouts") {
  Rng rng(41);
  Tensor a = rand_uniform({3, 2, 4}, rng);
  Tensor b = rand_uniform({3, 4, 5}, rng);
  Tensor c = bmm(a, b);
  for (int bi = 0; bi < 3; ++bi) {
    std::vector<float> as(a.values().begin() + bi * 8,
                          a.values().begin() + (bi + 1) * 8);
    std::vector<float> bs(b.values().begin() + bi * 20,
                          b.values().begin() + (bi + 1) * 20);
    Tensor cs = matmul(Tensor::from({2, 4}, as), Tensor::from({4, 5}, bs));
    for (int i = 0; i < 10; ++i)
      CHECK(c.values()[bi * 10 + i] == doctest::Approx(cs.values()[i]));
  }
  Tensor bt = rand_uniform({3, 5, 4}, rng);
  Tensor c2 = bmm(a, bt, true);
  for (int bi = 0; bi < 3; ++bi)
    for (int m = 0; m < 2; ++m)
      for (int n = 0; n < 5; ++n) {
        float acc = 0;
        for (int p = 0; p < 4; ++p)
          acc += a.values()[bi * 8 + m * 4 + p] *
                 bt.values()[bi * 20 + n * 4 + p];
        CHECK(c2.values()[bi * 10 + m * 5 + n] == doctest::Approx(acc));
      }
}

TEST_CASE("softmax of uniform logits is uniform") {
  Tensor x = Tensor::full({3}, 0.7f);
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 3; ++i)
    CHECK(y.values()[i] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax of [ln 2, 0] is [2/3, 1/3]") {
  Tensor x = Tensor::from({2}, {std::log(2.0f), 0.0f});
  Tensor y = softmax(x, 0);
  CHECK(y.values()[0] == doctest::Approx(2.0f / 3.0f));
  CHECK(y.values()[1] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax is safe under large logits") {
  Tensor x = Tensor::from({2}, {1000.0f, 0.0f});
  Tensor y = softmax(x, 0);
  CHECK(std::isfinite(y.values()[0]));
  CHECK(y.values()[0] == doctest::Approx(1.0f));
  CHECK(y.values()[1] == doctest::Approx(0.0f));
}

TEST_CASE("softmax rows sum to one on every axis") {
  Rng rng(7);
  Tensor x = rand_uniform({4, 3, 5}, rng, -4.0f, 4.0f);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(x, axis);
    Tensor s = reduce_sum(y, {axis});
    for (float v : s.values()) CHECK(v == doctest::Approx(1.0f));
  }
}

TEST_CASE("layernorm of constant row is the bias") {
  Tensor x = Tensor::full({4}, 3.25f);
  Tensor g = Tensor::full({4}, 1.0f);
  Tensor b = Tensor::zeros({4});
  Tensor y = layernorm(x, g, b);
  for (float v : y.values()) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("layernorm of [1,-1] keeps values with unit gain") {
  Tensor x = Tensor::from({2}, {1.0f, -1.0f});
  Tensor g = Tensor::full({2}, 1.0f);
  Tensor b = Tensor::zeros({2});
  Tensor y = layernorm(x, g, b);
  CHECK(y.values()[0] == doctest::Approx(1.0f).epsilon(1e-4));
  CHECK(y.values()[1] == doctest::Approx(-1.0f).epsilon(1e-4));
}

TEST_CASE("reduce mean, variance, max oracles") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(reduce_mean(x, {0, 1}).item() == doctest::Approx(2.5f));
  Tensor c = Tensor::full({3, 3}, 5.0f);
  CHECK(reduce_variance(c, {0, 1}).item() == doctest::Approx(0.0f));
  Tensor m = reduce_max(x, {1});
  CHECK(m.values()[0] == doctest::Approx(2.0f));
  CHECK(m.values()[1] == doctest::Approx(4.0f));
}

TEST_CASE("reduce_max routes gradient to the first maximum on ties") {
  Tape tape;
  Tensor x = Tensor::from({3}, {1.0f, 5.0f, 5.0f}, true);
  Tensor y = reduce_max(x, {0});
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.0f));
  CHECK(x.grad()[1] == doctest::Approx(1.0f));
  CHECK(x.grad()[2] == doctest::Approx(0.0f));
}

TEST_CASE("reduce_variance matches a brute-force oracle") {
  Rng rng(11);
  Tensor x = rand_uniform({3, 4}, rng);
  Tensor v = reduce_variance(x, {1});
  for (int r = 0; r < 3; ++r) {
    double mu = 0;
    for (int j = 0; j < 4; ++j) mu += x.values()[r * 4 + j];
    mu /= 4;
    double s = 0;
    for (int j = 0; j < 4; ++j) {
      double d = x.values()[r * 4 + j] - mu;
      s += d * d;
    }
    CHECK(v.values()[r] == doctest::Approx(static_cast<float>(s / 4)));
  }
}

TEST_CASE("avg_pool2d block mean and identity pooling") {
  Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  CHECK(avg_pool2d(x, 1, 1).item() == doctest::Approx(2.5f));
  Tensor y = avg_pool2d(x, 2, 2);
  for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("fan-out accumulates gradient additively") {
  Tape tape;
  Tensor x = Tensor::scalar(3.0f, true);
  Tensor s = add(x, x);
  Tensor y = mul(s, s);  // y = (2x)^2, dy/dx = 8x = 24
  tape.backward(y);
  CHECK(y.item() == doctest::Approx(36.0f));
  CHECK(x.grad()[0] == doctest::Approx(24.0f));
}

TEST_CASE("disconnected leaf keeps an empty gradient") {
  Tape tape;
  Tensor x = Tensor::scalar(1.0f, true);
  Tensor z = Tensor::scalar(2.0f, true);
  Tensor y = square(x);
  tape.backward(y);
  CHECK(z.grad().empty());
}

TEST_CASE("backward root errors") {
  Tape tape;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = square(x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // non-scalar
  Tensor loose = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(tape.backward(loose), std::invalid_argument);  // off-tape
}

TEST_CASE("no-grad scope suppresses recording") {
  Tape tape;
  Tensor x = Tensor::scalar(2.0f, true);
  {
    NoGradGuard ng;
    Tensor y = square(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("gather forward and scatter-add backward with repeats") {
  Tape tape;
  Tensor x = Tensor::from({3}, {10, 20, 30}, true);
  auto idx = std::make_shared<std::vector<int>>(std::vector<int>{0, 0, 2});
  Tensor y = gather(x, idx, {3});
  CHECK(y.values()[0] == doctest::Approx(10.0f));
  CHECK(y.values()[1] == doctest::Approx(10.0f));
  CHECK(y.values()[2] == doctest::Approx(30.0f));
  tape.backward(reduce_sum(y, {0}));
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(0.0f));
  CHECK(x.grad()[2] == doctest::Approx(1.0f));
}

TEST_CASE("concat and stack round values through") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({3}, {3, 4, 5});
  std::vector<Tensor> parts = {a, b};
  Tensor c = concat_1d(parts);
  CHECK(c.numel() == 5);
  CHECK(c.values()[4] == doctest::Approx(5.0f));
  std::vector<Tensor> rows = {Tensor::from({2}, {1, 2}),
                              Tensor::from({2}, {3, 4})};
  Tensor s = stack_rows(rows);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.values()[3] == doctest::Approx(4.0f));
}

TEST_CASE("mix_params with a one-hot weight selects shared plus one expert") {
  Tensor shared = Tensor::from({2}, {1.0f, 2.0f});
  std::vector<Tensor> experts = {Tensor::from({2}, {10.0f, 20.0f}),
                                 Tensor::from({2}, {100.0f, 200.0f})};
  Tensor alpha = Tensor::from({2}, {0.0f, 1.0f});
  Tensor out = mix_params(alpha, &shared, experts);
  CHECK(out.values()[0] == 101.0f);
  CHECK(out.values()[1] == 202.0f);
}

TEST_CASE("mix_params gradient scales expert gradient by its weight") {
  Tape tape;
  Tensor shared = Tensor::from({2}, {1.0f, 1.0f}, true);
  std::vector<Tensor> experts = {Tensor::from({2}, {1.0f, 2.0f}, true),
                                 Tensor::from({2}, {3.0f, 4.0f}, true)};
  Tensor alpha = Tensor::from({2}, {0.25f, 0.75f}, true);
  Tensor out = mix_params(alpha, &shared, experts);
  tape.backward(reduce_sum(out, {0}));
  CHECK(shared.grad()[0] == doctest::Approx(1.0f));
  CHECK(experts[0].grad()[0] == doctest::Approx(0.25f));
  CHECK(experts[1].grad()[1] == doctest::Approx(0.75f));
  CHECK(alpha.grad()[0] == doctest::Approx(3.0f));   // sum of expert 0
  CHECK(alpha.grad()[1] == doctest::Approx(7.0f));   // sum of expert 1
}

TEST_CASE("grad_check passes on elementary compositions") {
  Rng rng(123);
  SUBCASE("sum of squares") {
    auto f = [](std::vector<Tensor>& p) { return reduce_sum(square(p[0]), {0}); };
    auto rep = grad_check(f, {rand_uniform({6}, rng)});
    CHECK(rep.pass);
  }
  SUBCASE("gelu tanh softplus chain") {
    auto f = [](std::vector<Tensor>& p) {
      return reduce_mean(softplus(tanh(gelu(p[0]))), {0});
    };
    auto rep = grad_check(f, {rand_uniform({8}, rng)});
    CHECK(rep.pass);
  }
  SUBCASE("matmul softmax composite") {
    auto f = [](std::vector<Tensor>& p) {
      Tensor y = softmax(matmul(p[0], p[1]), 1);
      return reduce_sum(mul(y, y), {0, 1});
    };
    auto rep = grad_check(f, {rand_uniform({3, 4}, rng), rand_uniform({4, 5}, rng)},
                          1e-3, 1e-3);
    CHECK(rep.pass);
  }
  SUBCASE("layernorm composite") {
    auto f = [](std::vector<Tensor>& p) {
      Tensor y = layernorm(p[0], p[1], p[2]);
      return reduce_mean(square(y), {0, 1});
    };
    auto rep = grad_check(
        f, {rand_uniform({4, 6}, rng), rand_uniform({6}, rng, 0.5f, 1.5f),
            rand_uniform({6}, rng)},
        1e-3, 1e-3);
    CHECK(rep.pass);
  }
  SUBCASE("division and maximum") {
    auto f = [](std::vector<Tensor>& p) {
      Tensor y = div(p[0], add_const(square(p[1]), 1.0f));
      return reduce_sum(maximum(y, neg(y)), {0});
    };
    auto rep = grad_check(f, {rand_uniform({5}, rng), rand_uniform({5}, rng)},
                          1e-3, 1e-3);
    CHECK(rep.pass);
  }
}

TEST_CASE("identical graphs produce bitwise identical values") {
  auto build = [] {
    Rng rng(99);
    Tensor x = rand_uniform({4, 4}, rng);
    Tensor w = rand_uniform({4, 4}, rng);
    Tensor y = softmax(matmul(gelu(x), w), 1);
    return std::vector<float>(y.values().begin(), y.values().end());
  };
  auto a = build();
  auto b = build();
  CHECK(a == b);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(5);
  NamedTensors named;
  named.emplace_back("b/two", rand_uniform({3, 5}, rng));
  named.emplace_back("a/one", rand_uniform({7}, rng));
  named.emplace_back("c/deep/tensor", rand_uniform({2, 2, 2}, rng));
  std::string path =
      (std::filesystem::temp_directory_path() / "ut_ckpt_test.utck").string();
  save_checkpoint(path, named);
  NamedTensors back = load_checkpoint(path);
  CHECK(back.size() == 3);
  CHECK(back[0].first == "a/one");  // sorted on disk
  for (const auto& [name, t] : named) {
    Tensor got = require_tensor(back, name);
    CHECK(got.shape() == t.shape());
    REQUIRE(got.numel() == t.numel());
    for (int64_t i = 0; i < t.numel(); ++i)
      CHECK(got.values()[i] == t.values()[i]);
  }
  // second save of the loaded set must produce identical bytes
  std::string path2 =
      (std::filesystem::temp_directory_path() / "ut_ckpt_test2.utck").string();
  save_checkpoint(path2, back);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), {});
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint rejects corrupted magic") {
  std::string path =
      (std::filesystem::temp_directory_path() / "ut_ckpt_bad.utck").string();
  std::ofstream os(path, std::ios::binary);
  os << "NOPE1234567890";
  os.close();
  CHECK_THROWS_AS((void)load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("adam minimizes a quadratic") {
  Tensor x = Tensor::scalar(0.0f, true);
  Adam opt({x}, 0.05f);
  for (int i = 0; i < 400; ++i) {
    Tape tape;
    Tensor loss = square(add_const(x, -3.0f));
    tape.backward(loss);
    opt.step();
  }
  CHECK(x.item() == doctest::Approx(3.0f).epsilon(1e-2));
}

TEST_CASE("global norm clip caps gradient magnitude") {
  Tensor a = Tensor::from({2}, {0, 0}, true);
  a.data->ensure_grad();
  a.data->grad[0] = 3.0f;
  a.data->grad[1] = 4.0f;
  std::vector<Tensor> ps = {a};
  double pre = clip_global_norm(ps, 1.0);
  CHECK(pre == doctest::Approx(5.0));
  double sq = 0;
  for (float g : a.grad()) sq += g * g;
  CHECK(std::sqrt(sq) == doctest::Approx(1.0));
}

TEST_CASE("madd counter tracks matmul work exactly") {
  MaddCounter::reset();
  Rng rng(3);
  Tensor a = rand_uniform({4, 5}, rng);
  Tensor w = rand_uniform({5, 6}, rng);
  (void)matmul(a, w);
  CHECK(MaddCounter::total() == 4u * 5u * 6u);
  MaddCounter::reset();
  Tensor x = rand_uniform({2, 3, 4}, rng);
  Tensor y = rand_uniform({2, 5, 4}, rng);
  (void)bmm(x, y, true);
  CHECK(MaddCounter::total() == 2u * 3u * 4u * 5u);
}
