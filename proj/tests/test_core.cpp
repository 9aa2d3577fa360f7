#include <doctest.h>

#include <cmath>
#include <set>

#include "ubcl/rng.hpp"
#include "ubcl/tensor.hpp"

using namespace ubcl;

TEST_CASE("matmul examples") {
  const TensorF eye({2, 2}, {1, 0, 0, 1});
  const TensorF a({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a) == a);
  CHECK(matmul(a, eye) == a);
  CHECK(matmul(TensorF({1, 2}, {1, 2}), TensorF({2, 1}, {0, 0})) == TensorF({1, 1}, {0}));
  CHECK(matmul(a, TensorF({2, 1}, {5, 6})) == TensorF({2, 1}, {17, 39}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const TensorF a({2, 3}), b({2, 2});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("A * I == A exactly on random tensors") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(6);
    TensorD a({m, n});
    for (auto& v : a.values()) v = rng.normal();
    TensorD eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
    CHECK(matmul(a, eye) == a);
  }
}

TEST_CASE("elementwise ops") {
  CHECK(relu(TensorF({3}, {-1, 0, 2})) == TensorF({3}, {0, 0, 2}));
  CHECK(sigmoid(TensorD({1}, {0.0}))[0] == doctest::Approx(0.5));
  CHECK(ubcl::tanh(TensorD({1}, {0.5}))[0] == doctest::Approx(0.46211716).epsilon(1e-8));
  CHECK(ubcl::exp(TensorD({1}, {1.0}))[0] == doctest::Approx(std::exp(1.0)));
  CHECK(add(TensorF({2}, {1, 2}), TensorF({2}, {3, 4})) == TensorF({2}, {4, 6}));
  CHECK(mul(TensorF({2}, {1, 2}), TensorF({2}, {3, 4})) == TensorF({2}, {3, 8}));
  CHECK_THROWS_AS(add(TensorF({2}), TensorF({3})), ShapeError);
}

TEST_CASE("ops are pure") {
  Rng rng(3);
  TensorF a({4, 5});
  for (auto& v : a.values()) v = static_cast<float>(rng.normal());
  const TensorF copy = a;
  CHECK(sigmoid(a) == sigmoid(a));
  CHECK(a == copy);
}

TEST_CASE("tensor shape contract") {
  TensorF t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == shape_numel(t.shape()));
  const TensorF r = t.reshape({3, 2});
  CHECK(r.size() == t.size());
  CHECK(r.shape() == Shape{3, 2});
  CHECK(t.shape() == Shape{2, 3});
  CHECK_THROWS_AS(t.reshape({4, 2}), ShapeError);
  CHECK_THROWS(TensorF({2, 2}, std::vector<float>{1, 2, 3}));
}

TEST_CASE("rng_derive determinism and separation") {
  Rng a = rng_derive(42, 0), b = rng_derive(42, 0);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  for (std::uint64_t i = 0; i < 8; ++i) {
    for (std::uint64_t j = i + 1; j < 8; ++j) {
      Rng x = rng_derive(42, i), y = rng_derive(42, j);
      bool differ = false;
      for (int k = 0; k < 16; ++k) differ |= x.next_u64() != y.next_u64();
      CHECK(differ);
    }
  }
  Rng r = rng_derive(42, 3);
  const double u = r.uniform();
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
}

TEST_CASE("xoshiro256** seeded through SplitMix64") {
  // SplitMix64 from state 0: published first output.
  std::uint64_t s = 0;
  CHECK(splitmix64(s) == 0xe220a8397b1dcdafULL);

  // Independent transcription of the reference algorithm.
  std::uint64_t st[4], sm = 1234;
  for (auto& w : st) {
    std::uint64_t z = (sm += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    w = z ^ (z >> 31);
  }
  auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
  Rng rng(1234);
  for (int i = 0; i < 32; ++i) {
    const std::uint64_t expect = rotl(st[1] * 5, 7) * 9;
    const std::uint64_t t = st[1] << 17;
    st[2] ^= st[0];
    st[3] ^= st[1];
    st[1] ^= st[2];
    st[0] ^= st[3];
    st[2] ^= t;
    st[3] = rotl(st[3], 45);
    CHECK(rng.next_u64() == expect);
  }
}

TEST_CASE("rng distributions") {
  Rng rng(11);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  std::vector<int> items = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  rng.shuffle(items);
  CHECK(std::multiset<int>(items.begin(), items.end()) == std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}
