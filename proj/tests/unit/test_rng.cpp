#include <doctest.h>

#include <set>

#include "egm/rng.hpp"

using namespace egm;

TEST_CASE("rng streams are deterministic under the seed") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42), d(43);
  bool differ = false;
  for (int i = 0; i < 16; ++i) differ |= (c.next_u64() != d.next_u64());
  CHECK(differ);
}

TEST_CASE("derived seeds separate by tag and index") {
  const auto s1 = derive_seed(7, "mask");
  const auto s2 = derive_seed(7, "data");
  const auto s3 = derive_seed(8, "mask");
  CHECK(s1 != s2);
  CHECK(s1 != s3);
  CHECK(derive_seed(7, "mask", 0) != derive_seed(7, "mask", 1));
  CHECK(derive_seed(7, "mask", 5) == derive_seed(7, "mask", 5));
}

TEST_CASE("uniform_int stays in range") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) CHECK(rng.uniform_int(7) < 7);
}

TEST_CASE("sample_without_replacement yields sorted distinct values") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(200));
    const int k = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n) + 1));
    const auto sample = rng.sample_without_replacement(n, k);
    CHECK(static_cast<int>(sample.size()) == k);
    std::set<int> seen(sample.begin(), sample.end());
    CHECK(seen.size() == sample.size());
    for (std::size_t i = 1; i < sample.size(); ++i) CHECK(sample[i - 1] < sample[i]);
    for (int v : sample) {
      CHECK(v >= 0);
      CHECK(v < n);
    }
  }
}

TEST_CASE("gaussian draws have roughly standard moments") {
  Rng rng(5);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double g = rng.gaussian();
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
}
