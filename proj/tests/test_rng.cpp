#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "urltran/rng.hpp"

using urltran::Rng;
using urltran::mix_seed;

TEST_CASE("raw engine output matches the standardized mt19937_64 stream") {
    // The C++ standard pins mt19937_64's output exactly; the 10000th draw for
    // seed 5489 is 9981545732273789042. Checking the first draw as well guards
    // against an accidental engine or seeding swap.
    Rng rng(5489);
    CHECK(rng.bits() == 14514284786278117030ULL);
    Rng again(5489);
    uint64_t x = 0;
    for (int i = 0; i < 10000; ++i) x = again.bits();
    CHECK(x == 9981545732273789042ULL);
}

TEST_CASE("identical seeds give identical streams, different seeds diverge") {
    Rng a(42), b(42), c(43);
    bool all_equal = true;
    bool any_differ = false;
    for (int i = 0; i < 100; ++i) {
        uint64_t xa = a.bits();
        uint64_t xb = b.bits();
        uint64_t xc = c.bits();
        all_equal = all_equal && xa == xb;
        any_differ = any_differ || xa != xc;
    }
    CHECK(all_equal);
    CHECK(any_differ);
}

TEST_CASE("mix_seed is deterministic and spreads indices apart") {
    CHECK(mix_seed(7, 0) == mix_seed(7, 0));
    std::set<uint64_t> derived;
    for (uint64_t i = 0; i < 1000; ++i) derived.insert(mix_seed(123, i));
    CHECK(derived.size() == 1000);  // no collisions across indices
    CHECK(mix_seed(1, 5) != mix_seed(2, 5));
}

TEST_CASE("uniform lies in [0, 1) and is centered") {
    Rng rng(1);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("below covers its range uniformly and rejects n == 0") {
    Rng rng(2);
    std::array<int, 7> counts{};
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        uint64_t x = rng.below(7);
        REQUIRE(x < 7);
        counts[static_cast<size_t>(x)]++;
    }
    for (int c : counts) {
        // Expected 10000 per bucket; 4 sigma is about 380.
        CHECK(std::abs(c - 10000) < 500);
    }
    CHECK(rng.below(1) == 0);
    CHECK_THROWS_AS(rng.below(0), urltran::Error);
}

TEST_CASE("bernoulli frequency tracks p") {
    Rng rng(3);
    int hits = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) hits += rng.bernoulli(0.3) ? 1 : 0;
    CHECK(static_cast<double>(hits) / n == doctest::Approx(0.3).epsilon(0.02));
    Rng deg(4);
    for (int i = 0; i < 100; ++i) CHECK_FALSE(deg.bernoulli(0.0));
}

TEST_CASE("gaussian has the requested moments and replays deterministically") {
    Rng rng(5);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = rng.gaussian(2.0, 3.0);
        sum += x;
        sq += x * x;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    CHECK(mean == doctest::Approx(2.0).epsilon(0.02));
    CHECK(std::sqrt(var) == doctest::Approx(3.0).epsilon(0.02));

    // The cached Box-Muller spare must be part of the reproducible stream.
    Rng a(6), b(6);
    for (int i = 0; i < 64; ++i) CHECK(a.gaussian(0.0, 1.0) == b.gaussian(0.0, 1.0));
}

TEST_CASE("shuffle permutes in place and hits every order of three items") {
    Rng rng(7);
    std::vector<int> items(100);
    for (int i = 0; i < 100; ++i) items[i] = i;
    std::vector<int> shuffled = items;
    rng.shuffle(shuffled);
    CHECK(shuffled != items);  // 1/100! chance of a false alarm
    std::vector<int> sorted = shuffled;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == items);

    // All 6 permutations of {0,1,2} should appear with roughly equal counts.
    std::map<std::vector<int>, int> orders;
    const int n = 60000;
    for (int i = 0; i < n; ++i) {
        std::vector<int> trio{0, 1, 2};
        rng.shuffle(trio);
        orders[trio]++;
    }
    REQUIRE(orders.size() == 6);
    for (const auto& [order, count] : orders) {
        CHECK(std::abs(count - 10000) < 500);
    }

    // Same seed, same permutation.
    Rng a(8), b(8);
    std::vector<int> va(50), vb(50);
    for (int i = 0; i < 50; ++i) va[i] = vb[i] = i;
    a.shuffle(va);
    b.shuffle(vb);
    CHECK(va == vb);
}
