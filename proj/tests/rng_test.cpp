#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "petapter/rng.hpp"

using petapter::SplitMix64;

TEST(SplitMix64Test, ReferenceSequence) {
    // Published test value for the splitmix64 reference implementation.
    SplitMix64 zero(0);
    EXPECT_EQ(zero.next_u64(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(zero.next_u64(), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(zero.next_u64(), 0x06C45D188009454FULL);

    SplitMix64 forty_two(42);
    EXPECT_EQ(forty_two.next_u64(), 0xBDD732262FEB6E95ULL);
    EXPECT_EQ(forty_two.next_u64(), 0x28EFE333B266F103ULL);
}

TEST(SplitMix64Test, DoublesInUnitInterval) {
    SplitMix64 rng(42);
    EXPECT_DOUBLE_EQ(rng.next_double(), 0.7415648787718233);
    EXPECT_DOUBLE_EQ(rng.next_double(), 0.1599103928769201);
    for (int i = 0; i < 10000; ++i) {
        const double v = rng.next_double();
        EXPECT_GE(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(SplitMix64Test, BoundedDrawsAreInRange) {
    SplitMix64 rng(7);
    for (int i = 0; i < 10000; ++i) {
        EXPECT_LT(rng.next_below(13), 13u);
    }
}

TEST(SplitMix64Test, GaussianMoments) {
    SplitMix64 rng(123);
    double sum = 0, sum_sq = 0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        const double g = rng.gauss();
        sum += g;
        sum_sq += g * g;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(var, 1.0, 0.03);
}

TEST(SplitMix64Test, ShuffleIsDeterministic) {
    std::vector<int> a{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> b = a;
    SplitMix64 r1(99), r2(99);
    r1.shuffle(a);
    r2.shuffle(b);
    EXPECT_EQ(a, b);
    std::vector<int> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(SplitMix64Test, SampleWithoutReplacementIsDistinct) {
    SplitMix64 rng(5);
    auto picks = rng.sample_without_replacement(100, 40);
    ASSERT_EQ(picks.size(), 40u);
    std::set<std::size_t> unique(picks.begin(), picks.end());
    EXPECT_EQ(unique.size(), 40u);
    for (std::size_t p : picks) {
        EXPECT_LT(p, 100u);
    }
}

TEST(SplitMix64Test, DerivedSeedsDiffer) {
    const std::uint64_t a = petapter::derive_seed(1, 0);
    const std::uint64_t b = petapter::derive_seed(1, 1);
    const std::uint64_t c = petapter::derive_seed(2, 0);
    EXPECT_NE(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a, petapter::derive_seed(1, 0));
}
