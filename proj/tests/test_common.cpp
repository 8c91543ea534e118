#include <gtest/gtest.h>

#include "lisard/common.hpp"

using namespace lisard;

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex(std::string("")),
              "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex(std::string("abc")),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(std::string(
                  "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")),
              "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST(Sha256, IncrementalMatchesOneShot) {
    std::string data(100000, 'x');
    Sha256 h;
    h.update(data.data(), 1);
    h.update(data.data() + 1, 63);
    h.update(data.data() + 64, data.size() - 64);
    auto d = h.digest();
    EXPECT_EQ(to_hex(d.data(), d.size()), sha256_hex(data));
}

TEST(Rng, StreamsAreDeterministic) {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
    }
    RngStream c(43);
    EXPECT_NE(RngStream(42).next_u64(), c.next_u64());
}

TEST(Rng, MixSeedSeparatesPurposes) {
    EXPECT_NE(mix_seed(7, stream::noise, 1, 0), mix_seed(7, stream::noise, 1, 1));
    EXPECT_NE(mix_seed(7, stream::noise, 1, 0), mix_seed(7, stream::attack, 1, 0));
    EXPECT_EQ(mix_seed(7, stream::noise, 1, 0), mix_seed(7, stream::noise, 1, 0));
}

TEST(Rng, NormalMomentsRoughlyStandard) {
    RngStream rng(123);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.01);
    EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, BelowStaysInRange) {
    RngStream rng(5);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(rng.below(7), 7u);
    }
}

TEST(Rng, ShuffleIsSeedDeterministic) {
    std::vector<int> a{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> b = a;
    RngStream ra(9), rb(9);
    ra.shuffle(a);
    rb.shuffle(b);
    EXPECT_EQ(a, b);
}

TEST(Fmt, StableFloatFormatting) {
    EXPECT_EQ(fmt_g(0.5), "0.5");
    EXPECT_EQ(fmt_g(1.0 / 3.0), "0.333333333");
    EXPECT_EQ(fmt_g(0.0), "0");
}

TEST(Errors, RequireThrowsContractError) {
    EXPECT_NO_THROW(require(true, "fine"));
    EXPECT_THROW(require(false, "broken"), ContractError);
}
