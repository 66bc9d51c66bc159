#include "evseg/prompts.hpp"
#include "evseg/testing/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace evseg;

namespace {

FloatMap random_map(std::size_t h, std::size_t w, std::mt19937_64& rng, int levels = 0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> q(0, std::max(levels - 1, 0));
    FloatMap m(h, w);
    for (double& v : m.data) v = levels > 0 ? q(rng) / double(levels) : u(rng);
    return m;
}

std::vector<std::pair<std::size_t, std::size_t>> as_pairs(const SampledPixels& s) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto p : s.pixels) out.emplace_back(p.row, p.col);
    return out;
}

}  // namespace

TEST(TopK, WorkedExamples) {
    FloatMap one(3, 3, 0.1);
    one(2, 1) = 0.7;
    EXPECT_EQ(as_pairs(sample_topk_uncertainty(one, 1, {}, 0)), (std::vector<std::pair<std::size_t, std::size_t>>{{2, 1}}));

    FloatMap flat(4, 4, 0.5);
    EXPECT_EQ(as_pairs(sample_topk_uncertainty(flat, 2, {}, 0)),
              (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {0, 1}}));

    FloatMap m(3, 3, std::vector<double>{.1, .9, .2, .8, .3, .4, .5, .6, .7});
    EXPECT_EQ(as_pairs(sample_topk_uncertainty(m, 3, {}, 0)),
              (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 0}, {2, 2}}));
}

TEST(TopK, SuppressionAndExclusion) {
    FloatMap m(3, 3, std::vector<double>{.1, .9, .2, .8, .3, .4, .5, .6, .7});
    // radius 1 around (0,1) suppresses (1,0); next eligible are (2,2) then (2,0)
    EXPECT_EQ(as_pairs(sample_topk_uncertainty(m, 2, {}, 1)),
              (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {2, 2}}));
    ClickSet ex;
    ex.add({0, 1, Polarity::Positive});
    EXPECT_EQ(as_pairs(sample_topk_uncertainty(m, 1, ex, 0)), (std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}}));
    const auto s = sample_topk_uncertainty(m, 5, {}, 2);
    EXPECT_EQ(s.pixels.size(), 1u);
    EXPECT_TRUE(s.shortfall);
    EXPECT_THROW(sample_topk_uncertainty(m, 0, {}, 0), std::invalid_argument);
}

TEST(TopK, MatchesBruteForceSort) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> side(1, 16), kk(1, 20);
    for (int i = 0; i < 500; ++i) {
        const std::size_t h = side(rng), w = side(rng), k = kk(rng);
        const FloatMap u = random_map(h, w, rng, i % 2 ? 5 : 0);
        EXPECT_EQ(as_pairs(sample_topk_uncertainty(u, k, {}, 0)), oracle::topk_brute_force(u, k));
    }
}

TEST(TopK, InvariantUnderMonotoneTransform) {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 200; ++i) {
        const FloatMap u = random_map(12, 9, rng, i % 2 ? 4 : 0);
        FloatMap t = u;
        for (double& v : t.data) v = std::exp(3.0 * v) - 7.0;
        for (std::size_t r : {0u, 2u}) {
            EXPECT_EQ(as_pairs(sample_topk_uncertainty(u, 6, {}, r)), as_pairs(sample_topk_uncertainty(t, 6, {}, r)));
        }
    }
}

TEST(RandomError, DrawsFromErrorRegion) {
    BinaryMask pred(4, 4, 0), gt(4, 4, 0);
    gt(1, 1) = gt(2, 2) = gt(3, 0) = 1;
    std::mt19937_64 rng(5);
    auto s = sample_random_error(pred, gt, 3, rng);
    EXPECT_FALSE(s.fallback);
    EXPECT_FALSE(s.shortfall);
    auto got = as_pairs(s);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, (std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {2, 2}, {3, 0}}));
}

TEST(RandomError, FallsBackToWholeImage) {
    BinaryMask m(4, 4, 0);
    std::mt19937_64 rng(5);
    auto s = sample_random_error(m, m, 2, rng);
    EXPECT_TRUE(s.fallback);
    EXPECT_EQ(s.pixels.size(), 2u);
    EXPECT_NE(s.pixels[0], s.pixels[1]);
}

TEST(RandomError, SeededRunsRepeat) {
    std::mt19937_64 g(1);
    BinaryMask pred(16, 16), gt(16, 16);
    for (auto& v : pred.data) v = g() & 1u;
    for (auto& v : gt.data) v = g() & 1u;
    std::mt19937_64 a(99), b(99);
    EXPECT_EQ(as_pairs(sample_random_error(pred, gt, 5, a)), as_pairs(sample_random_error(pred, gt, 5, b)));
}

TEST(RandomError, RespectsExclusion) {
    BinaryMask pred(2, 2, 0), gt(2, 2, 0);
    gt(0, 0) = gt(1, 1) = 1;
    ClickSet ex;
    ex.add({0, 0, Polarity::Positive});
    std::mt19937_64 rng(3);
    EXPECT_EQ(as_pairs(sample_random_error(pred, gt, 2, rng, ex)), (std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}}));
}

TEST(Grid, LatticeCentresWithoutRepeats) {
    const auto s = sample_grid(64, 64, 5, {});
    ASSERT_EQ(s.pixels.size(), 5u);
    EXPECT_EQ(s.pixels[0], (Pixel{32, 32}));
    EXPECT_EQ(s.pixels[1], (Pixel{16, 16}));
    EXPECT_EQ(s.pixels[4], (Pixel{48, 48}));
    ClickSet ex = assign_polarity(s.pixels, BinaryMask(64, 64, 0));
    const auto next = sample_grid(64, 64, 3, ex);
    for (auto p : next.pixels) EXPECT_FALSE(ex.contains(p.row, p.col));
}

TEST(Polarity, FollowsGroundTruthAndKeepsOrder) {
    BinaryMask gt(3, 3, 0);
    gt(1, 1) = 1;
    const auto set = assign_polarity({{1, 1}, {0, 0}, {2, 2}}, gt);
    ASSERT_EQ(set.size(), 3u);
    EXPECT_EQ(set.points()[0], (ClickPoint{1, 1, Polarity::Positive}));
    EXPECT_EQ(set.points()[1], (ClickPoint{0, 0, Polarity::Negative}));
    EXPECT_EQ(set.points()[2], (ClickPoint{2, 2, Polarity::Negative}));
    EXPECT_THROW(assign_polarity({{3, 0}}, gt), std::out_of_range);
}

TEST(ClickSetTest, RejectsDuplicates) {
    ClickSet s;
    s.add({1, 2, Polarity::Positive});
    EXPECT_THROW(s.add({1, 2, Polarity::Negative}), std::invalid_argument);
}

TEST(Rasterize, Examples) {
    const auto empty = rasterize({}, 8, 8);
    for (double v : empty.data) EXPECT_EQ(v, 0.0);

    ClickSet one;
    one.add({3, 4, Polarity::Positive});
    const auto r1 = rasterize(one, 8, 8);
    EXPECT_EQ(r1.at(0, 3, 4), 1.0);
    EXPECT_NEAR(r1.at(0, 3, 6), std::exp(-4.0 / 8.0), 1e-15);
    for (double v : std::vector<double>(r1.data.begin() + 64, r1.data.end())) EXPECT_EQ(v, 0.0);

    ClickSet two;
    two.add({3, 3, Polarity::Positive});
    two.add({3, 4, Polarity::Positive});
    two.add({0, 0, Polarity::Negative});
    const auto r2 = rasterize(two, 8, 8);
    EXPECT_EQ(r2.at(0, 3, 3), 1.0);
    EXPECT_EQ(r2.at(0, 3, 4), 1.0);
    // next to the pair the sum is still above 1; further away it is unclamped
    EXPECT_EQ(r2.at(0, 3, 5), 1.0);
    EXPECT_NEAR(r2.at(0, 3, 7), std::exp(-16.0 / 8.0) + std::exp(-9.0 / 8.0), 1e-15);
    EXPECT_EQ(r2.at(1, 0, 0), 1.0);
    for (double v : r2.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(rasterize(one, 8, 8, 0.0), std::invalid_argument);
}
