#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dml/numcore.hpp"

using namespace dml;

TEST(PairwiseEuclidean, OneDimensional) {
    const Matrix d = pairwise_euclidean(Matrix::from_rows({{0}, {3}}));
    EXPECT_EQ(d, Matrix::from_rows({{0, 3}, {3, 0}}));
}

TEST(PairwiseEuclidean, IdenticalRowsAreZero) {
    const Matrix d = pairwise_euclidean(Matrix::from_rows({{1, 0}, {1, 0}}));
    EXPECT_EQ(d, Matrix(2, 2, 0.0));
}

TEST(PairwiseEuclidean, ThreeFourFive) {
    const Matrix d = pairwise_euclidean(Matrix::from_rows({{0, 0}, {3, 4}}));
    EXPECT_DOUBLE_EQ(d(0, 1), 5.0);
    EXPECT_DOUBLE_EQ(d(1, 0), 5.0);
}

TEST(PairwiseEuclidean, RejectsEmpty) {
    EXPECT_THROW(pairwise_euclidean(Matrix()), std::invalid_argument);
    EXPECT_THROW(pairwise_euclidean(Matrix(3, 0)), std::invalid_argument);
}

TEST(PairwiseEuclidean, SymmetricZeroDiagonalAndTriangleInequality) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        RngStream rng(seed, 7);
        const std::size_t n = 2 + rng.uniform_index(10);
        const std::size_t l = 1 + rng.uniform_index(8);
        Matrix e(n, l);
        for (double& v : e.data()) v = rng.normal(0.0, 3.0);
        const Matrix d = pairwise_euclidean(e);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(d(i, i), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_EQ(d(i, j), d(j, i));
                for (std::size_t k = 0; k < n; ++k) EXPECT_LE(d(i, k), d(i, j) + d(j, k) + 1e-9);
            }
        }
    }
}

TEST(L2Normalize, Examples) {
    const Matrix out = l2_normalize_rows(Matrix::from_rows({{3, 4}, {0, 0}}));
    EXPECT_NEAR(out(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(out(0, 1), 0.8, 1e-15);
    EXPECT_EQ(out(1, 0), 1.0);
    EXPECT_EQ(out(1, 1), 0.0);
}

TEST(L2Normalize, Idempotent) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        RngStream rng(seed);
        Matrix e(6, 5);
        for (double& v : e.data()) v = rng.normal(0.0, 10.0);
        const Matrix once = l2_normalize_rows(e);
        const Matrix twice = l2_normalize_rows(once);
        for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(once.data()[i], twice.data()[i], 1e-12);
    }
}

TEST(Softmax, Examples) {
    const Matrix s = softmax_rows(Matrix::from_rows({{0, 0}, {1000, 0}, {std::log(1.0), std::log(3.0)}}));
    EXPECT_NEAR(s(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(s(1, 0), 1.0, 1e-12);
    EXPECT_NEAR(s(1, 1), 0.0, 1e-12);
    EXPECT_TRUE(s.all_finite());
    EXPECT_NEAR(s(2, 0), 0.25, 1e-15);
    EXPECT_NEAR(s(2, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
    RngStream rng(3);
    Matrix z(20, 7);
    for (double& v : z.data()) v = rng.normal(0.0, 50.0);
    const Matrix s = softmax_rows(z);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        double sum = 0.0;
        for (double v : s.row(i)) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(FiniteDiff, SumOfSquares) {
    auto f = [](const Matrix& x) {
        double s = 0.0;
        for (double v : x.data()) s += v * v;
        return s;
    };
    const Matrix g = finite_diff_grad(f, Matrix::from_rows({{3}}), 1e-5);
    EXPECT_NEAR(g(0, 0), 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantIsZero) {
    const Matrix g = finite_diff_grad([](const Matrix&) { return 4.2; }, Matrix(3, 2, 1.0), 1e-4);
    EXPECT_EQ(g, Matrix(3, 2, 0.0));
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
    EXPECT_THROW(finite_diff_grad([](const Matrix&) { return 0.0; }, Matrix(1, 1), 0.0),
                 std::invalid_argument);
}

TEST(RngStream, PhiloxKnownAnswers) {
    // Random123 philox4x32-10 reference vectors.
    const auto zero = RngStream::philox4x32({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(zero, (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    const auto ones = RngStream::philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                            {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(ones, (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    const auto pi = RngStream::philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                          {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(pi, (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

namespace {
std::uint64_t sequence_hash(std::uint64_t seed, std::uint64_t stream, std::size_t count) {
    RngStream rng(seed, stream);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t v = rng.next_u64();
        h = fnv1a64(std::as_bytes(std::span<const std::uint64_t>(&v, 1)), h);
    }
    return h;
}
}  // namespace

TEST(RngStream, MillionDrawReproducibility) {
    const std::uint64_t a = sequence_hash(42, 9, 1'000'000);
    const std::uint64_t b = sequence_hash(42, 9, 1'000'000);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, sequence_hash(42, 10, 1'000'000));
    EXPECT_NE(a, sequence_hash(43, 9, 1'000'000));
}

TEST(RngStream, DistinctStreamsDoNotOverlap) {
    RngStream a(1, 0);
    RngStream b(1, 1);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 10000; ++i) seen.insert(a.next_u64());
    int collisions = 0;
    for (int i = 0; i < 10000; ++i) collisions += seen.count(b.next_u64());
    EXPECT_EQ(collisions, 0);
}

TEST(RngStream, DeriveIsStableAndCounterIndependent) {
    RngStream parent(5, 3);
    const RngStream child1 = parent.derive("sample-17");
    parent.next_u64();
    RngStream child2 = parent.derive("sample-17");
    RngStream c1 = child1;
    for (int i = 0; i < 100; ++i) EXPECT_EQ(c1.next_u64(), child2.next_u64());
}

TEST(RngStream, UniformAndNormalMoments) {
    RngStream rng(11);
    const int n = 200000;
    double su = 0.0, sn = 0.0, sn2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(RngStream, UniformIndexCoversRange) {
    RngStream rng(2);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[rng.uniform_index(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);
    EXPECT_THROW(rng.uniform_index(0), std::invalid_argument);
}

TEST(Fnv1a, KnownVectors) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(ParallelFor, CoversAllIndicesWithWorkers) {
    set_thread_count(4);
    std::vector<int> hit(1000, 0);
    parallel_for(hit.size(), [&](std::size_t i) { hit[i] += 1; });
    set_thread_count(1);
    for (int h : hit) EXPECT_EQ(h, 1);
}

TEST(ParallelFor, PropagatesExceptions) {
    set_thread_count(3);
    EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                     if (i == 5) throw std::runtime_error("boom");
                 }),
                 std::runtime_error);
    set_thread_count(1);
}
