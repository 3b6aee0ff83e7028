#include <gtest/gtest.h>

#include <random>
#include <set>

#include "cimq/tiler.hpp"

using namespace cimq;

namespace {

// Independent nested-loop convolution (integer).
Tensor<std::int64_t> nested_conv(const Tensor<std::int64_t>& w, const Tensor<std::int64_t>& x,
                                 std::size_t stride, std::size_t pad)
{
    const std::size_t n = x.dim(0), ci_n = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co_n = w.dim(0), k = w.dim(2);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    Tensor<std::int64_t> out({n, co_n, ho, wo}, 0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co_n; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox)
                    for (std::size_t ci = 0; ci < ci_n; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                const long ix = long(ox * stride + kx) - long(pad);
                                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                                out.at(b, o, oy, ox) += w.at(o, ci, ky, kx) * x.at(b, ci, iy, ix);
                            }
    return out;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, int lo, int hi)
{
    std::uniform_int_distribution<int> d(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(d(rng));
    return t;
}

}  // namespace

TEST(PlanTiling, HandExamples)
{
    const auto p = plan_tiling(16, 16, 3, {16, 16});
    EXPECT_EQ(p.channels_per_array, 1u);
    EXPECT_EQ(p.n_array_rows, 16u);
    EXPECT_EQ(p.n_array_cols, 1u);
    EXPECT_EQ(p.n_array(), 16u);
    EXPECT_EQ(p.n_oc(), 16u);

    const auto one = plan_tiling(1, 1, 1, {16, 16});
    EXPECT_EQ(one.n_array(), 1u);
    EXPECT_EQ(one.channels_per_array, 1u);

    const auto wide = plan_tiling(10, 40, 3, {32, 16});
    EXPECT_EQ(wide.channels_per_array, 3u);
    EXPECT_EQ(wide.n_array_rows, 4u);
    EXPECT_EQ(wide.n_array_cols, 3u);
    EXPECT_EQ(wide.tile(wide.n_array() - 1).channels(), 1u);
    EXPECT_EQ(wide.tile(wide.n_array() - 1).out_channels(), 8u);
}

TEST(PlanTiling, KernelMustFit)
{
    try {
        plan_tiling(4, 4, 5, {16, 16});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_STREQ(e.what(), "kernel does not fit array rows");
    }
}

TEST(PlanTiling, KernelIntegrityAndCoverage)
{
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> ch(1, 40), arr(9, 70);
    for (int t = 0; t < 200; ++t) {
        const std::size_t k = t % 2 ? 3 : 1;
        const ArrayShape shape{arr(rng), arr(rng)};
        const auto p = plan_tiling(ch(rng), ch(rng), k, shape);
        std::vector<int> ci_owner(p.c_in, 0), oc_owner(p.c_out, 0);
        for (std::size_t a = 0; a < p.n_array(); ++a) {
            const auto tile = p.tile(a);
            // whole kernels only, and they fit on the word lines
            EXPECT_LE(tile.channels() * k * k, shape.rows);
            EXPECT_LE(tile.out_channels(), shape.cols);
            if (tile.col_tile == 0)
                for (auto ci = tile.ci_begin; ci < tile.ci_end; ++ci) ++ci_owner[ci];
            if (tile.row_tile == 0)
                for (auto o = tile.oc_begin; o < tile.oc_end; ++o) ++oc_owner[o];
        }
        for (int c : ci_owner) EXPECT_EQ(c, 1);
        for (int c : oc_owner) EXPECT_EQ(c, 1);
    }
}

TEST(MapWeights, SingleArrayIsIdentity)
{
    std::mt19937_64 rng(2);
    const auto w = random_tensor<double>({4, 1, 3, 3}, rng, -5, 5);
    const auto p = plan_tiling(1, 4, 3, {16, 16});
    const auto blocks = map_weights(w, p);
    ASSERT_EQ(blocks.size(), 1u);
    EXPECT_EQ(blocks[0], w);
    EXPECT_THROW(map_weights(random_tensor<double>({4, 2, 3, 3}, rng, 0, 1), p), ValidationError);
}

TEST(MapWeights, ReassemblyAndZeroPadding)
{
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> ch(1, 20), arr(9, 40);
    for (int t = 0; t < 50; ++t) {
        const std::size_t k = t % 2 ? 3 : 1;
        const auto p = plan_tiling(ch(rng), ch(rng), k, {arr(rng), arr(rng)});
        const auto w = random_tensor<double>({p.c_out, p.c_in, k, k}, rng, -7, 7);
        const auto blocks = map_weights(w, p);
        Tensor<double> re(w.shape(), 0.0);
        for (std::size_t a = 0; a < p.n_array(); ++a) {
            const auto tile = p.tile(a);
            const auto& b = blocks[a];
            for (std::size_t lo = 0; lo < p.oc_per_array; ++lo)
                for (std::size_t lc = 0; lc < p.channels_per_array; ++lc)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double v = b.at(lo, lc, ky, kx);
                            const std::size_t o = tile.oc_begin + lo, ci = tile.ci_begin + lc;
                            if (o >= tile.oc_end || ci >= tile.ci_end)
                                EXPECT_EQ(v, 0.0);
                            else
                                re.at(o, ci, ky, kx) += v;
                        }
        }
        EXPECT_EQ(re, w);
    }
}

TEST(ColumnIndex, OrderingAndBijectivity)
{
    const auto p = plan_tiling(16, 16, 3, {16, 16});
    EXPECT_EQ(column_index(p, 0, 0, 0, 2), 0u);
    std::set<std::size_t> ids;
    for (std::size_t a = 0; a < p.n_array(); ++a)
        for (std::size_t o = 0; o < p.n_oc(); ++o)
            for (std::size_t k = 0; k < 2; ++k) {
                const auto id = column_index(p, a, o, k, 2);
                ids.insert(id);
                const auto back = column_from_index(p, id, 2);
                EXPECT_EQ(back.array, a);
                EXPECT_EQ(back.local_oc, o);
                EXPECT_EQ(back.split, k);
            }
    EXPECT_EQ(ids.size(), p.n_array() * p.n_oc() * 2);
    EXPECT_EQ(*ids.rbegin(), ids.size() - 1);
    EXPECT_THROW(column_index(p, 0, 16, 0, 2), ValidationError);
    EXPECT_THROW(column_index(p, 16, 0, 0, 2), ValidationError);
}

TEST(Im2colReference, IdentityAndZeroKernels)
{
    std::mt19937_64 rng(4);
    const auto x = random_tensor<std::int64_t>({2, 3, 5, 5}, rng, -9, 9);
    Tensor<std::int64_t> id({3, 3, 1, 1}, 0);
    for (std::size_t c = 0; c < 3; ++c) id.at(c, c, 0, 0) = 1;
    EXPECT_EQ(im2col_reference(id, x, 1, 0), x);
    const Tensor<std::int64_t> zero({4, 3, 3, 3}, 0);
    const auto out = im2col_reference(zero, x, 1, 1);
    for (auto v : out.vec()) EXPECT_EQ(v, 0);
}

TEST(Im2colReference, MatchesNestedLoops)
{
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> ch(1, 6), sp(3, 9);
    for (int t = 0; t < 60; ++t) {
        const std::size_t k = t % 3 == 0 ? 1 : 3, stride = 1 + t % 2, pad = t % 4 == 0 ? 0 : 1;
        const auto w = random_tensor<std::int64_t>({ch(rng), ch(rng), k, k}, rng, -8, 7);
        const std::size_t h = sp(rng);
        const auto x = random_tensor<std::int64_t>({2, w.dim(1), h, h + 1}, rng, 0, 15);
        EXPECT_EQ(im2col_reference(w, x, stride, pad), nested_conv(w, x, stride, pad));
    }
}

TEST(Im2colReference, PerArrayGroupedConvolutionsReassembleExactly)
{
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<std::size_t> ch(1, 24), arr(9, 48);
    for (int t = 0; t < 40; ++t) {
        const std::size_t k = t % 2 ? 3 : 1;
        const auto p = plan_tiling(ch(rng), ch(rng), k, {arr(rng), arr(rng)});
        const auto w = random_tensor<std::int64_t>({p.c_out, p.c_in, k, k}, rng, -8, 7);
        const auto x = random_tensor<std::int64_t>({1, p.c_in, 6, 6}, rng, 0, 15);
        const auto blocks = map_weights(w, p);
        Tensor<std::int64_t> sum({1, p.c_out, 6, 6}, 0);
        for (std::size_t a = 0; a < p.n_array(); ++a) {
            const auto tile = p.tile(a);
            Tensor<std::int64_t> xs({1, p.channels_per_array, 6, 6}, 0);
            for (std::size_t c = tile.ci_begin; c < tile.ci_end; ++c)
                for (std::size_t i = 0; i < 36; ++i) xs[(c - tile.ci_begin) * 36 + i] = x[c * 36 + i];
            const auto part = im2col_reference(blocks[a], xs, 1, k / 2);
            for (std::size_t o = tile.oc_begin; o < tile.oc_end; ++o)
                for (std::size_t i = 0; i < 36; ++i) sum[o * 36 + i] += part[(o - tile.oc_begin) * 36 + i];
        }
        EXPECT_EQ(sum, im2col_reference(w, x, 1, k / 2));
    }
}
