#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "cimq/error.hpp"
#include "cimq/tensor.hpp"

namespace cimq {

/// R word lines × C bit lines.
struct ArrayShape {
    std::size_t rows = 16;
    std::size_t cols = 16;

    bool operator==(const ArrayShape&) const = default;
};

struct ArrayTile {
    std::size_t row_tile = 0;
    std::size_t col_tile = 0;
    std::size_t ci_begin = 0, ci_end = 0;  // input channels held on the word lines
    std::size_t oc_begin = 0, oc_end = 0;  // output channels held on the bit lines

    std::size_t channels() const noexcept { return ci_end - ci_begin; }
    std::size_t out_channels() const noexcept { return oc_end - oc_begin; }
};

/// Kernel-preserving mapping of a C_out × C_in × K × K layer onto R × C arrays.
///
/// Every row tile holds whole stretched kernels: floor(R / K²) input channels, each
/// contributing K² consecutive word lines. Arrays are numbered row tile major:
/// a = row_tile · n_array_cols + col_tile.
struct TilingPlan {
    std::size_t c_in = 0, c_out = 0, kernel = 0;
    ArrayShape array;
    std::size_t channels_per_array = 0;
    std::size_t oc_per_array = 0;
    std::size_t n_array_rows = 0;
    std::size_t n_array_cols = 0;

    std::size_t n_array() const noexcept { return n_array_rows * n_array_cols; }
    std::size_t n_oc() const noexcept { return oc_per_array; }
    std::size_t kernel_area() const noexcept { return kernel * kernel; }

    std::size_t array_id(std::size_t row_tile, std::size_t col_tile) const noexcept
    {
        return row_tile * n_array_cols + col_tile;
    }

    ArrayTile tile(std::size_t a) const
    {
        require(a < n_array(), "array index out of range");
        ArrayTile t;
        t.row_tile = a / n_array_cols;
        t.col_tile = a % n_array_cols;
        t.ci_begin = t.row_tile * channels_per_array;
        t.ci_end = std::min(c_in, t.ci_begin + channels_per_array);
        t.oc_begin = t.col_tile * oc_per_array;
        t.oc_end = std::min(c_out, t.oc_begin + oc_per_array);
        return t;
    }

    std::size_t row_tile_of(std::size_t ci) const noexcept { return ci / channels_per_array; }
    std::size_t col_tile_of(std::size_t oc) const noexcept { return oc / oc_per_array; }
    std::size_t array_of(std::size_t oc, std::size_t ci) const noexcept
    {
        return array_id(row_tile_of(ci), col_tile_of(oc));
    }

    /// Output channels actually mapped (not padding) on array a.
    std::size_t mapped_oc(std::size_t a) const { return tile(a).out_channels(); }

    /// Σ_a mapped_oc(a); equals n_array·n_oc whenever C_out is a multiple of n_oc.
    std::size_t mapped_columns() const noexcept { return n_array_rows * c_out; }

    bool operator==(const TilingPlan&) const = default;
};

inline TilingPlan plan_tiling(std::size_t c_in, std::size_t c_out, std::size_t kernel,
                              const ArrayShape& shape)
{
    require(c_in >= 1 && c_out >= 1 && kernel >= 1, "layer dimensions must be positive");
    require(shape.rows >= 1 && shape.cols >= 1, "array dimensions must be positive");
    if (kernel * kernel > shape.rows) throw ValidationError("kernel does not fit array rows");
    TilingPlan p;
    p.c_in = c_in;
    p.c_out = c_out;
    p.kernel = kernel;
    p.array = shape;
    p.channels_per_array = std::min(shape.rows / (kernel * kernel), c_in);
    p.oc_per_array = std::min(shape.cols, c_out);
    p.n_array_rows = (c_in + p.channels_per_array - 1) / p.channels_per_array;
    p.n_array_cols = (c_out + p.oc_per_array - 1) / p.oc_per_array;
    return p;
}

/// Per-array weight blocks [n_oc, channels_per_array, K, K], zero-padded past the layer edge.
template <typename T>
std::vector<Tensor<T>> map_weights(const Tensor<T>& w, const TilingPlan& plan)
{
    const Shape expect{plan.c_out, plan.c_in, plan.kernel, plan.kernel};
    require(w.shape() == expect,
            "weight shape " + shape_str(w.shape()) + " does not match plan " + shape_str(expect));
    const std::size_t kk = plan.kernel_area();
    std::vector<Tensor<T>> blocks;
    blocks.reserve(plan.n_array());
    for (std::size_t a = 0; a < plan.n_array(); ++a) {
        const ArrayTile t = plan.tile(a);
        Tensor<T> b({plan.oc_per_array, plan.channels_per_array, plan.kernel, plan.kernel});
        for (std::size_t o = t.oc_begin; o < t.oc_end; ++o)
            for (std::size_t ci = t.ci_begin; ci < t.ci_end; ++ci)
                for (std::size_t e = 0; e < kk; ++e)
                    b[((o - t.oc_begin) * plan.channels_per_array + (ci - t.ci_begin)) * kk + e] =
                        w[(o * plan.c_in + ci) * kk + e];
        blocks.push_back(std::move(b));
    }
    return blocks;
}

/// Stable id of the physical column holding (array a, local output channel o, split k).
/// Split-major: id = (k·n_array + a)·n_oc + o.
inline std::size_t column_index(const TilingPlan& plan, std::size_t a, std::size_t o, std::size_t k,
                                std::size_t n_split)
{
    require(a < plan.n_array(), "array index out of range");
    require(o < plan.n_oc(), "output channel out of range for array");
    require(k < n_split, "split index out of range");
    return (k * plan.n_array() + a) * plan.n_oc() + o;
}

struct ColumnRef {
    std::size_t array = 0;
    std::size_t local_oc = 0;
    std::size_t split = 0;
};

inline ColumnRef column_from_index(const TilingPlan& plan, std::size_t id, std::size_t n_split)
{
    require(id < n_split * plan.n_array() * plan.n_oc(), "column id out of range");
    ColumnRef r;
    r.local_oc = id % plan.n_oc();
    r.array = (id / plan.n_oc()) % plan.n_array();
    r.split = id / (plan.n_oc() * plan.n_array());
    return r;
}

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad)
{
    require(stride >= 1, "stride must be positive");
    require(in + 2 * pad >= kernel, "kernel larger than padded input");
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Patch matrix of x: rows are output positions (n, oy, ox), columns are (ci, ky, kx).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad)
{
    require(x.rank() == 4, "im2col expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = conv_out_size(h, kernel, stride, pad);
    const std::size_t wo = conv_out_size(w, kernel, stride, pad);
    const std::size_t cols = c * kernel * kernel;
    Tensor<T> out({n * ho * wo, cols});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T* row = out.data() + ((b * ho + oy) * wo + ox) * cols;
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t ky = 0; ky < kernel; ++ky)
                        for (std::size_t kx = 0; kx < kernel; ++kx) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            T v{};
                            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w))
                                v = x.at(b, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                            row[(ci * kernel + ky) * kernel + kx] = v;
                        }
            }
    return out;
}

/// Convolution as patch-matrix × weight-matrix, the conventional lowering.
template <typename T>
Tensor<T> im2col_reference(const Tensor<T>& w, const Tensor<T>& x, std::size_t stride, std::size_t pad)
{
    require(w.rank() == 4 && x.rank() == 4, "im2col_reference expects 4-D tensors");
    require(w.dim(1) == x.dim(1), "input channels of weight and input differ");
    require(w.dim(2) == w.dim(3), "only square kernels are supported");
    const std::size_t k = w.dim(2), co = w.dim(0);
    const std::size_t n = x.dim(0);
    const std::size_t ho = conv_out_size(x.dim(2), k, stride, pad);
    const std::size_t wo = conv_out_size(x.dim(3), k, stride, pad);
    const Tensor<T> patches = im2col(x, k, stride, pad);
    const std::size_t cols = patches.dim(1);
    Tensor<T> out({n, co, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < ho * wo; ++p) {
            const T* row = patches.data() + (b * ho * wo + p) * cols;
            for (std::size_t o = 0; o < co; ++o) {
                const T* wr = w.data() + o * cols;
                T acc{};
                for (std::size_t e = 0; e < cols; ++e) acc += row[e] * wr[e];
                out[(b * co + o) * ho * wo + p] = acc;
            }
        }
    return out;
}

}  // namespace cimq
