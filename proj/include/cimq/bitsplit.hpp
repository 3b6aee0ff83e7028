#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cimq/error.hpp"

namespace cimq {

/// A b-bit signed code stored across n_split = b/c cells of c bits each.
///
/// Low planes hold unsigned base-2^c digits of the two's-complement code; the top plane
/// holds the signed top digit. The encoding is linear, so per-plane MACs recombine exactly
/// by shift-and-add.
struct SplitPlanes {
    std::vector<std::vector<std::int64_t>> planes;
    int cell_bits = 0;
    int total_bits = 0;

    int n_split() const noexcept { return cell_bits ? total_bits / cell_bits : 0; }
};

inline void check_split_bits(int total_bits, int cell_bits)
{
    require(cell_bits >= 1 && total_bits >= 1 && total_bits <= 32,
            "bit-split widths out of range");
    require(total_bits % cell_bits == 0, "cell bits " + std::to_string(cell_bits) +
                                             " do not divide weight bits " +
                                             std::to_string(total_bits));
}

/// Digit k of a signed code. `code` must already lie in the signed total_bits range.
inline std::int64_t split_digit(std::int64_t code, int k, int cell_bits, int n_split) noexcept
{
    const int shift = cell_bits * k;
    if (k == n_split - 1) return code >> shift;  // arithmetic shift keeps the sign
    return (code >> shift) & ((std::int64_t{1} << cell_bits) - 1);
}

inline SplitPlanes split(std::span<const std::int64_t> codes, int total_bits, int cell_bits)
{
    check_split_bits(total_bits, cell_bits);
    const std::int64_t lo = -(std::int64_t{1} << (total_bits - 1));
    const std::int64_t hi = (std::int64_t{1} << (total_bits - 1)) - 1;
    SplitPlanes out;
    out.cell_bits = cell_bits;
    out.total_bits = total_bits;
    const int s = out.n_split();
    out.planes.assign(static_cast<std::size_t>(s), std::vector<std::int64_t>(codes.size()));
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] < lo || codes[i] > hi)
            throw ValidationError("code " + std::to_string(codes[i]) + " outside signed " +
                                  std::to_string(total_bits) + "-bit range");
        for (int k = 0; k < s; ++k) out.planes[k][i] = split_digit(codes[i], k, cell_bits, s);
    }
    return out;
}

inline std::vector<std::int64_t> recombine(const SplitPlanes& p)
{
    check_split_bits(p.total_bits, p.cell_bits);
    require(static_cast<int>(p.planes.size()) == p.n_split(), "plane count does not match b/c");
    const std::size_t n = p.planes.empty() ? 0 : p.planes.front().size();
    std::vector<std::int64_t> out(n, 0);
    for (int k = 0; k < p.n_split(); ++k) {
        require(p.planes[k].size() == n, "split planes differ in size");
        for (std::size_t i = 0; i < n; ++i) out[i] += p.planes[k][i] * (std::int64_t{1} << (p.cell_bits * k));
    }
    return out;
}

/// out = Σ_k psums[k]·2^(c·k), accumulated in ascending split order.
inline std::vector<double> shift_add(const std::vector<std::vector<double>>& psums_per_split,
                                     int cell_bits)
{
    require(!psums_per_split.empty(), "shift_add needs at least one split");
    const std::size_t n = psums_per_split.front().size();
    std::vector<double> out(n, 0.0);
    for (std::size_t k = 0; k < psums_per_split.size(); ++k) {
        require(psums_per_split[k].size() == n, "split partial-sums differ in size");
        const double w = std::ldexp(1.0, cell_bits * static_cast<int>(k));
        for (std::size_t i = 0; i < n; ++i) out[i] += psums_per_split[k][i] * w;
    }
    return out;
}

}  // namespace cimq
