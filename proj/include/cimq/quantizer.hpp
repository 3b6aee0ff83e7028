#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cimq/error.hpp"

namespace cimq {

/// Grouping level at which one scale factor is shared.
enum class Granularity { Layer, Array, Column };

inline std::string_view to_string(Granularity g) noexcept
{
    switch (g) {
    case Granularity::Layer: return "layer";
    case Granularity::Array: return "array";
    case Granularity::Column: return "column";
    }
    return "?";
}

inline Granularity parse_granularity(std::string_view s)
{
    if (s == "layer") return Granularity::Layer;
    if (s == "array") return Granularity::Array;
    if (s == "column") return Granularity::Column;
    throw ValidationError("unknown granularity '" + std::string(s) +
                          "' (expected layer, array or column)");
}

inline constexpr Granularity kAllGranularities[] = {Granularity::Layer, Granularity::Array,
                                                    Granularity::Column};

/// Uniform integer grid [-q_neg, q_pos] of a quantizer.
struct QuantSpec {
    int bits = 4;
    bool is_signed = true;
    Granularity granularity = Granularity::Layer;

    static QuantSpec make_signed(int bits, Granularity g = Granularity::Layer)
    {
        QuantSpec s{bits, true, g};
        s.validate();
        return s;
    }
    static QuantSpec make_unsigned(int bits, Granularity g = Granularity::Layer)
    {
        QuantSpec s{bits, false, g};
        s.validate();
        return s;
    }

    std::int64_t q_neg() const noexcept { return is_signed ? (std::int64_t{1} << (bits - 1)) : 0; }
    std::int64_t q_pos() const noexcept
    {
        return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
    }

    void validate() const
    {
        // 1-bit unsigned is the only sub-2-bit grid with q_pos >= 1.
        require(bits >= (is_signed ? 2 : 1) && bits <= 40,
                "quantizer bit-width out of range: " + std::to_string(bits));
    }
};

/// Scale factors plus the element -> scale-group map they are shared over.
struct ScaleTensor {
    std::vector<double> values;
    std::vector<std::size_t> group_of;

    std::size_t num_groups() const noexcept { return values.size(); }
    double scale_of(std::size_t element) const { return values[group_of[element]]; }

    std::vector<std::size_t> group_sizes() const
    {
        std::vector<std::size_t> n(values.size(), 0);
        for (auto g : group_of) ++n[g];
        return n;
    }

    void validate(std::size_t n_elements) const
    {
        require(group_of.size() == n_elements,
                "scale group map covers " + std::to_string(group_of.size()) + " elements, tensor has " +
                    std::to_string(n_elements));
        for (auto g : group_of) require(g < values.size(), "scale group index out of range");
        for (auto v : values) require(v > 0.0 && std::isfinite(v), "scale factors must be positive");
    }
};

/// ⌊z⌉ with ties away from zero.
inline double round_half_away(double z) noexcept { return std::round(z); }

inline std::int64_t quantize_value(double x, double s, const QuantSpec& spec) noexcept
{
    const double r = round_half_away(x / s);
    return static_cast<std::int64_t>(
        std::clamp(r, -static_cast<double>(spec.q_neg()), static_cast<double>(spec.q_pos())));
}

namespace detail {

inline std::size_t count_groups(std::span<const std::size_t> group_of)
{
    require(!group_of.empty(), "cannot build scales over an empty tensor");
    return *std::max_element(group_of.begin(), group_of.end()) + 1;
}

template <typename PerGroup>
ScaleTensor build_scales(std::span<const double> x, std::span<const std::size_t> group_of,
                         std::size_t n_groups, PerGroup&& per_group)
{
    require(!x.empty(), "cannot build scales over an empty tensor");
    require(group_of.size() == x.size(), "scale group map is not total over the tensor");
    std::vector<double> abs_sum(n_groups, 0.0);
    std::vector<double> abs_max(n_groups, 0.0);
    std::vector<std::size_t> count(n_groups, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto g = group_of[i];
        require(g < n_groups, "scale group index out of range");
        abs_sum[g] += std::abs(x[i]);
        abs_max[g] = std::max(abs_max[g], std::abs(x[i]));
        ++count[g];
    }
    ScaleTensor s;
    s.group_of.assign(group_of.begin(), group_of.end());
    s.values.resize(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
        if (count[g] == 0) throw ValidationError("empty scale group");
        const double v = per_group(abs_sum[g] / static_cast<double>(count[g]), abs_max[g]);
        s.values[g] = v > 0.0 ? v : 1.0;
    }
    return s;
}

}  // namespace detail

/// LSQ initialization: s = 2·mean|x| / sqrt(q_pos) per group; all-zero groups get 1.
inline ScaleTensor init_scales(std::span<const double> x, const QuantSpec& spec,
                               std::span<const std::size_t> group_of, std::size_t n_groups)
{
    const double root = std::sqrt(static_cast<double>(spec.q_pos()));
    return detail::build_scales(x, group_of, n_groups,
                                [root](double mean_abs, double) { return 2.0 * mean_abs / root; });
}

inline ScaleTensor init_scales(std::span<const double> x, const QuantSpec& spec,
                               std::span<const std::size_t> group_of)
{
    return init_scales(x, spec, group_of, detail::count_groups(group_of));
}

/// Max-abs calibration: s = max|x| / q_pos, so the largest element of every group lands on
/// the top code. All-zero groups get 1.
inline ScaleTensor calibrate_max_scales(std::span<const double> x, const QuantSpec& spec,
                                        std::span<const std::size_t> group_of, std::size_t n_groups)
{
    const double q = static_cast<double>(spec.q_pos());
    return detail::build_scales(x, group_of, n_groups,
                                [q](double, double max_abs) { return max_abs / q; });
}

inline std::vector<std::int64_t> quantize(std::span<const double> x, const ScaleTensor& s,
                                          const QuantSpec& spec)
{
    s.validate(x.size());
    std::vector<std::int64_t> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], s.scale_of(i), spec);
    return out;
}

inline std::vector<double> dequantize(std::span<const std::int64_t> q, const ScaleTensor& s)
{
    s.validate(q.size());
    std::vector<double> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<double>(q[i]) * s.scale_of(i);
    return out;
}

/// ∂(s·clamp(⌊x/s⌉))/∂s for one element, straight-through on the rounding.
inline double lsq_local_grad(double x, double s, const QuantSpec& spec) noexcept
{
    const double v = x / s;
    const double lo = -static_cast<double>(spec.q_neg());
    const double hi = static_cast<double>(spec.q_pos());
    if (v <= lo) return lo;
    if (v >= hi) return hi;
    return round_half_away(v) - v;
}

/// LSQ gradient scale for a group of n elements.
inline double lsq_grad_scale(std::size_t n, const QuantSpec& spec) noexcept
{
    return 1.0 / std::sqrt(static_cast<double>(n) * static_cast<double>(spec.q_pos()));
}

/// Per-group scale gradient: Σ upstream·local over the group, times 1/sqrt(N_g·q_pos).
inline std::vector<double> scale_grad(std::span<const double> x, const ScaleTensor& s,
                                      const QuantSpec& spec, std::span<const double> upstream)
{
    s.validate(x.size());
    require(upstream.size() == x.size(), "upstream gradient shape mismatch");
    std::vector<double> grad(s.num_groups(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto g = s.group_of[i];
        grad[g] += upstream[i] * lsq_local_grad(x[i], s.values[g], spec);
    }
    const auto sizes = s.group_sizes();
    for (std::size_t g = 0; g < grad.size(); ++g)
        if (sizes[g] > 0) grad[g] *= lsq_grad_scale(sizes[g], spec);
    return grad;
}

inline bool ste_pass(double x, double s, const QuantSpec& spec) noexcept
{
    const double v = x / s;
    return v >= -static_cast<double>(spec.q_neg()) && v <= static_cast<double>(spec.q_pos());
}

/// Straight-through estimator: upstream where -q_neg <= x/s <= q_pos, zero elsewhere.
inline std::vector<double> input_grad_ste(std::span<const double> x, const ScaleTensor& s,
                                          const QuantSpec& spec, std::span<const double> upstream)
{
    s.validate(x.size());
    require(upstream.size() == x.size(), "upstream gradient shape mismatch");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = ste_pass(x[i], s.scale_of(i), spec) ? upstream[i] : 0.0;
    return out;
}

inline ScaleTensor single_scale(double value, std::size_t n_elements)
{
    return ScaleTensor{{value}, std::vector<std::size_t>(n_elements, 0)};
}

}  // namespace cimq
