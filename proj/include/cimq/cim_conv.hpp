#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cimq/bitsplit.hpp"
#include "cimq/error.hpp"
#include "cimq/quantizer.hpp"
#include "cimq/tensor.hpp"
#include "cimq/tiler.hpp"

namespace cimq {

struct CimLayerConfig {
    int w_bits = 4;
    int a_bits = 4;
    int p_bits = 4;
    int cell_bits = 2;
    ArrayShape array{16, 16};
    Granularity w_gran = Granularity::Column;
    Granularity p_gran = Granularity::Column;
    std::size_t stride = 1;
    std::size_t pad = 0;
    // false bypasses the ADC: partial-sums reach dequantization unrounded and unclipped.
    bool psum_quant = true;

    int n_split() const noexcept { return w_bits / cell_bits; }
    QuantSpec weight_spec() const { return QuantSpec::make_signed(w_bits, w_gran); }
    QuantSpec act_spec() const { return QuantSpec::make_unsigned(a_bits, Granularity::Layer); }
    QuantSpec psum_spec() const { return QuantSpec::make_signed(p_bits, p_gran); }

    void validate() const
    {
        require(w_bits >= 2 && w_bits <= 32, "w_bits must be in [2, 32]");
        require(p_bits >= 2 && p_bits <= 40, "p_bits must be in [2, 40]");
        require(a_bits >= 1 && a_bits <= 32, "a_bits must be in [1, 32]");
        require(cell_bits >= 1, "cell_bits must be positive");
        require(w_bits % cell_bits == 0, "cell_bits must divide w_bits");
        require(stride >= 1, "stride must be positive");
        require(array.rows >= 1 && array.cols >= 1, "array dimensions must be positive");
    }

    bool operator==(const CimLayerConfig&) const = default;
};

/// Geometry of one layer on the arrays: tiling plan, mapped columns and scale-group maps.
///
/// Only mapped columns exist here; bit lines of a trailing column tile that hold no output
/// channel are never simulated.
class CimLayout {
public:
    struct Column {
        std::size_t id = 0;  // column_index(plan, array, local_oc, split)
        std::size_t array = 0;
        std::size_t split = 0;
        std::size_t oc = 0;  // global output channel
        std::size_t local_oc = 0;
        std::size_t ci_begin = 0, ci_end = 0;
    };

    CimLayout() = default;

    CimLayout(std::size_t c_in, std::size_t c_out, std::size_t kernel, const CimLayerConfig& cfg)
        : cfg_(cfg)
    {
        cfg_.validate();
        plan_ = plan_tiling(c_in, c_out, kernel, cfg.array);
        const std::size_t s = n_split();
        const std::size_t n_ids = s * plan_.n_array() * plan_.n_oc();
        ordinal_of_id_.assign(n_ids, kNone);
        for (std::size_t id = 0; id < n_ids; ++id) {
            const ColumnRef r = column_from_index(plan_, id, s);
            const ArrayTile t = plan_.tile(r.array);
            if (r.local_oc >= t.out_channels()) continue;
            ordinal_of_id_[id] = columns_.size();
            columns_.push_back(
                {id, r.array, r.split, t.oc_begin + r.local_oc, r.local_oc, t.ci_begin, t.ci_end});
        }
    }

    const TilingPlan& plan() const noexcept { return plan_; }
    const CimLayerConfig& config() const noexcept { return cfg_; }
    std::size_t n_split() const noexcept { return static_cast<std::size_t>(cfg_.n_split()); }
    const std::vector<Column>& columns() const noexcept { return columns_; }
    std::size_t weight_elements() const noexcept
    {
        return plan_.c_out * plan_.c_in * plan_.kernel_area();
    }

    std::size_t ordinal_of(std::size_t column_id) const
    {
        require(column_id < ordinal_of_id_.size() && ordinal_of_id_[column_id] != kNone,
                "column id is not mapped");
        return ordinal_of_id_[column_id];
    }

    std::size_t num_weight_groups() const noexcept { return num_groups(cfg_.w_gran); }
    std::size_t num_psum_groups() const noexcept { return num_groups(cfg_.p_gran); }

    std::size_t weight_group(std::size_t k, std::size_t oc, std::size_t ci) const
    {
        switch (cfg_.w_gran) {
        case Granularity::Layer: return 0;
        case Granularity::Array: return plan_.array_of(oc, ci);
        case Granularity::Column: {
            const std::size_t a = plan_.array_of(oc, ci);
            const std::size_t local = oc - plan_.tile(a).oc_begin;
            return ordinal_of_id_[column_index(plan_, a, local, k, n_split())];
        }
        }
        return 0;
    }

    std::size_t column_weight_group(std::size_t j) const { return group_of_column(cfg_.w_gran, j); }
    std::size_t psum_group(std::size_t j) const { return group_of_column(cfg_.p_gran, j); }

    /// Group map over the split-duplicated weight tensor [n_split, C_out, C_in, K, K].
    std::vector<std::size_t> weight_group_map() const
    {
        const std::size_t kk = plan_.kernel_area();
        std::vector<std::size_t> m(n_split() * weight_elements());
        std::size_t i = 0;
        for (std::size_t k = 0; k < n_split(); ++k)
            for (std::size_t o = 0; o < plan_.c_out; ++o)
                for (std::size_t ci = 0; ci < plan_.c_in; ++ci) {
                    const std::size_t g = weight_group(k, o, ci);
                    for (std::size_t e = 0; e < kk; ++e) m[i++] = g;
                }
        return m;
    }

    /// Distinct (non-duplicated) weights per weight-scale group.
    std::vector<std::size_t> weight_group_elements() const
    {
        std::vector<std::size_t> n(num_weight_groups(), 0);
        for (std::size_t o = 0; o < plan_.c_out; ++o)
            for (std::size_t ci = 0; ci < plan_.c_in; ++ci)
                for (std::size_t k = 0; k < n_split(); ++k) {
                    // shared groups span every split; only count them once
                    if (k > 0 && cfg_.w_gran != Granularity::Column) break;
                    n[weight_group(k, o, ci)] += plan_.kernel_area();
                }
        return n;
    }

    /// Psum group per mapped column (the psum ScaleTensor's group map).
    std::vector<std::size_t> psum_group_map() const
    {
        std::vector<std::size_t> m(columns_.size());
        for (std::size_t j = 0; j < columns_.size(); ++j) m[j] = psum_group(j);
        return m;
    }

    /// Key of the dequantization multiply that serves column j. Layer: one for the layer;
    /// Array: one per (array, output channel) after in-array shift-and-add; Column: one per
    /// column.
    std::size_t dequant_site(std::size_t j) const
    {
        const Column& c = columns_[j];
        switch (cfg_.p_gran) {
        case Granularity::Layer: return 0;
        case Granularity::Array: return c.array * plan_.n_oc() + c.local_oc;
        case Granularity::Column: return c.id;
        }
        return 0;
    }

private:
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

    std::size_t num_groups(Granularity g) const noexcept
    {
        switch (g) {
        case Granularity::Layer: return 1;
        case Granularity::Array: return plan_.n_array();
        case Granularity::Column: return columns_.size();
        }
        return 1;
    }

    std::size_t group_of_column(Granularity g, std::size_t j) const
    {
        switch (g) {
        case Granularity::Layer: return 0;
        case Granularity::Array: return columns_[j].array;
        case Granularity::Column: return j;
        }
        return 0;
    }

    CimLayerConfig cfg_;
    TilingPlan plan_;
    std::vector<Column> columns_;
    std::vector<std::size_t> ordinal_of_id_;
};

/// Scale factors of one layer: activation (layer-wise), weights over the split-duplicated
/// weight tensor, partial-sums over mapped columns.
struct CimScales {
    double act = 1.0;
    ScaleTensor weight;
    ScaleTensor psum;

    void validate(const CimLayout& layout) const
    {
        require(act > 0.0 && std::isfinite(act), "activation scale must be positive");
        weight.validate(layout.n_split() * layout.weight_elements());
        require(weight.num_groups() == layout.num_weight_groups(),
                "weight scale count does not match weight granularity");
        psum.validate(layout.columns().size());
        require(psum.num_groups() == layout.num_psum_groups(),
                "psum scale count does not match psum granularity");
    }
};

enum class WeightInit { Lsq, MaxAbs };

/// Repeat w once per bit-split: [n_split, C_out, C_in, K, K].
inline std::vector<double> duplicate_weights(const Tensor<double>& w, std::size_t n_split)
{
    std::vector<double> d;
    d.reserve(n_split * w.size());
    for (std::size_t k = 0; k < n_split; ++k) d.insert(d.end(), w.vec().begin(), w.vec().end());
    return d;
}

inline ScaleTensor init_weight_scales(const Tensor<double>& w, const CimLayout& layout,
                                      WeightInit method = WeightInit::Lsq)
{
    const auto dup = duplicate_weights(w, layout.n_split());
    const auto map = layout.weight_group_map();
    const QuantSpec spec = layout.config().weight_spec();
    return method == WeightInit::Lsq
               ? init_scales(dup, spec, map, layout.num_weight_groups())
               : calibrate_max_scales(dup, spec, map, layout.num_weight_groups());
}

inline ScaleTensor uniform_psum_scales(const CimLayout& layout, double value = 1.0)
{
    return ScaleTensor{std::vector<double>(layout.num_psum_groups(), value), layout.psum_group_map()};
}

inline CimScales make_scales(double act, ScaleTensor weight, ScaleTensor psum)
{
    return CimScales{act, std::move(weight), std::move(psum)};
}

/// LSQ-initialize psum scales from observed partial-sums (one sample vector per column).
inline ScaleTensor init_psum_scales(const std::vector<std::vector<double>>& psums,
                                    const CimLayout& layout)
{
    require(psums.size() == layout.columns().size(), "psum samples do not cover every column");
    std::vector<double> flat;
    std::vector<std::size_t> map;
    for (std::size_t j = 0; j < psums.size(); ++j) {
        flat.insert(flat.end(), psums[j].begin(), psums[j].end());
        map.insert(map.end(), psums[j].size(), layout.psum_group(j));
    }
    ScaleTensor s = init_scales(flat, layout.config().psum_spec(), map, layout.num_psum_groups());
    s.group_of = layout.psum_group_map();
    return s;
}

struct PsumCodes {
    std::vector<std::int64_t> codes;
    std::size_t clips = 0;
};

inline bool clips(double v, double s, const QuantSpec& spec) noexcept
{
    const double r = round_half_away(v / s);
    return r > static_cast<double>(spec.q_pos()) || r < -static_cast<double>(spec.q_neg());
}

/// ADC model: quantize one column's partial-sums with its scale, counting clipped samples.
inline PsumCodes quantize_psums(std::span<const double> psums, double s_p, const QuantSpec& spec)
{
    require(s_p > 0.0, "psum scale must be positive");
    PsumCodes out;
    out.codes.resize(psums.size());
    for (std::size_t i = 0; i < psums.size(); ++i) {
        out.codes[i] = quantize_value(psums[i], s_p, spec);
        if (clips(psums[i], s_p, spec)) ++out.clips;
    }
    return out;
}

/// q·(s_w·s_p) with the product formed once and reused for every sample.
inline std::vector<double> dequantize_fused(std::span<const std::int64_t> qpsums, double s_w, double s_p)
{
    const double fused = s_w * s_p;
    std::vector<double> out(qpsums.size());
    for (std::size_t i = 0; i < qpsums.size(); ++i) out[i] = static_cast<double>(qpsums[i]) * fused;
    return out;
}

enum class TraceLevel { Counts, Samples };

struct ColumnTrace {
    std::size_t column_id = 0;
    std::size_t array = 0;
    std::size_t out_channel = 0;
    std::size_t split = 0;
    double weight_scale = 1.0;
    double psum_scale = 1.0;
    std::size_t samples = 0;
    std::size_t clips = 0;
    std::vector<double> values;  // partial-sums before the ADC; TraceLevel::Samples only
};

struct CimTrace {
    std::vector<ColumnTrace> columns;
    std::size_t dequant_mults = 0;

    std::size_t total_clips() const noexcept
    {
        std::size_t n = 0;
        for (const auto& c : columns) n += c.clips;
        return n;
    }
    std::size_t distinct_columns() const
    {
        std::set<std::size_t> ids;
        for (const auto& c : columns) ids.insert(c.column_id);
        return ids.size();
    }
};

struct ForwardOptions {
    TraceLevel trace = TraceLevel::Counts;
    // Multiplicative cell gains e^θ over [n_split, C_out, C_in, K, K]; empty means ideal cells.
    std::span<const double> cell_gain{};
    bool keep_cache = false;
};

/// Everything backward() needs from the forward pass.
struct ForwardCache {
    CimLayout layout;
    CimScales scales;
    Tensor<double> x;
    Tensor<double> w;
    Tensor<double> x_codes;              // activation codes, NCHW
    Tensor<double> patches;              // im2col(x_codes): [N·P, C_in·K²]
    std::vector<double> weight_codes;    // per split, [n_split, C_out, C_in·K²]
    std::vector<double> digits;          // per split cell values, same layout
    std::vector<std::vector<double>> psums;  // per mapped column, [N·P]
    Tensor<double> pre_scale;            // output before the activation scale
    std::size_t positions = 0;
};

struct ForwardResult {
    Tensor<double> out;
    CimTrace trace;
    std::shared_ptr<const ForwardCache> cache;
};

/// One convolution layer on bit-scalable arrays: activation quantization, per-split weight
/// quantization and digit extraction, per-array MACs, per-column ADC, fused dequantization,
/// accumulation over row tiles, then shift-and-add over splits.
inline ForwardResult forward(const Tensor<double>& x, const Tensor<double>& w, const CimLayout& layout,
                             const CimScales& scales, const ForwardOptions& opt = {})
{
    const CimLayerConfig& cfg = layout.config();
    const TilingPlan& plan = layout.plan();
    require(x.rank() == 4 && x.dim(1) == plan.c_in, "input shape " + shape_str(x.shape()) +
                                                        " does not match layer input channels");
    require(w.shape() == Shape{plan.c_out, plan.c_in, plan.kernel, plan.kernel},
            "weight shape " + shape_str(w.shape()) + " does not match layer");
    scales.validate(layout);
    const std::size_t n_split = layout.n_split();
    const std::size_t kk = plan.kernel_area();
    const std::size_t e_total = plan.c_in * kk;
    if (!opt.cell_gain.empty())
        require(opt.cell_gain.size() == n_split * w.size(), "cell gain tensor has wrong size");

    auto cache = std::make_shared<ForwardCache>();
    cache->layout = layout;

    // activations: one layer-wise unsigned quantizer, shared by every array
    const QuantSpec a_spec = cfg.act_spec();
    Tensor<double> x_codes(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        x_codes[i] = static_cast<double>(quantize_value(x[i], scales.act, a_spec));

    // weights: duplicate per split, quantize each copy with its own group scale, keep digit k
    const QuantSpec w_spec = cfg.weight_spec();
    std::vector<double> codes(n_split * w.size());
    std::vector<double> digits(n_split * w.size());
    for (std::size_t k = 0; k < n_split; ++k)
        for (std::size_t o = 0; o < plan.c_out; ++o)
            for (std::size_t ci = 0; ci < plan.c_in; ++ci) {
                const double s = scales.weight.values[layout.weight_group(k, o, ci)];
                for (std::size_t e = 0; e < kk; ++e) {
                    const std::size_t src = (o * plan.c_in + ci) * kk + e;
                    const std::size_t dst = k * w.size() + src;
                    const std::int64_t c = quantize_value(w[src], s, w_spec);
                    codes[dst] = static_cast<double>(c);
                    digits[dst] = static_cast<double>(
                        split_digit(c, static_cast<int>(k), cfg.cell_bits, static_cast<int>(n_split)));
                    if (!opt.cell_gain.empty()) digits[dst] *= opt.cell_gain[dst];
                }
            }

    Tensor<double> patches = im2col(x_codes, plan.kernel, cfg.stride, cfg.pad);
    const std::size_t n = x.dim(0);
    const std::size_t ho = conv_out_size(x.dim(2), plan.kernel, cfg.stride, cfg.pad);
    const std::size_t wo = conv_out_size(x.dim(3), plan.kernel, cfg.stride, cfg.pad);
    const std::size_t positions = ho * wo;
    const std::size_t rows = n * positions;

    const QuantSpec p_spec = cfg.psum_spec();
    const auto& cols = layout.columns();
    ForwardResult result;
    result.trace.columns.reserve(cols.size());
    std::vector<std::vector<double>> psums(cols.size(), std::vector<double>(rows));
    std::vector<double> split_acc(n_split * n * plan.c_out * positions, 0.0);
    std::set<std::size_t> sites;

    // MACs, one (split, array) column group at a time; per column the sum runs over e in
    // ascending order, and a zero activation code contributes an exact zero.
    std::vector<double> wt, accs;
    for (std::size_t j0 = 0; j0 < cols.size();) {
        std::size_t j1 = j0 + 1;
        while (j1 < cols.size() && cols[j1].split == cols[j0].split && cols[j1].array == cols[j0].array) ++j1;
        const std::size_t m = j1 - j0;
        const std::size_t e0 = cols[j0].ci_begin * kk, e1 = cols[j0].ci_end * kk;
        wt.assign((e1 - e0) * m, 0.0);
        for (std::size_t jj = 0; jj < m; ++jj) {
            const double* wd = digits.data() + cols[j0].split * w.size() + cols[j0 + jj].oc * e_total;
            for (std::size_t e = e0; e < e1; ++e) wt[(e - e0) * m + jj] = wd[e];
        }
        accs.resize(m);
        for (std::size_t r = 0; r < rows; ++r) {
            std::fill(accs.begin(), accs.end(), 0.0);
            const double* pr = patches.data() + r * e_total;
            for (std::size_t e = e0; e < e1; ++e) {
                const double pe = pr[e];
                if (pe == 0.0) continue;
                const double* wrow = wt.data() + (e - e0) * m;
                for (std::size_t jj = 0; jj < m; ++jj) accs[jj] += wrow[jj] * pe;
            }
            for (std::size_t jj = 0; jj < m; ++jj) psums[j0 + jj][r] = accs[jj];
        }
        j0 = j1;
    }

    for (std::size_t j = 0; j < cols.size(); ++j) {
        const auto& col = cols[j];
        std::vector<double>& pj = psums[j];

        const double s_w = scales.weight.values[layout.column_weight_group(j)];
        const double s_p = scales.psum.values[layout.psum_group(j)];
        ColumnTrace tr{col.id, col.array, col.oc, col.split, s_w, s_p, rows, 0, {}};
        double* acc = split_acc.data() + col.split * n * plan.c_out * positions;
        if (cfg.psum_quant) {
            const PsumCodes q = quantize_psums(pj, s_p, p_spec);
            tr.clips = q.clips;
            const auto deq = dequantize_fused(q.codes, s_w, s_p);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < positions; ++p)
                    acc[(b * plan.c_out + col.oc) * positions + p] += deq[b * positions + p];
        } else {
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < positions; ++p)
                    acc[(b * plan.c_out + col.oc) * positions + p] += pj[b * positions + p] * s_w;
        }
        if (opt.trace == TraceLevel::Samples) tr.values = pj;
        result.trace.columns.push_back(std::move(tr));
        sites.insert(layout.dequant_site(j));
    }
    result.trace.dequant_mults = sites.size();

    Tensor<double> pre({n, plan.c_out, ho, wo}, 0.0);
    for (std::size_t k = 0; k < n_split; ++k) {
        const double shift = std::ldexp(1.0, cfg.cell_bits * static_cast<int>(k));
        const double* acc = split_acc.data() + k * pre.size();
        for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += acc[i] * shift;
    }
    result.out = Tensor<double>(pre.shape());
    for (std::size_t i = 0; i < pre.size(); ++i) result.out[i] = pre[i] * scales.act;

    if (opt.keep_cache) {
        cache->scales = scales;
        cache->x = x;
        cache->w = w;
        cache->x_codes = std::move(x_codes);
        cache->patches = std::move(patches);
        cache->weight_codes = std::move(codes);
        cache->digits = std::move(digits);
        cache->psums = std::move(psums);
        cache->pre_scale = std::move(pre);
        cache->positions = positions;
        result.cache = std::move(cache);
    }
    return result;
}

inline ForwardResult forward(const Tensor<double>& x, const Tensor<double>& w, const CimLayerConfig& cfg,
                             const CimScales& scales, const ForwardOptions& opt = {})
{
    require(w.rank() == 4, "weight must be [C_out, C_in, K, K]");
    return forward(x, w, CimLayout(w.dim(1), w.dim(0), w.dim(2), cfg), scales, opt);
}

/// Baseline with a single layer-wise weight scale and the configured psum granularity.
inline ForwardResult layerwise_weight_path(const Tensor<double>& x, const Tensor<double>& w,
                                           CimLayerConfig cfg, double act_scale, double s_w,
                                           const ScaleTensor& scales_p, const ForwardOptions& opt = {})
{
    cfg.w_gran = Granularity::Layer;
    const CimLayout layout(w.dim(1), w.dim(0), w.dim(2), cfg);
    CimScales s{act_scale, single_scale(s_w, layout.n_split() * w.size()), scales_p};
    return forward(x, w, layout, s, opt);
}

/// Partial-sums of every mapped column with the ADC bypassed.
inline std::vector<std::vector<double>> observe_psums(const Tensor<double>& x, const Tensor<double>& w,
                                                      const CimLayout& layout, const CimScales& scales)
{
    CimLayerConfig cfg = layout.config();
    cfg.psum_quant = false;
    const CimLayout raw(layout.plan().c_in, layout.plan().c_out, layout.plan().kernel, cfg);
    ForwardOptions opt;
    opt.trace = TraceLevel::Samples;
    auto r = forward(x, w, raw, scales, opt);
    std::vector<std::vector<double>> out;
    out.reserve(r.trace.columns.size());
    for (auto& c : r.trace.columns) out.push_back(std::move(c.values));
    return out;
}

/// Full-precision convolution by direct nested loops.
inline Tensor<double> reference_forward(const Tensor<double>& x, const Tensor<double>& w,
                                        std::size_t stride, std::size_t pad)
{
    require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1), "reference_forward shape mismatch");
    const std::size_t n = x.dim(0), ci_n = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co_n = w.dim(0), k = w.dim(2);
    const std::size_t ho = conv_out_size(h, k, stride, pad), wo = conv_out_size(wd, k, stride, pad);
    Tensor<double> out({n, co_n, ho, wo}, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co_n; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < ci_n; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                acc += x.at(b, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                       w.at(o, ci, ky, kx);
                            }
                        }
                    out.at(b, o, oy, ox) = acc;
                }
    return out;
}

struct ConvGrads {
    Tensor<double> dx;
    Tensor<double> dw;
};

/// Backward of reference_forward.
inline ConvGrads reference_backward(const Tensor<double>& x, const Tensor<double>& w,
                                    const Tensor<double>& grad_out, std::size_t stride, std::size_t pad)
{
    const std::size_t n = x.dim(0), ci_n = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co_n = w.dim(0), k = w.dim(2);
    const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3);
    ConvGrads g{Tensor<double>(x.shape(), 0.0), Tensor<double>(w.shape(), 0.0)};
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co_n; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const double dy = grad_out.at(b, o, oy, ox);
                    if (dy == 0.0) continue;
                    for (std::size_t ci = 0; ci < ci_n; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                const auto yy = static_cast<std::size_t>(iy), xx = static_cast<std::size_t>(ix);
                                g.dw.at(o, ci, ky, kx) += dy * x.at(b, ci, yy, xx);
                                g.dx.at(b, ci, yy, xx) += dy * w.at(o, ci, ky, kx);
                            }
                        }
                }
    return g;
}

struct CimGrads {
    Tensor<double> dx;
    Tensor<double> dw;
    Tensor<double> dx_dequant;  // ∂L/∂(s_a·code), before the activation STE mask
    double d_act = 0.0;
    std::vector<double> d_weight_scales;
    std::vector<double> d_psum_scales;
};

/// Backward through forward(): straight-through on every rounding, LSQ rules for every scale.
///
/// The k-th split stores digit k of the k-th weight copy's code; its derivative w.r.t. that
/// code is taken as 1/(n_split·2^(c·k)), so with shared scales and an ideal ADC the copies
/// together reproduce plain LSQ on the weight.
inline CimGrads backward(const ForwardCache& c, const Tensor<double>& grad_out)
{
    const CimLayout& layout = c.layout;
    const CimLayerConfig& cfg = layout.config();
    const TilingPlan& plan = layout.plan();
    require(grad_out.shape() == c.pre_scale.shape(), "gradient shape does not match layer output");
    const std::size_t n_split = layout.n_split();
    const std::size_t kk = plan.kernel_area();
    const std::size_t e_total = plan.c_in * kk;
    const std::size_t w_size = c.w.size();
    const std::size_t n = c.x.dim(0);
    const std::size_t positions = c.positions;
    const std::size_t rows = n * positions;
    const double s_a = c.scales.act;
    const QuantSpec p_spec = cfg.psum_spec();
    const QuantSpec w_spec = cfg.weight_spec();
    const QuantSpec a_spec = cfg.act_spec();

    CimGrads g;
    g.d_weight_scales.assign(layout.num_weight_groups(), 0.0);
    g.d_psum_scales.assign(layout.num_psum_groups(), 0.0);
    std::vector<double> d_digits(n_split * w_size, 0.0);
    Tensor<double> d_patches(c.patches.shape(), 0.0);
    std::vector<std::size_t> psum_group_samples(layout.num_psum_groups(), 0);

    const auto& cols = layout.columns();
    std::vector<double> dp(rows);
    for (std::size_t j = 0; j < cols.size(); ++j) {
        const auto& col = cols[j];
        const double shift = std::ldexp(1.0, cfg.cell_bits * static_cast<int>(col.split));
        const double s_w = c.scales.weight.values[layout.column_weight_group(j)];
        const std::size_t pg = layout.psum_group(j);
        const double s_p = c.scales.psum.values[pg];
        const double up = s_a * shift;
        const std::vector<double>& pj = c.psums[j];
        double direct_sw = 0.0;
        double d_sp = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t p = 0; p < positions; ++p) {
                const std::size_t r = b * positions + p;
                const double dy = grad_out[(b * plan.c_out + col.oc) * positions + p] * up;
                if (cfg.psum_quant) {
                    const double q = static_cast<double>(quantize_value(pj[r], s_p, p_spec));
                    direct_sw += dy * q * s_p;
                    d_sp += dy * s_w * lsq_local_grad(pj[r], s_p, p_spec);
                    dp[r] = ste_pass(pj[r], s_p, p_spec) ? dy * s_w : 0.0;
                } else {
                    direct_sw += dy * pj[r];
                    dp[r] = dy * s_w;
                }
            }
        psum_group_samples[pg] += rows;
        g.d_psum_scales[pg] += d_sp;
        g.d_weight_scales[layout.column_weight_group(j)] += direct_sw;

        const std::size_t e0 = col.ci_begin * kk, e1 = col.ci_end * kk;
        double* dd = d_digits.data() + col.split * w_size + col.oc * e_total;
        const double* wd = c.digits.data() + col.split * w_size + col.oc * e_total;
        for (std::size_t r = 0; r < rows; ++r) {
            const double d = dp[r];
            if (d == 0.0) continue;
            const double* pr = c.patches.data() + r * e_total;
            double* dpr = d_patches.data() + r * e_total;
            for (std::size_t e = e0; e < e1; ++e) {
                dd[e] += d * pr[e];
                dpr[e] += d * wd[e];
            }
        }
    }
    if (cfg.psum_quant)
        for (std::size_t gi = 0; gi < g.d_psum_scales.size(); ++gi)
            g.d_psum_scales[gi] *= lsq_grad_scale(psum_group_samples[gi], p_spec);
    else
        std::fill(g.d_psum_scales.begin(), g.d_psum_scales.end(), 0.0);

    // digits -> per-copy codes -> weight and weight scales
    g.dw = Tensor<double>(c.w.shape(), 0.0);
    for (std::size_t k = 0; k < n_split; ++k) {
        const double share = 1.0 / (static_cast<double>(n_split) * std::ldexp(1.0, cfg.cell_bits * static_cast<int>(k)));
        for (std::size_t o = 0; o < plan.c_out; ++o)
            for (std::size_t ci = 0; ci < plan.c_in; ++ci) {
                const std::size_t grp = layout.weight_group(k, o, ci);
                const double s = c.scales.weight.values[grp];
                double dsum = 0.0;
                for (std::size_t e = 0; e < kk; ++e) {
                    const std::size_t src = (o * plan.c_in + ci) * kk + e;
                    const std::size_t idx = k * w_size + src;
                    const double dc = d_digits[idx] * share;
                    if (dc == 0.0) continue;
                    const double wv = c.w[src];
                    if (ste_pass(wv, s, w_spec)) g.dw[src] += dc / s;
                    dsum += dc * (lsq_local_grad(wv, s, w_spec) - c.weight_codes[idx]) / s;
                }
                g.d_weight_scales[grp] += dsum;
            }
    }
    const auto group_n = layout.weight_group_elements();
    for (std::size_t gi = 0; gi < g.d_weight_scales.size(); ++gi)
        g.d_weight_scales[gi] *= lsq_grad_scale(group_n[gi], w_spec);

    // patches -> activation codes (col2im) -> input and activation scale
    Tensor<double> d_codes(c.x.shape(), 0.0);
    const std::size_t h = c.x.dim(2), wdth = c.x.dim(3);
    const std::size_t ho = c.pre_scale.dim(2), wo = c.pre_scale.dim(3);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const double* dpr = d_patches.data() + ((b * ho + oy) * wo + ox) * e_total;
                for (std::size_t ci = 0; ci < plan.c_in; ++ci)
                    for (std::size_t ky = 0; ky < plan.kernel; ++ky) {
                        const long iy = static_cast<long>(oy * cfg.stride + ky) - static_cast<long>(cfg.pad);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t kx = 0; kx < plan.kernel; ++kx) {
                            const long ix = static_cast<long>(ox * cfg.stride + kx) - static_cast<long>(cfg.pad);
                            if (ix < 0 || ix >= static_cast<long>(wdth)) continue;
                            d_codes.at(b, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                                dpr[(ci * plan.kernel + ky) * plan.kernel + kx];
                        }
                    }
            }

    double d_act = 0.0;
    for (std::size_t i = 0; i < grad_out.size(); ++i) d_act += grad_out[i] * c.pre_scale[i];
    g.dx = Tensor<double>(c.x.shape(), 0.0);
    g.dx_dequant = Tensor<double>(c.x.shape(), 0.0);
    for (std::size_t i = 0; i < c.x.size(); ++i) {
        const double dxh = d_codes[i] / s_a;
        g.dx_dequant[i] = dxh;
        if (ste_pass(c.x[i], s_a, a_spec)) g.dx[i] = dxh;
        d_act += d_codes[i] * (lsq_local_grad(c.x[i], s_a, a_spec) - c.x_codes[i]) / s_a;
    }
    g.d_act = d_act * lsq_grad_scale(c.x.size(), a_spec);
    return g;
}

}  // namespace cimq
