#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cimq/error.hpp"
#include "cimq/quantizer.hpp"
#include "cimq/tiler.hpp"

namespace cimq {

/// Dequantization multiplies per layer. Set by the psum granularity alone:
/// Layer → 1, Array → one per (array, output channel), Column → one per (split, array,
/// output channel). Edge arrays count only their mapped output channels.
inline std::size_t dequant_mults(Granularity /*w_gran*/, Granularity p_gran, const TilingPlan& plan,
                                 std::size_t n_split)
{
    require(n_split >= 1, "n_split must be positive");
    switch (p_gran) {
    case Granularity::Layer: return 1;
    case Granularity::Array: return plan.mapped_columns();
    case Granularity::Column: return n_split * plan.mapped_columns();
    }
    return 1;
}

struct ScaleStorage {
    std::size_t stored_w = 0;
    std::size_t stored_p = 0;
    std::size_t stored_fused = 0;

    bool operator==(const ScaleStorage&) const = default;
};

inline std::size_t scale_groups(Granularity g, const TilingPlan& plan, std::size_t n_split)
{
    switch (g) {
    case Granularity::Layer: return 1;
    case Granularity::Array: return plan.n_array();
    case Granularity::Column: return n_split * plan.mapped_columns();
    }
    return 1;
}

inline ScaleStorage scale_storage(Granularity w_gran, Granularity p_gran, const TilingPlan& plan,
                                  std::size_t n_split)
{
    return {scale_groups(w_gran, plan, n_split), scale_groups(p_gran, plan, n_split),
            dequant_mults(w_gran, p_gran, plan, n_split)};
}

struct LayerGeometry {
    std::string name;
    std::size_t c_in = 0, c_out = 0, kernel = 0;
    ArrayShape array;
    int w_bits = 4;
    int cell_bits = 2;
    Granularity w_gran = Granularity::Column;
    Granularity p_gran = Granularity::Column;
};

struct LayerOverhead {
    std::string layer;
    Granularity w_gran = Granularity::Layer;
    Granularity p_gran = Granularity::Layer;
    std::size_t n_array = 0;
    std::size_t n_oc = 0;
    std::size_t n_split = 0;
    std::size_t dequant_mults = 0;
    ScaleStorage storage;
};

struct OverheadReport {
    std::vector<LayerOverhead> layers;
    std::size_t total_dequant_mults = 0;
    std::size_t total_stored_w = 0;
    std::size_t total_stored_p = 0;
    std::size_t total_stored_fused = 0;
};

inline OverheadReport report(const std::vector<LayerGeometry>& model)
{
    require(!model.empty(), "cost report needs at least one layer");
    OverheadReport r;
    for (const auto& l : model) {
        require(l.cell_bits >= 1 && l.w_bits % l.cell_bits == 0, "cell_bits must divide w_bits");
        const TilingPlan plan = plan_tiling(l.c_in, l.c_out, l.kernel, l.array);
        const auto n_split = static_cast<std::size_t>(l.w_bits / l.cell_bits);
        LayerOverhead o;
        o.layer = l.name;
        o.w_gran = l.w_gran;
        o.p_gran = l.p_gran;
        o.n_array = plan.n_array();
        o.n_oc = plan.n_oc();
        o.n_split = n_split;
        o.dequant_mults = dequant_mults(l.w_gran, l.p_gran, plan, n_split);
        o.storage = scale_storage(l.w_gran, l.p_gran, plan, n_split);
        r.total_dequant_mults += o.dequant_mults;
        r.total_stored_w += o.storage.stored_w;
        r.total_stored_p += o.storage.stored_p;
        r.total_stored_fused += o.storage.stored_fused;
        r.layers.push_back(std::move(o));
    }
    return r;
}

}  // namespace cimq
