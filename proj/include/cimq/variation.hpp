#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cimq/error.hpp"
#include "cimq/rng.hpp"

namespace cimq {

enum class VariationLevel { Weight, Cell };

inline std::string_view to_string(VariationLevel l) noexcept
{
    return l == VariationLevel::Weight ? "weight" : "cell";
}

inline VariationLevel parse_variation_level(std::string_view s)
{
    if (s == "weight") return VariationLevel::Weight;
    if (s == "cell") return VariationLevel::Cell;
    throw ValidationError("unknown variation level '" + std::string(s) + "' (expected weight or cell)");
}

/// Log-normal device variation: w_var = w·e^θ with θ ~ N(0, sigma²).
struct VariationSpec {
    double sigma = 0.0;
    VariationLevel level = VariationLevel::Weight;
    std::uint64_t seed = 0;
    int trials = 1;

    void validate() const
    {
        require(sigma >= 0.0 && std::isfinite(sigma), "variation sigma must be >= 0");
        require(trials >= 1, "variation trials must be >= 1");
    }
};

/// θ = sigma·z with z ~ N(0, 1) drawn from `seed`. Sharing the seed across sigmas gives
/// every sigma the same underlying z.
inline std::vector<double> sample_theta(std::size_t count, double sigma, std::uint64_t seed)
{
    require(sigma >= 0.0, "variation sigma must be >= 0");
    std::vector<double> theta(count, 0.0);
    if (sigma == 0.0) return theta;
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& t : theta) t = sigma * normal(rng);
    return theta;
}

inline std::vector<double> apply_variation(std::span<const double> w, std::span<const double> theta)
{
    require(w.size() == theta.size(), "variation noise does not match weight count");
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] * std::exp(theta[i]);
    return out;
}

/// Gains e^θ over split-duplicated cells [n_split, n_weights]. Weight level draws one θ per
/// weight and shares it across its cells; Cell level draws every cell independently.
inline std::vector<double> cell_gains(std::size_t n_weights, std::size_t n_split, double sigma,
                                      VariationLevel level, std::uint64_t seed)
{
    std::vector<double> gains(n_split * n_weights, 1.0);
    if (sigma == 0.0) return gains;
    if (level == VariationLevel::Weight) {
        const auto theta = sample_theta(n_weights, sigma, seed);
        for (std::size_t k = 0; k < n_split; ++k)
            for (std::size_t i = 0; i < n_weights; ++i) gains[k * n_weights + i] = std::exp(theta[i]);
    } else {
        const auto theta = sample_theta(n_split * n_weights, sigma, seed);
        for (std::size_t i = 0; i < gains.size(); ++i) gains[i] = std::exp(theta[i]);
    }
    return gains;
}

struct VariationRow {
    double sigma = 0.0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;  // sample standard deviation over trials (0 for one trial)
};

/// Seed of trial t. Independent of sigma and of evaluation order.
inline std::uint64_t trial_seed(std::uint64_t seed, int trial)
{
    return derive_seed(derive_seed(seed, "variation"), static_cast<std::uint64_t>(trial));
}

/// For each sigma, evaluate `trials` device instances. `eval(sigma, level, trial_seed)`
/// returns the accuracy of one instance; sigma = 0 is evaluated once, noise-free.
template <typename EvalFn>
std::vector<VariationRow> variation_sweep(EvalFn&& eval, std::span<const double> sigmas,
                                          const VariationSpec& spec)
{
    spec.validate();
    std::vector<VariationRow> rows;
    rows.reserve(sigmas.size());
    for (double sigma : sigmas) {
        require(sigma >= 0.0, "variation sigma must be >= 0");
        if (sigma == 0.0) {
            rows.push_back({0.0, eval(0.0, spec.level, trial_seed(spec.seed, 0)), 0.0});
            continue;
        }
        std::vector<double> acc;
        for (int t = 0; t < spec.trials; ++t) acc.push_back(eval(sigma, spec.level, trial_seed(spec.seed, t)));
        double mean = 0.0;
        for (double a : acc) mean += a;
        mean /= static_cast<double>(acc.size());
        double var = 0.0;
        for (double a : acc) var += (a - mean) * (a - mean);
        const double sd = acc.size() > 1 ? std::sqrt(var / static_cast<double>(acc.size() - 1)) : 0.0;
        rows.push_back({sigma, mean, sd});
    }
    return rows;
}

}  // namespace cimq
