#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "petapter/errors.hpp"
#include "petapter/parameters.hpp"
#include "petapter/rng.hpp"
#include "petapter/tensor.hpp"

namespace petapter {

// Central-difference gradient verification. Meant to run on f64 models.
//
// For every trainable parameter, compares the analytic gradient against
// (f(x+eps) - f(x-eps)) / (2 eps) on a seeded coordinate subsample (all
// coordinates when a tensor has <= max_coords of them), and returns the
// worst relative error, denominator max(|analytic|, |numeric|, 1e-8).
// The coordinate subsample is drawn from a splitmix64 stream seeded with
// `seed`, so a failing coordinate is reproducible.
struct GradCheckOptions {
    double eps{1e-5};
    std::size_t max_coords{64};
    std::uint64_t seed{0x5eedc0de};
};

template <typename LossFn>
double grad_check(LossFn&& loss_fn, ParameterRegistry<double>& params,
                  const GradCheckOptions& opt = {}) {
    params.zero_grads();
    Tensor<double> loss = loss_fn();
    if (!all_finite(loss)) {
        throw NumericError("grad_check: non-finite loss");
    }
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params.items()) {
        analytic.push_back(p.trainable() ? p.tensor.grad() : std::vector<double>{});
    }

    SplitMix64 rng(opt.seed);
    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.items().size(); ++pi) {
        auto& p = params.items()[pi];
        if (!p.trainable()) {
            continue;
        }
        const std::size_t n = p.tensor.size();
        std::vector<std::size_t> coords;
        if (n <= opt.max_coords) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                coords[i] = i;
            }
        } else {
            coords = rng.sample_without_replacement(n, opt.max_coords);
        }
        auto& value = p.tensor.values();
        for (std::size_t c : coords) {
            const double original = value[c];
            value[c] = original + opt.eps;
            double plus;
            {
                NoGradGuard ng;
                plus = loss_fn().item();
            }
            value[c] = original - opt.eps;
            double minus;
            {
                NoGradGuard ng;
                minus = loss_fn().item();
            }
            value[c] = original;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw NumericError("grad_check: non-finite perturbed loss at parameter '" +
                                   p.name + "'");
            }
            const double numeric = (plus - minus) / (2.0 * opt.eps);
            const double a = analytic[pi][c];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    params.zero_grads();
    return max_rel;
}

} // namespace petapter
