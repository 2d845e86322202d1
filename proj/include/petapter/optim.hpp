#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "petapter/errors.hpp"
#include "petapter/parameters.hpp"

namespace petapter {

struct AdamConfig {
    double lr{5e-5};
    double beta1{0.9};
    double beta2{0.999};
    double epsilon{1e-8};
};

// Adam with bias correction. Moment buffers exist only for trainable
// parameters and are created lazily on the first step that touches them.
// Gradients are zeroed after each applied update.
template <typename Real>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return t_; }

    void step(ParameterRegistry<Real>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : params.items()) {
            if (!p.trainable()) {
                continue;
            }
            if (!p.tensor.has_grad()) {
                throw ContractError("adam step: trainable parameter '" + p.name +
                                    "' has no gradient");
            }
            Moments& m = moments_[p.name];
            if (m.first.size() != p.tensor.size()) {
                m.first.assign(p.tensor.size(), 0.0);
                m.second.assign(p.tensor.size(), 0.0);
            }
            auto& value = p.tensor.values();
            auto& grad = p.tensor.grad();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = static_cast<double>(grad[i]);
                m.first[i] = cfg_.beta1 * m.first[i] + (1.0 - cfg_.beta1) * g;
                m.second[i] = cfg_.beta2 * m.second[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m.first[i] / bc1;
                const double vhat = m.second[i] / bc2;
                value[i] = static_cast<Real>(static_cast<double>(value[i]) -
                                             cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
            }
            p.tensor.zero_grad();
        }
    }

    bool has_moments(const std::string& name) const { return moments_.count(name) != 0; }

private:
    struct Moments {
        std::vector<double> first;
        std::vector<double> second;
    };

    AdamConfig cfg_;
    std::int64_t t_{0};
    std::unordered_map<std::string, Moments> moments_;
};

} // namespace petapter
