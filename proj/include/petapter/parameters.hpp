#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "petapter/errors.hpp"
#include "petapter/rng.hpp"
#include "petapter/tensor.hpp"

namespace petapter {

// A named model weight. Trainability is stored on the underlying tensor so
// the autodiff tape and the optimizer see the same flag.
template <typename Real>
struct Parameter {
    std::string name;
    Tensor<Real> tensor;

    bool trainable() const { return tensor.requires_grad(); }
    void set_trainable(bool b) {
        tensor.set_requires_grad(b);
        if (!b) {
            tensor.drop_grad();
        }
    }
};

// Insertion-ordered registry of all parameters of one model (encoder, PEFT
// modules, head). Checkpoint manifests and optimizer sweeps iterate it in
// registration order, which keeps every run byte-deterministic.
template <typename Real>
class ParameterRegistry {
public:
    Tensor<Real> add(const std::string& name, Tensor<Real> tensor, bool trainable) {
        if (index_.count(name)) {
            throw ContractError("duplicate parameter name: " + name);
        }
        tensor.set_requires_grad(trainable);
        index_[name] = params_.size();
        params_.push_back(Parameter<Real>{name, tensor});
        return tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<Real>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("unknown parameter: " + name);
        }
        return params_[it->second];
    }

    const Parameter<Real>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("unknown parameter: " + name);
        }
        return params_[it->second];
    }

    void remove(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("unknown parameter: " + name);
        }
        params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(it->second));
        index_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            index_[params_[i].name] = i;
        }
    }

    std::vector<Parameter<Real>>& items() { return params_; }
    const std::vector<Parameter<Real>>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += p.tensor.size();
        }
        return n;
    }

    std::size_t trainable_scalars() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (p.trainable()) {
                n += p.tensor.size();
            }
        }
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) {
            p.tensor.zero_grad();
        }
    }

private:
    std::vector<Parameter<Real>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Gaussian init helper used for every weight matrix (std 0.02 by default).
template <typename Real>
Tensor<Real> gaussian_tensor(Shape shape, SplitMix64& rng, double stddev = 0.02) {
    std::vector<Real> data(numel(shape));
    for (auto& v : data) {
        v = static_cast<Real>(rng.gauss() * stddev);
    }
    return Tensor<Real>::from_data(std::move(shape), std::move(data));
}

} // namespace petapter
