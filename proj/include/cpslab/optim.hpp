#pragma once

// Heavy-ball SGD with momentum and L2 weight decay, plus the poly schedule.

#include <cmath>
#include <vector>

#include "cpslab/tensor.hpp"

namespace cpslab {

struct SgdOptions {
    real momentum = 0.9;
    real weight_decay = 0.0005;
};

class OptimizerState {
public:
    OptimizerState() = default;
    explicit OptimizerState(const std::vector<Tensor>& params, SgdOptions opts = {}) : opts_(opts) {
        buffers_.reserve(params.size());
        for (const Tensor& p : params) buffers_.emplace_back(p.shape());
    }

    const SgdOptions& options() const { return opts_; }
    const std::vector<Tensor>& buffers() const { return buffers_; }
    std::vector<Tensor>& buffers() { return buffers_; }

private:
    SgdOptions opts_;
    std::vector<Tensor> buffers_;
};

// buffer <- momentum*buffer + grad + weight_decay*param
// param  <- param - lr*buffer
inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimizerState& state,
                     real lr) {
    if (lr < 0) throw ArgumentError("sgd_step: learning rate must be non-negative");
    auto& bufs = state.buffers();
    if (params.size() != grads.size() || params.size() != bufs.size())
        throw DimensionError("sgd_step: " + std::to_string(params.size()) + " params, " +
                             std::to_string(grads.size()) + " grads, " + std::to_string(bufs.size()) +
                             " buffers");
    const real mu = state.options().momentum;
    const real wd = state.options().weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (grads[k].shape() != p.shape() || bufs[k].shape() != p.shape())
            throw DimensionError("sgd_step: parameter " + std::to_string(k) + " has shape " +
                                 shape_str(p.shape()) + " but grad " + shape_str(grads[k].shape()) +
                                 " and buffer " + shape_str(bufs[k].shape()));
        Tensor& v = bufs[k];
        const Tensor& g = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = mu * v[i] + g[i] + wd * p[i];
            p[i] -= lr * v[i];
        }
    }
}

// base_lr * (1 - iter/max_iter)^power
inline real poly_lr(real base_lr, long iter, long max_iter, real power = 0.9) {
    if (max_iter <= 0) throw ArgumentError("poly_lr: max_iter must be positive");
    if (iter < 0 || iter > max_iter) throw ArgumentError("poly_lr: iter outside [0, max_iter]");
    return base_lr * std::pow(1 - static_cast<real>(iter) / static_cast<real>(max_iter), power);
}

} // namespace cpslab
