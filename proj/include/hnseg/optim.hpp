#pragma once

#include <cmath>
#include <vector>

#include "hnseg/unetr.hpp"

namespace hnseg {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// First/second moment buffers, aligned with a fixed ParamEntry order.
template <typename T>
struct AdamWState {
    std::vector<std::vector<T>> m, v;
    int64_t step = 0;

    void init(const std::vector<ParamEntry<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& e : params) {
            m.emplace_back(size_t(e.tensor.numel()), T(0));
            v.emplace_back(size_t(e.tensor.numel()), T(0));
        }
        step = 0;
    }
};

// Decoupled weight decay; decay is skipped where the entry opts out
// (norm gains/biases and position embeddings).
template <typename T>
void adamw_step(std::vector<ParamEntry<T>>& params, AdamWState<T>& state,
                const AdamWConfig& cfg) {
    if (state.m.size() != params.size()) {
        throw TensorError(TensorError::Code::ShapeMismatch,
                          "optimizer state does not match parameter list");
    }
    state.step += 1;
    const double t = double(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<T> w = params[i].tensor;
        const int64_t n = w.numel();
        if (int64_t(state.m[i].size()) != n) {
            throw TensorError(TensorError::Code::ShapeMismatch,
                              "moment size does not match parameter " + params[i].name);
        }
        const T* g = w.grad_allocated() ? w.impl_->g.data() : nullptr;
        T* wv = w.data();
        T* mv = state.m[i].data();
        T* vv = state.v[i].data();
        const double wd = params[i].decay ? cfg.weight_decay : 0.0;
        for (int64_t j = 0; j < n; ++j) {
            const double gj = g ? double(g[j]) : 0.0;
            const double mj = cfg.beta1 * double(mv[j]) + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * double(vv[j]) + (1.0 - cfg.beta2) * gj * gj;
            mv[j] = T(mj);
            vv[j] = T(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            wv[j] = T(double(wv[j]) -
                      cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * double(wv[j])));
        }
    }
}

}  // namespace hnseg
