#pragma once

#include "hnseg/tensor.hpp"

namespace hnseg {

struct LossConfig {
    double dice_eps = 1e-5;
    double focal_gamma = 2.0;
    double focal_alpha = 1.0;
    double dice_weight = 1.0;
    double focal_weight = 1.0;

    void validate() const {
        if (dice_eps < 0 || focal_gamma < 0 || focal_alpha < 0 || dice_weight < 0 ||
            focal_weight < 0) {
            throw TensorError(TensorError::Code::BadArgument,
                              "loss config fields must be non-negative");
        }
        if (dice_weight == 0 && focal_weight == 0) {
            throw TensorError(TensorError::Code::BadArgument,
                              "dice and focal weights cannot both be zero");
        }
    }
};

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
template <typename T>
Tensor<T> soft_dice_loss(Tape<T>& tape, const Tensor<T>& prob, const Tensor<T>& gt,
                         const LossConfig& cfg = {}) {
    detail::check(prob.shape() == gt.shape(), "soft_dice_loss: shape mismatch");
    const T eps = T(cfg.dice_eps);
    Tensor<T> inter = sum(tape, mul(tape, prob, gt));
    Tensor<T> num = add_scalar(tape, scale(tape, inter, T(2)), eps);
    Tensor<T> den = add_scalar(tape, add(tape, sum(tape, prob), sum(tape, gt)), eps);
    return rsub(tape, divide(tape, num, den), T(1));
}

// mean over voxels of -alpha * (1 - p_t)^gamma * log(p_t),
// p_t = p where g = 1 else 1-p; p clamped to [1e-7, 1-1e-7]
template <typename T>
Tensor<T> focal_loss(Tape<T>& tape, const Tensor<T>& prob, const Tensor<T>& gt,
                     const LossConfig& cfg = {}) {
    detail::check(prob.shape() == gt.shape(), "focal_loss: shape mismatch");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    Tensor<T> pc = clamp(tape, prob, lo, hi);
    Tensor<T> g_comp = rsub(tape, gt, T(1));  // constant 1-g
    Tensor<T> pt = add(tape, mul(tape, pc, gt), mul(tape, rsub(tape, pc, T(1)), g_comp));
    Tensor<T> mod = powc(tape, rsub(tape, pt, T(1)), T(cfg.focal_gamma));
    Tensor<T> per_voxel = mul(tape, mod, log(tape, pt));
    return scale(tape, mean(tape, per_voxel), T(-cfg.focal_alpha));
}

template <typename T>
Tensor<T> combined_loss(Tape<T>& tape, const Tensor<T>& prob, const Tensor<T>& gt,
                        const LossConfig& cfg = {}) {
    Tensor<T> total;
    if (cfg.dice_weight != 0.0) {
        total = scale(tape, soft_dice_loss(tape, prob, gt, cfg), T(cfg.dice_weight));
    }
    if (cfg.focal_weight != 0.0) {
        Tensor<T> f = scale(tape, focal_loss(tape, prob, gt, cfg), T(cfg.focal_weight));
        total = total.defined() ? add(tape, total, f) : f;
    }
    return total;
}

}  // namespace hnseg
