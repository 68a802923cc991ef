#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hnseg/rng.hpp"

namespace hnseg {

class TensorError : public std::runtime_error {
  public:
    enum class Code { ShapeMismatch, NonScalarLoss, BadArgument };
    TensorError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

// Dense N-dimensional tensor, row-major, shared-value semantics.
// T is float for training, double for gradient verification.
template <typename T>
class Tensor {
  public:
    struct Impl {
        std::vector<int64_t> shape;
        std::vector<T> v;
        std::vector<T> g;  // allocated on first gradient touch
        bool requires_grad = false;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->v.assign(size_t(shape_numel(t.impl_->shape)), T(0));
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<int64_t> shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->v.begin(), t.impl_->v.end(), value);
        return t;
    }

    static Tensor from_values(std::vector<int64_t> shape, std::vector<T> values,
                              bool requires_grad = false) {
        if (int64_t(values.size()) != shape_numel(shape)) {
            throw TensorError(TensorError::Code::ShapeMismatch,
                              "value count does not match shape");
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->v = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value) { return from_values({}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int64_t>& shape() const { return impl_->shape; }
    int64_t rank() const { return int64_t(impl_->shape.size()); }
    int64_t dim(int64_t i) const { return impl_->shape[size_t(i)]; }
    int64_t numel() const { return int64_t(impl_->v.size()); }

    // Tensor is a shared handle; const-ness of the handle does not freeze the
    // buffer (same contract as mainstream tensor libraries).
    T* data() const { return impl_->v.data(); }
    std::vector<T>& values() const { return impl_->v; }

    T item() const {
        if (numel() != 1) {
            throw TensorError(TensorError::Code::ShapeMismatch, "item() on non-scalar tensor");
        }
        return impl_->v[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) const { impl_->requires_grad = rg; }

    bool grad_allocated() const { return !impl_->g.empty(); }
    T* grad_data() const {
        ensure_grad();
        return impl_->g.data();
    }
    const std::vector<T>& grad() const {
        ensure_grad();
        return impl_->g;
    }
    void ensure_grad() const {
        if (impl_->g.empty()) impl_->g.assign(impl_->v.size(), T(0));
    }
    void zero_grad() const {
        if (!impl_->g.empty()) std::fill(impl_->g.begin(), impl_->g.end(), T(0));
    }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->v = impl_->v;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    // identity of the underlying buffer, for graph bookkeeping in tests
    const void* id() const { return impl_.get(); }

    std::shared_ptr<Impl> impl_;
};

// Ordered record of executed operations. Ops push one reverse step each as
// they run, so execution order is already topological; backward() just plays
// the record in reverse. A tape is single-threaded by contract.
template <typename T>
class Tape {
  public:
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(std::function<void()> reverse_step) {
        steps_.push_back(std::move(reverse_step));
    }

    size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates cotangents into every
    // requires_grad tensor the recorded ops touched. Consumes the record.
    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) {
            throw TensorError(TensorError::Code::NonScalarLoss,
                              "backward() needs a scalar loss");
        }
        loss.ensure_grad();
        loss.grad_data()[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        steps_.clear();
    }

  private:
    std::vector<std::function<void()>> steps_;
    bool recording_ = true;
};

// RAII guard for inference passes
template <typename T>
class NoGradGuard {
  public:
    explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(false);
    }
    ~NoGradGuard() { tape_.set_recording(prev_); }

  private:
    Tape<T>& tape_;
    bool prev_;
};

namespace detail {

template <typename T>
bool track(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor<T>* t : inputs) {
        if ((*t).requires_grad()) return true;
    }
    return false;
}

inline void check(bool ok, const char* msg) {
    if (!ok) throw TensorError(TensorError::Code::ShapeMismatch, msg);
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = C + i * n;
        const T* arow = A + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T a = arow[kk];
            if (a == T(0)) continue;
            const T* brow = B + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t n, int64_t k) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * n;
        T* crow = C + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T* brow = B + kk * n;
            T acc = T(0);
            for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[kk] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t kk = 0; kk < k; ++kk) {
        T* crow = C + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            T a = A[i * k + kk];
            if (a == T(0)) continue;
            const T* brow = B + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "add: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            const int64_t n = out.numel();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            const int64_t n = out.numel();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            const int64_t n = out.numel();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                const T* bv = b.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                const T* av = a.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * av[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> divide(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "divide: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            const int64_t n = out.numel();
            const T* av = a.data();
            const T* bv = b.data();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] / bv[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i] * av[i] / (bv[i] * bv[i]);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out, c]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        });
    }
    return out;
}

// c - x
template <typename T>
Tensor<T> rsub(Tape<T>& tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = c - a.data()[i];
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] -= gy[i];
        });
    }
    return out;
}

// x^c with constant exponent
template <typename T>
Tensor<T> powc(Tape<T>& tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::pow(a.data()[i], c);
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out, c]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* av = a.data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) {
                ga[i] += gy[i] * c * std::pow(av[i], c - T(1));
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::log(a.data()[i]);
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* av = a.data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] / av[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& a, T lo, T hi) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::min(std::max(a.data()[i], lo), hi);
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out, lo, hi]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* av = a.data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) {
                if (av[i] >= lo && av[i] <= hi) ga[i] += gy[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        out.data()[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
    }
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* yv = out.data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * yv[i] * (T(1) - yv[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
    constexpr T kInvSqrt2 = T(0.70710678118654752440);
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        T x = a.data()[i];
        out.data()[i] = T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2));
    }
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* av = a.data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) {
                T x = av[i];
                T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
                T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
                ga[i] += gy[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
    double acc = 0.0;  // fixed-order accumulation in double for stability
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += double(a.data()[i]);
    Tensor<T> out = Tensor<T>::scalar(T(acc));
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T gy = out.grad_data()[0];
            T* ga = a.grad_data();
            const int64_t n = a.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> s = sum(tape, a);
    return scale(tape, s, T(1) / T(a.numel()));
}

// ---- layout ----

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, std::vector<int64_t> new_shape) {
    detail::check(shape_numel(new_shape) == a.numel(), "reshape: element count changed");
    Tensor<T> out = Tensor<T>::from_values(std::move(new_shape), a.values());
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            T* ga = a.grad_data();
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int64_t i = int64_t(shape.size()) - 2; i >= 0; --i) {
        s[size_t(i)] = s[size_t(i) + 1] * shape[size_t(i) + 1];
    }
    return s;
}

// out linear index -> in linear index under a permutation of axes
template <typename T>
void permute_copy(const T* in, T* out, const std::vector<int64_t>& in_shape,
                  const std::vector<int64_t>& perm, bool accumulate_into_in) {
    const size_t r = in_shape.size();
    std::vector<int64_t> out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[size_t(perm[i])];
    auto in_strides = row_major_strides(in_shape);
    auto out_strides = row_major_strides(out_shape);
    const int64_t n = shape_numel(in_shape);
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o;
        int64_t iidx = 0;
        for (size_t d = 0; d < r; ++d) {
            int64_t coord = rem / out_strides[d];
            rem -= coord * out_strides[d];
            iidx += coord * in_strides[size_t(perm[d])];
        }
        if (accumulate_into_in) {
            // writing grads back: out grad element o belongs to input element iidx
            // (each input element appears exactly once, safe to parallelize)
            const_cast<T*>(in)[iidx] += out[o];
        } else {
            out[o] = in[iidx];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& a, std::vector<int64_t> perm) {
    detail::check(int64_t(perm.size()) == a.rank(), "permute: rank mismatch");
    std::vector<int64_t> new_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) new_shape[i] = a.dim(perm[i]);
    Tensor<T> out = Tensor<T>::zeros(new_shape);
    detail::permute_copy(a.data(), out.data(), a.shape(), perm, false);
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out, perm]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            detail::permute_copy<T>(a.grad_data(), out.grad_data(), a.shape(), perm, true);
        });
    }
    return out;
}

// concatenate along axis 0
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.rank() == b.rank() && a.rank() >= 1, "concat: rank mismatch");
    for (int64_t d = 1; d < a.rank(); ++d) {
        detail::check(a.dim(d) == b.dim(d), "concat: trailing dims differ");
    }
    std::vector<int64_t> shape = a.shape();
    shape[0] += b.dim(0);
    Tensor<T> out = Tensor<T>::zeros(shape);
    std::copy(a.data(), a.data() + a.numel(), out.data());
    std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                for (int64_t i = 0; i < a.numel(); ++i) ga[i] += gy[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                const T* gyb = gy + a.numel();
                for (int64_t i = 0; i < b.numel(); ++i) gb[i] += gyb[i];
            }
        });
    }
    return out;
}

// channels [c0, c1) along axis 0
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& a, int64_t c0, int64_t c1) {
    detail::check(a.rank() >= 1 && c0 >= 0 && c1 > c0 && c1 <= a.dim(0),
                  "slice: bad channel range");
    std::vector<int64_t> shape = a.shape();
    shape[0] = c1 - c0;
    const int64_t inner = a.numel() / a.dim(0);
    Tensor<T> out = Tensor<T>::zeros(shape);
    std::copy(a.data() + c0 * inner, a.data() + c1 * inner, out.data());
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record([a, out, c0, inner]() mutable {
            if (!out.grad_allocated() || !a.requires_grad()) return;
            const T* gy = out.grad_data();
            T* ga = a.grad_data() + c0 * inner;
            for (int64_t i = 0; i < out.numel(); ++i) ga[i] += gy[i];
        });
    }
    return out;
}

// ---- linear algebra ----

// a: [..,m,k]; b: [..,k,n] with identical batch dims, or [k,n] shared
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.rank() >= 2 && b.rank() >= 2, "matmul: rank < 2");
    const int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    detail::check(k == kb, "matmul: inner dims disagree");
    const bool b_batched = b.rank() > 2;
    if (b_batched) {
        detail::check(a.rank() == b.rank(), "matmul: batch ranks differ");
        for (int64_t d = 0; d < a.rank() - 2; ++d) {
            detail::check(a.dim(d) == b.dim(d), "matmul: batch dims differ");
        }
    }
    int64_t batch = 1;
    std::vector<int64_t> out_shape;
    for (int64_t d = 0; d < a.rank() - 2; ++d) {
        batch *= a.dim(d);
        out_shape.push_back(a.dim(d));
    }
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (int64_t i = 0; i < batch; ++i) {
        detail::gemm_nn(a.data() + i * m * k, b.data() + (b_batched ? i * k * n : 0),
                        out.data() + i * m * n, m, k, n);
    }
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out, m, k, n, batch, b_batched]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            if (a.requires_grad()) {
                T* ga = a.grad_data();
                for (int64_t i = 0; i < batch; ++i) {
                    detail::gemm_nt(gy + i * m * n, b.data() + (b_batched ? i * k * n : 0),
                                    ga + i * m * k, m, n, k);
                }
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                for (int64_t i = 0; i < batch; ++i) {
                    detail::gemm_tn(a.data() + i * m * k, gy + i * m * n,
                                    gb + (b_batched ? i * k * n : 0), m, k, n);
                }
            }
        });
    }
    return out;
}

// x: [..,d] plus row vector b: [d]
template <typename T>
Tensor<T> add_rowvec(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    detail::check(b.rank() == 1 && x.rank() >= 1 && x.dim(x.rank() - 1) == b.dim(0),
                  "add_rowvec: last dim mismatch");
    const int64_t d = b.dim(0);
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T* or_ = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) or_[j] = xr[j] + b.data()[j];
    }
    if (detail::track(tape, {&x, &b})) {
        out.set_requires_grad(true);
        tape.record([x, b, out, rows, d]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            if (x.requires_grad()) {
                T* gx = x.grad_data();
                for (int64_t i = 0; i < rows * d; ++i) gx[i] += gy[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gyr = gy + r * d;
                    for (int64_t j = 0; j < d; ++j) gb[j] += gyr[j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(tape, matmul(tape, x, w), b);
}

// ---- normalization / activations over rows ----

// x: [..,d]; per-row (x-mean)/sqrt(var+eps) * gain + bias, population variance
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
    const int64_t d = x.dim(x.rank() - 1);
    detail::check(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                  "layer_norm: gain/bias dim mismatch");
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    Tensor<T> xhat = Tensor<T>::zeros(x.shape());  // saved for reverse
    std::vector<T> inv_std(size_t(rows), T(0));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += double(xr[j]);
        mu /= double(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double dd = double(xr[j]) - mu;
            var += dd * dd;
        }
        var /= double(d);
        T istd = T(1.0 / std::sqrt(var + double(eps)));
        inv_std[size_t(r)] = istd;
        T* hr = xhat.data() + r * d;
        T* or_ = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            hr[j] = (xr[j] - T(mu)) * istd;
            or_[j] = hr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    if (detail::track(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, gain, bias, out, xhat, inv_std, rows, d]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            if (gain.requires_grad()) {
                T* gg = gain.grad_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gyr = gy + r * d;
                    const T* hr = xhat.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) gg[j] += gyr[j] * hr[j];
                }
            }
            if (bias.requires_grad()) {
                T* gb = bias.grad_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gyr = gy + r * d;
                    for (int64_t j = 0; j < d; ++j) gb[j] += gyr[j];
                }
            }
            if (x.requires_grad()) {
                T* gx = x.grad_data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gyr = gy + r * d;
                    const T* hr = xhat.data() + r * d;
                    double sum_g = 0.0, sum_gh = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        double g = double(gyr[j]) * double(gain.data()[j]);
                        sum_g += g;
                        sum_gh += g * double(hr[j]);
                    }
                    sum_g /= double(d);
                    sum_gh /= double(d);
                    T* gxr = gx + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        double g = double(gyr[j]) * double(gain.data()[j]);
                        gxr[j] += T((g - sum_g - double(hr[j]) * sum_gh) *
                                    double(inv_std[size_t(r)]));
                    }
                }
            }
        });
    }
    return out;
}

// row max subtracted before exponentiation
template <typename T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& x) {
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T* or_ = out.data() + r * d;
        T mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double den = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            or_[j] = std::exp(xr[j] - mx);
            den += double(or_[j]);
        }
        T inv = T(1.0 / den);
        for (int64_t j = 0; j < d; ++j) or_[j] *= inv;
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, rows, d]() mutable {
            if (!out.grad_allocated() || !x.requires_grad()) return;
            const T* gy = out.grad_data();
            const T* yv = out.data();
            T* gx = x.grad_data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gyr = gy + r * d;
                const T* yr = yv + r * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += double(gyr[j]) * double(yr[j]);
                T* gxr = gx + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    gxr[j] += T((double(gyr[j]) - dot) * double(yr[j]));
                }
            }
        });
    }
    return out;
}

}  // namespace hnseg
