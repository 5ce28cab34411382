#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "seq2seg/common.hpp"
#include "seq2seg/rng.hpp"

namespace seq2seg {

// Dense row-major float32 tensor. The handle is cheap to copy; copies share
// storage, which is what the tape needs to route gradients.
class Tensor {
public:
    struct Impl {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;  // empty until a gradient is accumulated
        bool requires_grad = false;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);
    // i.i.d. uniform in [lo, hi)
    static Tensor uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false);
    // truncated normal, std 0.02 unless overridden; the transformer init
    static Tensor trunc_normal(Shape shape, Rng& rng, float std_dev = 0.02f, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return impl_->data.size(); }
    std::string shape_str() const { return shape_to_string(impl_->shape); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() { return impl_->data; }
    const std::vector<float>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Gradient buffer, allocated (zeroed) on first use.
    std::vector<float>& grad();
    const std::vector<float>& grad_const() const { return impl_->grad; }
    void zero_grad();

    // Value of a 1-element tensor.
    float item() const;

    std::shared_ptr<Impl> impl() const { return impl_; }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<Impl> impl_;
};

// Record of executed differentiable ops. Ops append themselves to the thread's
// active tape; backward() replays the record once in reverse and then clears
// it. One tape must only be driven from one thread.
class Tape {
public:
    Tape() = default;
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // loss must be a 1-element tensor recorded on this tape.
    void backward(const Tensor& loss);

    void clear();
    size_t size() const { return nodes_.size(); }

    static Tape* active();

    // Appends a backward step. `touched` lists the tensors whose grads the
    // step may write, so backward() can verify them finite afterwards.
    void record(std::function<void()> step, std::vector<Tensor> touched);

    // Activates a tape for the current thread for the scope's lifetime.
    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<Tensor> touched_;
};

// Throws NumericsError if any value is NaN or Inf.
void check_finite(const float* values, size_t n, const char* op_name);
inline void check_finite(const Tensor& t, const char* op_name) {
    check_finite(t.data(), t.numel(), op_name);
}

// Scalar-loss convenience mirroring the op table: populates grads on every
// requires_grad leaf reachable from `loss` and resets the active tape.
void backward(const Tensor& loss);

}  // namespace seq2seg
