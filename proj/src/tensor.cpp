#include "seq2seg/tensor.hpp"

#include <cmath>

namespace seq2seg {

namespace {
thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<Tensor::Impl> make_impl(Shape shape, bool requires_grad) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_to_string(shape));
    }
    auto impl = std::make_shared<Tensor::Impl>();
    impl->data.resize(shape_numel(shape));
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return impl;
}
}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad);
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = value;
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("from_data: shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.vec() = std::move(values);
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, float std_dev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = static_cast<float>(rng.truncated_normal(std_dev));
    return t;
}

std::vector<float>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.resize(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a 1-element tensor, got shape " + shape_str());
    }
    return impl_->data[0];
}

Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

void Tape::record(std::function<void()> step, std::vector<Tensor> touched) {
    nodes_.push_back(std::move(step));
    for (auto& t : touched) {
        if (t.defined() && t.requires_grad()) touched_.push_back(std::move(t));
    }
}

void Tape::clear() {
    nodes_.clear();
    touched_.clear();
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + loss.shape_str());
    }
    if (!loss.requires_grad()) {
        throw Error("backward: loss was not produced through taped operations");
    }
    Tensor seed = loss;
    seed.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    for (const auto& t : touched_) {
        const auto& g = t.grad_const();
        check_finite(g.data(), g.size(), "backward");
    }
    clear();
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw Error("backward: no active tape");
    tape->backward(loss);
}

void check_finite(const float* values, size_t n, const char* op_name) {
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericsError(std::string(op_name) + ": non-finite value at flat index " +
                                std::to_string(i));
        }
    }
}

}  // namespace seq2seg
