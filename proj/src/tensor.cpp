#include "arsim/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "arsim/errors.hpp"

namespace arsim {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ContractViolation("tensor dims must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(static_cast<size_t>(n), value);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from(Shape shape, const std::vector<float>& values, bool requires_grad) {
    return adopt(std::move(shape), FloatBuffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::adopt(Shape shape, FloatBuffer values, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    if (static_cast<int64_t>(values.size()) != n) {
        throw ContractViolation("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                                shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const {
    if (!node_) throw ContractViolation("use of undefined tensor");
    return node_->shape;
}

int Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw ContractViolation("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data().size()); }

std::span<float> Tensor::data() {
    if (!node_) throw ContractViolation("use of undefined tensor");
    return node_->data;
}

std::span<const float> Tensor::data() const {
    if (!node_) throw ContractViolation("use of undefined tensor");
    return node_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!node_) throw ContractViolation("use of undefined tensor");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<float> Tensor::grad() const {
    if (!node_) throw ContractViolation("use of undefined tensor");
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
    return node_->grad;
}

std::span<const float> Tensor::grad_view() const {
    if (!node_) throw ContractViolation("use of undefined tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    Tensor t = adopt(shape(), node_->data, node_->requires_grad);
    return t;
}

Tensor Tensor::detach() const { return adopt(shape(), node_->data, false); }

void Tape::record(const char* op, Tensor output, std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractViolation("backward: loss must be a scalar, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    Tensor seed = loss;
    seed.grad()[0] += 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->output.has_grad()) continue;  // nothing flowed into this node
        it->backward();
    }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace arsim
