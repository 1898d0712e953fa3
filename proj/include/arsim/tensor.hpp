#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace arsim {

using Shape = std::vector<int>;

/// Tensor storage. Buffers are aligned to the widest SIMD width so vectorized
/// kernels take the same code path, and round the same way, on every call.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};
using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major fp32 tensor with an optional gradient buffer.
///
/// A Tensor is a cheap handle; copies share storage. Use clone() for a deep
/// copy and detach() for a copy that never records gradients.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, const std::vector<float>& values, bool requires_grad = false);
    static Tensor adopt(Shape shape, FloatBuffer values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int axis) const;
    int64_t numel() const;

    std::span<float> data();
    std::span<const float> data() const;
    float* ptr() { return data().data(); }
    const float* ptr() const { return data().data(); }
    float item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    /// Gradient buffer, allocated (zero-filled) on first access.
    std::span<float> grad() const;
    std::span<const float> grad_view() const;
    void zero_grad();

    Tensor clone() const;
    Tensor detach() const;
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    struct Node {
        Shape shape;
        FloatBuffer data;
        FloatBuffer grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Entries are appended in execution order, so every entry's inputs were
/// produced by earlier entries (or are leaves). backward() walks the record
/// once in reverse.
class Tape {
public:
    struct Entry {
        const char* op;
        Tensor output;
        std::function<void()> backward;
    };

    void record(const char* op, Tensor output, std::function<void()> backward);
    void backward(const Tensor& loss);
    void clear() { entries_.clear(); }
    size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
};

/// Installs a tape as the recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording for the current thread (inference paths).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

/// Convenience: runs tape.backward(loss).
void backward(Tape& tape, const Tensor& loss);

}  // namespace arsim
