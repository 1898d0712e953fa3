#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "arsim/tensor.hpp"

namespace arsim {

// Differentiable operations. Each op records a backward rule on the active
// tape when at least one input requires grad. Shape errors throw
// ContractViolation naming both shapes; non-finite outputs throw NumericError
// naming the op.

/// Elementwise binary ops with right-aligned broadcasting (size-1 or missing
/// axes broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

/// a[..., K] x b[K, N] -> [..., N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] x w[in, out] (+ bias[out])
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Half-open range [begin, end) along one axis.
Tensor slice(const Tensor& a, int axis, int begin, int end);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

/// Rows of table[V, d] selected by ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor silu(const Tensor& a);
/// x / sqrt(mean(x^2 over last axis) + eps); no learned gain.
Tensor rms_norm(const Tensor& a, float eps = 1e-6f);
Tensor softmax(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Rotary position encoding over the second-to-last axis of x[..., L, D].
/// positions has one entry per row l; each head's dims are rotated in pairs.
Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads, float base = 100.0f);

/// Boolean attention pattern. `groups` is 1 (shared by every group) or equal to
/// the attention group count.
struct AttentionMask {
    int groups = 1;
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> allowed;  // groups * rows * cols

    AttentionMask() = default;
    AttentionMask(int groups_, int rows_, int cols_, uint8_t fill = 1)
        : groups(groups_), rows(rows_), cols(cols_), allowed(static_cast<size_t>(groups_) * rows_ * cols_, fill) {}

    uint8_t& at(int g, int r, int c) { return allowed[(static_cast<size_t>(g) * rows + r) * cols + c]; }
    uint8_t at(int g, int r, int c) const { return allowed[(static_cast<size_t>(g) * rows + r) * cols + c]; }
};

/// Multi-head attention over q[G, Lq, D], k/v[G, Lk, D]. Disallowed keys get
/// an additive -1e9 before the softmax. Every query row needs at least one
/// allowed key.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, int n_heads);

/// Per-thread attention FLOP accounting (QK^T and PV products).
struct AttentionStats {
    double flops = 0.0;
    int64_t calls = 0;
};

class AttentionStatsScope {
public:
    explicit AttentionStatsScope(AttentionStats& stats);
    ~AttentionStatsScope();
    AttentionStatsScope(const AttentionStatsScope&) = delete;
    AttentionStatsScope& operator=(const AttentionStatsScope&) = delete;

private:
    AttentionStats* previous_;
};

}  // namespace arsim
