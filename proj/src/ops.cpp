#include "arsim/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local AttentionStats* g_attention_stats = nullptr;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void check_finite(const Tensor& t, const char* op) {
    for (float v : t.data()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
    }
}

Tensor make_output(Shape shape, FloatBuffer values, bool grad, const char* op) {
    Tensor out = Tensor::adopt(std::move(shape), std::move(values), grad);
    check_finite(out, op);
    return out;
}

void record(const char* op, const Tensor& out, std::function<void()> fn) {
    active_tape()->record(op, out, std::move(fn));
}

std::vector<int64_t> contiguous_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

struct Broadcast {
    Shape out;
    std::vector<int64_t> sa, sb;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    const size_t r = std::max(a.size(), b.size());
    Broadcast p;
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    const auto sta = contiguous_strides(a);
    const auto stb = contiguous_strides(b);
    for (size_t i = 0; i < r; ++i) {
        const long ai = static_cast<long>(i) - static_cast<long>(r - a.size());
        const long bi = static_cast<long>(i) - static_cast<long>(r - b.size());
        const int da = ai >= 0 ? a[ai] : 1;
        const int db = bi >= 0 ? b[bi] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ContractViolation(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                    " do not broadcast");
        }
        p.out[i] = std::max(da, db);
        if (ai >= 0 && da != 1) p.sa[i] = sta[ai];
        if (bi >= 0 && db != 1) p.sb[i] = stb[bi];
    }
    return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const int r = static_cast<int>(p.out.size());
    const int64_t n = shape_numel(p.out);
    const int last = p.out[r - 1];
    const int64_t sal = p.sa[r - 1], sbl = p.sb[r - 1];
    std::vector<int> idx(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < n; o += last) {
        for (int j = 0; j < last; ++j) f(o + j, ia + j * sal, ib + j * sbl);
        for (int ax = r - 2; ax >= 0; --ax) {
            ++idx[ax];
            ia += p.sa[ax];
            ib += p.sb[ax];
            if (idx[ax] < p.out[ax]) break;
            ia -= p.sa[ax] * p.out[ax];
            ib -= p.sb[ax] * p.out[ax];
            idx[ax] = 0;
        }
    }
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
    const bool grad = wants_grad({&a, &b});
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    if (a.shape() == b.shape()) {
        const size_t n = static_cast<size_t>(a.numel());
        FloatBuffer out(n);
        switch (kind) {
            case BinaryKind::Add: for (size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
            case BinaryKind::Sub: for (size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
            case BinaryKind::Mul: for (size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
        }
        Tensor result = make_output(a.shape(), std::move(out), grad, op);
        if (grad) {
            record(op, result, [a, b, result, kind]() mutable {
                const float* g = result.grad_view().data();
                const size_t n = static_cast<size_t>(result.numel());
                if (a.requires_grad()) {
                    float* ga = a.grad().data();
                    if (kind == BinaryKind::Mul) {
                        const float* pb = b.ptr();
                        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
                    } else {
                        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
                    }
                }
                if (b.requires_grad()) {
                    float* gb = b.grad().data();
                    if (kind == BinaryKind::Mul) {
                        const float* pa = a.ptr();
                        for (size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
                    } else if (kind == BinaryKind::Sub) {
                        for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
                    } else {
                        for (size_t i = 0; i < n; ++i) gb[i] += g[i];
                    }
                }
            });
        }
        return result;
    }

    const Broadcast p = plan_broadcast(a.shape(), b.shape(), op);
    FloatBuffer out(static_cast<size_t>(shape_numel(p.out)));
    switch (kind) {
        case BinaryKind::Add:
            for_each_broadcast(p, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = pa[ia] + pb[ib]; });
            break;
        case BinaryKind::Sub:
            for_each_broadcast(p, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = pa[ia] - pb[ib]; });
            break;
        case BinaryKind::Mul:
            for_each_broadcast(p, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = pa[ia] * pb[ib]; });
            break;
    }
    Tensor result = make_output(p.out, std::move(out), grad, op);
    if (grad) {
        record(op, result, [a, b, result, kind, p]() mutable {
            const float* g = result.grad_view().data();
            const float* pa = a.ptr();
            const float* pb = b.ptr();
            float* ga = a.requires_grad() ? a.grad().data() : nullptr;
            float* gb = b.requires_grad() ? b.grad().data() : nullptr;
            for_each_broadcast(p, [&](int64_t o, int64_t ia, int64_t ib) {
                const float go = g[o];
                switch (kind) {
                    case BinaryKind::Add:
                        if (ga) ga[ia] += go;
                        if (gb) gb[ib] += go;
                        break;
                    case BinaryKind::Sub:
                        if (ga) ga[ia] += go;
                        if (gb) gb[ib] -= go;
                        break;
                    case BinaryKind::Mul:
                        if (ga) ga[ia] += go * pb[ib];
                        if (gb) gb[ib] += go * pa[ia];
                        break;
                }
            });
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& a, float s) {
    const bool grad = wants_grad({&a});
    FloatBuffer out(a.data().begin(), a.data().end());
    for (float& v : out) v *= s;
    Tensor result = make_output(a.shape(), std::move(out), grad, "scale");
    if (grad) {
        record("scale", result, [a, result, s]() mutable {
            auto g = result.grad_view();
            auto ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return result;
}

Tensor add_scalar(const Tensor& a, float s) {
    const bool grad = wants_grad({&a});
    FloatBuffer out(a.data().begin(), a.data().end());
    for (float& v : out) v += s;
    Tensor result = make_output(a.shape(), std::move(out), grad, "add_scalar");
    if (grad) {
        record("add_scalar", result, [a, result]() mutable {
            auto g = result.grad_view();
            auto ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2 || a.rank() < 1 || a.dim(-1) != b.dim(0)) {
        throw ContractViolation("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                " do not conform");
    }
    const int k = b.dim(0);
    const int n = b.dim(1);
    const int m = static_cast<int>(a.numel() / k);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    FloatBuffer out(static_cast<size_t>(m) * n);
    MapR(out.data(), m, n).noalias() = CMapR(a.ptr(), m, k) * CMapR(b.ptr(), k, n);
    const bool grad = wants_grad({&a, &b});
    Tensor result = make_output(std::move(out_shape), std::move(out), grad, "matmul");
    if (grad) {
        record("matmul", result, [a, b, result, m, k, n]() mutable {
            CMapR g(result.grad_view().data(), m, n);
            if (a.requires_grad()) MapR(a.grad().data(), m, k).noalias() += g * CMapR(b.ptr(), k, n).transpose();
            if (b.requires_grad()) MapR(b.grad().data(), k, n).noalias() += CMapR(a.ptr(), m, k).transpose() * g;
        });
    }
    return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    if (!bias.defined()) return y;
    if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) {
        throw ContractViolation("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                                shape_str(w.shape()));
    }
    return add(y, bias);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ContractViolation("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    const bool grad = wants_grad({&a});
    Tensor result = Tensor::adopt(std::move(shape), FloatBuffer(a.data().begin(), a.data().end()), grad);
    if (grad) {
        record("reshape", result, [a, result]() mutable {
            auto g = result.grad_view();
            auto ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return result;
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r) {
        throw ContractViolation("permute: axis list size does not match " + shape_str(a.shape()));
    }
    std::vector<int> seen(r, 0);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || seen[ax]++) throw ContractViolation("permute: invalid axis list for " + shape_str(a.shape()));
    }
    const auto in_strides = contiguous_strides(a.shape());
    Shape out_shape(r);
    std::vector<int64_t> src_stride(r);
    for (int i = 0; i < r; ++i) {
        out_shape[i] = a.shape()[axes[i]];
        src_stride[i] = in_strides[axes[i]];
    }
    // Map each output position to its source offset.
    const int64_t n = a.numel();
    std::vector<int64_t> src(static_cast<size_t>(n));
    {
        std::vector<int> idx(r, 0);
        int64_t off = 0;
        const int last = out_shape[r - 1];
        for (int64_t o = 0; o < n; o += last) {
            for (int j = 0; j < last; ++j) src[o + j] = off + j * src_stride[r - 1];
            for (int ax = r - 2; ax >= 0; --ax) {
                ++idx[ax];
                off += src_stride[ax];
                if (idx[ax] < out_shape[ax]) break;
                off -= src_stride[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    FloatBuffer out(static_cast<size_t>(n));
    const float* pa = a.ptr();
    for (int64_t i = 0; i < n; ++i) out[i] = pa[src[i]];
    const bool grad = wants_grad({&a});
    Tensor result = Tensor::adopt(std::move(out_shape), std::move(out), grad);
    if (grad) {
        record("permute", result, [a, result, src = std::move(src)]() mutable {
            auto g = result.grad_view();
            float* ga = a.grad().data();
            for (size_t i = 0; i < g.size(); ++i) ga[src[i]] += g[i];
        });
    }
    return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractViolation("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const int r = static_cast<int>(s0.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractViolation("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = static_cast<int>(s.size()) == r;
        for (int i = 0; ok && i < r; ++i) ok = (i == axis) || s[i] == s0[i];
        if (!ok) throw ContractViolation("concat: shapes " + shape_str(s0) + " and " + shape_str(s) + " do not conform");
        out_shape[axis] += s[axis];
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (int i = axis + 1; i < r; ++i) inner *= s0[i];
    const int64_t out_row = out_shape[axis] * inner;
    FloatBuffer out(static_cast<size_t>(outer * out_row));
    int64_t col = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.shape()[axis] * inner;
        const float* src = p.ptr();
        for (int64_t o = 0; o < outer; ++o) std::copy_n(src + o * w, w, out.data() + o * out_row + col);
        col += w;
    }
    bool grad = false;
    if (active_tape()) {
        for (const Tensor& p : parts) grad = grad || p.requires_grad();
    }
    Tensor result = Tensor::adopt(std::move(out_shape), std::move(out), grad);
    if (grad) {
        record("concat", result, [parts, result, axis, outer, inner, out_row]() mutable {
            const float* g = result.grad_view().data();
            int64_t col = 0;
            for (const Tensor& p : parts) {
                const int64_t w = p.shape()[axis] * inner;
                if (p.requires_grad()) {
                    float* gp = p.grad().data();
                    for (int64_t o = 0; o < outer; ++o) {
                        for (int64_t j = 0; j < w; ++j) gp[o * w + j] += g[o * out_row + col + j];
                    }
                }
                col += w;
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& a, int axis, int begin, int end) {
    const Shape& s = a.shape();
    const int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r || begin < 0 || end > s[axis] || begin >= end) {
        throw ContractViolation("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                std::to_string(axis) + " invalid for " + shape_str(s));
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < r; ++i) inner *= s[i];
    const int64_t in_row = s[axis] * inner;
    const int64_t w = static_cast<int64_t>(end - begin) * inner;
    const int64_t off = static_cast<int64_t>(begin) * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    FloatBuffer out(static_cast<size_t>(outer * w));
    const float* pa = a.ptr();
    for (int64_t o = 0; o < outer; ++o) std::copy_n(pa + o * in_row + off, w, out.data() + o * w);
    const bool grad = wants_grad({&a});
    Tensor result = Tensor::adopt(std::move(out_shape), std::move(out), grad);
    if (grad) {
        record("slice", result, [a, result, outer, in_row, w, off]() mutable {
            const float* g = result.grad_view().data();
            float* ga = a.grad().data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t j = 0; j < w; ++j) ga[o * in_row + off + j] += g[o * w + j];
            }
        });
    }
    return result;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    const Broadcast p = plan_broadcast(shape, a.shape(), "broadcast_to");
    if (p.out != shape) {
        throw ContractViolation("broadcast_to: " + shape_str(a.shape()) + " cannot expand to " + shape_str(shape));
    }
    FloatBuffer out(static_cast<size_t>(shape_numel(shape)));
    const float* pa = a.ptr();
    for_each_broadcast(p, [&](int64_t o, int64_t, int64_t ib) { out[o] = pa[ib]; });
    const bool grad = wants_grad({&a});
    Tensor result = Tensor::adopt(shape, std::move(out), grad);
    if (grad) {
        record("broadcast_to", result, [a, result, p]() mutable {
            const float* g = result.grad_view().data();
            float* ga = a.grad().data();
            for_each_broadcast(p, [&](int64_t o, int64_t, int64_t ib) { ga[ib] += g[o]; });
        });
    }
    return result;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw ContractViolation("embedding: table must be 2-D, got " + shape_str(table.shape()));
    const int vocab = table.dim(0);
    const int d = table.dim(1);
    std::vector<int> idv(ids.begin(), ids.end());
    FloatBuffer out(idv.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] < 0 || idv[i] >= vocab) {
            throw ContractViolation("embedding: id " + std::to_string(idv[i]) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        std::copy_n(table.ptr() + static_cast<int64_t>(idv[i]) * d, d, out.data() + i * d);
    }
    const bool grad = wants_grad({&table});
    Tensor result = Tensor::adopt({static_cast<int>(idv.size()), d}, std::move(out), grad);
    if (grad) {
        record("embedding", result, [table, result, idv = std::move(idv), d]() mutable {
            const float* g = result.grad_view().data();
            float* gt = table.grad().data();
            for (size_t i = 0; i < idv.size(); ++i) {
                for (int j = 0; j < d; ++j) gt[static_cast<int64_t>(idv[i]) * d + j] += g[i * d + j];
            }
        });
    }
    return result;
}

Tensor silu(const Tensor& a) {
    const size_t n = static_cast<size_t>(a.numel());
    FloatBuffer out(n);
    const float* pa = a.ptr();
    for (size_t i = 0; i < n; ++i) out[i] = pa[i] / (1.0f + std::exp(-pa[i]));
    const bool grad = wants_grad({&a});
    Tensor result = make_output(a.shape(), std::move(out), grad, "silu");
    if (grad) {
        record("silu", result, [a, result]() mutable {
            auto g = result.grad_view();
            auto ga = a.grad();
            const float* pa = a.ptr();
            for (size_t i = 0; i < g.size(); ++i) {
                const float s = 1.0f / (1.0f + std::exp(-pa[i]));
                ga[i] += g[i] * s * (1.0f + pa[i] * (1.0f - s));
            }
        });
    }
    return result;
}

Tensor rms_norm(const Tensor& a, float eps) {
    const int d = a.dim(-1);
    const int64_t rows = a.numel() / d;
    FloatBuffer out(static_cast<size_t>(a.numel()));
    FloatBuffer inv(static_cast<size_t>(rows));
    const float* pa = a.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += static_cast<double>(pa[r * d + j]) * pa[r * d + j];
        const float ir = static_cast<float>(1.0 / std::sqrt(ss / d + eps));
        inv[r] = ir;
        for (int j = 0; j < d; ++j) out[r * d + j] = pa[r * d + j] * ir;
    }
    const bool grad = wants_grad({&a});
    Tensor result = make_output(a.shape(), std::move(out), grad, "rms_norm");
    if (grad) {
        record("rms_norm", result, [a, result, inv = std::move(inv), d, rows]() mutable {
            const float* g = result.grad_view().data();
            const float* y = result.ptr();
            float* ga = a.grad().data();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
                const float m = static_cast<float>(dot / d);
                for (int j = 0; j < d; ++j) ga[r * d + j] += inv[r] * (g[r * d + j] - y[r * d + j] * m);
            }
        });
    }
    return result;
}

Tensor softmax(const Tensor& a) {
    const int d = a.dim(-1);
    const int64_t rows = a.numel() / d;
    FloatBuffer out(static_cast<size_t>(a.numel()));
    const float* pa = a.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const float* x = pa + r * d;
        float* y = out.data() + r * d;
        const float mx = *std::max_element(x, x + d);
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const float iz = static_cast<float>(1.0 / z);
        for (int j = 0; j < d; ++j) y[j] *= iz;
    }
    const bool grad = wants_grad({&a});
    Tensor result = make_output(a.shape(), std::move(out), grad, "softmax");
    if (grad) {
        record("softmax", result, [a, result, d, rows]() mutable {
            const float* g = result.grad_view().data();
            const float* y = result.ptr();
            float* ga = a.grad().data();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
                for (int j = 0; j < d; ++j) ga[r * d + j] += y[r * d + j] * (g[r * d + j] - static_cast<float>(dot));
            }
        });
    }
    return result;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ContractViolation("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    const size_t n = static_cast<size_t>(a.numel());
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.ptr()[i]) - b.ptr()[i];
        acc += diff * diff;
    }
    const bool grad = wants_grad({&a, &b});
    Tensor result = make_output({1}, {static_cast<float>(acc / n)}, grad, "mse");
    if (grad) {
        record("mse", result, [a, b, result, n]() mutable {
            const float g = result.grad_view()[0] * 2.0f / static_cast<float>(n);
            const float* pa = a.ptr();
            const float* pb = b.ptr();
            if (a.requires_grad()) {
                float* ga = a.grad().data();
                for (size_t i = 0; i < n; ++i) ga[i] += g * (pa[i] - pb[i]);
            }
            if (b.requires_grad()) {
                float* gb = b.grad().data();
                for (size_t i = 0; i < n; ++i) gb[i] -= g * (pa[i] - pb[i]);
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    const bool grad = wants_grad({&a});
    Tensor result = make_output({1}, {static_cast<float>(acc)}, grad, "sum");
    if (grad) {
        record("sum", result, [a, result]() mutable {
            const float g = result.grad_view()[0];
            for (float& ga : a.grad()) ga += g;
        });
    }
    return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads, float base) {
    if (x.rank() < 2) throw ContractViolation("rope: need [..., L, D], got " + shape_str(x.shape()));
    const int L = x.dim(-2);
    const int D = x.dim(-1);
    if (static_cast<int>(positions.size()) != L) {
        throw ContractViolation("rope: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
    }
    if (n_heads <= 0 || D % n_heads != 0 || (D / n_heads) % 2 != 0) {
        throw ContractViolation("rope: head split of " + shape_str(x.shape()) + " into " + std::to_string(n_heads) +
                                " heads needs an even head dim");
    }
    const int dh = D / n_heads;
    const int half = dh / 2;
    FloatBuffer cs(static_cast<size_t>(L) * half), sn(static_cast<size_t>(L) * half);
    for (int l = 0; l < L; ++l) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(static_cast<double>(base), -2.0 * i / dh);
            const double ang = positions[l] * freq;
            cs[static_cast<size_t>(l) * half + i] = static_cast<float>(std::cos(ang));
            sn[static_cast<size_t>(l) * half + i] = static_cast<float>(std::sin(ang));
        }
    }
    const int64_t groups = x.numel() / (static_cast<int64_t>(L) * D);
    FloatBuffer out(static_cast<size_t>(x.numel()));
    const float* px = x.ptr();
    auto apply = [cs, sn, groups, L, D, n_heads, dh, half](const float* in, float* o, bool inverse) {
        for (int64_t g = 0; g < groups; ++g) {
            for (int l = 0; l < L; ++l) {
                const int64_t row = (g * L + l) * D;
                for (int h = 0; h < n_heads; ++h) {
                    for (int i = 0; i < half; ++i) {
                        const float c = cs[static_cast<size_t>(l) * half + i];
                        const float s = inverse ? -sn[static_cast<size_t>(l) * half + i] : sn[static_cast<size_t>(l) * half + i];
                        const int64_t j = row + h * dh + 2 * i;
                        const float a0 = in[j], a1 = in[j + 1];
                        o[j] += a0 * c - a1 * s;
                        o[j + 1] += a0 * s + a1 * c;
                    }
                }
            }
        }
    };
    apply(px, out.data(), false);
    const bool grad = wants_grad({&x});
    Tensor result = make_output(x.shape(), std::move(out), grad, "rope");
    if (grad) {
        record("rope", result, [x, result, apply]() mutable {
            apply(result.grad_view().data(), x.grad().data(), true);
        });
    }
    return result;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, int n_heads) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) ||
        q.dim(2) != k.dim(2)) {
        throw ContractViolation("masked_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                shape_str(v.shape()) + " do not conform");
    }
    const int G = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), D = q.dim(2);
    if (n_heads <= 0 || D % n_heads != 0) {
        throw ContractViolation("masked_attention: width " + std::to_string(D) + " not divisible by " +
                                std::to_string(n_heads) + " heads");
    }
    if (mask.rows != Lq || mask.cols != Lk || (mask.groups != 1 && mask.groups != G) ||
        mask.allowed.size() != static_cast<size_t>(mask.groups) * Lq * Lk) {
        throw ContractViolation("masked_attention: mask [" + std::to_string(mask.groups) + "," +
                                std::to_string(mask.rows) + "," + std::to_string(mask.cols) + "] vs q " +
                                shape_str(q.shape()) + ", k " + shape_str(k.shape()));
    }
    for (int g = 0; g < mask.groups; ++g) {
        for (int r = 0; r < Lq; ++r) {
            const uint8_t* row = mask.allowed.data() + (static_cast<size_t>(g) * Lq + r) * Lk;
            if (std::none_of(row, row + Lk, [](uint8_t m) { return m != 0; })) {
                throw ContractViolation("masked_attention: query row " + std::to_string(r) + " has no allowed key");
            }
        }
    }
    const int dh = D / n_heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    using Strided = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
    using CStrided = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

    FloatBuffer out(static_cast<size_t>(G) * Lq * D);
    const bool grad = wants_grad({&q, &k, &v});
    // Softmax weights per (group, head) are kept for the backward pass.
    FloatBuffer probs(grad ? static_cast<size_t>(G) * n_heads * Lq * Lk : static_cast<size_t>(Lq) * Lk);
    MatR bias(Lq, Lk);
    int bias_group = -1;
    for (int g = 0; g < G; ++g) {
        const int mg = mask.groups == 1 ? 0 : g;
        if (mg != bias_group) {
            const uint8_t* m = mask.allowed.data() + static_cast<size_t>(mg) * Lq * Lk;
            for (int r = 0; r < Lq; ++r) {
                for (int c = 0; c < Lk; ++c) bias(r, c) = m[static_cast<size_t>(r) * Lk + c] ? 0.0f : -1e9f;
            }
            bias_group = mg;
        }
        for (int h = 0; h < n_heads; ++h) {
            CStrided Q(q.ptr() + static_cast<int64_t>(g) * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
            CStrided K(k.ptr() + static_cast<int64_t>(g) * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
            CStrided V(v.ptr() + static_cast<int64_t>(g) * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
            float* pp = grad ? probs.data() + (static_cast<size_t>(g) * n_heads + h) * Lq * Lk : probs.data();
            MapR P(pp, Lq, Lk);
            P.noalias() = Q * K.transpose();
            P *= sc;
            P += bias;
            for (int r = 0; r < Lq; ++r) {
                const float mx = P.row(r).maxCoeff();
                P.row(r) = (P.row(r).array() - mx).exp();
                P.row(r) /= P.row(r).sum();
            }
            Strided O(out.data() + static_cast<int64_t>(g) * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
            O.noalias() = P * V;
        }
    }
    if (g_attention_stats) {
        g_attention_stats->flops += 4.0 * G * n_heads * static_cast<double>(Lq) * Lk * dh;
        g_attention_stats->calls += 1;
    }
    Tensor result = make_output(q.shape(), std::move(out), grad, "masked_attention");
    if (grad) {
        record("masked_attention", result,
               [q, k, v, result, probs = std::move(probs), G, Lq, Lk, D, n_heads, dh, sc]() mutable {
                   using Strided = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
                   using CStrided = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;
                   float* gq = q.requires_grad() ? q.grad().data() : nullptr;
                   float* gk = k.requires_grad() ? k.grad().data() : nullptr;
                   float* gv = v.requires_grad() ? v.grad().data() : nullptr;
                   const float* go = result.grad_view().data();
                   MatR dP(Lq, Lk);
                   for (int g = 0; g < G; ++g) {
                       for (int h = 0; h < n_heads; ++h) {
                           const int64_t qo = static_cast<int64_t>(g) * Lq * D + h * dh;
                           const int64_t ko = static_cast<int64_t>(g) * Lk * D + h * dh;
                           CStrided Q(q.ptr() + qo, Lq, dh, Eigen::OuterStride<>(D));
                           CStrided K(k.ptr() + ko, Lk, dh, Eigen::OuterStride<>(D));
                           CStrided V(v.ptr() + ko, Lk, dh, Eigen::OuterStride<>(D));
                           CStrided dO(go + qo, Lq, dh, Eigen::OuterStride<>(D));
                           CMapR P(probs.data() + (static_cast<size_t>(g) * n_heads + h) * Lq * Lk, Lq, Lk);
                           if (gv) Strided(gv + ko, Lk, dh, Eigen::OuterStride<>(D)).noalias() += P.transpose() * dO;
                           dP.noalias() = dO * V.transpose();
                           // dS = P * (dP - rowsum(dP * P))
                           for (int r = 0; r < Lq; ++r) {
                               const float dot = (dP.row(r).array() * P.row(r).array()).sum();
                               dP.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
                           }
                           if (gq) Strided(gq + qo, Lq, dh, Eigen::OuterStride<>(D)).noalias() += sc * (dP * K);
                           if (gk) Strided(gk + ko, Lk, dh, Eigen::OuterStride<>(D)).noalias() += sc * (dP.transpose() * Q);
                       }
                   }
               });
    }
    return result;
}

AttentionStatsScope::AttentionStatsScope(AttentionStats& stats) : previous_(g_attention_stats) {
    g_attention_stats = &stats;
}
AttentionStatsScope::~AttentionStatsScope() { g_attention_stats = previous_; }

}  // namespace arsim
