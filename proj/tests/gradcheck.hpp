#pragma once

// Central finite-difference oracle for reverse-mode gradients. Shared by the
// unit suite and the acceptance binary.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "arsim/ops.hpp"
#include "arsim/tensor.hpp"

namespace arsim::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (float& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

struct GradCheckResult {
    double max_rel_error = 0.0;  // worst norm-wise relative error over inputs
    std::string worst_input;
};

/// Compares autodiff gradients of sum(f(inputs) * w) against central
/// differences with step h. `w` is a fixed random weighting so every output
/// element contributes.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, uint64_t seed = 7, float h = 1e-3f) {
    std::mt19937_64 rng(seed);
    Tensor probe_out;
    {
        NoGradScope ng;
        probe_out = f(inputs);
    }
    const Tensor w = random_tensor(probe_out.shape(), rng, 0.5f, 1.5f);
    auto objective = [&](const std::vector<Tensor>& xs) { return sum(mul(f(xs), w)); };

    for (Tensor& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = objective(inputs);
        tape.backward(loss);
    }

    GradCheckResult res;
    NoGradScope ng;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor& x = inputs[i];
        std::vector<float> analytic(x.grad_view().begin(), x.grad_view().end());
        if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), 0.0f);
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (int64_t j = 0; j < x.numel(); ++j) {
            const float orig = x.data()[j];
            x.data()[j] = orig + h;
            const Tensor yp = f(inputs);
            x.data()[j] = orig - h;
            const Tensor ym = f(inputs);
            x.data()[j] = orig;
            // reduce in double so rounding of the scalar loss does not swamp small slopes
            double numeric = 0.0;
            for (int64_t k = 0; k < yp.numel(); ++k) {
                numeric += static_cast<double>(w.data()[k]) * (static_cast<double>(yp.data()[k]) - ym.data()[k]);
            }
            numeric /= 2.0 * h;
            diff2 += (numeric - analytic[j]) * (numeric - analytic[j]);
            a2 += static_cast<double>(analytic[j]) * analytic[j];
            n2 += numeric * numeric;
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
        const double rel = std::sqrt(diff2) / denom;
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_input = "input " + std::to_string(i);
        }
    }
    return res;
}

struct NamedGradCase {
    std::string name;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
    std::vector<Tensor> inputs;
};

/// One case per differentiable op, on small random tensors.
inline std::vector<NamedGradCase> op_gradient_cases(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto r = [&](Shape s, float lo = -1.0f, float hi = 1.0f) { return random_tensor(std::move(s), rng, lo, hi); };
    std::vector<NamedGradCase> cases;
    cases.push_back({"add", [](const auto& x) { return add(x[0], x[1]); }, {r({3, 4}), r({3, 4})}});
    cases.push_back({"add_broadcast", [](const auto& x) { return add(x[0], x[1]); }, {r({2, 3, 4}), r({3, 1})}});
    cases.push_back({"sub", [](const auto& x) { return sub(x[0], x[1]); }, {r({2, 1, 4}), r({3, 4})}});
    cases.push_back({"mul", [](const auto& x) { return mul(x[0], x[1]); }, {r({3, 4}), r({3, 4})}});
    cases.push_back({"mul_broadcast", [](const auto& x) { return mul(x[0], x[1]); }, {r({2, 3, 4}), r({4})}});
    cases.push_back({"scale", [](const auto& x) { return scale(x[0], -1.7f); }, {r({5})}});
    cases.push_back({"add_scalar", [](const auto& x) { return add_scalar(x[0], 0.3f); }, {r({5})}});
    cases.push_back({"matmul", [](const auto& x) { return matmul(x[0], x[1]); }, {r({2, 3, 4}), r({4, 5})}});
    cases.push_back({"linear", [](const auto& x) { return linear(x[0], x[1], x[2]); }, {r({3, 4}), r({4, 2}), r({2})}});
    cases.push_back({"reshape", [](const auto& x) { return mul(reshape(x[0], {6, 2}), x[1]); }, {r({3, 4}), r({6, 2})}});
    cases.push_back({"permute", [](const auto& x) { return mul(permute(x[0], {2, 0, 1}), x[1]); },
                     {r({2, 3, 4}), r({4, 2, 3})}});
    cases.push_back({"concat", [](const auto& x) { return mul(concat({x[0], x[1]}, 1), x[2]); },
                     {r({2, 3, 2}), r({2, 1, 2}), r({2, 4, 2})}});
    cases.push_back({"slice", [](const auto& x) { return mul(slice(x[0], 1, 1, 3), x[1]); }, {r({2, 4, 3}), r({2, 2, 3})}});
    cases.push_back({"broadcast_to", [](const auto& x) { return mul(broadcast_to(x[0], {2, 3, 4}), x[1]); },
                     {r({1, 3, 1}), r({2, 3, 4})}});
    cases.push_back({"embedding",
                     [](const auto& x) {
                         const std::vector<int> ids{2, 0, 2, 1};
                         return mul(embedding(x[0], ids), x[1]);
                     },
                     {r({3, 4}), r({4, 4})}});
    cases.push_back({"silu", [](const auto& x) { return silu(x[0]); }, {r({3, 4}, -3.0f, 3.0f)}});
    cases.push_back({"rms_norm", [](const auto& x) { return rms_norm(x[0]); }, {r({3, 5}, 0.2f, 1.5f)}});
    cases.push_back({"softmax", [](const auto& x) { return softmax(x[0]); }, {r({3, 5}, -2.0f, 2.0f)}});
    cases.push_back({"mse", [](const auto& x) { return mse(x[0], x[1]); }, {r({3, 4}), r({3, 4})}});
    cases.push_back({"sum", [](const auto& x) { return sum(mul(x[0], x[0])); }, {r({3, 4})}});
    cases.push_back({"mean", [](const auto& x) { return mean(mul(x[0], x[0])); }, {r({3, 4})}});
    cases.push_back({"rope",
                     [](const auto& x) {
                         const std::vector<int> pos{0, 3, 7};
                         return rope(x[0], pos, 2);
                     },
                     {r({2, 3, 8})}});
    {
        AttentionMask mask(2, 3, 5, 0);
        std::uniform_int_distribution<int> coin(0, 1);
        for (int g = 0; g < 2; ++g) {
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 5; ++j) mask.at(g, i, j) = static_cast<uint8_t>(coin(rng));
                mask.at(g, i, i) = 1;
            }
        }
        cases.push_back({"masked_attention",
                         [mask](const auto& x) { return masked_attention(x[0], x[1], x[2], mask, 2); },
                         {r({2, 3, 4}), r({2, 5, 4}), r({2, 5, 4})}});
    }
    return cases;
}

}  // namespace arsim::testing
