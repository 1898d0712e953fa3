#include "arsim/optim.hpp"

#include <cmath>
#include <string>

#include "arsim/errors.hpp"

namespace arsim {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
}

void AdamW::step() {
    for (size_t i = 0; i < params_.size(); ++i) {
        if (m_[i].size() != static_cast<size_t>(params_[i].numel())) {
            throw ContractViolation("AdamW: moment buffer " + std::to_string(i) + " does not match its parameter");
        }
        for (float g : params_[i].grad_view()) {
            if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
        }
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_count_));
    const float b1 = config_.beta1, b2 = config_.beta2;
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        auto w = p.data();
        auto g = p.grad_view();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has_grad = !g.empty();
        for (size_t j = 0; j < w.size(); ++j) {
            const float gj = has_grad ? g[j] : 0.0f;
            m[j] = b1 * m[j] + (1.0f - b1) * gj;
            v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= config_.lr * config_.weight_decay * w[j];
            w[j] -= static_cast<float>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double ss = 0.0;
    for (const Tensor& p : params) {
        for (float g : p.grad_view()) ss += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0.0) {
        const float f = static_cast<float>(max_norm / norm);
        for (Tensor& p : params) {
            if (!p.has_grad()) continue;
            for (float& g : p.grad()) g *= f;
        }
    }
    return norm;
}

}  // namespace arsim
