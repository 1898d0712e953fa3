#pragma once

#include <cstdint>
#include <vector>

#include "arsim/tensor.hpp"

namespace arsim {

struct AdamWConfig {
    float lr = 8e-5f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

/// Adam with decoupled weight decay. Moment buffers are owned here and
/// shape-matched to the parameter list given at construction.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig config);

    /// One update from the parameters' current grads. Throws NumericError and
    /// leaves every parameter untouched if any grad is non-finite.
    void step();
    void zero_grad();

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }
    AdamWConfig& config() { return config_; }
    const std::vector<Tensor>& params() const { return params_; }
    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    const std::vector<std::vector<float>>& first_moments() const { return m_; }
    const std::vector<std::vector<float>>& second_moments() const { return v_; }

private:
    std::vector<Tensor> params_;
    AdamWConfig config_;
    std::vector<std::vector<float>> m_, v_;
    int64_t step_count_ = 0;
};

/// Scales grads so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace arsim
