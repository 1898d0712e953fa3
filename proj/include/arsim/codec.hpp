#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "arsim/tensor.hpp"

namespace arsim {

/// Frame-level spatial codec: space-to-depth patchify followed by a fixed
/// seeded orthogonal mixing of each patch. Every frame is coded on its own.
class PatchCodec {
public:
    explicit PatchCodec(int patch = 4, uint64_t seed = 0);

    int patch() const { return patch_; }
    int channels() const { return 3 * patch_ * patch_; }
    uint64_t seed() const { return seed_; }
    const Eigen::MatrixXf& mixing() const { return Q_; }

    /// [..., H, W, 3] -> [..., H/p, W/p, 3p^2]
    Tensor encode(const Tensor& images) const;
    /// [..., h, w, 3p^2] -> [..., h*p, w*p, 3]
    Tensor decode(const Tensor& latents) const;

    /// Model-space latents: images in [0, 1] are centered to [-1, 1] first.
    Tensor encode_image(const Tensor& images) const;
    Tensor decode_image(const Tensor& latents) const;

private:
    int patch_;
    uint64_t seed_;
    Eigen::MatrixXf Q_;
};

}  // namespace arsim
