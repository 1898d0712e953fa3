#include "arsim/codec.hpp"

#include <random>

#include "arsim/errors.hpp"

namespace arsim {

PatchCodec::PatchCodec(int patch, uint64_t seed) : patch_(patch), seed_(seed) {
    if (patch < 1) throw ContractViolation("PatchCodec: patch must be >= 1, got " + std::to_string(patch));
    const int n = channels();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = gauss(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    // Fix column signs so Q is a deterministic function of the seed.
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j) {
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    }
    Q_ = q.cast<float>();
}

Tensor PatchCodec::encode(const Tensor& images) const {
    const Shape& s = images.shape();
    if (s.size() < 3 || s.back() != 3 || s[s.size() - 2] % patch_ != 0 || s[s.size() - 3] % patch_ != 0) {
        throw ContractViolation("encode: image shape " + shape_str(s) + " is not [..., H, W, 3] with H, W divisible by " +
                                std::to_string(patch_));
    }
    const int H = s[s.size() - 3], W = s[s.size() - 2];
    const int h = H / patch_, w = W / patch_, C = channels();
    const int64_t frames = images.numel() / (static_cast<int64_t>(H) * W * 3);
    Shape out_shape(s.begin(), s.end() - 3);
    out_shape.insert(out_shape.end(), {h, w, C});
    Tensor out = Tensor::zeros(out_shape);
    Eigen::VectorXf patch(C);
    for (int64_t f = 0; f < frames; ++f) {
        const float* img = images.ptr() + f * H * W * 3;
        float* lat = out.ptr() + f * h * w * C;
        for (int bi = 0; bi < h; ++bi) {
            for (int bj = 0; bj < w; ++bj) {
                int k = 0;
                for (int dy = 0; dy < patch_; ++dy)
                    for (int dx = 0; dx < patch_; ++dx)
                        for (int c = 0; c < 3; ++c) patch[k++] = img[((bi * patch_ + dy) * W + bj * patch_ + dx) * 3 + c];
                Eigen::Map<Eigen::VectorXf>(lat + (bi * w + bj) * C, C).noalias() = Q_ * patch;
            }
        }
    }
    return out;
}

Tensor PatchCodec::decode(const Tensor& latents) const {
    const Shape& s = latents.shape();
    const int C = channels();
    if (s.size() < 3 || s.back() != C) {
        throw ContractViolation("decode: latent shape " + shape_str(s) + " needs " + std::to_string(C) + " channels");
    }
    const int h = s[s.size() - 3], w = s[s.size() - 2];
    const int H = h * patch_, W = w * patch_;
    const int64_t frames = latents.numel() / (static_cast<int64_t>(h) * w * C);
    Shape out_shape(s.begin(), s.end() - 3);
    out_shape.insert(out_shape.end(), {H, W, 3});
    Tensor out = Tensor::zeros(out_shape);
    Eigen::VectorXf patch(C);
    for (int64_t f = 0; f < frames; ++f) {
        const float* lat = latents.ptr() + f * h * w * C;
        float* img = out.ptr() + f * H * W * 3;
        for (int bi = 0; bi < h; ++bi) {
            for (int bj = 0; bj < w; ++bj) {
                patch.noalias() = Q_.transpose() * Eigen::Map<const Eigen::VectorXf>(lat + (bi * w + bj) * C, C);
                int k = 0;
                for (int dy = 0; dy < patch_; ++dy)
                    for (int dx = 0; dx < patch_; ++dx)
                        for (int c = 0; c < 3; ++c) img[((bi * patch_ + dy) * W + bj * patch_ + dx) * 3 + c] = patch[k++];
            }
        }
    }
    return out;
}

Tensor PatchCodec::encode_image(const Tensor& images) const {
    Tensor centered = images.detach();
    for (float& v : centered.data()) v = 2.0f * v - 1.0f;
    return encode(centered);
}

Tensor PatchCodec::decode_image(const Tensor& latents) const {
    Tensor img = decode(latents);
    for (float& v : img.data()) v = 0.5f * (v + 1.0f);
    return img;
}

}  // namespace arsim
