#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "arsim/codec.hpp"
#include "arsim/model.hpp"
#include "arsim/rollout.hpp"
#include "arsim/scene.hpp"

namespace arsim {

/// Fixed random convolutional feature map. Never trained.
/// Three 3x3 stride-2 convolutions with ReLU, 2x2 average pooling of the last
/// map, then a random projection to `dim` outputs.
class FeatureExtractor {
public:
    explicit FeatureExtractor(uint64_t seed = 0, int dim = 64, int in_channels = 3);

    int dim() const { return dim_; }
    int in_channels() const { return in_channels_; }
    uint64_t seed() const { return seed_; }

    /// [H, W, C] -> D. Inputs are expected in [0, 1].
    Eigen::VectorXd extract(const Tensor& image) const;
    /// [..., H, W, C] -> N x D, one row per leading index.
    Eigen::MatrixXd extract_all(const Tensor& images) const;

    /// Extractor for stacked windows of `window` RGB frames.
    static FeatureExtractor video(uint64_t seed = 0, int dim = 64, int window = 8);

private:
    struct Conv {
        int in = 0, out = 0;
        Eigen::MatrixXf w;  // out x (9 * in)
        Eigen::VectorXf b;
    };

    uint64_t seed_;
    int dim_;
    int in_channels_;
    std::vector<Conv> convs_;
    Eigen::MatrixXf proj_;  // dim x (4 * last channels)
};

/// Stacks every `window` consecutive frames along channels with the given
/// stride. frames [T, H, W, 3] -> [N, H, W, 3 * window].
Tensor stack_windows(const Tensor& frames, int window, int stride);

struct GaussianSummary {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    /// Throws ContractViolation when cov is not symmetric or not PSD
    /// (tolerance 1e-6).
    void validate() const;
};

/// Sample mean and unbiased covariance of the rows (N >= 2).
GaussianSummary summarize(const Eigen::MatrixXd& features);

/// Squared Frechet distance between two Gaussians.
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

/// Pixels whose color is within tolerance of the reserved road color.
/// [H, W, 3] -> H*W mask.
std::vector<uint8_t> road_mask(const Tensor& image);
double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);

/// Mean road IoU between generated images [..., H, W, 3] and canvases
/// [..., H, W, 2]. Pairs where both masks are empty count as 1.
double layout_adherence(const Tensor& images, const Tensor& canvases);

struct DegradationOptions {
    std::vector<int> lengths{16, 32, 64};
    int window = 8;  // generated frames ending at each length that enter the statistics
    uint64_t feature_seed = 0;
    int feature_dim = 64;
    bool video = false;  // also compute the stacked-window variant
};

struct DegradationRow {
    int length = 0;
    double frechet = 0.0;        // frame features
    double frechet_video = 0.0;  // stacked windows, when requested
    double layout_iou = 0.0;
};

/// Rolls each scene out from its ground-truth first frame to the largest
/// length and compares generated with real frames in the window that ends at
/// each length. Scenes need more frames than the largest length.
std::vector<DegradationRow> degradation_curve(const Model& model, const PatchCodec& codec,
                                              const std::vector<SceneRecord>& scenes, const SamplerConfig& sampler,
                                              const DegradationOptions& options = {});

/// The statistics of degradation_curve for frames produced elsewhere.
/// generated[i] is [T_i, V, H, W, 3] with frame 0 the shared initial frame,
/// compared against scenes[i].
std::vector<DegradationRow> degradation_from_frames(const std::vector<Tensor>& generated,
                                                    const std::vector<const SceneRecord*>& scenes,
                                                    const DegradationOptions& options = {});

/// Least-squares slope of y against x.
double fit_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Frechet distance between generated frames 1..n_frames and the matching real
/// frames, pooled over scenes.
double rollout_frechet(const Model& model, const PatchCodec& codec, const std::vector<SceneRecord>& scenes,
                       const SamplerConfig& sampler, int n_frames, const FeatureExtractor& features);

/// Mean squared latent error of frame `target` predicted from the `n_refs`
/// ground-truth frames just before it, one prediction per scene.
double next_frame_error(const Model& model, const PatchCodec& codec, const std::vector<SceneRecord>& scenes,
                        const SamplerConfig& sampler, int n_refs, int target = 2);

struct MetricRow {
    std::string metric;
    int length = 0;
    double value = 0.0;
    uint64_t seed = 0;
    std::string checkpoint;
};

std::vector<MetricRow> degradation_rows(const std::vector<DegradationRow>& curve, uint64_t seed,
                                        const std::string& checkpoint);
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace arsim
