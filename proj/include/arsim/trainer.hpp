#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "arsim/codec.hpp"
#include "arsim/config.hpp"
#include "arsim/model.hpp"
#include "arsim/optim.hpp"
#include "arsim/rollout.hpp"

namespace arsim {

// Rectified-flow convention: z_t = (1 - t) x + t eps, target velocity eps - x.
struct FlowSample {
    Tensor x, eps;
    float t = 0.0f;
    Tensor z, u_star;
};

FlowSample make_flow_sample(const Tensor& x, const Tensor& eps, float t);
/// Draws eps ~ N(0, I) and t ~ U[0, 1].
FlowSample sample_flow(const Tensor& x, std::mt19937_64& rng);

/// Mean squared error over the frames with frame_mask = 1. pred and target are
/// [B, V, T, S, C]; frame_mask has B*T entries ordered (b, t).
Tensor fm_loss(const Tensor& pred, const Tensor& target, const std::vector<uint8_t>& frame_mask);

/// Categorical distribution over the number of clean reference frames l.
class HorizonDistribution {
public:
    explicit HorizonDistribution(std::vector<double> weights);
    /// 0.05 for l=0; 0.30, 0.20, 0.15 for l=1..3; the remaining 0.30 spread
    /// evenly over l=4..L-1. Renormalized when L <= 4.
    static HorizonDistribution standard(int clip_len);
    /// Custom head weights for l=0,1,...; any leftover mass is spread evenly
    /// over the remaining lengths.
    static HorizonDistribution from_head(const std::vector<double>& head, int clip_len);

    int sample(std::mt19937_64& rng) const;
    const std::vector<double>& weights() const { return weights_; }
    int clip_len() const { return static_cast<int>(weights_.size()); }

private:
    std::vector<double> weights_;
};

/// alpha * x_hat + (1 - alpha) * x_gt
Tensor blend(const Tensor& x_hat, const Tensor& x_gt, float alpha);

struct BlendState {
    double rate = 1e-4;
    int64_t updates = 0;

    double alpha() const;
    void update() { ++updates; }
};

struct TrainConfig {
    std::string stage = "arhc";  // arhc | blendforce
    float lr = 8e-5f;
    float weight_decay = 0.0f;
    int batch_size = 4;
    int steps = 100;
    double alpha_rate = 1e-4;
    std::vector<double> horizon_head;  // empty = standard weights
    int rollout_steps = 3;
    int checkpoint_every = 0;  // 0 = final checkpoint only
    uint64_t seed = 0;
    int clip_len = 8;
    float cond_dropout = 0.1f;
    float grad_clip = 1.0f;
    int bf_max_rollout = 16;
    int bf_window = 8;

    void validate() const;
    /// Reads the training keys; the model keys are checked but read by
    /// ModelConfig::read.
    static TrainConfig from_keys(const KeyValues& kv);
    static const std::vector<std::string>& known_keys();
};

/// Scenes with their model-space latents and per-frame encoder inputs.
struct TrainData {
    std::vector<SceneRecord> scenes;
    std::vector<Tensor> latents;  // [T, V, S, C] per scene
    std::vector<std::vector<FrameControls>> controls;
};

TrainData prepare_data(std::vector<SceneRecord> scenes, const PatchCodec& codec);

/// Details of the most recent blend-forcing step.
struct BlendTrace {
    int rollout_len = 0;  // R: frames of history before the target
    int window = 0;       // reference frames fed to the model
    bool generated = false;
    double alpha = 0.0;
    Tensor init_latent;   // first history frame, [V, S, C]
    Tensor init_truth;    // ground truth of that frame
};

class Trainer {
public:
    Trainer(Model& model, const TrainConfig& config, std::shared_ptr<const TrainData> data);

    /// One ARHC update; l < 0 draws the horizon from the configured weights.
    double arhc_step(int l = -1);
    /// One blend-forcing update (advances alpha once).
    double bf_step();

    const BlendState& blend_state() const { return blend_; }
    BlendState& blend_state() { return blend_; }
    const BlendTrace& last_blend() const { return trace_; }
    int last_horizon() const { return last_l_; }
    const HorizonDistribution& horizon() const { return horizon_; }
    AdamW& optimizer() { return opt_; }
    std::mt19937_64& rng() { return rng_; }

    /// Optimizer moments and schedule state as checkpoint extras.
    Checkpoint state(const std::string& stage, int64_t step) const;
    void restore(const Checkpoint& ck);

private:
    double update(const Tensor& loss);

    Model& model_;
    TrainConfig config_;
    std::shared_ptr<const TrainData> data_;
    std::vector<Tensor> params_;
    AdamW opt_;
    HorizonDistribution horizon_;
    BlendState blend_;
    BlendTrace trace_;
    int last_l_ = -1;
    std::mt19937_64 rng_;
};

struct LossRow {
    int64_t step = 0;
    std::string stage;  // arhc | bf
    double loss = 0.0;
    double alpha = 0.0;
};

/// Runs a stage and writes the checkpoint (and every checkpoint_every steps).
/// The blendforce stage needs an initial checkpoint from the arhc stage and
/// alternates one blend-forcing step with one ARHC step.
std::vector<LossRow> train(Model& model, const TrainConfig& config, std::shared_ptr<const TrainData> data,
                           const std::string& out_checkpoint, const Checkpoint* init = nullptr,
                           const std::function<void(const LossRow&)>& on_step = {});

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows);

}  // namespace arsim
