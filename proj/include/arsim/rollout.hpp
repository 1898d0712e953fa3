#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "arsim/codec.hpp"
#include "arsim/model.hpp"

namespace arsim {

struct SamplerConfig {
    int steps = 3;
    float cfg_scale = 1.0f;  // 1 = single conditional pass
    bool kv_cache = true;
    bool cond_cache = true;
    int ref_window = 8;
    uint64_t seed = 0;

    void validate() const;
};

struct RolloutCounters {
    int64_t model_evals = 0;    // denoising passes
    int64_t cache_fills = 0;    // clean single-frame passes that fill the KV cache
    int64_t encoder_calls = 0;
    double attention_flops = 0.0;
};

/// Sliding window of per-frame keys and values.
class KvCache {
public:
    explicit KvCache(int window);

    /// Appends one frame's K/V ([B*V, S, d] per layer), evicting the oldest
    /// frame once the window is full.
    void append(const KvState& frame, int frame_index);
    void clear();
    int size() const { return static_cast<int>(frames_.size()); }
    int window() const { return window_; }
    const std::deque<int>& frame_indices() const { return indices_; }
    /// Window contents concatenated along the token axis, oldest first.
    const KvState& state() const;

private:
    int window_;
    std::deque<KvState> frames_;
    std::deque<int> indices_;
    mutable KvState joined_;
    mutable bool dirty_ = true;
};

/// Holds the encoded controls of the frame being denoised.
class ConditionCache {
public:
    explicit ConditionCache(bool enabled) : enabled_(enabled) {}

    /// Encodes on the first query for a frame (or on every query when
    /// disabled). Querying a frame older than the cached one is a contract
    /// violation.
    const EncodedCond& get(const Model& model, const FrameControls& controls, int frame_index, RolloutCounters& counters);
    int frame_index() const { return index_; }

private:
    bool enabled_;
    int index_ = -1;
    EncodedCond value_;
};

/// u_uncond + s * (u_cond - u_uncond)
Tensor cfg_combine(const Tensor& u_cond, const Tensor& u_uncond, float scale);

/// Model-space latents of every frame of a scene, [T, V, S, C].
Tensor scene_latents(const PatchCodec& codec, const SceneRecord& scene);

/// One autoregressive generation session over shared, read-only weights.
class Session {
public:
    /// first_index numbers the first appended frame; it sets both the
    /// positional index and the noise stream of later frames.
    Session(const Model& model, const SamplerConfig& config, int first_index = 0);

    /// Appends a known frame (e.g. ground truth) as the next reference.
    void push_reference(const Tensor& latent, const FrameControls& controls);
    /// Generates frame next_index() from the reference window and the frame's
    /// controls, then appends it to the history. Returns [V, S, C].
    Tensor sample_frame(const FrameControls& controls);

    int next_index() const { return next_index_; }
    int history() const { return static_cast<int>(window_.size()); }
    const SamplerConfig& config() const { return config_; }
    const RolloutCounters& counters() const { return counters_; }
    const KvCache& kv_cache() const { return kv_; }
    /// Every frame appended so far, in order.
    const std::vector<Tensor>& frames() const { return frames_; }

private:
    struct Ref {
        Tensor latent;  // [V, S, C]
        EncodedCond cond;
        int index;
    };

    void append(const Tensor& latent, const EncodedCond& cond);
    Tensor velocity(const Tensor& z, float t, const EncodedCond& cond, bool drop);

    const Model& model_;
    SamplerConfig config_;
    int next_index_ = 0;
    std::deque<Ref> window_;
    std::vector<Tensor> frames_;
    KvCache kv_;
    ConditionCache cond_cache_;
    RolloutCounters counters_;
};

struct FrameRecord {
    int frame_index = 0;
    double seconds = 0.0;
    int64_t model_evals = 0;
    int64_t cache_fills = 0;
    int64_t encoder_calls = 0;
    double attention_flops = 0.0;
    int history = 0;  // reference frames used
};

struct RolloutResult {
    std::vector<Tensor> latents;  // generated frames, [V, S, C] each
    std::vector<Tensor> images;   // decoded [V, H, W, 3] when a codec is given
    std::vector<FrameRecord> records;
};

/// Closed-loop rollout. With an initial frame, controls[0] belongs to it and
/// frames 1..n are generated; without, frames 0..n-1 are generated.
RolloutResult rollout(const Model& model, const SamplerConfig& config, const std::vector<FrameControls>& controls, int n_frames,
                      const std::optional<Tensor>& init_latent = std::nullopt, const PatchCodec* codec = nullptr);

void write_latency_csv(const std::string& path, const std::vector<FrameRecord>& records);

struct BenchRow {
    SamplerConfig sampler;
    double mean_s_per_frame = 0.0;
    double median_s_per_frame = 0.0;
    double model_evals_per_frame = 0.0;
};

/// The default grid: 20-step rows without and with each cache and CFG, then
/// cached, guidance-free rows with 1 to 5 steps.
std::vector<SamplerConfig> default_bench_grid();
/// One row per non-empty line: `steps=3 kv_cache=on cfg=1 cond_cache=on`.
std::vector<SamplerConfig> parse_bench_grid(const std::string& text);

/// Primes each configuration with `history` ground-truth frames of the scene,
/// then times `frames` generated frames.
std::vector<BenchRow> bench(const Model& model, const PatchCodec& codec, const SceneRecord& scene,
                            const std::vector<SamplerConfig>& grid, int history, int frames);
void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

}  // namespace arsim
