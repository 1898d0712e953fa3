#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arsim/config.hpp"
#include "arsim/ops.hpp"
#include "arsim/scene.hpp"
#include "arsim/tensor.hpp"
#include "arsim/tensor_file.hpp"

namespace arsim {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int backbone_depth = 4;
    int control_depth = 2;
    int crossview_period = 2;
    int views = 3;
    int max_frames = 4096;  // largest absolute frame index the model accepts
    int patch = 4;
    int height = 32;
    int width = 32;
    int canvas_channels = kCanvasChannels;
    int mlp_ratio = 4;
    uint64_t codec_seed = 0;
    uint64_t init_seed = 0;
    bool view_embedding = true;

    int grid_h() const { return height / patch; }
    int grid_w() const { return width / patch; }
    int tokens_per_frame() const { return grid_h() * grid_w(); }
    int latent_channels() const { return 3 * patch * patch; }
    int prompt_tokens() const { return kCaptionTokens + views + kMaxBoxes + 1; }
    int temporal_layers() const { return backbone_depth + control_depth; }

    /// Throws ContractViolation naming the offending field.
    void validate() const;
    void write(KeyValues& kv) const;
    static ModelConfig read(const KeyValues& kv);
    /// The model.* keys read() understands.
    static const std::vector<std::string>& known_keys();
};

/// Controls for one frame as the encoders consume them. The previous frame's
/// ego pose and canvases feed the ego-motion token and the causal canvas
/// kernel; at a scene start they are the identity and zeros.
struct FrameControls {
    ControlState cs;
    Tensor prev_ego;     // [4, 4]
    Tensor canvas;       // [V, H, W, C_canvas]
    Tensor prev_canvas;  // [V, H, W, C_canvas]
};

FrameControls frame_controls(const SceneRecord& scene, int t);

/// Encoded per-frame conditioning for B samples and T frames.
struct EncodedCond {
    Tensor prompt;                     // [B, T, P, d]
    std::vector<uint8_t> prompt_mask;  // B*T*P, 1 = attendable
    Tensor control;                    // [B, V, T, S, d]

    int batch() const { return prompt.dim(0); }
    int frames() const { return prompt.dim(1); }
};

/// Joins conditioning blocks along the frame axis (same batch size).
EncodedCond concat_frames(const std::vector<const EncodedCond*>& parts);

/// Per temporal-attention layer keys and values of frame tokens, each
/// [B*V, L, d] with rotary encoding already applied to the keys.
struct KvState {
    std::vector<Tensor> k;
    std::vector<Tensor> v;
};

struct ForwardArgs {
    Tensor latents;                  // [B, V, T, S, C]
    std::vector<float> t_diff;       // B*T; 0 for reference frames
    std::vector<uint8_t> is_ref;     // T
    std::vector<int> frame_index;    // T, absolute frame indices
    const EncodedCond* cond = nullptr;
    std::vector<uint8_t> drop_cond;  // B*T (optional): drop prompt and control for that frame
    bool use_control = true;         // false runs the backbone alone
    const KvState* past = nullptr;   // cached reference frames, all earlier than every frame here
    KvState* capture = nullptr;      // receives this call's frame-token K/V
};

/// Boolean pattern over T frames of `tokens_per_frame` tokens. A reference
/// frame attends to its own tokens only; a target frame attends to every frame
/// up to and including itself.
AttentionMask build_causal_mask(int T, int tokens_per_frame, const std::vector<uint8_t>& ref_flags);

class Model {
public:
    explicit Model(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    std::vector<Tensor> parameter_tensors() const;
    int64_t parameter_count(const std::string& prefix = "") const;
    Tensor& parameter(const std::string& name);

    /// Scene prompt tokens and canvas features for frames ordered (b, t).
    EncodedCond encode(const std::vector<const FrameControls*>& frames, int batch) const;

    /// Velocity prediction [B, V, T, S, C] for every frame in args.
    Tensor forward(const ForwardArgs& args) const;

    /// Copies parameter values (shapes must match).
    void load_parameters(const std::vector<NamedTensor>& values);

private:
    struct Linear {
        Tensor w, b;
    };
    struct TemporalBlock {
        Linear mod, qkv, out, pk, pv, fc1, fc2;
    };
    struct CrossViewBlock {
        Linear qkv, out;
    };

    Linear make_linear(const std::string& name, int in, int out, bool zero);
    Tensor make_param(const std::string& name, Shape shape, float stddev);
    TemporalBlock make_temporal(const std::string& name);

    struct Context;
    Tensor temporal_block(const TemporalBlock& blk, const Tensor& x, const Tensor& sc, Context& ctx, int layer) const;
    Tensor crossview_block(const CrossViewBlock& blk, const Tensor& x) const;

    ModelConfig config_;
    std::vector<NamedTensor> params_;
    uint64_t init_counter_ = 0;

    Linear in_proj_, time1_, time2_, final_mod_, final_out_, ctrl_in_;
    Tensor view_emb_, spatial_emb_;
    std::vector<TemporalBlock> backbone_, control_;
    std::vector<CrossViewBlock> crossview_;
    std::vector<Linear> ctrl_proj_;
    // prompt encoder
    Tensor caption_emb_, category_emb_, slot_emb_;
    Linear camera_proj_, box_proj_, ego_proj_;
    // canvas encoder
    Linear canvas1_, canvas2_;
};

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    KeyValues meta;  // trainer state (stage, step, alpha, ...)
    std::vector<NamedTensor> extra;  // optimizer moments, optional
};

void save_checkpoint(const std::string& path, const Model& model, const Checkpoint& extra);
/// Returns the model; fills `extra` when given.
Model load_checkpoint(const std::string& path, Checkpoint* extra = nullptr);

}  // namespace arsim
