#include "arsim/model.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'F', 'A', 'R', 'D'};
constexpr float kBoxScale = 1.0f / 20.0f;
constexpr float kEgoScale = 1.0f / 50.0f;

Tensor data_tensor(Shape shape, std::vector<float> values) { return Tensor::from(std::move(shape), std::move(values)); }

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ContractViolation("ModelConfig: " + what); };
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) fail("head width must be even for rotary encoding");
    if (backbone_depth < 1) fail("backbone_depth must be >= 1");
    if (control_depth < 0 || control_depth > backbone_depth) fail("control_depth must be in [0, backbone_depth]");
    if (crossview_period < 1) fail("crossview_period must be >= 1");
    if (views < 1) fail("views must be >= 1");
    if (patch < 2 || patch % 2 != 0) fail("patch must be even");
    if (height % patch != 0 || width % patch != 0) fail("image size must be divisible by patch");
    if (canvas_channels != kCanvasChannels) fail("canvas_channels must be " + std::to_string(kCanvasChannels));
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (max_frames < 1) fail("max_frames must be >= 1");
}

void ModelConfig::write(KeyValues& kv) const {
    kv.set("model.d_model", std::to_string(d_model));
    kv.set("model.n_heads", std::to_string(n_heads));
    kv.set("model.backbone_depth", std::to_string(backbone_depth));
    kv.set("model.control_depth", std::to_string(control_depth));
    kv.set("model.crossview_period", std::to_string(crossview_period));
    kv.set("model.views", std::to_string(views));
    kv.set("model.max_frames", std::to_string(max_frames));
    kv.set("model.patch", std::to_string(patch));
    kv.set("model.height", std::to_string(height));
    kv.set("model.width", std::to_string(width));
    kv.set("model.canvas_channels", std::to_string(canvas_channels));
    kv.set("model.mlp_ratio", std::to_string(mlp_ratio));
    kv.set("model.codec_seed", std::to_string(static_cast<int64_t>(codec_seed)));
    kv.set("model.init_seed", std::to_string(static_cast<int64_t>(init_seed)));
    kv.set("model.view_embedding", view_embedding ? "on" : "off");
}

const std::vector<std::string>& ModelConfig::known_keys() {
    static const std::vector<std::string> keys{
        "model.d_model", "model.n_heads", "model.backbone_depth", "model.control_depth", "model.crossview_period",
        "model.views",   "model.max_frames", "model.patch",      "model.height",        "model.width",
        "model.canvas_channels", "model.mlp_ratio", "model.codec_seed", "model.init_seed", "model.view_embedding"};
    return keys;
}

ModelConfig ModelConfig::read(const KeyValues& kv) {
    ModelConfig c;
    c.d_model = static_cast<int>(kv.get_int("model.d_model", c.d_model));
    c.n_heads = static_cast<int>(kv.get_int("model.n_heads", c.n_heads));
    c.backbone_depth = static_cast<int>(kv.get_int("model.backbone_depth", c.backbone_depth));
    c.control_depth = static_cast<int>(kv.get_int("model.control_depth", c.control_depth));
    c.crossview_period = static_cast<int>(kv.get_int("model.crossview_period", c.crossview_period));
    c.views = static_cast<int>(kv.get_int("model.views", c.views));
    c.max_frames = static_cast<int>(kv.get_int("model.max_frames", c.max_frames));
    c.patch = static_cast<int>(kv.get_int("model.patch", c.patch));
    c.height = static_cast<int>(kv.get_int("model.height", c.height));
    c.width = static_cast<int>(kv.get_int("model.width", c.width));
    c.canvas_channels = static_cast<int>(kv.get_int("model.canvas_channels", c.canvas_channels));
    c.mlp_ratio = static_cast<int>(kv.get_int("model.mlp_ratio", c.mlp_ratio));
    c.codec_seed = static_cast<uint64_t>(kv.get_int("model.codec_seed", static_cast<int64_t>(c.codec_seed)));
    c.init_seed = static_cast<uint64_t>(kv.get_int("model.init_seed", static_cast<int64_t>(c.init_seed)));
    c.view_embedding = kv.get_bool("model.view_embedding", c.view_embedding);
    c.validate();
    return c;
}

FrameControls frame_controls(const SceneRecord& scene, int t) {
    FrameControls f;
    f.cs = scene.control(t);
    f.canvas = scene.canvas(t);
    if (t > 0) {
        f.prev_ego = scene.control(t - 1).ego;
        f.prev_canvas = scene.canvas(t - 1);
    } else {
        f.prev_ego = data_tensor({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
        f.prev_canvas = Tensor::zeros(f.canvas.shape());
    }
    return f;
}

EncodedCond concat_frames(const std::vector<const EncodedCond*>& parts) {
    if (parts.empty()) throw ContractViolation("concat_frames: no parts");
    if (parts.size() == 1) return *parts[0];
    const int B = parts[0]->batch();
    const int P = parts[0]->prompt.dim(2);
    std::vector<Tensor> prompts, controls;
    for (const auto* p : parts) {
        if (p->batch() != B) throw ContractViolation("concat_frames: batch sizes differ");
        prompts.push_back(p->prompt);
        controls.push_back(p->control);
    }
    EncodedCond out;
    out.prompt = concat(prompts, 1);
    out.control = concat(controls, 2);
    for (int b = 0; b < B; ++b) {
        for (const auto* p : parts) {
            const size_t n = static_cast<size_t>(p->frames()) * P;
            out.prompt_mask.insert(out.prompt_mask.end(), p->prompt_mask.begin() + b * n, p->prompt_mask.begin() + (b + 1) * n);
        }
    }
    return out;
}

AttentionMask build_causal_mask(int T, int tokens_per_frame, const std::vector<uint8_t>& ref_flags) {
    if (T < 1 || tokens_per_frame < 1) throw ContractViolation("build_causal_mask: T and tokens_per_frame must be >= 1");
    if (!ref_flags.empty() && static_cast<int>(ref_flags.size()) != T) {
        throw ContractViolation("build_causal_mask: " + std::to_string(ref_flags.size()) + " flags for " +
                                std::to_string(T) + " frames");
    }
    const int n = T * tokens_per_frame;
    AttentionMask m(1, n, n, 0);
    for (int r = 0; r < n; ++r) {
        const int fr = r / tokens_per_frame;
        const bool ref = !ref_flags.empty() && ref_flags[fr];
        const int c0 = ref ? fr * tokens_per_frame : 0;
        const int c1 = (fr + 1) * tokens_per_frame;
        for (int c = c0; c < c1; ++c) m.at(0, r, c) = 1;
    }
    return m;
}

// ---------------------------------------------------------------------------

Tensor Model::make_param(const std::string& name, Shape shape, float stddev) {
    std::mt19937_64 rng(config_.init_seed * 0x9e3779b97f4a7c15ULL + (++init_counter_));
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    if (stddev > 0) {
        for (float& x : v) x = stddev * g(rng);
    }
    Tensor t = Tensor::from(std::move(shape), std::move(v), true);
    params_.push_back({name, t});
    return t;
}

Model::Linear Model::make_linear(const std::string& name, int in, int out, bool zero) {
    Linear l;
    l.w = make_param(name + ".w", {in, out}, zero ? 0.0f : 1.0f / std::sqrt(static_cast<float>(in)));
    l.b = make_param(name + ".b", {out}, 0.0f);
    return l;
}

Model::TemporalBlock Model::make_temporal(const std::string& name) {
    const int d = config_.d_model;
    TemporalBlock b;
    // adaLN-zero: modulation starts at zero so each block is an identity map.
    b.mod = make_linear(name + ".mod", d, 6 * d, true);
    b.qkv = make_linear(name + ".qkv", d, 3 * d, false);
    b.out = make_linear(name + ".out", d, d, false);
    b.pk = make_linear(name + ".prompt_k", d, d, false);
    b.pv = make_linear(name + ".prompt_v", d, d, false);
    b.fc1 = make_linear(name + ".fc1", d, config_.mlp_ratio * d, false);
    b.fc2 = make_linear(name + ".fc2", config_.mlp_ratio * d, d, false);
    return b;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const int d = config_.d_model;
    const int S = config_.tokens_per_frame();
    in_proj_ = make_linear("in_proj", config_.latent_channels(), d, false);
    view_emb_ = make_param("view_emb", {config_.views, d}, 0.1f);
    spatial_emb_ = make_param("spatial_emb", {S, d}, 0.1f);
    time1_ = make_linear("time1", d, d, false);
    time2_ = make_linear("time2", d, d, false);
    for (int l = 0; l < config_.backbone_depth; ++l) backbone_.push_back(make_temporal("backbone." + std::to_string(l)));
    for (int l = 0; l < config_.backbone_depth / config_.crossview_period; ++l) {
        CrossViewBlock c;
        c.qkv = make_linear("crossview." + std::to_string(l) + ".qkv", d, 3 * d, false);
        c.out = make_linear("crossview." + std::to_string(l) + ".out", d, d, true);
        crossview_.push_back(c);
    }
    ctrl_in_ = make_linear("control.in", d, d, true);
    for (int l = 0; l < config_.control_depth; ++l) {
        control_.push_back(make_temporal("control." + std::to_string(l)));
        ctrl_proj_.push_back(make_linear("control.proj." + std::to_string(l), d, d, true));
    }
    final_mod_ = make_linear("final.mod", d, 2 * d, true);
    final_out_ = make_linear("final.out", d, config_.latent_channels(), true);

    caption_emb_ = make_param("prompt.caption", {kCaptionVocab, d}, 0.5f);
    category_emb_ = make_param("prompt.category", {kCategories, d}, 0.5f);
    slot_emb_ = make_param("prompt.slot", {config_.prompt_tokens(), d}, 0.1f);
    camera_proj_ = make_linear("prompt.camera", 21, d, false);
    box_proj_ = make_linear("prompt.box", 24, d, false);
    ego_proj_ = make_linear("prompt.ego", 32, d, false);

    const int q = config_.patch / 2;
    canvas1_ = make_linear("canvas.conv1", 4 * 2 * config_.canvas_channels, 16, false);
    canvas2_ = make_linear("canvas.conv2", q * q * 16, d, false);
}

std::vector<Tensor> Model::parameter_tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
}

int64_t Model::parameter_count(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& p : params_) {
        if (p.name.compare(0, prefix.size(), prefix) == 0) n += p.value.numel();
    }
    return n;
}

Tensor& Model::parameter(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw ContractViolation("no parameter named '" + name + "'");
}

void Model::load_parameters(const std::vector<NamedTensor>& values) {
    for (const auto& v : values) {
        for (auto& p : params_) {
            if (p.name != v.name) continue;
            if (p.value.shape() != v.value.shape()) {
                throw ContractViolation("load_parameters: '" + v.name + "' has shape " + shape_str(v.value.shape()) +
                                        ", model expects " + shape_str(p.value.shape()));
            }
            std::copy(v.value.data().begin(), v.value.data().end(), p.value.data().begin());
        }
    }
}

// ---------------------------------------------------------------------------
// Encoders

EncodedCond Model::encode(const std::vector<const FrameControls*>& frames, int batch) const {
    if (batch < 1 || frames.empty() || frames.size() % static_cast<size_t>(batch) != 0) {
        throw ContractViolation("encode: " + std::to_string(frames.size()) + " frames do not split into batch " +
                                std::to_string(batch));
    }
    const int B = batch;
    const int T = static_cast<int>(frames.size()) / B;
    const int N = B * T;
    const int V = config_.views, d = config_.d_model, P = config_.prompt_tokens();
    const int H = config_.height, W = config_.width, Cc = config_.canvas_channels;

    std::vector<int> caption_ids, categories;
    std::vector<float> cam_feat, box_feat, ego_feat;
    EncodedCond out;
    for (const FrameControls* f : frames) {
        const ControlState& cs = f->cs;
        if (cs.cameras.shape() != Shape{V, 3, 7}) {
            throw ContractViolation("encode: cameras " + shape_str(cs.cameras.shape()) + " do not match " +
                                    std::to_string(V) + " views");
        }
        if (cs.boxes.rank() != 2 || cs.boxes.dim(1) != kBoxFields || cs.boxes.dim(0) > kMaxBoxes) {
            throw ContractViolation("encode: boxes " + shape_str(cs.boxes.shape()) + " exceed the " +
                                    std::to_string(kMaxBoxes) + "-box limit or have the wrong width");
        }
        if (cs.box_mask.numel() != cs.boxes.dim(0)) throw ContractViolation("encode: box mask length differs from box count");
        if (f->canvas.shape() != Shape{V, H, W, Cc} || f->prev_canvas.shape() != f->canvas.shape()) {
            throw ContractViolation("encode: canvas " + shape_str(f->canvas.shape()) + " does not match the model grid");
        }
        for (int tok : cs.caption) {
            if (tok < 0 || tok >= kCaptionVocab) throw ContractViolation("encode: caption token out of vocabulary");
            caption_ids.push_back(tok);
        }
        for (int v = 0; v < V; ++v) {
            const float* c = cs.cameras.ptr() + v * 21;
            for (int r = 0; r < 3; ++r) {
                const float norm = r == 0 ? 1.0f / W : (r == 1 ? 1.0f / H : 1.0f);
                for (int k = 0; k < 3; ++k) cam_feat.push_back(c[r * 7 + k] * norm);
            }
            for (int r = 0; r < 3; ++r)
                for (int k = 3; k < 7; ++k) cam_feat.push_back(c[r * 7 + k]);
        }
        for (int i = 0; i < kMaxBoxes; ++i) {
            if (i >= cs.boxes.dim(0)) {
                box_feat.insert(box_feat.end(), 24, 0.0f);
                categories.push_back(0);
                continue;
            }
            const float* bx = cs.boxes.ptr() + i * kBoxFields;
            const float c = std::cos(bx[3]), s = std::sin(bx[3]);
            for (int a : {-1, 1})
                for (int b : {-1, 1})
                    for (int z : {-1, 1}) {
                        const float lx = 0.5f * a * bx[4], ly = 0.5f * b * bx[5];
                        box_feat.push_back((bx[0] + c * lx - s * ly) * kBoxScale);
                        box_feat.push_back((bx[1] + s * lx + c * ly) * kBoxScale);
                        box_feat.push_back((bx[2] + 0.5f * z * bx[6]) * kBoxScale);
                    }
            categories.push_back(std::clamp(static_cast<int>(std::lround(bx[7])), 0, kCategories - 1));
        }
        // absolute pose (translation scaled) and motion since the previous frame
        Eigen::Matrix4f M, Mp;
        for (int r = 0; r < 4; ++r)
            for (int k = 0; k < 4; ++k) {
                M(r, k) = cs.ego.ptr()[r * 4 + k];
                Mp(r, k) = f->prev_ego.ptr()[r * 4 + k];
            }
        const Eigen::Matrix4f delta = Mp.inverse() * M;
        for (int r = 0; r < 4; ++r)
            for (int k = 0; k < 4; ++k) ego_feat.push_back(k == 3 && r < 3 ? M(r, k) * kEgoScale : M(r, k));
        for (int r = 0; r < 4; ++r)
            for (int k = 0; k < 4; ++k) ego_feat.push_back(delta(r, k));

        for (int i = 0; i < kCaptionTokens; ++i) out.prompt_mask.push_back(1);
        for (int v = 0; v < V; ++v) out.prompt_mask.push_back(1);
        for (int i = 0; i < kMaxBoxes; ++i) {
            out.prompt_mask.push_back(i < cs.box_mask.numel() && cs.box_mask.data()[i] > 0.5f ? 1 : 0);
        }
        out.prompt_mask.push_back(1);
    }

    Tensor cap = reshape(embedding(caption_emb_, caption_ids), {N, kCaptionTokens, d});
    Tensor cam = reshape(linear(data_tensor({N * V, 21}, std::move(cam_feat)), camera_proj_.w, camera_proj_.b), {N, V, d});
    Tensor box = add(linear(data_tensor({N * kMaxBoxes, 24}, std::move(box_feat)), box_proj_.w, box_proj_.b),
                     embedding(category_emb_, categories));
    box = reshape(box, {N, kMaxBoxes, d});
    Tensor ego = reshape(linear(data_tensor({N, 32}, std::move(ego_feat)), ego_proj_.w, ego_proj_.b), {N, 1, d});
    out.prompt = reshape(add(concat({cap, cam, box, ego}, 1), slot_emb_), {B, T, P, d});

    // Canvas encoder: a 2x2 stride-2 kernel over the current and previous
    // canvas (causal in time), then a (p/2)x(p/2) stride kernel onto the
    // latent grid.
    const int h2 = H / 2, w2 = W / 2, in1 = 4 * 2 * Cc;
    std::vector<float> patches(static_cast<size_t>(B) * V * T * h2 * w2 * in1);
    size_t o = 0;
    for (int b = 0; b < B; ++b) {
        for (int v = 0; v < V; ++v) {
            for (int t = 0; t < T; ++t) {
                const FrameControls* f = frames[static_cast<size_t>(b) * T + t];
                const float* cur = f->canvas.ptr() + static_cast<int64_t>(v) * H * W * Cc;
                const float* prev = f->prev_canvas.ptr() + static_cast<int64_t>(v) * H * W * Cc;
                for (int i = 0; i < h2; ++i)
                    for (int j = 0; j < w2; ++j)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const int64_t px = ((2 * i + dy) * W + 2 * j + dx) * Cc;
                                for (int c = 0; c < Cc; ++c) patches[o++] = cur[px + c];
                                for (int c = 0; c < Cc; ++c) patches[o++] = prev[px + c];
                            }
            }
        }
    }
    const int q = config_.patch / 2, gh = config_.grid_h(), gw = config_.grid_w();
    Tensor h1 = silu(linear(data_tensor({B * V * T, h2, w2, in1}, std::move(patches)), canvas1_.w, canvas1_.b));
    Tensor grid = reshape(permute(reshape(h1, {B * V * T, gh, q, gw, q, 16}), {0, 1, 3, 2, 4, 5}),
                          {B, V, T, gh * gw, q * q * 16});
    out.control = linear(grid, canvas2_.w, canvas2_.b);
    return out;
}

// ---------------------------------------------------------------------------
// Transformer

struct Model::Context {
    int B, V, T, S, P, Lp;
    AttentionMask mask;
    std::vector<int> token_pos;   // T*S
    std::vector<int> prompt_pos;  // T*P
    Tensor prompt;                // [B, T*P, d]
    const KvState* past;
    KvState* capture;
};

Tensor Model::temporal_block(const TemporalBlock& blk, const Tensor& x, const Tensor& sc, Context& ctx, int layer) const {
    const int d = config_.d_model;
    const int B = ctx.B, V = ctx.V, T = ctx.T, S = ctx.S, P = ctx.P;
    Tensor mod = linear(sc, blk.mod.w, blk.mod.b);  // [B,1,T,1,6d]
    auto part = [&](int i) { return slice(mod, 4, i * d, (i + 1) * d); };

    Tensor h = add(mul(rms_norm(x), add_scalar(part(1), 1.0f)), part(0));
    Tensor qkv = linear(h, blk.qkv.w, blk.qkv.b);
    Tensor q = rope(reshape(slice(qkv, 4, 0, d), {B * V, T * S, d}), ctx.token_pos, config_.n_heads);
    Tensor k = rope(reshape(slice(qkv, 4, d, 2 * d), {B * V, T * S, d}), ctx.token_pos, config_.n_heads);
    Tensor v = reshape(slice(qkv, 4, 2 * d, 3 * d), {B * V, T * S, d});
    if (ctx.capture) {
        ctx.capture->k[static_cast<size_t>(layer)] = k.detach();
        ctx.capture->v[static_cast<size_t>(layer)] = v.detach();
    }

    auto per_view = [&](const Tensor& t) {
        return reshape(broadcast_to(reshape(t, {B, 1, T * P, d}), {B, V, T * P, d}), {B * V, T * P, d});
    };
    Tensor pk = per_view(rope(linear(ctx.prompt, blk.pk.w, blk.pk.b), ctx.prompt_pos, config_.n_heads));
    Tensor pv = per_view(linear(ctx.prompt, blk.pv.w, blk.pv.b));

    std::vector<Tensor> ks, vs;
    if (ctx.past) {
        ks.push_back(ctx.past->k[static_cast<size_t>(layer)]);
        vs.push_back(ctx.past->v[static_cast<size_t>(layer)]);
    }
    ks.insert(ks.end(), {k, pk});
    vs.insert(vs.end(), {v, pv});
    Tensor attn = masked_attention(q, concat(ks, 1), concat(vs, 1), ctx.mask, config_.n_heads);
    attn = linear(reshape(attn, {B, V, T, S, d}), blk.out.w, blk.out.b);
    Tensor y = add(x, mul(part(2), attn));

    Tensor h2 = add(mul(rms_norm(y), add_scalar(part(4), 1.0f)), part(3));
    Tensor m = linear(silu(linear(h2, blk.fc1.w, blk.fc1.b)), blk.fc2.w, blk.fc2.b);
    return add(y, mul(part(5), m));
}

Tensor Model::crossview_block(const CrossViewBlock& blk, const Tensor& x) const {
    const int d = config_.d_model;
    const int B = x.dim(0), V = x.dim(1), T = x.dim(2), S = x.dim(3);
    Tensor seq = reshape(permute(x, {0, 2, 1, 3, 4}), {B * T, V * S, d});
    Tensor qkv = linear(rms_norm(seq), blk.qkv.w, blk.qkv.b);
    const AttentionMask full(1, V * S, V * S, 1);
    Tensor a = masked_attention(slice(qkv, 2, 0, d), slice(qkv, 2, d, 2 * d), slice(qkv, 2, 2 * d, 3 * d), full,
                                config_.n_heads);
    a = linear(a, blk.out.w, blk.out.b);
    Tensor back = permute(reshape(a, {B, T, V, S, d}), {0, 2, 1, 3, 4});
    return add(x, back);
}

Tensor Model::forward(const ForwardArgs& args) const {
    const int d = config_.d_model;
    const Shape& ls = args.latents.shape();
    if (ls.size() != 5 || ls[1] != config_.views || ls[3] != config_.tokens_per_frame() || ls[4] != config_.latent_channels()) {
        throw ContractViolation("forward: latents " + shape_str(ls) + " do not match [B, " + std::to_string(config_.views) +
                                ", T, " + std::to_string(config_.tokens_per_frame()) + ", " +
                                std::to_string(config_.latent_channels()) + "]");
    }
    Context ctx;
    ctx.B = ls[0];
    ctx.V = ls[1];
    ctx.T = ls[2];
    ctx.S = ls[3];
    ctx.P = config_.prompt_tokens();
    const int B = ctx.B, V = ctx.V, T = ctx.T, S = ctx.S, P = ctx.P;
    if (args.cond == nullptr || args.cond->batch() != B || args.cond->frames() != T) {
        throw ContractViolation("forward: conditioning must cover " + std::to_string(B) + "x" + std::to_string(T) + " frames");
    }
    if (static_cast<int>(args.t_diff.size()) != B * T || static_cast<int>(args.is_ref.size()) != T ||
        static_cast<int>(args.frame_index.size()) != T) {
        throw ContractViolation("forward: t_diff, is_ref and frame_index must have B*T, T and T entries");
    }
    if (!args.drop_cond.empty() && static_cast<int>(args.drop_cond.size()) != B * T) {
        throw ContractViolation("forward: drop_cond must have B*T entries");
    }
    for (int fi : args.frame_index) {
        if (fi < 0 || fi >= config_.max_frames) throw ContractViolation("forward: frame index " + std::to_string(fi) + " out of range");
    }
    ctx.past = args.past;
    ctx.capture = args.capture;
    ctx.Lp = 0;
    if (args.past) {
        if (static_cast<int>(args.past->k.size()) != config_.temporal_layers() || args.past->k[0].dim(0) != B * V) {
            throw ContractViolation("forward: cached keys do not match the model layers or batch");
        }
        ctx.Lp = args.past->k[0].dim(1);
    }
    if (args.capture) {
        args.capture->k.assign(static_cast<size_t>(config_.temporal_layers()), Tensor());
        args.capture->v.assign(static_cast<size_t>(config_.temporal_layers()), Tensor());
    }
    for (int t = 0; t < T; ++t) {
        ctx.token_pos.insert(ctx.token_pos.end(), S, args.frame_index[t]);
        ctx.prompt_pos.insert(ctx.prompt_pos.end(), P, args.frame_index[t]);
    }
    ctx.prompt = reshape(args.cond->prompt, {B, T * P, d});

    // Attention pattern per (sample, view): [past | frames | prompts].
    const int rows = T * S, cols = ctx.Lp + T * S + T * P;
    ctx.mask = AttentionMask(B * V, rows, cols, 0);
    for (int b = 0; b < B; ++b) {
        uint8_t* base = ctx.mask.allowed.data() + static_cast<size_t>(b) * V * rows * cols;
        for (int r = 0; r < rows; ++r) {
            const int fr = r / S;
            const bool ref = args.is_ref[fr] != 0;
            uint8_t* row = base + static_cast<size_t>(r) * cols;
            if (!ref) std::fill(row, row + ctx.Lp, uint8_t{1});
            const int c0 = ref ? fr * S : 0;
            std::fill(row + ctx.Lp + c0, row + ctx.Lp + (fr + 1) * S, uint8_t{1});
            const bool dropped = !args.drop_cond.empty() && args.drop_cond[static_cast<size_t>(b) * T + fr];
            if (!dropped) {
                const uint8_t* pm = args.cond->prompt_mask.data() + (static_cast<size_t>(b) * T + fr) * P;
                std::copy(pm, pm + P, row + ctx.Lp + T * S + fr * P);
            }
        }
        for (int v = 1; v < V; ++v) std::copy(base, base + static_cast<size_t>(rows) * cols, base + static_cast<size_t>(v) * rows * cols);
    }

    // Diffusion-time embedding per (sample, frame).
    std::vector<float> sinus(static_cast<size_t>(B) * T * d);
    const int half = d / 2;
    for (int i = 0; i < B * T; ++i) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double a = 1000.0 * args.t_diff[static_cast<size_t>(i)] * freq;
            sinus[static_cast<size_t>(i) * d + k] = static_cast<float>(std::cos(a));
            sinus[static_cast<size_t>(i) * d + half + k] = static_cast<float>(std::sin(a));
        }
    }
    Tensor temb = linear(silu(linear(data_tensor({B, 1, T, 1, d}, std::move(sinus)), time1_.w, time1_.b)), time2_.w, time2_.b);
    Tensor sc = silu(temb);

    Tensor x = linear(args.latents, in_proj_.w, in_proj_.b);
    if (config_.view_embedding) x = add(x, reshape(view_emb_, {1, V, 1, 1, d}));
    x = add(add(x, spatial_emb_), temb);

    const bool control = args.use_control && config_.control_depth > 0;
    Tensor c;
    if (control) {
        Tensor u = args.cond->control;
        if (!args.drop_cond.empty()) {
            std::vector<float> keep(static_cast<size_t>(B) * T);
            for (size_t i = 0; i < keep.size(); ++i) keep[i] = args.drop_cond[i] ? 0.0f : 1.0f;
            u = mul(u, data_tensor({B, 1, T, 1, 1}, std::move(keep)));
        }
        c = add(x, linear(u, ctrl_in_.w, ctrl_in_.b));
    }

    int cross = 0;
    for (int l = 0; l < config_.backbone_depth; ++l) {
        Tensor next = temporal_block(backbone_[static_cast<size_t>(l)], x, sc, ctx, l);
        if (l < config_.control_depth) {
            if (control) {
                c = temporal_block(control_[static_cast<size_t>(l)], c, sc, ctx, config_.backbone_depth + l);
                next = add(next, linear(c, ctrl_proj_[static_cast<size_t>(l)].w, ctrl_proj_[static_cast<size_t>(l)].b));
            } else if (args.capture) {
                // keep the capture layout complete for callers that cache both paths
                args.capture->k[static_cast<size_t>(config_.backbone_depth + l)] = Tensor::zeros({B * V, T * S, d});
                args.capture->v[static_cast<size_t>(config_.backbone_depth + l)] = Tensor::zeros({B * V, T * S, d});
            }
        }
        x = next;
        if ((l + 1) % config_.crossview_period == 0 && cross < static_cast<int>(crossview_.size())) {
            x = crossview_block(crossview_[static_cast<size_t>(cross++)], x);
        }
    }

    Tensor fm = linear(sc, final_mod_.w, final_mod_.b);
    Tensor h = add(mul(rms_norm(x), add_scalar(slice(fm, 4, d, 2 * d), 1.0f)), slice(fm, 4, 0, d));
    return linear(h, final_out_.w, final_out_.b);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& path, const Model& model, const Checkpoint& extra) {
    KeyValues kv;
    model.config().write(kv);
    for (const auto& [k, v] : extra.meta.values()) kv.set("meta." + k, v);
    TensorFile f;
    f.version = kCheckpointVersion;
    f.header = kv.to_text();
    f.tensors = model.parameters();
    f.tensors.insert(f.tensors.end(), extra.extra.begin(), extra.extra.end());
    write_tensor_file(path, kCheckpointMagic, f);
}

Model load_checkpoint(const std::string& path, Checkpoint* extra) {
    TensorFile f = read_tensor_file(path, kCheckpointMagic, kCheckpointVersion);
    KeyValues kv;
    try {
        kv = KeyValues::parse(f.header, path);
    } catch (const ContractViolation& e) {
        throw FileError(FileError::Kind::Format, path, e.what());
    }
    Model model(ModelConfig::read(kv));
    for (const auto& p : model.parameters()) {
        const Tensor* t = f.find(p.name);
        if (t == nullptr) throw FileError(FileError::Kind::Format, path, "missing parameter '" + p.name + "'");
        if (t->shape() != p.value.shape()) {
            throw FileError(FileError::Kind::ShapeMismatch, path,
                            "parameter '" + p.name + "' has shape " + shape_str(t->shape()));
        }
    }
    model.load_parameters(f.tensors);
    if (extra) {
        extra->meta = KeyValues();
        for (const auto& [k, v] : kv.values()) {
            if (k.rfind("meta.", 0) == 0) extra->meta.set(k.substr(5), v);
        }
        extra->extra.clear();
        for (auto& t : f.tensors) {
            bool is_param = false;
            for (const auto& p : model.parameters()) is_param |= p.name == t.name;
            if (!is_param) extra->extra.push_back(t);
        }
    }
    return model;
}

}  // namespace arsim
