#include "arsim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

Tensor normal_like(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (float& x : v) x = g(rng);
    return Tensor::from(shape, v);
}

// Copies frame t of a [T, V, S, C] scene latent into [V, S, C].
Tensor frame_latent(const Tensor& lat, int t) {
    return reshape(slice(lat, 0, t, t + 1), {lat.dim(1), lat.dim(2), lat.dim(3)});
}

// Stacks [V, S, C] frames ordered (b, t) into [B, V, T, S, C].
Tensor stack_frames(const std::vector<Tensor>& frames, int B, int T) {
    const int V = frames[0].dim(0), S = frames[0].dim(1), C = frames[0].dim(2);
    const int64_t n = static_cast<int64_t>(S) * C;
    std::vector<float> out(static_cast<size_t>(B) * V * T * n);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const Tensor& f = frames[static_cast<size_t>(b) * T + t];
            for (int v = 0; v < V; ++v) {
                std::copy_n(f.ptr() + v * n, n, out.data() + ((static_cast<int64_t>(b) * V + v) * T + t) * n);
            }
        }
    return Tensor::from({B, V, T, S, C}, out);
}

std::string join(const std::vector<double>& v) {
    std::ostringstream s;
    for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

}  // namespace

FlowSample make_flow_sample(const Tensor& x, const Tensor& eps, float t) {
    if (x.shape() != eps.shape()) {
        throw ContractViolation("flow sample: x " + shape_str(x.shape()) + " vs noise " + shape_str(eps.shape()));
    }
    if (!(t >= 0.0f && t <= 1.0f)) throw ContractViolation("flow sample: t must be in [0, 1]");
    FlowSample s;
    s.x = x;
    s.eps = eps;
    s.t = t;
    s.z = add(scale(x, 1.0f - t), scale(eps, t));
    s.u_star = sub(eps, x);
    return s;
}

FlowSample sample_flow(const Tensor& x, std::mt19937_64& rng) {
    const Tensor eps = normal_like(x.shape(), rng);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    return make_flow_sample(x, eps, u(rng));
}

Tensor fm_loss(const Tensor& pred, const Tensor& target, const std::vector<uint8_t>& frame_mask) {
    if (pred.shape() != target.shape() || pred.rank() != 5) {
        throw ContractViolation("fm_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    }
    const int B = pred.dim(0), T = pred.dim(2);
    if (static_cast<int>(frame_mask.size()) != B * T) {
        throw ContractViolation("fm_loss: mask has " + std::to_string(frame_mask.size()) + " entries for " +
                                std::to_string(B * T) + " frames");
    }
    int selected = 0;
    std::vector<float> m(frame_mask.size());
    for (size_t i = 0; i < m.size(); ++i) {
        m[i] = frame_mask[i] ? 1.0f : 0.0f;
        selected += frame_mask[i] ? 1 : 0;
    }
    if (selected == 0) throw ContractViolation("fm_loss: mask selects no frames");
    const Tensor d = sub(pred, target);
    const Tensor masked = mul(mul(d, d), Tensor::from({B, 1, T, 1, 1}, m));
    const double count = static_cast<double>(selected) * pred.dim(1) * pred.dim(3) * pred.dim(4);
    return scale(sum(masked), static_cast<float>(1.0 / count));
}

// ---------------------------------------------------------------------------

HorizonDistribution::HorizonDistribution(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) throw ContractViolation("horizon distribution needs at least one weight");
    double total = 0.0;
    for (double w : weights_) {
        if (!(w >= 0.0)) throw ContractViolation("horizon weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw ContractViolation("horizon weights sum to zero");
    for (double& w : weights_) w /= total;
}

HorizonDistribution HorizonDistribution::from_head(const std::vector<double>& head, int clip_len) {
    if (clip_len < 1) throw ContractViolation("horizon: clip length must be >= 1");
    std::vector<double> w(static_cast<size_t>(clip_len), 0.0);
    double used = 0.0;
    for (size_t i = 0; i < head.size() && i < w.size(); ++i) {
        w[i] = head[i];
        used += head[i];
    }
    if (used > 1.0 + 1e-9) throw ContractViolation("horizon head weights exceed 1");
    const int rest = clip_len - static_cast<int>(head.size());
    if (rest > 0) {
        for (int i = static_cast<int>(head.size()); i < clip_len; ++i) w[static_cast<size_t>(i)] = (1.0 - used) / rest;
    }
    return HorizonDistribution(std::move(w));
}

HorizonDistribution HorizonDistribution::standard(int clip_len) {
    return from_head({0.05, 0.30, 0.20, 0.15}, clip_len);
}

int HorizonDistribution::sample(std::mt19937_64& rng) const {
    std::discrete_distribution<int> d(weights_.begin(), weights_.end());
    return d(rng);
}

Tensor blend(const Tensor& x_hat, const Tensor& x_gt, float alpha) {
    if (x_hat.shape() != x_gt.shape()) {
        throw ContractViolation("blend: generated " + shape_str(x_hat.shape()) + " vs ground truth " + shape_str(x_gt.shape()));
    }
    if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ContractViolation("blend: alpha must be in [0, 1]");
    if (alpha == 0.0f) return x_gt.clone();
    if (alpha == 1.0f) return x_hat.clone();
    return add(scale(x_hat, alpha), scale(x_gt, 1.0f - alpha));
}

double BlendState::alpha() const { return std::min(1.0, rate * static_cast<double>(updates)); }

// ---------------------------------------------------------------------------

const std::vector<std::string>& TrainConfig::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k{"stage",      "lr",        "weight_decay",   "batch_size", "steps",
                                   "alpha_rate", "horizon_weights", "rollout_steps", "checkpoint_every", "seed",
                                   "clip_len",   "cond_dropout", "grad_clip",    "bf_max_rollout", "bf_window"};
        const auto& m = ModelConfig::known_keys();
        k.insert(k.end(), m.begin(), m.end());
        return k;
    }();
    return keys;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw ContractViolation("train config: " + what); };
    if (stage != "arhc" && stage != "blendforce") fail("stage must be arhc or blendforce, got '" + stage + "'");
    if (!(lr > 0.0f)) fail("lr must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (steps < 0) fail("steps must be >= 0");
    if (!(alpha_rate >= 0.0)) fail("alpha_rate must be >= 0");
    if (rollout_steps < 1) fail("rollout_steps must be >= 1");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    if (clip_len < 2) fail("clip_len must be >= 2");
    if (!(cond_dropout >= 0.0f && cond_dropout < 1.0f)) fail("cond_dropout must be in [0, 1)");
    if (!(grad_clip > 0.0f)) fail("grad_clip must be positive");
    if (bf_max_rollout < 2) fail("bf_max_rollout must be >= 2");
    if (bf_window < 1) fail("bf_window must be >= 1");
}

TrainConfig TrainConfig::from_keys(const KeyValues& kv) {
    kv.require_known(known_keys());
    TrainConfig c;
    c.stage = kv.get_string("stage", c.stage);
    c.lr = static_cast<float>(kv.get_double("lr", c.lr));
    c.weight_decay = static_cast<float>(kv.get_double("weight_decay", c.weight_decay));
    c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
    c.steps = static_cast<int>(kv.get_int("steps", c.steps));
    c.alpha_rate = kv.get_double("alpha_rate", c.alpha_rate);
    c.horizon_head = kv.get_doubles("horizon_weights", c.horizon_head);
    c.rollout_steps = static_cast<int>(kv.get_int("rollout_steps", c.rollout_steps));
    c.checkpoint_every = static_cast<int>(kv.get_int("checkpoint_every", c.checkpoint_every));
    c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(c.seed)));
    c.clip_len = static_cast<int>(kv.get_int("clip_len", c.clip_len));
    c.cond_dropout = static_cast<float>(kv.get_double("cond_dropout", c.cond_dropout));
    c.grad_clip = static_cast<float>(kv.get_double("grad_clip", c.grad_clip));
    c.bf_max_rollout = static_cast<int>(kv.get_int("bf_max_rollout", c.bf_max_rollout));
    c.bf_window = static_cast<int>(kv.get_int("bf_window", c.bf_window));
    c.validate();
    return c;
}

TrainData prepare_data(std::vector<SceneRecord> scenes, const PatchCodec& codec) {
    if (scenes.empty()) throw ContractViolation("training needs at least one scene");
    TrainData d;
    NoGradScope ng;
    for (const SceneRecord& s : scenes) {
        d.latents.push_back(scene_latents(codec, s));
        std::vector<FrameControls> fc;
        for (int t = 0; t < s.n_frames(); ++t) fc.push_back(frame_controls(s, t));
        d.controls.push_back(std::move(fc));
    }
    d.scenes = std::move(scenes);
    return d;
}

// ---------------------------------------------------------------------------

namespace {

int shortest_scene(const TrainData& d) {
    int n = d.scenes.front().n_frames();
    for (const auto& s : d.scenes) n = std::min(n, s.n_frames());
    return n;
}

}  // namespace

Trainer::Trainer(Model& model, const TrainConfig& config, std::shared_ptr<const TrainData> data)
    : model_(model),
      config_(config),
      data_(std::move(data)),
      params_(model.parameter_tensors()),
      opt_(params_, AdamWConfig{config.lr, 0.9f, 0.999f, 1e-8f, config.weight_decay}),
      horizon_(config.horizon_head.empty()
                   ? HorizonDistribution::standard(std::min(config.clip_len, shortest_scene(*data_)))
                   : HorizonDistribution::from_head(config.horizon_head, std::min(config.clip_len, shortest_scene(*data_)))),
      rng_(config.seed) {
    config_.validate();
    blend_.rate = config_.alpha_rate;
    if (data_->latents.size() != data_->scenes.size()) throw ContractViolation("training data is not prepared");
    if (shortest_scene(*data_) < 2) throw ContractViolation("training scenes need at least 2 frames");
}

double Trainer::update(const Tensor& loss) {
    const double value = loss.item();
    clip_grad_norm(params_, config_.grad_clip);
    opt_.step();
    opt_.zero_grad();
    return value;
}

double Trainer::arhc_step(int l) {
    const int L = horizon_.clip_len();
    if (l < 0) l = horizon_.sample(rng_);
    if (l >= L) throw ContractViolation("arhc_step: horizon " + std::to_string(l) + " leaves no target in a clip of " + std::to_string(L));
    last_l_ = l;
    const int B = config_.batch_size;
    std::uniform_int_distribution<size_t> pick_scene(0, data_->scenes.size() - 1);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);

    std::vector<Tensor> x_frames, eps_frames;
    std::vector<const FrameControls*> ctrl;
    std::vector<float> t_diff;
    std::vector<uint8_t> drop, mask;
    std::vector<Tensor> z_frames, u_frames;
    for (int b = 0; b < B; ++b) {
        const size_t s = pick_scene(rng_);
        std::uniform_int_distribution<int> pick_start(0, data_->scenes[s].n_frames() - L);
        const int start = pick_start(rng_);
        for (int t = 0; t < L; ++t) {
            const Tensor x = frame_latent(data_->latents[s], start + t);
            ctrl.push_back(&data_->controls[s][static_cast<size_t>(start + t)]);
            if (t < l) {
                z_frames.push_back(x);
                u_frames.push_back(Tensor::zeros(x.shape()));
                t_diff.push_back(0.0f);
                drop.push_back(0);
                mask.push_back(0);
            } else {
                const FlowSample f = sample_flow(x, rng_);
                z_frames.push_back(f.z);
                u_frames.push_back(f.u_star);
                t_diff.push_back(f.t);
                drop.push_back(unit(rng_) < config_.cond_dropout ? 1 : 0);
                mask.push_back(1);
            }
        }
    }
    Tape tape;
    double value;
    {
        TapeScope scope(tape);
        const EncodedCond cond = model_.encode(ctrl, B);
        ForwardArgs a;
        a.latents = stack_frames(z_frames, B, L);
        a.t_diff = t_diff;
        for (int t = 0; t < L; ++t) {
            a.is_ref.push_back(t < l ? 1 : 0);
            // Attention only sees frame offsets, so the clip is indexed from its start.
            a.frame_index.push_back(t);
        }
        a.cond = &cond;
        a.drop_cond = drop;
        const Tensor loss = fm_loss(model_.forward(a), stack_frames(u_frames, B, L), mask);
        tape.backward(loss);
        value = update(loss);
    }
    return value;
}

double Trainer::bf_step() {
    const int B = config_.batch_size;
    const int shortest = shortest_scene(*data_);
    if (shortest < 3) throw ContractViolation("bf_step: scenes need at least 3 frames");
    // R frames of history precede the target, so a scene must hold R + 1 frames.
    const int r_max = std::min(config_.bf_max_rollout, shortest - 1);
    std::uniform_int_distribution<int> pick_r(2, r_max);
    const int R = pick_r(rng_);
    const int W = std::min(config_.bf_window, R);
    const float alpha = static_cast<float>(blend_.alpha());
    std::uniform_int_distribution<size_t> pick_scene(0, data_->scenes.size() - 1);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);

    std::vector<Tensor> z_frames, u_frames;
    std::vector<const FrameControls*> ctrl;
    std::vector<float> t_diff;
    std::vector<uint8_t> drop, mask;
    trace_ = BlendTrace();
    trace_.rollout_len = R;
    trace_.window = W;
    trace_.alpha = alpha;
    trace_.generated = alpha > 0.0f;
    for (int b = 0; b < B; ++b) {
        const size_t s = pick_scene(rng_);
        const SceneRecord& scene = data_->scenes[s];
        std::uniform_int_distribution<int> pick_start(0, scene.n_frames() - R - 1);
        const int s0 = pick_start(rng_);
        const auto& controls = data_->controls[s];
        const Tensor& lat = data_->latents[s];

        // History frames s0 .. s0+R-1: ground truth at s0, then self-generated
        // frames blended toward ground truth. Generation is not differentiated.
        std::vector<Tensor> history;
        history.push_back(frame_latent(lat, s0));
        if (alpha > 0.0f) {
            SamplerConfig sc;
            sc.steps = config_.rollout_steps;
            sc.ref_window = config_.bf_window;
            sc.seed = rng_();
            Session session(model_, sc);
            session.push_reference(history[0], controls[static_cast<size_t>(s0)]);
            for (int j = 1; j < R; ++j) {
                const Tensor gen = session.sample_frame(controls[static_cast<size_t>(s0 + j)]);
                NoGradScope ng;
                history.push_back(blend(gen, frame_latent(lat, s0 + j), alpha));
            }
            if (b == 0) trace_.init_latent = session.frames().front().clone();
        } else {
            for (int j = 1; j < R; ++j) history.push_back(frame_latent(lat, s0 + j));
            if (b == 0) trace_.init_latent = history[0].clone();
        }
        if (b == 0) trace_.init_truth = frame_latent(lat, s0);
        for (int j = R - W; j < R; ++j) {
            z_frames.push_back(history[static_cast<size_t>(j)].detach());
            u_frames.push_back(Tensor::zeros(history[0].shape()));
            ctrl.push_back(&controls[static_cast<size_t>(s0 + j)]);
            t_diff.push_back(0.0f);
            drop.push_back(0);
            mask.push_back(0);
        }
        const FlowSample f = sample_flow(frame_latent(lat, s0 + R), rng_);
        z_frames.push_back(f.z);
        u_frames.push_back(f.u_star);
        ctrl.push_back(&controls[static_cast<size_t>(s0 + R)]);
        t_diff.push_back(f.t);
        drop.push_back(unit(rng_) < config_.cond_dropout ? 1 : 0);
        mask.push_back(1);
    }
    const int T = W + 1;
    Tape tape;
    double value;
    {
        TapeScope scope(tape);
        const EncodedCond cond = model_.encode(ctrl, B);
        ForwardArgs a;
        a.latents = stack_frames(z_frames, B, T);
        a.t_diff = t_diff;
        for (int t = 0; t < T; ++t) {
            a.is_ref.push_back(t < W ? 1 : 0);
            a.frame_index.push_back(t);
        }
        a.cond = &cond;
        a.drop_cond = drop;
        const Tensor loss = fm_loss(model_.forward(a), stack_frames(u_frames, B, T), mask);
        tape.backward(loss);
        value = update(loss);
    }
    blend_.update();
    return value;
}

Checkpoint Trainer::state(const std::string& stage, int64_t step) const {
    Checkpoint ck;
    ck.meta.set("stage", stage);
    ck.meta.set("step", std::to_string(step));
    ck.meta.set("alpha", std::to_string(blend_.alpha()));
    ck.meta.set("alpha_rate", std::to_string(blend_.rate));
    ck.meta.set("bf_steps", std::to_string(blend_.updates));
    ck.meta.set("adam_step", std::to_string(opt_.step_count()));
    ck.meta.set("lr", std::to_string(config_.lr));
    ck.meta.set("horizon_weights", join(horizon_.weights()));
    const auto& params = model_.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        const Shape& shape = params[i].value.shape();
        ck.extra.push_back({"adam.m." + params[i].name, Tensor::from(shape, opt_.first_moments()[i])});
        ck.extra.push_back({"adam.v." + params[i].name, Tensor::from(shape, opt_.second_moments()[i])});
    }
    return ck;
}

void Trainer::restore(const Checkpoint& ck) {
    blend_.updates = ck.meta.get_int("bf_steps", 0);
    opt_.set_step_count(ck.meta.get_int("adam_step", 0));
    const auto& params = model_.parameters();
    for (const auto& e : ck.extra) {
        for (size_t i = 0; i < params.size(); ++i) {
            const bool m = e.name == "adam.m." + params[i].name, v = e.name == "adam.v." + params[i].name;
            if (!m && !v) continue;
            if (e.value.numel() != params[i].value.numel()) {
                throw ContractViolation("optimizer state '" + e.name + "' does not match its parameter");
            }
            auto& dst = m ? opt_.first_moments()[i] : opt_.second_moments()[i];
            dst.assign(e.value.data().begin(), e.value.data().end());
        }
    }
}

// ---------------------------------------------------------------------------

std::vector<LossRow> train(Model& model, const TrainConfig& config, std::shared_ptr<const TrainData> data,
                           const std::string& out_checkpoint, const Checkpoint* init,
                           const std::function<void(const LossRow&)>& on_step) {
    config.validate();
    const bool blendforce = config.stage == "blendforce";
    if (blendforce) {
        if (init == nullptr || !init->meta.has("stage")) {
            throw ContractViolation("blendforce stage needs a checkpoint from the arhc stage");
        }
    }
    Trainer trainer(model, config, std::move(data));
    if (init) trainer.restore(*init);
    int64_t step0 = 0;
    if (init && init->meta.get_string("stage", "") == config.stage) step0 = init->meta.get_int("step", 0);

    std::vector<LossRow> rows;
    for (int i = 0; i < config.steps; ++i) {
        LossRow row;
        row.step = step0 + i + 1;
        // blend-forcing alternates with plain ARHC steps
        if (blendforce && i % 2 == 0) {
            row.loss = trainer.bf_step();
            row.stage = "bf";
        } else {
            row.loss = trainer.arhc_step();
            row.stage = "arhc";
        }
        row.alpha = trainer.blend_state().alpha();
        rows.push_back(row);
        if (on_step) on_step(row);
        if (!out_checkpoint.empty() && config.checkpoint_every > 0 && row.step % config.checkpoint_every == 0) {
            save_checkpoint(out_checkpoint, model, trainer.state(config.stage, row.step));
        }
    }
    if (!out_checkpoint.empty()) save_checkpoint(out_checkpoint, model, trainer.state(config.stage, step0 + config.steps));
    return rows;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
    std::ofstream f(path);
    if (!f) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    f << "step,stage,loss,alpha\n";
    for (const auto& r : rows) f << r.step << ',' << r.stage << ',' << r.loss << ',' << r.alpha << '\n';
    if (!f) throw FileError(FileError::Kind::Io, path, "write failed");
}

}  // namespace arsim
