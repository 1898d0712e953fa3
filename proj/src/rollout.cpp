#include "arsim/rollout.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <random>
#include <sstream>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

bool parse_flag(const std::string& v, const std::string& key) {
    if (v == "on" || v == "1" || v == "true") return true;
    if (v == "off" || v == "0" || v == "false") return false;
    throw ContractViolation("bench grid: " + key + " must be on or off, got '" + v + "'");
}

}  // namespace

void SamplerConfig::validate() const {
    if (steps < 1) throw ContractViolation("sampler: steps must be >= 1, got " + std::to_string(steps));
    if (!(cfg_scale >= 1.0f)) throw ContractViolation("sampler: cfg_scale must be >= 1");
    if (ref_window < 1) throw ContractViolation("sampler: ref_window must be >= 1, got " + std::to_string(ref_window));
}

// ---------------------------------------------------------------------------

KvCache::KvCache(int window) : window_(window) {
    if (window < 1) throw ContractViolation("KvCache: window must be >= 1");
}

void KvCache::append(const KvState& frame, int frame_index) {
    frames_.push_back(frame);
    indices_.push_back(frame_index);
    while (static_cast<int>(frames_.size()) > window_) {
        frames_.pop_front();
        indices_.pop_front();
    }
    dirty_ = true;
}

void KvCache::clear() {
    frames_.clear();
    indices_.clear();
    joined_ = KvState();
    dirty_ = true;
}

const KvState& KvCache::state() const {
    if (frames_.empty()) throw ContractViolation("KvCache: state of an empty cache");
    if (dirty_) {
        const size_t layers = frames_.front().k.size();
        joined_.k.assign(layers, Tensor());
        joined_.v.assign(layers, Tensor());
        for (size_t l = 0; l < layers; ++l) {
            std::vector<Tensor> ks, vs;
            for (const auto& f : frames_) {
                ks.push_back(f.k[l]);
                vs.push_back(f.v[l]);
            }
            joined_.k[l] = ks.size() == 1 ? ks[0] : concat(ks, 1);
            joined_.v[l] = vs.size() == 1 ? vs[0] : concat(vs, 1);
        }
        dirty_ = false;
    }
    return joined_;
}

const EncodedCond& ConditionCache::get(const Model& model, const FrameControls& controls, int frame_index,
                                       RolloutCounters& counters) {
    if (frame_index < index_) {
        throw ContractViolation("condition cache holds frame " + std::to_string(index_) + ", queried for stale frame " +
                                std::to_string(frame_index));
    }
    if (!enabled_ || frame_index != index_) {
        value_ = model.encode({&controls}, 1);
        index_ = frame_index;
        ++counters.encoder_calls;
    }
    return value_;
}

Tensor cfg_combine(const Tensor& u_cond, const Tensor& u_uncond, float s) {
    if (s == 1.0f) return u_cond;
    return add(u_uncond, scale(sub(u_cond, u_uncond), s));
}

Tensor scene_latents(const PatchCodec& codec, const SceneRecord& scene) {
    const Tensor z = codec.encode_image(scene.frames);  // [T, V, h, w, C]
    return reshape(z, {z.dim(0), z.dim(1), z.dim(2) * z.dim(3), z.dim(4)});
}

// ---------------------------------------------------------------------------

Session::Session(const Model& model, const SamplerConfig& config, int first_index)
    : model_(model), config_(config), next_index_(first_index), kv_(std::max(1, config.ref_window)),
      cond_cache_(config.cond_cache) {
    config_.validate();
    if (first_index < 0) throw ContractViolation("Session: first_index must be >= 0");
}

void Session::push_reference(const Tensor& latent, const FrameControls& controls) {
    const ModelConfig& mc = model_.config();
    if (latent.shape() != Shape{mc.views, mc.tokens_per_frame(), mc.latent_channels()}) {
        throw ContractViolation("push_reference: latent " + shape_str(latent.shape()) + " does not match the model");
    }
    NoGradScope ng;
    const EncodedCond cond = cond_cache_.get(model_, controls, next_index_, counters_);
    append(latent, cond);
}

void Session::append(const Tensor& latent, const EncodedCond& cond) {
    const ModelConfig& mc = model_.config();
    if (config_.kv_cache) {
        AttentionStats stats;
        AttentionStatsScope scope(stats);
        ForwardArgs a;
        a.latents = reshape(latent, {1, mc.views, 1, mc.tokens_per_frame(), mc.latent_channels()});
        a.t_diff = {0.0f};
        a.is_ref = {1};
        a.frame_index = {next_index_};
        a.cond = &cond;
        KvState captured;
        a.capture = &captured;
        model_.forward(a);
        kv_.append(captured, next_index_);
        ++counters_.cache_fills;
        counters_.attention_flops += stats.flops;
    }
    window_.push_back({latent, cond, next_index_});
    while (static_cast<int>(window_.size()) > config_.ref_window) window_.pop_front();
    frames_.push_back(latent);
    ++next_index_;
}

Tensor Session::velocity(const Tensor& z, float t, const EncodedCond& cond, bool drop) {
    const ModelConfig& mc = model_.config();
    const int V = mc.views, S = mc.tokens_per_frame(), C = mc.latent_channels();
    AttentionStats stats;
    AttentionStatsScope scope(stats);
    ++counters_.model_evals;
    Tensor out;
    if (config_.kv_cache) {
        ForwardArgs a;
        a.latents = reshape(z, {1, V, 1, S, C});
        a.t_diff = {t};
        a.is_ref = {0};
        a.frame_index = {next_index_};
        a.cond = &cond;
        a.drop_cond = {static_cast<uint8_t>(drop ? 1 : 0)};
        if (kv_.size() > 0) a.past = &kv_.state();
        out = model_.forward(a);
    } else {
        std::vector<Tensor> lat;
        std::vector<const EncodedCond*> conds;
        ForwardArgs a;
        for (const Ref& r : window_) {
            lat.push_back(reshape(r.latent, {1, V, 1, S, C}));
            conds.push_back(&r.cond);
            a.t_diff.push_back(0.0f);
            a.is_ref.push_back(1);
            a.frame_index.push_back(r.index);
            a.drop_cond.push_back(0);
        }
        lat.push_back(reshape(z, {1, V, 1, S, C}));
        conds.push_back(&cond);
        a.t_diff.push_back(t);
        a.is_ref.push_back(0);
        a.frame_index.push_back(next_index_);
        a.drop_cond.push_back(drop ? 1 : 0);
        const EncodedCond joined = concat_frames(conds);
        a.latents = lat.size() == 1 ? lat[0] : concat(lat, 2);
        a.cond = &joined;
        const int T = static_cast<int>(lat.size());
        out = slice(model_.forward(a), 2, T - 1, T);
    }
    counters_.attention_flops += stats.flops;
    return reshape(out, {V, S, C});
}

Tensor Session::sample_frame(const FrameControls& controls) {
    const ModelConfig& mc = model_.config();
    if (controls.cs.cameras.rank() != 3 || controls.cs.cameras.dim(0) != mc.views) {
        throw ContractViolation("sample_frame: controls carry " +
                                std::to_string(controls.cs.cameras.rank() > 0 ? controls.cs.cameras.dim(0) : 0) +
                                " views, model expects " + std::to_string(mc.views));
    }
    NoGradScope ng;
    const int idx = next_index_;
    // Noise depends only on (seed, frame index) so cache settings cannot
    // change the trajectory.
    std::seed_seq seq{static_cast<uint32_t>(config_.seed), static_cast<uint32_t>(config_.seed >> 32),
                      static_cast<uint32_t>(idx), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> noise(static_cast<size_t>(mc.views) * mc.tokens_per_frame() * mc.latent_channels());
    for (float& x : noise) x = g(rng);
    Tensor z = Tensor::from({mc.views, mc.tokens_per_frame(), mc.latent_channels()}, noise);

    const float dt = 1.0f / static_cast<float>(config_.steps);
    EncodedCond cond;
    for (int k = 0; k < config_.steps; ++k) {
        const float t = 1.0f - static_cast<float>(k) * dt;
        cond = cond_cache_.get(model_, controls, idx, counters_);
        Tensor u = velocity(z, t, cond, false);
        if (config_.cfg_scale != 1.0f) u = cfg_combine(u, velocity(z, t, cond, true), config_.cfg_scale);
        z = sub(z, scale(u, dt));
    }
    append(z, cond);
    return z;
}

// ---------------------------------------------------------------------------

RolloutResult rollout(const Model& model, const SamplerConfig& config, const std::vector<FrameControls>& controls, int n_frames,
                      const std::optional<Tensor>& init_latent, const PatchCodec* codec) {
    if (n_frames < 0) throw ContractViolation("rollout: n_frames must be >= 0");
    const int offset = init_latent ? 1 : 0;
    if (static_cast<int>(controls.size()) < n_frames + offset) {
        throw ContractViolation("rollout: " + std::to_string(controls.size()) + " control states for " +
                                std::to_string(n_frames) + " frames" + (init_latent ? " plus the initial frame" : ""));
    }
    const ModelConfig& mc = model.config();
    Session session(model, config);
    if (init_latent) session.push_reference(*init_latent, controls[0]);
    RolloutResult out;
    for (int i = 0; i < n_frames; ++i) {
        const RolloutCounters before = session.counters();
        FrameRecord rec;
        rec.frame_index = session.next_index();
        rec.history = session.history();
        const auto start = Clock::now();
        Tensor z = session.sample_frame(controls[static_cast<size_t>(offset + i)]);
        if (codec) {
            NoGradScope ng;
            out.images.push_back(codec->decode_image(reshape(z, {mc.views, mc.grid_h(), mc.grid_w(), mc.latent_channels()})));
        }
        rec.seconds = seconds_since(start);
        const RolloutCounters& after = session.counters();
        rec.model_evals = after.model_evals - before.model_evals;
        rec.cache_fills = after.cache_fills - before.cache_fills;
        rec.encoder_calls = after.encoder_calls - before.encoder_calls;
        rec.attention_flops = after.attention_flops - before.attention_flops;
        out.latents.push_back(z);
        out.records.push_back(rec);
    }
    return out;
}

void write_latency_csv(const std::string& path, const std::vector<FrameRecord>& records) {
    std::ofstream f(path);
    if (!f) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    f << "frame,seconds,model_evals,cache_fills,encoder_calls,attention_flops,history\n";
    for (const auto& r : records) {
        f << r.frame_index << ',' << r.seconds << ',' << r.model_evals << ',' << r.cache_fills << ',' << r.encoder_calls
          << ',' << r.attention_flops << ',' << r.history << '\n';
    }
    if (!f) throw FileError(FileError::Kind::Io, path, "write failed");
}

// ---------------------------------------------------------------------------

std::vector<SamplerConfig> default_bench_grid() {
    std::vector<SamplerConfig> grid;
    for (int steps = 1; steps <= 5; ++steps) {
        SamplerConfig c;
        c.steps = steps;
        grid.push_back(c);
    }
    auto row = [](bool kv, float cfg, bool cond) {
        SamplerConfig c;
        c.steps = 20;
        c.kv_cache = kv;
        c.cfg_scale = cfg;
        c.cond_cache = cond;
        return c;
    };
    grid.push_back(row(true, 1.0f, true));
    grid.push_back(row(false, 1.0f, true));
    grid.push_back(row(false, 2.0f, true));
    grid.push_back(row(false, 2.0f, false));
    return grid;
}

std::vector<SamplerConfig> parse_bench_grid(const std::string& text) {
    std::vector<SamplerConfig> grid;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream words(line);
        std::string word;
        SamplerConfig c;
        bool any = false;
        while (words >> word) {
            const auto eq = word.find('=');
            if (eq == std::string::npos) {
                throw ContractViolation("bench grid line " + std::to_string(lineno) + ": expected key=value, got '" + word + "'");
            }
            const std::string key = word.substr(0, eq), value = word.substr(eq + 1);
            try {
                if (key == "steps") c.steps = std::stoi(value);
                else if (key == "kv_cache") c.kv_cache = parse_flag(value, key);
                else if (key == "cond_cache") c.cond_cache = parse_flag(value, key);
                else if (key == "cfg" || key == "cfg_scale") c.cfg_scale = std::stof(value);
                else if (key == "ref_window") c.ref_window = std::stoi(value);
                else if (key == "seed") c.seed = std::stoull(value);
                else throw ContractViolation("bench grid line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            } catch (const std::logic_error& e) {
                if (dynamic_cast<const ContractViolation*>(&e)) throw;
                throw ContractViolation("bench grid line " + std::to_string(lineno) + ": bad value for " + key);
            }
            any = true;
        }
        if (any) {
            c.validate();
            grid.push_back(c);
        }
    }
    if (grid.empty()) throw ContractViolation("bench grid has no rows");
    return grid;
}

std::vector<BenchRow> bench(const Model& model, const PatchCodec& codec, const SceneRecord& scene,
                            const std::vector<SamplerConfig>& grid, int history, int frames) {
    if (history < 0 || frames < 1 || history + frames > scene.n_frames()) {
        throw ContractViolation("bench: scene has " + std::to_string(scene.n_frames()) + " frames, need " +
                                std::to_string(history + frames));
    }
    const Tensor gt = scene_latents(codec, scene);
    std::vector<FrameControls> controls;
    for (int t = 0; t < history + frames; ++t) controls.push_back(frame_controls(scene, t));

    std::vector<BenchRow> rows;
    for (const SamplerConfig& cfg : grid) {
        Session s(model, cfg);
        for (int t = 0; t < history; ++t) s.push_reference(reshape(slice(gt, 0, t, t + 1), {gt.dim(1), gt.dim(2), gt.dim(3)}), controls[t]);
        const int64_t evals0 = s.counters().model_evals;
        std::vector<double> times;
        for (int i = 0; i < frames; ++i) {
            const auto start = Clock::now();
            Tensor z = s.sample_frame(controls[static_cast<size_t>(history + i)]);
            NoGradScope ng;
            codec.decode_image(reshape(z, {gt.dim(1), model.config().grid_h(), model.config().grid_w(), gt.dim(3)}));
            times.push_back(seconds_since(start));
        }
        BenchRow row;
        row.sampler = cfg;
        double total = 0.0;
        for (double t : times) total += t;
        row.mean_s_per_frame = total / frames;
        std::vector<double> sorted = times;
        std::sort(sorted.begin(), sorted.end());
        row.median_s_per_frame = frames % 2 ? sorted[frames / 2] : 0.5 * (sorted[frames / 2 - 1] + sorted[frames / 2]);
        row.model_evals_per_frame = static_cast<double>(s.counters().model_evals - evals0) / frames;
        rows.push_back(row);
    }
    return rows;
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream f(path);
    if (!f) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    f << "steps,kv_cache,cfg_scale,cond_cache,mean_s_per_frame,model_evals_per_frame\n";
    for (const auto& r : rows) {
        f << r.sampler.steps << ',' << (r.sampler.kv_cache ? "on" : "off") << ',' << r.sampler.cfg_scale << ','
          << (r.sampler.cond_cache ? "on" : "off") << ',' << r.mean_s_per_frame << ',' << r.model_evals_per_frame << '\n';
    }
    if (!f) throw FileError(FileError::Kind::Io, path, "write failed");
}

}  // namespace arsim
