#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "arsim/dataset.hpp"
#include "arsim/errors.hpp"
#include "arsim/metrics.hpp"
#include "arsim/model.hpp"
#include "arsim/ops.hpp"
#include "arsim/rollout.hpp"
#include "arsim/sim_service.hpp"
#include "arsim/trainer.hpp"

namespace arsim::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 4> kRolloutMagic{'F', 'A', 'R', 'O'};
constexpr uint32_t kRolloutVersion = 1;

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

bool on_off(const std::string& v) { return v == "on"; }

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw FileError(FileError::Kind::Io, parent.string(), "cannot create directory: " + ec.message());
}

// ---------------------------------------------------------------------------

struct GenData {
    int scenes = 0, frames = 0, views = 3, height = 32, width = 32, agents = 4;
    uint64_t seed = 0;
    bool straight = false;
    std::string out;
};

int gen_data(const GenData& o, std::ostream& out) {
    SceneConfig sc;
    sc.frames = o.frames;
    sc.views = o.views;
    sc.height = o.height;
    sc.width = o.width;
    sc.n_agents = o.agents;
    sc.straight_road = o.straight;
    DatasetManifest m;
    m.seed = o.seed;
    m.scene = sc;
    write_dataset(o.out, generate_scenes(o.scenes, sc, o.seed), m);
    out << "wrote " << o.scenes << " scenes of " << o.frames << " frames to " << o.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct Train {
    std::string stage, data, config, out, init, log;
    int steps = -1;
    int64_t seed = -1;
    double lr = -1.0;
    int log_every = 10;
};

void check_model_matches(const ModelConfig& mc, const DatasetManifest& m) {
    if (mc.views != m.scene.views || mc.height != m.scene.height || mc.width != m.scene.width) {
        throw ContractViolation("model expects " + std::to_string(mc.views) + " views of " + std::to_string(mc.height) + "x" +
                                std::to_string(mc.width) + ", dataset has " + std::to_string(m.scene.views) + " of " +
                                std::to_string(m.scene.height) + "x" + std::to_string(m.scene.width));
    }
    if (mc.patch != m.codec_patch || mc.codec_seed != m.codec_seed) throw ContractViolation("model and dataset codecs differ");
}

int train_cmd(const Train& o, std::ostream& out) {
    KeyValues kv = o.config.empty() ? KeyValues() : KeyValues::load(o.config);
    if (!o.stage.empty()) kv.set("stage", o.stage);
    if (o.steps >= 0) kv.set("steps", std::to_string(o.steps));
    if (o.seed >= 0) kv.set("seed", std::to_string(o.seed));
    if (o.lr > 0.0) {
        std::ostringstream s;
        s.precision(17);
        s << o.lr;
        kv.set("lr", s.str());
    }
    const TrainConfig tc = TrainConfig::from_keys(kv);
    const Dataset ds = read_dataset(o.data);

    std::optional<Model> model;
    Checkpoint init;
    if (!o.init.empty()) {
        model.emplace(load_checkpoint(o.init, &init));
    } else {
        if (tc.stage == "blendforce") throw ContractViolation("the blendforce stage needs --init with an arhc checkpoint");
        ModelConfig mc = ModelConfig::read(kv);
        // Frame geometry and codec follow the dataset unless the config pins them.
        if (!kv.has("model.views")) mc.views = ds.manifest.scene.views;
        if (!kv.has("model.height")) mc.height = ds.manifest.scene.height;
        if (!kv.has("model.width")) mc.width = ds.manifest.scene.width;
        if (!kv.has("model.patch")) mc.patch = ds.manifest.codec_patch;
        if (!kv.has("model.codec_seed")) mc.codec_seed = ds.manifest.codec_seed;
        mc.validate();
        model.emplace(mc);
    }
    check_model_matches(model->config(), ds.manifest);

    const PatchCodec codec(model->config().patch, model->config().codec_seed);
    auto data = std::make_shared<const TrainData>(prepare_data(ds.scenes, codec));
    ensure_parent(o.out);
    const auto start = std::chrono::steady_clock::now();
    const auto rows = train(*model, tc, data, o.out, o.init.empty() ? nullptr : &init, [&](const LossRow& r) {
        if (o.log_every > 0 && r.step % o.log_every == 0) {
            out << "step " << r.step << " " << r.stage << " loss " << r.loss << " alpha " << r.alpha << "\n" << std::flush;
        }
    });
    const std::string log = o.log.empty() ? o.out + ".loss.csv" : o.log;
    write_loss_csv(log, rows);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << "trained " << rows.size() << " steps in " << secs << " s; checkpoint " << o.out << ", losses " << log << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct RolloutOpts {
    std::string ckpt, scene, out, kv_cache = "on", cond_cache = "on";
    int len = 0, steps = 3, ref_window = 8;
    float cfg = 1.0f;
    uint64_t seed = 0;
};

SamplerConfig sampler_from(int steps, float cfg, const std::string& kv, const std::string& cond, int window, uint64_t seed) {
    SamplerConfig s;
    s.steps = steps;
    s.cfg_scale = cfg;
    s.kv_cache = on_off(kv);
    s.cond_cache = on_off(cond);
    s.ref_window = window;
    s.seed = seed;
    s.validate();
    return s;
}

int rollout_cmd(const RolloutOpts& o, std::ostream& out) {
    const SamplerConfig sampler = sampler_from(o.steps, o.cfg, o.kv_cache, o.cond_cache, o.ref_window, o.seed);
    const Model model = load_checkpoint(o.ckpt);
    const ModelConfig& mc = model.config();
    const SceneRecord scene = read_scene_file(o.scene);
    if (scene.n_views() != mc.views || scene.frames.dim(2) != mc.height || scene.frames.dim(3) != mc.width) {
        throw ContractViolation("scene geometry does not match the checkpoint");
    }
    if (scene.n_frames() < o.len + 1) {
        throw ContractViolation("--len " + std::to_string(o.len) + " needs " + std::to_string(o.len + 1) +
                                " frames of controls; the scene has " + std::to_string(scene.n_frames()));
    }
    const PatchCodec codec(mc.patch, mc.codec_seed);
    const Tensor gt = scene_latents(codec, scene);
    std::vector<FrameControls> controls;
    for (int t = 0; t <= o.len; ++t) controls.push_back(frame_controls(scene, t));
    const Tensor init = reshape(slice(gt, 0, 0, 1), {gt.dim(1), gt.dim(2), gt.dim(3)});
    const RolloutResult res = rollout(model, sampler, controls, o.len, init, &codec);

    std::vector<Tensor> images{reshape(scene.frame(0), {1, mc.views, mc.height, mc.width, 3})};
    std::vector<Tensor> latents{reshape(init, {1, gt.dim(1), gt.dim(2), gt.dim(3)})};
    for (int i = 0; i < o.len; ++i) {
        const Tensor& img = res.images[static_cast<size_t>(i)];
        for (float v : img.data()) {
            if (!std::isfinite(v)) throw NumericError("rollout produced a non-finite frame at " + std::to_string(i + 1));
        }
        images.push_back(reshape(img, {1, mc.views, mc.height, mc.width, 3}));
        const Tensor& z = res.latents[static_cast<size_t>(i)];
        latents.push_back(reshape(z, {1, z.dim(0), z.dim(1), z.dim(2)}));
    }

    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec) throw FileError(FileError::Kind::Io, o.out, "cannot create directory: " + ec.message());
    KeyValues header;
    header.set("scene", fs::path(o.scene).filename().string());
    header.set("checkpoint", o.ckpt);
    header.set("seed", std::to_string(o.seed));
    header.set("steps", std::to_string(o.steps));
    header.set("cfg_scale", std::to_string(o.cfg));
    header.set("kv_cache", o.kv_cache);
    header.set("cond_cache", o.cond_cache);
    header.set("ref_window", std::to_string(o.ref_window));
    header.set("len", std::to_string(o.len));
    TensorFile f;
    f.version = kRolloutVersion;
    f.header = header.to_text();
    f.tensors = {{"images", concat(images, 0)}, {"latents", concat(latents, 0)}};
    write_rollout_file((fs::path(o.out) / kRolloutFile).string(), f);
    const std::string csv = (fs::path(o.out) / "latency.csv").string();
    write_latency_csv(csv, res.records);

    double total = 0.0;
    for (const auto& r : res.records) total += r.seconds;
    out << "generated " << o.len << " frames (" << (o.len > 0 ? total / o.len : 0.0) << " s/frame) into " << o.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct BenchOpts {
    std::string ckpt, grid, out, scene;
    int history = 8, frames = 4;
    uint64_t seed = 0;
};

int bench_cmd(const BenchOpts& o, std::ostream& out) {
    std::vector<SamplerConfig> grid = default_bench_grid();
    if (!o.grid.empty()) {
        std::ifstream in(o.grid);
        if (!in) throw FileError(FileError::Kind::Io, o.grid, "cannot open grid");
        std::stringstream ss;
        ss << in.rdbuf();
        grid = parse_bench_grid(ss.str());
    }
    const Model model = load_checkpoint(o.ckpt);
    const ModelConfig& mc = model.config();
    SceneRecord scene;
    if (!o.scene.empty()) {
        scene = read_scene_file(o.scene);
    } else {
        SceneConfig sc;
        sc.frames = o.history + o.frames;
        sc.views = mc.views;
        sc.height = mc.height;
        sc.width = mc.width;
        scene = make_scene(o.seed, sc);
    }
    const PatchCodec codec(mc.patch, mc.codec_seed);
    const auto rows = bench(model, codec, scene, grid, o.history, o.frames);
    ensure_parent(o.out);
    write_bench_csv(o.out, rows);
    for (const auto& r : rows) {
        out << "steps=" << r.sampler.steps << " kv=" << (r.sampler.kv_cache ? "on" : "off") << " cfg=" << r.sampler.cfg_scale
            << " cond=" << (r.sampler.cond_cache ? "on" : "off") << "  mean " << r.mean_s_per_frame << " s  median "
            << r.median_s_per_frame << " s  evals " << r.model_evals_per_frame << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct ServeOpts {
    std::string ckpt, addr;
    size_t max_line_bytes = 16u << 20;
};

int serve_cmd(const ServeOpts& o, std::ostream& out) {
    auto model = std::make_shared<const Model>(load_checkpoint(o.ckpt));
    ServiceOptions opts;
    opts.max_line_bytes = o.max_line_bytes;
    SimServer server(model, opts);
    g_stop = false;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.start(o.addr.empty() ? default_address() : o.addr);
    out << "listening on " << server.address() << "\n" << std::flush;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    out << "stopped\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string pred, ref, out, lengths;
    int window = 8;
    uint64_t feature_seed = 0;
    bool video = false;
};

std::vector<int> parse_lengths(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            const int v = std::stoi(item, &used);
            if (used != item.size() || v < 1) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ContractViolation("--lengths expects positive integers separated by commas, got '" + text + "'");
        }
    }
    if (out.empty()) throw ContractViolation("--lengths is empty");
    return out;
}

int eval_cmd(const EvalOpts& o, std::ostream& out) {
    DegradationOptions opts;
    opts.lengths = parse_lengths(o.lengths);
    opts.window = o.window;
    opts.feature_seed = o.feature_seed;
    opts.video = o.video;

    std::vector<fs::path> files;
    if (fs::is_regular_file(fs::path(o.pred) / kRolloutFile)) {
        files.push_back(fs::path(o.pred) / kRolloutFile);
    } else if (fs::is_directory(o.pred)) {
        for (const auto& e : fs::directory_iterator(o.pred)) {
            if (e.is_directory() && fs::is_regular_file(e.path() / kRolloutFile)) files.push_back(e.path() / kRolloutFile);
        }
    }
    if (files.empty()) throw FileError(FileError::Kind::Io, o.pred, "no rollout outputs found");
    std::sort(files.begin(), files.end());

    std::vector<Tensor> generated;
    std::vector<SceneRecord> scenes;
    uint64_t seed = 0;
    std::string checkpoint;
    for (const auto& f : files) {
        const TensorFile tf = read_rollout_file(f.string());
        const KeyValues header = KeyValues::parse(tf.header, f.string());
        const std::string scene_name = header.get_string("scene", "");
        if (scene_name.empty()) throw FileError(FileError::Kind::Format, f.string(), "header names no scene");
        scenes.push_back(read_scene_file((fs::path(o.ref) / scene_name).string()));
        generated.push_back(tf.at("images", f.string()));
        if (checkpoint.empty()) {
            checkpoint = header.get_string("checkpoint", "");
            seed = static_cast<uint64_t>(header.get_int("seed", 0));
        }
    }
    std::vector<const SceneRecord*> refs;
    for (const auto& s : scenes) refs.push_back(&s);
    const auto curve = degradation_from_frames(generated, refs, opts);
    ensure_parent(o.out);
    write_metrics_csv(o.out, degradation_rows(curve, seed, checkpoint));
    for (const auto& r : curve) {
        out << "length " << r.length << "  frechet " << r.frechet;
        if (o.video) out << "  frechet_video " << r.frechet_video;
        out << "  layout_iou " << r.layout_iou << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct AgentOpts {
    std::string addr, out;
    uint64_t seed = 0;
    int steps = 32, views = 3, height = 32, width = 32, sampler_steps = 3, perturb_step = -1;
};

int agent_cmd(const AgentOpts& o, std::ostream& out) {
    AgentOptions a;
    a.scene.views = o.views;
    a.scene.height = o.height;
    a.scene.width = o.width;
    a.sampler.steps = o.sampler_steps;
    a.sampler.seed = o.seed;
    a.perturb_step = o.perturb_step;
    const AgentTranscript t = run_scripted_agent(o.addr.empty() ? default_address() : o.addr, o.seed, o.steps, a);
    if (!o.out.empty()) {
        ensure_parent(o.out);
        std::ofstream f(o.out);
        if (!f) throw FileError(FileError::Kind::Io, o.out, "cannot open for writing");
        f << "frame_index,latency_ms,round_trip_ms,payload_bytes\n";
        for (const auto& fr : t.frames) {
            f << fr.frame_index << ',' << fr.latency_ms << ',' << fr.round_trip_ms << ',' << fr.payload.size() << '\n';
        }
    }
    out << "session " << t.session_id << ": " << t.frames.size() << " frames, mean round trip " << t.mean_round_trip_ms
        << " ms, max " << t.max_round_trip_ms << " ms\n";
    return kExitOk;
}

}  // namespace

void write_rollout_file(const std::string& path, const TensorFile& file) { write_tensor_file(path, kRolloutMagic, file); }

TensorFile read_rollout_file(const std::string& path) { return read_tensor_file(path, kRolloutMagic, kRolloutVersion); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Autoregressive multi-view driving-scene simulator", "arsim"};
    app.require_subcommand(1);
    const auto on_off_check = CLI::IsMember({"on", "off"});

    GenData gd;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    g->add_option("--scenes", gd.scenes, "Number of scenes")->required()->check(CLI::PositiveNumber);
    g->add_option("--frames", gd.frames, "Frames per scene")->required()->check(CLI::PositiveNumber);
    g->add_option("--views", gd.views, "Camera views")->check(CLI::PositiveNumber);
    g->add_option("--seed", gd.seed, "Dataset seed")->required();
    g->add_option("--out", gd.out, "Output directory")->required();
    g->add_option("--height", gd.height, "Image height")->check(CLI::PositiveNumber);
    g->add_option("--width", gd.width, "Image width")->check(CLI::PositiveNumber);
    g->add_option("--agents", gd.agents, "Maximum agents per scene")->check(CLI::NonNegativeNumber);
    g->add_flag("--straight", gd.straight, "Straight roads only");

    Train tr;
    auto* t = app.add_subcommand("train", "Train a checkpoint");
    t->add_option("--stage", tr.stage, "arhc or blendforce")->check(CLI::IsMember({"arhc", "blendforce"}));
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--config", tr.config, "key=value config file");
    t->add_option("--out", tr.out, "Output checkpoint")->required();
    t->add_option("--init", tr.init, "Checkpoint to continue from");
    t->add_option("--steps", tr.steps, "Override the step count")->check(CLI::NonNegativeNumber);
    t->add_option("--seed", tr.seed, "Override the seed")->check(CLI::NonNegativeNumber);
    t->add_option("--lr", tr.lr, "Override the learning rate")->check(CLI::PositiveNumber);
    t->add_option("--log", tr.log, "Loss CSV (default: <out>.loss.csv)");
    t->add_option("--log-every", tr.log_every, "Print every N steps (0 = quiet)")->check(CLI::NonNegativeNumber);

    RolloutOpts ro;
    auto* r = app.add_subcommand("rollout", "Generate frames from a checkpoint");
    r->add_option("--ckpt", ro.ckpt, "Checkpoint")->required();
    r->add_option("--scene", ro.scene, "Scene file supplying controls and the first frame")->required();
    r->add_option("--len", ro.len, "Frames to generate")->required()->check(CLI::NonNegativeNumber);
    r->add_option("--steps", ro.steps, "Sampling steps per frame")->check(CLI::PositiveNumber);
    r->add_option("--kv-cache", ro.kv_cache, "on|off")->check(on_off_check);
    r->add_option("--cond-cache", ro.cond_cache, "on|off")->check(on_off_check);
    r->add_option("--cfg", ro.cfg, "Guidance scale (1 = off)");
    r->add_option("--ref-window", ro.ref_window, "Reference frames")->check(CLI::PositiveNumber);
    r->add_option("--seed", ro.seed, "Noise seed");
    r->add_option("--out", ro.out, "Output directory")->required();

    BenchOpts bo;
    auto* b = app.add_subcommand("bench", "Time the sampler grid");
    b->add_option("--ckpt", bo.ckpt, "Checkpoint")->required();
    b->add_option("--grid", bo.grid, "Grid file (default: built-in grid)");
    b->add_option("--out", bo.out, "Output CSV")->required();
    b->add_option("--scene", bo.scene, "Scene file (default: generated)");
    b->add_option("--history", bo.history, "Reference frames before timing")->check(CLI::PositiveNumber);
    b->add_option("--frames", bo.frames, "Timed frames per row")->check(CLI::PositiveNumber);
    b->add_option("--seed", bo.seed, "Scene seed when generated");

    ServeOpts so;
    auto* s = app.add_subcommand("serve", "Run the simulation service");
    s->add_option("--ckpt", so.ckpt, "Checkpoint")->required();
    s->add_option("--addr", so.addr, "host:port (default: $FAR_ADDR or 127.0.0.1:7878)");
    s->add_option("--max-line-bytes", so.max_line_bytes, "Largest accepted message")->check(CLI::PositiveNumber);

    EvalOpts eo;
    auto* e = app.add_subcommand("eval", "Score rollouts against reference scenes");
    e->add_option("--pred", eo.pred, "Rollout output directory (or a directory of them)")->required();
    e->add_option("--ref", eo.ref, "Dataset directory with the reference scenes")->required();
    e->add_option("--lengths", eo.lengths, "Comma-separated rollout lengths")->required();
    e->add_option("--out", eo.out, "Output CSV")->required();
    e->add_option("--window", eo.window, "Frames per length entering the statistics")->check(CLI::PositiveNumber);
    e->add_option("--feature-seed", eo.feature_seed, "Feature extractor seed");
    e->add_flag("--video", eo.video, "Also score stacked-frame windows");

    AgentOpts ao;
    auto* a = app.add_subcommand("agent", "Drive a running service with the scripted agent");
    a->add_option("--addr", ao.addr, "host:port (default: $FAR_ADDR or 127.0.0.1:7878)");
    a->add_option("--seed", ao.seed, "Scenario seed");
    a->add_option("--steps", ao.steps, "Steps to run")->check(CLI::NonNegativeNumber);
    a->add_option("--views", ao.views, "Camera views")->check(CLI::PositiveNumber);
    a->add_option("--height", ao.height, "Image height")->check(CLI::PositiveNumber);
    a->add_option("--width", ao.width, "Image width")->check(CLI::PositiveNumber);
    a->add_option("--sampler-steps", ao.sampler_steps, "Sampling steps per frame")->check(CLI::PositiveNumber);
    a->add_option("--perturb-step", ao.perturb_step, "Alter the action at this step");
    a->add_option("--out", ao.out, "Transcript CSV");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& ex) {
        app.exit(ex, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& ex) {
        app.exit(ex, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        app.exit(ex, out, err);
        if (app.get_subcommands().empty()) err << app.help();
        return kExitUsage;
    }

    try {
        if (g->parsed()) return gen_data(gd, out);
        if (t->parsed()) return train_cmd(tr, out);
        if (r->parsed()) return rollout_cmd(ro, out);
        if (b->parsed()) return bench_cmd(bo, out);
        if (s->parsed()) return serve_cmd(so, out);
        if (e->parsed()) return eval_cmd(eo, out);
        if (a->parsed()) return agent_cmd(ao, out);
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitRuntime;
    }
    err << app.help();
    return kExitUsage;
}

}  // namespace arsim::cli
