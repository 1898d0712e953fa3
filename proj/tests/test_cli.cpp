#include <csignal>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include "arsim/dataset.hpp"
#include "arsim/sim_service.hpp"
#include "cli.hpp"
#include "doctest.h"

using namespace arsim;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("arsim_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int count_lines(const fs::path& p) {
    std::ifstream in(p);
    int n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kTinyConfig =
    "model.d_model=16\nmodel.n_heads=2\nmodel.backbone_depth=2\nmodel.control_depth=1\nmodel.mlp_ratio=2\n"
    "batch_size=2\nclip_len=4\nsteps=3\nlr=1e-3\nbf_max_rollout=4\nbf_window=2\nrollout_steps=1\n";

// Tiny dataset plus an ARHC checkpoint trained for a few steps.
struct Trained {
    TempDir dir;
    std::string data = dir / "data", config = dir / "tiny.cfg", ckpt = dir / "arhc.ckpt";
    Trained(int frames = 8) {
        REQUIRE(run({"gen-data", "--scenes", "2", "--frames", std::to_string(frames), "--views", "2", "--height", "16", "--width",
                     "16", "--seed", "3", "--out", data})
                    .code == 0);
        write_text(config, kTinyConfig);
        const Result r = run({"train", "--stage", "arhc", "--data", data, "--config", config, "--out", ckpt});
        REQUIRE_MESSAGE(r.code == 0, r.err);
    }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
    CHECK(run({}).code == 1);
    CHECK(run({"teleport"}).code == 1);
    CHECK(run({"gen-data", "--scenes", "2"}).code == 1);
    CHECK(run({"gen-data", "--scenes", "2", "--frames", "4", "--seed", "1", "--out", "x", "--bogus"}).code == 1);
    CHECK(run({"rollout", "--ckpt", "a", "--scene", "b", "--len", "3", "--out", "o", "--kv-cache", "maybe"}).code == 1);
    const Result help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
}

TEST_CASE("runtime failures exit with 2") {
    TempDir d;
    CHECK(run({"rollout", "--ckpt", d / "missing.ckpt", "--scene", d / "missing.bin", "--len", "3", "--out", d / "o"}).code == 2);
    CHECK(run({"train", "--data", d / "nowhere", "--out", d / "c.ckpt"}).code == 2);
}

TEST_CASE("gen-data is deterministic") {
    TempDir d;
    const std::vector<std::string> base{"gen-data", "--scenes", "2", "--frames", "16", "--views", "3", "--seed", "7", "--out"};
    auto a = base, b = base;
    a.push_back(d / "a");
    b.push_back(d / "b");
    REQUIRE(run(a).code == 0);
    REQUIRE(run(b).code == 0);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(d.path / "a")) names.push_back(e.path().filename().string());
    CHECK(names.size() == 3);  // manifest plus two scenes
    for (const auto& n : names) CHECK(slurp(d.path / "a" / n) == slurp(d.path / "b" / n));
    const Dataset ds = read_dataset(d / "a");
    CHECK(ds.scenes.size() == 2);
    CHECK(ds.scenes[0].n_frames() == 16);
    CHECK(ds.scenes[0].n_views() == 3);
}

TEST_CASE("train writes a checkpoint and a loss log; configs are validated") {
    Trained t;
    CHECK(fs::exists(t.ckpt));
    CHECK(count_lines(t.ckpt + ".loss.csv") == 4);

    write_text(t.dir / "bad.cfg", std::string(kTinyConfig) + "learning_rate=3\n");
    CHECK(run({"train", "--data", t.data, "--config", t.dir / "bad.cfg", "--out", t.dir / "x.ckpt"}).code == 2);
    CHECK_FALSE(fs::exists(t.dir / "x.ckpt"));

    // Geometry must match the dataset.
    write_text(t.dir / "geom.cfg", std::string(kTinyConfig) + "model.views=3\n");
    CHECK(run({"train", "--data", t.data, "--config", t.dir / "geom.cfg", "--out", t.dir / "x.ckpt"}).code == 2);

    CHECK(run({"train", "--stage", "blendforce", "--data", t.data, "--config", t.config, "--out", t.dir / "bf.ckpt"}).code == 2);
    const Result bf = run({"train", "--stage", "blendforce", "--data", t.data, "--config", t.config, "--init", t.ckpt, "--out",
                           t.dir / "bf.ckpt", "--steps", "4"});
    CHECK_MESSAGE(bf.code == 0, bf.err);
    const std::string log = slurp(t.dir / "bf.ckpt.loss.csv");
    CHECK(log.find(",bf,") != std::string::npos);
    CHECK(log.find(",arhc,") != std::string::npos);
}

TEST_CASE("rollout, bench and eval end to end") {
    Trained t(65);
    const std::string scene = t.data + "/scene_0000.bin";
    const std::string out = t.dir / "roll";
    const Result r = run({"rollout", "--ckpt", t.ckpt, "--scene", scene, "--len", "64", "--steps", "3", "--out", out});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const TensorFile f = cli::read_rollout_file(out + "/" + cli::kRolloutFile);
    const Tensor& images = f.at("images", "rollout");
    CHECK(images.shape() == Shape{65, 2, 16, 16, 3});
    bool finite = true;
    for (float v : images.data()) finite = finite && std::isfinite(v);
    CHECK(finite);
    CHECK(count_lines(out + "/latency.csv") == 65);

    // Same flags, same bytes.
    const std::string again = t.dir / "roll2";
    REQUIRE(run({"rollout", "--ckpt", t.ckpt, "--scene", scene, "--len", "64", "--steps", "3", "--out", again}).code == 0);
    CHECK(slurp(out + "/rollout.bin") == slurp(again + "/rollout.bin"));

    CHECK(run({"rollout", "--ckpt", t.ckpt, "--scene", scene, "--len", "65", "--out", t.dir / "r3"}).code == 2);

    write_text(t.dir / "grid.txt", "steps=1 kv_cache=on cfg=1 cond_cache=on\nsteps=2 kv_cache=off cfg=2 cond_cache=off\n");
    const Result b = run({"bench", "--ckpt", t.ckpt, "--grid", t.dir / "grid.txt", "--out", t.dir / "bench.csv", "--history", "2",
                          "--frames", "2"});
    REQUIRE_MESSAGE(b.code == 0, b.err);
    std::ifstream bench(t.dir / "bench.csv");
    std::string header, row1, row2;
    std::getline(bench, header);
    std::getline(bench, row1);
    std::getline(bench, row2);
    CHECK(header == "steps,kv_cache,cfg_scale,cond_cache,mean_s_per_frame,model_evals_per_frame");
    CHECK(row2.rfind("2,off,2,off,", 0) == 0);
    CHECK(row2.substr(row2.rfind(',') + 1) == "4");

    const Result e = run({"eval", "--pred", out, "--ref", t.data, "--lengths", "16,32,64", "--out", t.dir / "metrics.csv"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    std::ifstream metrics(t.dir / "metrics.csv");
    std::getline(metrics, header);
    CHECK(header == "metric,length,value,seed,checkpoint");
    CHECK(count_lines(t.dir / "metrics.csv") == 1 + 3 * 2 + 1);
    CHECK(run({"eval", "--pred", out, "--ref", t.data, "--lengths", "16,x", "--out", t.dir / "m2.csv"}).code == 2);
    CHECK(run({"eval", "--pred", out, "--ref", t.data, "--lengths", "128", "--out", t.dir / "m2.csv"}).code == 2);
}

TEST_CASE("serve and agent") {
    Trained t;
    int port = 0;
    {
        SimServer probe(std::make_shared<const Model>(load_checkpoint(t.ckpt)));
        probe.start("127.0.0.1:0");
        port = probe.port();
    }
    const std::string addr = "127.0.0.1:" + std::to_string(port);
    Result served{};
    std::thread server([&] { served = run({"serve", "--ckpt", t.ckpt, "--addr", addr}); });
    Result a{};
    for (int attempt = 0; attempt < 50; ++attempt) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        a = run({"agent", "--addr", addr, "--seed", "5", "--steps", "4", "--views", "2", "--height", "16", "--width", "16",
                 "--sampler-steps", "1", "--out", t.dir / "transcript.csv"});
        if (a.code == 0) break;
    }
    std::raise(SIGTERM);
    server.join();
    CHECK_MESSAGE(a.code == 0, a.err);
    CHECK(served.code == 0);
    CHECK(served.out.find("listening on " + addr) != std::string::npos);
    CHECK(count_lines(t.dir / "transcript.csv") == 5);

    // Nothing listens any more.
    CHECK(run({"agent", "--addr", addr, "--steps", "1"}).code == 2);
}
