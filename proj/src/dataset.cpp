#include "arsim/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"

#include "arsim/errors.hpp"
#include "arsim/tensor_file.hpp"

namespace arsim {

namespace {

constexpr std::array<char, 4> kSceneMagic{'F', 'A', 'R', 'S'};

uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t scene_seed(uint64_t dataset_seed, int index) {
    return splitmix(splitmix(dataset_seed) + static_cast<uint64_t>(index));
}

std::vector<SceneRecord> generate_scenes(int n_scenes, const SceneConfig& config, uint64_t seed) {
    if (n_scenes < 0) throw ContractViolation("generate_scenes: negative scene count");
    if (config.n_agents > kMaxBoxes) {
        throw ContractViolation("generate_scenes: at most " + std::to_string(kMaxBoxes) + " agents per scene");
    }
    std::vector<SceneRecord> out;
    for (int i = 0; i < n_scenes; ++i) {
        const uint64_t s = scene_seed(seed, i);
        std::mt19937_64 rng(s ^ 0x5bd1e995ULL);
        SceneConfig c = config;
        c.n_agents = config.n_agents <= 1 ? config.n_agents : std::uniform_int_distribution<int>(1, config.n_agents)(rng);
        out.push_back(make_scene(s, c));
    }
    return out;
}

void write_scene_file(const std::string& path, const SceneRecord& scene) {
    TensorFile f;
    f.version = kDatasetVersion;
    std::vector<float> caption(scene.caption.begin(), scene.caption.end());
    f.tensors = {{"frames", scene.frames},     {"canvases", scene.canvases}, {"cameras", scene.cameras},
                 {"boxes", scene.boxes},       {"box_mask", scene.box_mask}, {"bev", scene.bev},
                 {"ego", scene.ego},           {"caption", Tensor::from({kCaptionTokens}, caption)}};
    write_tensor_file(path, kSceneMagic, f);
}

SceneRecord read_scene_file(const std::string& path) {
    const TensorFile f = read_tensor_file(path, kSceneMagic, kDatasetVersion);
    SceneRecord s;
    s.frames = f.at("frames", path);
    s.canvases = f.at("canvases", path);
    s.cameras = f.at("cameras", path);
    s.boxes = f.at("boxes", path);
    s.box_mask = f.at("box_mask", path);
    s.bev = f.at("bev", path);
    s.ego = f.at("ego", path);
    const Tensor& cap = f.at("caption", path);
    if (cap.numel() != kCaptionTokens) throw FileError(FileError::Kind::ShapeMismatch, path, "caption length");
    for (int i = 0; i < kCaptionTokens; ++i) s.caption[i] = static_cast<int>(cap.data()[i]);

    auto expect = [&](const char* name, const Tensor& t, Shape want) {
        if (t.shape() != want) {
            throw FileError(FileError::Kind::ShapeMismatch, path,
                            std::string(name) + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
        }
    };
    if (s.frames.rank() != 5 || s.frames.dim(4) != 3) {
        throw FileError(FileError::Kind::ShapeMismatch, path, "frames has shape " + shape_str(s.frames.shape()));
    }
    const int T = s.frames.dim(0), V = s.frames.dim(1), H = s.frames.dim(2), W = s.frames.dim(3);
    expect("canvases", s.canvases, {T, V, H, W, kCanvasChannels});
    expect("cameras", s.cameras, {T, V, 3, 7});
    expect("boxes", s.boxes, {T, kMaxBoxes, kBoxFields});
    expect("box_mask", s.box_mask, {T, kMaxBoxes});
    expect("bev", s.bev, {T, kBevSize, kBevSize, kBevChannels});
    expect("ego", s.ego, {T, 4, 4});
    return s;
}

void write_dataset(const std::string& dir, const std::vector<SceneRecord>& scenes, DatasetManifest manifest) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FileError(FileError::Kind::Io, dir, "cannot create directory: " + ec.message());
    manifest.files.clear();
    for (size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04zu.bin", i);
        write_scene_file((fs::path(dir) / name).string(), scenes[i]);
        manifest.files.emplace_back(name);
    }
    const auto& c = manifest.scene;
    nlohmann::ordered_json j;
    j["version"] = manifest.version;
    j["seed"] = manifest.seed;
    j["n_scenes"] = scenes.size();
    j["frames"] = c.frames;
    j["views"] = c.views;
    j["height"] = c.height;
    j["width"] = c.width;
    j["max_agents"] = c.n_agents;
    j["straight_road"] = c.straight_road;
    j["canvas_channels"] = kCanvasChannels;
    j["canvas_legend"] = {"road", "boxes"};
    j["bev_shape"] = {kBevSize, kBevSize, kBevChannels};
    j["max_boxes"] = kMaxBoxes;
    j["codec"] = {{"patch", manifest.codec_patch}, {"seed", manifest.codec_seed}};
    j["files"] = manifest.files;
    const std::string path = (fs::path(dir) / "manifest.json").string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    out << j.dump(2) << '\n';
}

Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string path = (fs::path(dir) / "manifest.json").string();
    std::ifstream in(path);
    if (!in) throw FileError(FileError::Kind::Io, path, "cannot open");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FileError(FileError::Kind::Format, path, std::string("invalid JSON: ") + e.what());
    }
    Dataset ds;
    auto& m = ds.manifest;
    try {
        m.version = j.at("version").get<uint32_t>();
        if (m.version != kDatasetVersion) {
            throw FileError(FileError::Kind::Version, path, "unsupported dataset version " + std::to_string(m.version));
        }
        m.seed = j.at("seed").get<uint64_t>();
        m.scene.frames = j.at("frames").get<int>();
        m.scene.views = j.at("views").get<int>();
        m.scene.height = j.at("height").get<int>();
        m.scene.width = j.at("width").get<int>();
        m.scene.n_agents = j.at("max_agents").get<int>();
        m.scene.straight_road = j.value("straight_road", false);
        m.codec_patch = j.at("codec").at("patch").get<int>();
        m.codec_seed = j.at("codec").at("seed").get<uint64_t>();
        m.files = j.at("files").get<std::vector<std::string>>();
        if (j.at("n_scenes").get<size_t>() != m.files.size()) {
            throw FileError(FileError::Kind::ShapeMismatch, path, "n_scenes disagrees with the file list");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FileError(FileError::Kind::Format, path, std::string("bad manifest: ") + e.what());
    }
    for (const auto& name : m.files) {
        const std::string scene_path = (fs::path(dir) / name).string();
        SceneRecord s = read_scene_file(scene_path);
        const Shape want{m.scene.frames, m.scene.views, m.scene.height, m.scene.width, 3};
        if (s.frames.shape() != want) {
            throw FileError(FileError::Kind::ShapeMismatch, scene_path,
                            "frames " + shape_str(s.frames.shape()) + " disagree with manifest " + shape_str(want));
        }
        ds.scenes.push_back(std::move(s));
    }
    return ds;
}

}  // namespace arsim
