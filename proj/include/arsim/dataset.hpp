#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arsim/scene.hpp"

namespace arsim {

inline constexpr uint32_t kDatasetVersion = 1;

struct DatasetManifest {
    uint32_t version = kDatasetVersion;
    uint64_t seed = 0;
    SceneConfig scene;  // n_agents is the per-scene maximum
    int codec_patch = 4;
    uint64_t codec_seed = 0;
    std::vector<std::string> files;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<SceneRecord> scenes;
};

/// Per-scene seed derived from the dataset seed.
uint64_t scene_seed(uint64_t dataset_seed, int index);

/// Scenes 0..n-1, each with its own agent count drawn in [1, config.n_agents].
std::vector<SceneRecord> generate_scenes(int n_scenes, const SceneConfig& config, uint64_t seed);

void write_scene_file(const std::string& path, const SceneRecord& scene);
SceneRecord read_scene_file(const std::string& path);

/// Writes manifest.json plus one scene_XXXX.bin per record. Fills
/// manifest.files.
void write_dataset(const std::string& dir, const std::vector<SceneRecord>& scenes, DatasetManifest manifest);

/// Throws FileError with kind Format, Version, Truncated, ShapeMismatch or Io.
Dataset read_dataset(const std::string& dir);

}  // namespace arsim
