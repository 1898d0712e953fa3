#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "arsim/tensor.hpp"

namespace arsim {

// World frame: x forward, y left, z up; origin at the ego's frame-0 pose.
// Camera frame: x right, y down, z forward (pinhole).

inline constexpr int kMaxBoxes = 8;
inline constexpr int kBoxFields = 8;  // x, y, z, yaw, length, width, height, category
inline constexpr int kCaptionTokens = 4;
inline constexpr int kCaptionVocab = 16;
inline constexpr int kCategories = 4;
inline constexpr int kCanvasChannels = 2;  // road, boxes
inline constexpr int kBevSize = 32;
inline constexpr int kBevChannels = 2;  // road, agents

/// Reserved road color; never produced by sky, ground or agents.
inline constexpr std::array<float, 3> kRoadColor{0.35f, 0.35f, 0.38f};
/// Per-channel tolerance used when classifying pixels as road.
inline constexpr float kRoadColorTolerance = 0.08f;

enum class Category : int { Car = 0, Truck = 1, Pedestrian = 2, Cyclist = 3 };

struct Agent {
    Eigen::Vector2d position;  // at frame 0
    Eigen::Vector2d velocity;  // world units per frame
    double length = 4.0;
    double width = 1.8;
    double height = 1.5;
    int category = 0;
    std::array<float, 3> color{};
};

struct AgentState {
    Eigen::Vector2d position;
    double heading = 0.0;
};

struct Pose2 {
    Eigen::Vector2d position;
    double heading = 0.0;
};

struct Road {
    std::vector<Eigen::Vector2d> centerline;
    double width = 8.0;

    double distance(const Eigen::Vector2d& p) const;
    Eigen::Vector2d point_at(double s) const;
    double length() const;
};

struct Palette {
    std::array<float, 3> sky{};
    std::array<float, 3> ground{};
    float cloud_strength = 0.4f;
};

struct ToyWorld {
    uint64_t seed = 0;
    int frames = 1;
    Road road;
    double ego_start_s = 0.0;  // arc length of the frame-0 ego position
    double ego_speed = 0.8;
    std::vector<Pose2> ego;    // per frame
    std::vector<Agent> agents;
    std::vector<std::vector<AgentState>> tracks;  // [agent][frame]
    Eigen::Vector2d arena_min, arena_max;
    std::array<int, kCaptionTokens> caption{};
    Palette palette;
    double cloud_phase = 0.0;
    double cloud_rate = 0.0;  // radians of azimuth per frame

    Eigen::Matrix4d ego_matrix(int t) const;
};

struct WorldOptions {
    bool straight_road = false;
};

/// Deterministic procedural world. Throws ContractViolation for frames < 1 or
/// n_agents < 0.
ToyWorld gen_world(uint64_t seed, int frames, int n_agents, const WorldOptions& options = {});

/// Recomputes every agent track from initial positions and velocities:
/// constant velocity, reflecting off the arena bounds.
void simulate_agents(ToyWorld& world);

struct Camera {
    Eigen::Matrix3d K;
    Eigen::Matrix3d R;  // camera-from-ego rotation
    Eigen::Vector3d t;  // camera-from-ego translation
    int width = 32;
    int height = 32;
};

/// Views spaced 50 degrees apart in yaw, centered on the ego heading.
std::vector<Camera> make_rig(int views, int height, int width);

struct Projection {
    double u = 0.0;
    double v = 0.0;
    double depth = 0.0;
    bool in_front() const { return depth > 1e-6; }
};

Projection project_point(const Eigen::Vector3d& world_point, const Camera& camera, const Eigen::Matrix4d& ego_pose);

struct AgentRect {
    int agent = 0;
    double u0 = 0, v0 = 0, u1 = 0, v1 = 0;
    double depth = 0;  // of the box center
};

/// Image-space bounding rectangles of agents fully in front of the camera,
/// far to near.
std::vector<AgentRect> agent_rects(const ToyWorld& world, const Camera& camera, int t);

/// RGB image [H, W, 3] in [0, 1].
Tensor render_view(const ToyWorld& world, const Camera& camera, int t);
/// Layout canvas [H, W, 2] with values in {0, 1}: visible road, box fills.
Tensor project_layout(const ToyWorld& world, const Camera& camera, int t);

/// Structured controls for one frame.
struct ControlState {
    Tensor cameras;   // [V, 3, 7] as [K | R | t]
    Tensor boxes;     // [kMaxBoxes, 8] in the ego frame
    Tensor box_mask;  // [kMaxBoxes]
    Tensor bev;       // [kBevSize, kBevSize, 2]
    Tensor ego;       // [4, 4] ego pose relative to frame 0
    std::array<int, kCaptionTokens> caption{};
};

ControlState control_state(const ToyWorld& world, const std::vector<Camera>& rig, int t);

struct SceneConfig {
    int frames = 16;
    int views = 3;
    int height = 32;
    int width = 32;
    int n_agents = 4;
    bool straight_road = false;
};

/// Everything one scene contributes to a dataset.
struct SceneRecord {
    Tensor frames;    // [T, V, H, W, 3]
    Tensor canvases;  // [T, V, H, W, 2]
    Tensor cameras;   // [T, V, 3, 7]
    Tensor boxes;     // [T, N, 8]
    Tensor box_mask;  // [T, N]
    Tensor bev;       // [T, He, We, 2]
    Tensor ego;       // [T, 4, 4]
    std::array<int, kCaptionTokens> caption{};

    int n_frames() const { return frames.dim(0); }
    int n_views() const { return frames.dim(1); }
    ControlState control(int t) const;
    /// Canvases of frame t as [V, H, W, 2].
    Tensor canvas(int t) const;
    Tensor frame(int t) const;
};

SceneRecord make_scene(uint64_t seed, const SceneConfig& config);

}  // namespace arsim
