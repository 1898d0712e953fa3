#include "arsim/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

constexpr double kSegment = 10.0;
constexpr double kLeadIn = 30.0;  // road behind the ego start
constexpr double kArenaMargin = 15.0;
constexpr double kNearDepth = 0.1;
constexpr double kBevCell = 1.5;
constexpr double kBevForward = 40.0;  // BEV covers x in [-8, 40), y in [-24, 24)
constexpr double kBevHalfWidth = 24.0;

double wrap_angle(double a) {
    while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
    while (a <= -std::numbers::pi) a += 2 * std::numbers::pi;
    return a;
}

std::array<float, 3> clamp01(std::array<float, 3> c) {
    for (float& v : c) v = std::clamp(v, 0.0f, 1.0f);
    return c;
}

// Pushes colors that could be mistaken for road out of the road band.
std::array<float, 3> keep_off_road(std::array<float, 3> c) {
    float worst = 0.0f;
    for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(c[i] - kRoadColor[i]));
    if (worst < 0.12f) c[2] = std::min(1.0f, kRoadColor[2] + 0.2f);
    return c;
}

Palette make_palette(int weather, int time_of_day) {
    static constexpr std::array<std::array<float, 3>, 4> sky{{
        {0.45f, 0.65f, 0.95f},  // clear
        {0.62f, 0.68f, 0.78f},  // cloudy
        {0.42f, 0.50f, 0.62f},  // rain
        {0.78f, 0.80f, 0.82f},  // fog
    }};
    static constexpr std::array<float, 4> clouds{0.35f, 0.6f, 0.45f, 0.15f};
    static constexpr std::array<std::array<float, 3>, 4> tint{{
        {1.0f, 1.0f, 1.0f},     // day
        {0.94f, 0.76f, 0.68f},  // dusk
        {0.51f, 0.54f, 0.66f},  // night
        {0.97f, 0.87f, 0.87f},  // dawn
    }};
    Palette p;
    for (int i = 0; i < 3; ++i) {
        p.sky[i] = sky[weather][i] * tint[time_of_day][i];
        p.ground[i] = std::array<float, 3>{0.32f, 0.55f, 0.25f}[i] * tint[time_of_day][i];
    }
    p.sky = keep_off_road(clamp01(p.sky));
    p.ground = keep_off_road(clamp01(p.ground));
    p.cloud_strength = clouds[weather];
    return p;
}

struct CategorySpec {
    double length, width, height;
    std::array<float, 3> color;
};

constexpr std::array<CategorySpec, kCategories> kCategorySpecs{{
    {4.2, 1.8, 1.5, {0.80f, 0.15f, 0.15f}},
    {7.0, 2.5, 3.0, {0.15f, 0.25f, 0.80f}},
    {0.7, 0.7, 1.8, {0.90f, 0.80f, 0.20f}},
    {1.8, 0.7, 1.7, {0.75f, 0.20f, 0.70f}},
}};

Eigen::Matrix4d pose_matrix(const Pose2& p) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    const double c = std::cos(p.heading), s = std::sin(p.heading);
    m(0, 0) = c;
    m(0, 1) = -s;
    m(1, 0) = s;
    m(1, 1) = c;
    m(0, 3) = p.position.x();
    m(1, 3) = p.position.y();
    return m;
}

std::array<Eigen::Vector3d, 8> box_corners(const Agent& a, const AgentState& s) {
    const Eigen::Vector2d f(std::cos(s.heading), std::sin(s.heading));
    const Eigen::Vector2d l(-f.y(), f.x());
    std::array<Eigen::Vector3d, 8> out;
    int k = 0;
    for (int i : {-1, 1}) {
        for (int j : {-1, 1}) {
            const Eigen::Vector2d xy = s.position + f * (0.5 * i * a.length) + l * (0.5 * j * a.width);
            out[k++] = Eigen::Vector3d(xy.x(), xy.y(), 0.0);
            out[k++] = Eigen::Vector3d(xy.x(), xy.y(), a.height);
        }
    }
    return out;
}

// Shared rasterizer for render_view and project_layout so both see exactly
// the same geometry.
void rasterize(const ToyWorld& world, const Camera& cam, int t, float* rgb, float* canvas) {
    if (t < 0 || t >= world.frames) {
        throw ContractViolation("frame " + std::to_string(t) + " outside world of " + std::to_string(world.frames) +
                                " frames");
    }
    const int H = cam.height, W = cam.width;
    const Eigen::Matrix4d M = world.ego_matrix(t);
    const Eigen::Matrix3d Rwe = M.block<3, 3>(0, 0);
    const Eigen::Vector3d center_ego = -cam.R.transpose() * cam.t;
    const Eigen::Vector3d center = Rwe * center_ego + M.block<3, 1>(0, 3);
    const Eigen::Matrix3d ray_rot = Rwe * cam.R.transpose() * cam.K.inverse();
    const float half_width = static_cast<float>(world.road.width / 2);
    const auto& pal = world.palette;

    std::vector<uint8_t> road(static_cast<size_t>(H) * W, 0);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const Eigen::Vector3d d = ray_rot * Eigen::Vector3d(j + 0.5, i + 0.5, 1.0);
            std::array<float, 3> c;
            if (d.z() < -1e-9) {
                const double s = -center.z() / d.z();
                const Eigen::Vector3d g = center + s * d;
                if (world.road.distance(g.head<2>()) < half_width) {
                    road[static_cast<size_t>(i) * W + j] = 1;
                    c = kRoadColor;
                } else {
                    c = pal.ground;
                }
            } else {
                const double az = std::atan2(d.y(), d.x());
                const double cloud = 0.5 + 0.5 * std::sin(5.0 * (az - world.cloud_rate * t) + world.cloud_phase);
                const float mix = pal.cloud_strength * static_cast<float>(cloud);
                for (int ch = 0; ch < 3; ++ch) c[ch] = pal.sky[ch] + (0.95f * (pal.sky[ch] + 0.4f) - pal.sky[ch]) * mix;
                c = keep_off_road(clamp01(c));
            }
            if (rgb) std::copy(c.begin(), c.end(), rgb + (static_cast<size_t>(i) * W + j) * 3);
        }
    }

    std::vector<uint8_t> boxes(static_cast<size_t>(H) * W, 0);
    for (const AgentRect& r : agent_rects(world, cam, t)) {
        const int i0 = std::max(0, static_cast<int>(std::ceil(r.v0 - 0.5)));
        const int i1 = std::min(H - 1, static_cast<int>(std::floor(r.v1 - 0.5)));
        const int j0 = std::max(0, static_cast<int>(std::ceil(r.u0 - 0.5)));
        const int j1 = std::min(W - 1, static_cast<int>(std::floor(r.u1 - 0.5)));
        const auto& color = world.agents[static_cast<size_t>(r.agent)].color;
        for (int i = i0; i <= i1; ++i) {
            for (int j = j0; j <= j1; ++j) {
                boxes[static_cast<size_t>(i) * W + j] = 1;
                if (rgb) std::copy(color.begin(), color.end(), rgb + (static_cast<size_t>(i) * W + j) * 3);
            }
        }
    }
    if (canvas) {
        for (size_t p = 0; p < road.size(); ++p) {
            canvas[p * 2] = (road[p] && !boxes[p]) ? 1.0f : 0.0f;
            canvas[p * 2 + 1] = boxes[p] ? 1.0f : 0.0f;
        }
    }
}

}  // namespace

double Road::distance(const Eigen::Vector2d& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < centerline.size(); ++i) {
        const Eigen::Vector2d a = centerline[i], ab = centerline[i + 1] - a;
        const double u = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
        best = std::min(best, (a + u * ab - p).norm());
    }
    return best;
}

Eigen::Vector2d Road::point_at(double s) const {
    for (size_t i = 0; i + 1 < centerline.size(); ++i) {
        const Eigen::Vector2d seg = centerline[i + 1] - centerline[i];
        const double len = seg.norm();
        if (s <= len || i + 2 == centerline.size()) return centerline[i] + seg * (s / len);
        s -= len;
    }
    return centerline.front();
}

double Road::length() const {
    double total = 0.0;
    for (size_t i = 0; i + 1 < centerline.size(); ++i) total += (centerline[i + 1] - centerline[i]).norm();
    return total;
}

Eigen::Matrix4d ToyWorld::ego_matrix(int t) const { return pose_matrix(ego.at(static_cast<size_t>(t))); }

ToyWorld gen_world(uint64_t seed, int frames, int n_agents, const WorldOptions& options) {
    if (frames < 1) throw ContractViolation("gen_world: frames must be >= 1, got " + std::to_string(frames));
    if (n_agents < 0) throw ContractViolation("gen_world: n_agents must be >= 0, got " + std::to_string(n_agents));
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    ToyWorld w;
    w.seed = seed;
    w.frames = frames;
    const int weather = pick(0, 3);
    const int time_of_day = pick(0, 3);
    const int curvature = options.straight_road ? 0 : pick(0, 3);
    const int density = std::min(3, n_agents / 2);
    w.caption = {weather, 4 + density, 8 + curvature, 12 + time_of_day};
    w.palette = make_palette(weather, time_of_day);
    w.ego_speed = uni(0.6, 1.0);
    w.cloud_phase = uni(0.0, 2 * std::numbers::pi);
    w.cloud_rate = uni(0.03, 0.07) * (pick(0, 1) ? 1.0 : -1.0);

    // Road: a straight lead-in through the origin, then 10-unit segments
    // with bounded heading changes.
    static constexpr std::array<double, 4> max_turn{0.0, 0.08, 0.16, 0.25};
    w.ego_start_s = kLeadIn;
    const double needed = kLeadIn + w.ego_speed * frames + 70.0;
    w.road.centerline = {Eigen::Vector2d(-kLeadIn, 0.0), Eigen::Vector2d(kSegment, 0.0)};
    double heading = 0.0, built = kLeadIn + kSegment;
    while (built < needed) {
        heading += uni(-max_turn[curvature], max_turn[curvature]);
        w.road.centerline.push_back(w.road.centerline.back() + kSegment * Eigen::Vector2d(std::cos(heading), std::sin(heading)));
        built += kSegment;
    }

    auto heading_at = [&](double s) {
        const Eigen::Vector2d d = w.road.point_at(s + 2.0) - w.road.point_at(s - 2.0);
        return std::atan2(d.y(), d.x());
    };
    for (int t = 0; t < frames; ++t) {
        const double s = w.ego_start_s + w.ego_speed * t;
        w.ego.push_back({w.road.point_at(s), heading_at(s)});
    }

    Eigen::Vector2d lo = w.road.centerline.front(), hi = lo;
    for (const auto& p : w.road.centerline) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    w.arena_min = lo.array() - kArenaMargin;
    w.arena_max = hi.array() + kArenaMargin;

    std::discrete_distribution<int> category_dist({0.55, 0.15, 0.15, 0.15});
    for (int i = 0; i < n_agents; ++i) {
        Agent a;
        a.category = category_dist(rng);
        const CategorySpec& spec = kCategorySpecs[static_cast<size_t>(a.category)];
        a.length = spec.length;
        a.width = spec.width;
        a.height = spec.height;
        for (int ch = 0; ch < 3; ++ch) a.color[ch] = spec.color[ch] + static_cast<float>(uni(-0.1, 0.1));
        a.color = keep_off_road(clamp01(a.color));

        double s, lateral, speed, dir;
        if (a.category == static_cast<int>(Category::Pedestrian)) {
            s = w.ego_start_s + uni(0.0, 40.0);
            lateral = (pick(0, 1) ? 1.0 : -1.0) * uni(5.0, 7.0);
            speed = uni(0.05, 0.3);
            dir = uni(-std::numbers::pi, std::numbers::pi);
        } else {
            s = w.ego_start_s + uni(-5.0, 45.0);
            const bool oncoming = pick(0, 1) == 1;
            lateral = (oncoming ? 2.0 : -2.0) + uni(-0.4, 0.4);
            const double vmax = a.category == static_cast<int>(Category::Cyclist) ? 0.5 : (a.category == 1 ? 0.9 : 1.2);
            speed = uni(0.2, vmax);
            dir = heading_at(s) + (oncoming ? std::numbers::pi : 0.0);
        }
        const double h = heading_at(s);
        a.position = w.road.point_at(s) + lateral * Eigen::Vector2d(-std::sin(h), std::cos(h));
        if (a.position.norm() < 6.0) a.position += 8.0 * Eigen::Vector2d(std::cos(h), std::sin(h));
        a.velocity = speed * Eigen::Vector2d(std::cos(dir), std::sin(dir));
        w.agents.push_back(a);
    }
    simulate_agents(w);
    return w;
}

void simulate_agents(ToyWorld& world) {
    world.tracks.assign(world.agents.size(), {});
    for (size_t i = 0; i < world.agents.size(); ++i) {
        Eigen::Vector2d p = world.agents[i].position, v = world.agents[i].velocity;
        auto heading = [&]() { return v.squaredNorm() > 0 ? std::atan2(v.y(), v.x()) : 0.0; };
        auto& track = world.tracks[i];
        track.push_back({p, heading()});
        for (int t = 1; t < world.frames; ++t) {
            p += v;
            for (int ax = 0; ax < 2; ++ax) {
                if (p[ax] < world.arena_min[ax]) {
                    p[ax] = 2 * world.arena_min[ax] - p[ax];
                    v[ax] = -v[ax];
                } else if (p[ax] > world.arena_max[ax]) {
                    p[ax] = 2 * world.arena_max[ax] - p[ax];
                    v[ax] = -v[ax];
                }
            }
            track.push_back({p, heading()});
        }
    }
}

std::vector<Camera> make_rig(int views, int height, int width) {
    if (views < 1 || height < 1 || width < 1) throw ContractViolation("make_rig: views and image size must be positive");
    std::vector<Camera> rig;
    const double focal = 0.8 * width;
    const double pitch = -8.0 * std::numbers::pi / 180.0;
    const Eigen::Vector3d mount(1.0, 0.0, 1.5);
    for (int v = 0; v < views; ++v) {
        const double yaw = (0.5 * (views - 1) - v) * 50.0 * std::numbers::pi / 180.0;
        const Eigen::Vector3d fwd(std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch), std::sin(pitch));
        const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
        const Eigen::Vector3d down = fwd.cross(right);
        Camera c;
        c.R.row(0) = right;
        c.R.row(1) = down;
        c.R.row(2) = fwd;
        c.t = -c.R * mount;
        c.K << focal, 0, width / 2.0, 0, focal, height / 2.0, 0, 0, 1;
        c.width = width;
        c.height = height;
        rig.push_back(c);
    }
    return rig;
}

Projection project_point(const Eigen::Vector3d& world_point, const Camera& camera, const Eigen::Matrix4d& ego_pose) {
    const Eigen::Matrix3d Rwe = ego_pose.block<3, 3>(0, 0);
    const Eigen::Vector3d ego_point = Rwe.transpose() * (world_point - ego_pose.block<3, 1>(0, 3));
    const Eigen::Vector3d pc = camera.R * ego_point + camera.t;
    Projection p;
    p.depth = pc.z();
    if (std::abs(pc.z()) < 1e-12) return p;
    const Eigen::Vector3d uv = camera.K * (pc / pc.z());
    p.u = uv.x();
    p.v = uv.y();
    return p;
}

std::vector<AgentRect> agent_rects(const ToyWorld& world, const Camera& camera, int t) {
    const Eigen::Matrix4d M = world.ego_matrix(t);
    std::vector<AgentRect> rects;
    for (size_t i = 0; i < world.agents.size(); ++i) {
        const Agent& a = world.agents[i];
        const AgentState& s = world.tracks[i][static_cast<size_t>(t)];
        AgentRect r;
        r.agent = static_cast<int>(i);
        r.u0 = r.v0 = std::numeric_limits<double>::infinity();
        r.u1 = r.v1 = -std::numeric_limits<double>::infinity();
        bool visible = true;
        for (const auto& corner : box_corners(a, s)) {
            const Projection p = project_point(corner, camera, M);
            if (p.depth < kNearDepth) {
                visible = false;
                break;
            }
            r.u0 = std::min(r.u0, p.u);
            r.u1 = std::max(r.u1, p.u);
            r.v0 = std::min(r.v0, p.v);
            r.v1 = std::max(r.v1, p.v);
        }
        if (!visible) continue;
        if (r.u1 < 0 || r.v1 < 0 || r.u0 > camera.width || r.v0 > camera.height) continue;
        r.depth = project_point(Eigen::Vector3d(s.position.x(), s.position.y(), a.height / 2), camera, M).depth;
        rects.push_back(r);
    }
    std::stable_sort(rects.begin(), rects.end(), [](const AgentRect& a, const AgentRect& b) { return a.depth > b.depth; });
    return rects;
}

Tensor render_view(const ToyWorld& world, const Camera& camera, int t) {
    Tensor img = Tensor::zeros({camera.height, camera.width, 3});
    rasterize(world, camera, t, img.ptr(), nullptr);
    return img;
}

Tensor project_layout(const ToyWorld& world, const Camera& camera, int t) {
    Tensor canvas = Tensor::zeros({camera.height, camera.width, kCanvasChannels});
    rasterize(world, camera, t, nullptr, canvas.ptr());
    return canvas;
}

ControlState control_state(const ToyWorld& world, const std::vector<Camera>& rig, int t) {
    if (static_cast<int>(world.agents.size()) > kMaxBoxes) {
        throw ContractViolation("control_state: " + std::to_string(world.agents.size()) + " agents exceed the " +
                                std::to_string(kMaxBoxes) + "-box limit");
    }
    ControlState cs;
    const int V = static_cast<int>(rig.size());
    cs.cameras = Tensor::zeros({V, 3, 7});
    for (int v = 0; v < V; ++v) {
        float* p = cs.cameras.ptr() + v * 21;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                p[r * 7 + c] = static_cast<float>(rig[v].K(r, c));
                p[r * 7 + 3 + c] = static_cast<float>(rig[v].R(r, c));
            }
            p[r * 7 + 6] = static_cast<float>(rig[v].t(r));
        }
    }

    const Pose2& ego = world.ego.at(static_cast<size_t>(t));
    const Eigen::Matrix4d M = world.ego_matrix(t);
    cs.ego = Tensor::zeros({4, 4});
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) cs.ego.data()[r * 4 + c] = static_cast<float>(M(r, c));

    const Eigen::Matrix2d to_ego = M.block<2, 2>(0, 0).transpose();
    cs.boxes = Tensor::zeros({kMaxBoxes, kBoxFields});
    cs.box_mask = Tensor::zeros({kMaxBoxes});
    std::vector<std::pair<Eigen::Vector2d, const Agent*>> local;
    for (size_t i = 0; i < world.agents.size(); ++i) {
        const Agent& a = world.agents[i];
        const AgentState& s = world.tracks[i][static_cast<size_t>(t)];
        const Eigen::Vector2d p = to_ego * (s.position - ego.position);
        const float row[kBoxFields] = {static_cast<float>(p.x()), static_cast<float>(p.y()), static_cast<float>(a.height / 2),
                                       static_cast<float>(wrap_angle(s.heading - ego.heading)), static_cast<float>(a.length),
                                       static_cast<float>(a.width), static_cast<float>(a.height),
                                       static_cast<float>(a.category)};
        std::copy(row, row + kBoxFields, cs.boxes.ptr() + i * kBoxFields);
        cs.box_mask.data()[i] = 1.0f;
    }

    cs.bev = Tensor::zeros({kBevSize, kBevSize, kBevChannels});
    const Eigen::Matrix2d to_world = M.block<2, 2>(0, 0);
    for (int i = 0; i < kBevSize; ++i) {
        for (int j = 0; j < kBevSize; ++j) {
            const Eigen::Vector2d local_pt(kBevForward - (i + 0.5) * kBevCell, kBevHalfWidth - (j + 0.5) * kBevCell);
            const Eigen::Vector2d wp = to_world * local_pt + ego.position;
            float* cell = cs.bev.ptr() + (i * kBevSize + j) * kBevChannels;
            cell[0] = world.road.distance(wp) < world.road.width / 2 ? 1.0f : 0.0f;
            for (size_t a = 0; a < world.agents.size(); ++a) {
                const AgentState& s = world.tracks[a][static_cast<size_t>(t)];
                const Eigen::Vector2d d = wp - s.position;
                const double along = d.x() * std::cos(s.heading) + d.y() * std::sin(s.heading);
                const double across = -d.x() * std::sin(s.heading) + d.y() * std::cos(s.heading);
                const bool inside = std::abs(along) <= world.agents[a].length / 2 + kBevCell / 2 &&
                                    std::abs(across) <= world.agents[a].width / 2 + kBevCell / 2;
                if (inside) cell[1] = 1.0f;
            }
        }
    }
    cs.caption = world.caption;
    return cs;
}

namespace {

Tensor slice_first(const Tensor& t, int index) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    const int64_t n = shape_numel(s);
    std::vector<float> v(t.data().begin() + index * n, t.data().begin() + (index + 1) * n);
    return Tensor::from(std::move(s), std::move(v));
}

}  // namespace

ControlState SceneRecord::control(int t) const {
    if (t < 0 || t >= n_frames()) throw ContractViolation("SceneRecord::control: frame " + std::to_string(t) + " out of range");
    ControlState cs;
    cs.cameras = slice_first(cameras, t);
    cs.boxes = slice_first(boxes, t);
    cs.box_mask = slice_first(box_mask, t);
    cs.bev = slice_first(bev, t);
    cs.ego = slice_first(ego, t);
    cs.caption = caption;
    return cs;
}

Tensor SceneRecord::canvas(int t) const { return slice_first(canvases, t); }
Tensor SceneRecord::frame(int t) const { return slice_first(frames, t); }

SceneRecord make_scene(uint64_t seed, const SceneConfig& config) {
    const ToyWorld world = gen_world(seed, config.frames, config.n_agents, {config.straight_road});
    const auto rig = make_rig(config.views, config.height, config.width);
    const int T = config.frames, V = config.views, H = config.height, W = config.width;
    SceneRecord rec;
    rec.frames = Tensor::zeros({T, V, H, W, 3});
    rec.canvases = Tensor::zeros({T, V, H, W, kCanvasChannels});
    rec.cameras = Tensor::zeros({T, V, 3, 7});
    rec.boxes = Tensor::zeros({T, kMaxBoxes, kBoxFields});
    rec.box_mask = Tensor::zeros({T, kMaxBoxes});
    rec.bev = Tensor::zeros({T, kBevSize, kBevSize, kBevChannels});
    rec.ego = Tensor::zeros({T, 4, 4});
    rec.caption = world.caption;
    const int64_t img = static_cast<int64_t>(H) * W;
    for (int t = 0; t < T; ++t) {
        for (int v = 0; v < V; ++v) {
            const int64_t fv = static_cast<int64_t>(t) * V + v;
            rasterize(world, rig[static_cast<size_t>(v)], t, rec.frames.ptr() + fv * img * 3,
                      rec.canvases.ptr() + fv * img * kCanvasChannels);
        }
        const ControlState cs = control_state(world, rig, t);
        auto put = [t](Tensor& dst, const Tensor& src) {
            std::copy(src.data().begin(), src.data().end(), dst.ptr() + static_cast<int64_t>(t) * src.numel());
        };
        put(rec.cameras, cs.cameras);
        put(rec.boxes, cs.boxes);
        put(rec.box_mask, cs.box_mask);
        put(rec.bev, cs.bev);
        put(rec.ego, cs.ego);
    }
    return rec;
}

}  // namespace arsim
