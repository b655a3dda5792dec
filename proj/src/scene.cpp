#include "coview/scene.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

#include "coview/rng.hpp"

namespace coview {

using nlohmann::json;

void SceneConfig::validate() const {
    if (extent <= 0.0) throw ConfigError("scene.extent must be positive");
    if (min_objects < 0 || max_objects < min_objects)
        throw ConfigError("scene object count range is empty");
    if (min_obj_side <= 0.0 || max_obj_side < min_obj_side)
        throw ConfigError("scene object side range is empty");
    if (min_agents < 2 || max_agents > 5 || max_agents < min_agents)
        throw ConfigError("scene agent count range must lie within [2,5]");
    if (placement_budget < 1) throw ConfigError("scene.placement_budget must be positive");
}

Scene generate_scene(uint64_t seed, const SceneConfig& config) {
    config.validate();
    Rng rng(seed);
    Scene scene;
    scene.id = static_cast<int64_t>(seed);
    scene.seed = seed;
    scene.extent = config.extent;

    double cx = 0.5 * config.extent, cy = 0.5 * config.extent;
    SE2 spin = SE2::make(0.0, 0.0, rng.uniform(0.0, 2.0 * M_PI));
    // rotation about the world center: conjugate by the center translation
    SE2 about_center = SE2{cx, cy, 0.0}.compose(spin).compose(SE2{-cx, -cy, 0.0});

    int n_objects = rng.uniform_int(config.min_objects, config.max_objects);
    for (int i = 0; i < n_objects; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < config.placement_budget && !placed; ++attempt) {
            double ang = rng.uniform(0.0, 2.0 * M_PI);
            double rad = config.object_radius * std::sqrt(rng.uniform());
            Rect raw;
            raw.cx = cx + rad * std::cos(ang);
            raw.cy = cy + rad * std::sin(ang);
            raw.w = rng.uniform(config.min_obj_side, config.max_obj_side);
            raw.l = rng.uniform(config.min_obj_side, config.max_obj_side);
            double height = rng.uniform(config.min_obj_height, config.max_obj_height);

            Rect boxed = transform_rect_aabb(raw, about_center);
            if (boxed.x_min() < 0.0 || boxed.x_max() > config.extent || boxed.y_min() < 0.0 ||
                boxed.y_max() > config.extent)
                continue;
            bool clash = false;
            for (const SceneObject& other : scene.objects)
                if (rects_overlap(boxed, other.box, config.object_margin)) {
                    clash = true;
                    break;
                }
            if (clash) continue;
            scene.objects.push_back({boxed, height});
            placed = true;
        }
        if (!placed)
            throw GenerationError(
                "generate_scene: could not place a non-overlapping object within budget (seed " +
                std::to_string(seed) + ", " + std::to_string(scene.objects.size()) + " placed)");
    }

    int n_agents = rng.uniform_int(config.min_agents, config.max_agents);
    for (int i = 0; i < n_agents; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < config.placement_budget && !placed; ++attempt) {
            double ang = rng.uniform(0.0, 2.0 * M_PI);
            double rad = config.agent_radius * std::sqrt(rng.uniform());
            SE2 pose = SE2::make(cx + rad * std::cos(ang), cy + rad * std::sin(ang),
                                 rng.uniform(-M_PI, M_PI));
            if (pose.x < 0.0 || pose.x > config.extent || pose.y < 0.0 || pose.y > config.extent)
                continue;
            bool clash = false;
            for (const SceneObject& obj : scene.objects)
                if (obj.box.contains({pose.x, pose.y}, config.agent_clearance)) {
                    clash = true;
                    break;
                }
            for (const SE2& other : scene.agents) {
                double dx = pose.x - other.x, dy = pose.y - other.y;
                if (std::hypot(dx, dy) < config.agent_separation) {
                    clash = true;
                    break;
                }
            }
            if (clash) continue;
            scene.agents.push_back(pose);
            placed = true;
        }
        if (!placed)
            throw GenerationError("generate_scene: could not place agent " + std::to_string(i) +
                                  " within budget (seed " + std::to_string(seed) + ")");
    }
    return scene;
}

// slab test; returns smallest t >= 0 with origin + t*dir on the box boundary
static bool ray_rect_entry(Vec2 origin, Vec2 dir, const Rect& r, double* t_entry) {
    double tmin = -1e300, tmax = 1e300;
    const double o[2] = {origin.x, origin.y};
    const double d[2] = {dir.x, dir.y};
    const double lo[2] = {r.x_min(), r.y_min()};
    const double hi[2] = {r.x_max(), r.y_max()};
    for (int ax = 0; ax < 2; ++ax) {
        if (std::fabs(d[ax]) < 1e-15) {
            if (o[ax] < lo[ax] || o[ax] > hi[ax]) return false;
        } else {
            double t1 = (lo[ax] - o[ax]) / d[ax];
            double t2 = (hi[ax] - o[ax]) / d[ax];
            if (t1 > t2) std::swap(t1, t2);
            tmin = std::max(tmin, t1);
            tmax = std::min(tmax, t2);
        }
    }
    if (tmax < tmin) return false;
    double t = tmin >= 0.0 ? tmin : tmax;  // origin inside: exit point
    if (t < 0.0) return false;
    *t_entry = t;
    return true;
}

double first_hit(const Scene& scene, Vec2 origin, Vec2 dir, double max_range, int* object_index) {
    double best = -1.0;
    int best_obj = -1;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        double t;
        if (!ray_rect_entry(origin, dir, scene.objects[i].box, &t)) continue;
        if (t > max_range) continue;
        if (best < 0.0 || t < best) {
            best = t;
            best_obj = static_cast<int>(i);
        }
    }
    if (object_index != nullptr) *object_index = best_obj;
    return best;
}

std::vector<SensorPoint> raycast_observe(const Scene& scene, int agent_index,
                                         const SensorConfig& config) {
    require(agent_index >= 0 && agent_index < scene.num_agents(),
            "raycast_observe: agent index " + std::to_string(agent_index) + " out of range");
    const SE2& pose = scene.agents[agent_index];
    std::vector<SensorPoint> points;
    for (int r = 0; r < config.rays; ++r) {
        double ang = pose.yaw + 2.0 * M_PI * r / config.rays;
        Vec2 dir{std::cos(ang), std::sin(ang)};
        int obj = -1;
        double t = first_hit(scene, {pose.x, pose.y}, dir, config.max_range, &obj);
        if (t < 0.0) continue;
        double px = pose.x + t * dir.x;
        double py = pose.y + t * dir.y;
        double height = scene.objects[obj].height;
        for (double z = config.vertical_start; z < height; z += config.vertical_step)
            points.push_back({px, py, z, obj});
    }
    return points;
}

BevGrid voxelize(std::span<const SensorPoint> points, const SE2& ego, const BevConfig& config) {
    std::vector<double> grid(static_cast<size_t>(config.h) * config.w * config.channels, 0.0);
    SE2 world_to_ego = ego.inverse();
    double band = config.band_height();
    for (const SensorPoint& p : points) {
        Vec2 local = world_to_ego.apply({p.x, p.y});
        int col = static_cast<int>(std::floor((local.x + config.half_extent_x()) / config.resolution));
        int row = static_cast<int>(std::floor((local.y + config.half_extent_y()) / config.resolution));
        if (col < 0 || col >= config.w || row < 0 || row >= config.h) continue;
        if (p.z < 0.0 || p.z >= config.max_height) continue;
        int ch = static_cast<int>(p.z / band);
        grid[(static_cast<size_t>(row) * config.w + col) * config.channels + ch] = 1.0;
    }
    BevGrid out;
    out.occupancy = tensor_of({config.h, config.w, config.channels}, std::move(grid));
    out.resolution = config.resolution;
    return out;
}

LabelGrid make_labels(const Scene& scene, const SE2& ego, const BevConfig& config) {
    SE2 world_to_ego = ego.inverse();
    LabelGrid out;
    std::vector<double> fg(static_cast<size_t>(config.h) * config.w, 0.0);
    std::vector<double> reg(static_cast<size_t>(config.h) * config.w * 4, 0.0);

    for (const SceneObject& obj : scene.objects) {
        Rect local = transform_rect_aabb(obj.box, world_to_ego);
        if (std::fabs(local.cx) > config.half_extent_x() || std::fabs(local.cy) > config.half_extent_y())
            continue;
        out.boxes.push_back(local);
    }

    for (int r = 0; r < config.h; ++r) {
        for (int c = 0; c < config.w; ++c) {
            double vx = (c + 0.5) * config.resolution - config.half_extent_x();
            double vy = (r + 0.5) * config.resolution - config.half_extent_y();
            for (const Rect& box : out.boxes) {
                if (!box.contains({vx, vy})) continue;
                size_t p = static_cast<size_t>(r) * config.w + c;
                fg[p] = 1.0;
                reg[p * 4 + 0] = box.cx - vx;
                reg[p * 4 + 1] = box.cy - vy;
                reg[p * 4 + 2] = std::log(box.w);
                reg[p * 4 + 3] = std::log(box.l);
                break;
            }
        }
    }

    double fg_count = 0.0;
    for (double v : fg) fg_count += v;
    require(fg_count < 0.5 * config.h * config.w,
            "make_labels: foreground fraction exceeds 0.5; scene geometry is out of spec");

    out.foreground = tensor_of({config.h, config.w}, std::move(fg));
    out.regression = tensor_of({config.h, config.w, 4}, std::move(reg));
    return out;
}

bool scene_has_ego_occluded_object(const Scene& scene, int ego_index, const SensorConfig& sensor,
                                   const BevConfig& bev, int min_remote_hits) {
    int n_obj = static_cast<int>(scene.objects.size());
    if (n_obj == 0) return false;
    const SE2& ego = scene.agents[ego_index];
    SE2 world_to_ego = ego.inverse();

    // objects whose center lies in the ego window (label candidates)
    std::vector<bool> in_window(n_obj, false);
    for (int i = 0; i < n_obj; ++i) {
        Rect local = transform_rect_aabb(scene.objects[i].box, world_to_ego);
        in_window[i] =
            std::fabs(local.cx) <= bev.half_extent_x() && std::fabs(local.cy) <= bev.half_extent_y();
    }

    auto window_hits = [&](int agent, std::vector<int>& hits) {
        hits.assign(n_obj, 0);
        SE2 to_agent = scene.agents[agent].inverse();
        for (const SensorPoint& p : raycast_observe(scene, agent, sensor)) {
            Vec2 local = to_agent.apply({p.x, p.y});
            if (std::fabs(local.x) <= bev.half_extent_x() && std::fabs(local.y) <= bev.half_extent_y())
                hits[p.object] += 1;
        }
    };

    std::vector<int> ego_hits;
    window_hits(ego_index, ego_hits);
    std::vector<int> remote_hits(n_obj, 0);
    for (int a = 0; a < scene.num_agents(); ++a) {
        if (a == ego_index) continue;
        std::vector<int> h;
        window_hits(a, h);
        for (int i = 0; i < n_obj; ++i) remote_hits[i] = std::max(remote_hits[i], h[i]);
    }
    for (int i = 0; i < n_obj; ++i)
        if (in_window[i] && ego_hits[i] == 0 && remote_hits[i] >= min_remote_hits) return true;
    return false;
}

std::vector<Scene> generate_suite(const SuiteConfig& config) {
    std::vector<Scene> scenes;
    uint64_t candidate = 0;
    int skipped = 0;
    while (static_cast<int>(scenes.size()) < config.count) {
        uint64_t seed = splitmix64(config.seed ^ splitmix64(candidate));
        ++candidate;
        Scene s;
        try {
            s = generate_scene(seed, config.scene);
        } catch (const GenerationError&) {
            ++skipped;
            if (skipped > 100 * std::max(config.count, 1))
                throw GenerationError("generate_suite: placement failures exhausted the budget");
            continue;
        }
        if (config.require_occlusion &&
            !scene_has_ego_occluded_object(s, config.ego_index, config.sensor, config.bev,
                                           config.min_remote_hits)) {
            ++skipped;
            if (skipped > 100 * std::max(config.count, 1))
                throw GenerationError("generate_suite: occlusion constraint rejected too many scenes");
            continue;
        }
        scenes.push_back(std::move(s));
    }
    return scenes;
}

Dataset prepare_dataset(std::span<const Scene> scenes, const SensorConfig& sensor,
                        const BevConfig& bev) {
    Dataset out;
    out.reserve(scenes.size());
    for (const Scene& s : scenes) {
        PreparedScene ps;
        ps.scene = s;
        for (int a = 0; a < s.num_agents(); ++a) {
            std::vector<SensorPoint> pts = raycast_observe(s, a, sensor);
            ps.bev.push_back(voxelize(pts, s.agents[a], bev));
            ps.labels.push_back(make_labels(s, s.agents[a], bev));
        }
        out.push_back(std::move(ps));
    }
    return out;
}

std::string scene_to_json(const Scene& scene) {
    json j;
    j["id"] = scene.id;
    j["seed"] = scene.seed;
    j["extent"] = scene.extent;
    j["agents"] = json::array();
    for (const SE2& a : scene.agents) j["agents"].push_back({{"x", a.x}, {"y", a.y}, {"yaw", a.yaw}});
    j["objects"] = json::array();
    for (const SceneObject& o : scene.objects)
        j["objects"].push_back({{"cx", o.box.cx},
                                {"cy", o.box.cy},
                                {"w", o.box.w},
                                {"l", o.box.l},
                                {"height", o.height}});
    return j.dump(2);
}

Scene scene_from_json(const std::string& text) {
    json j = json::parse(text);
    Scene s;
    s.id = j.at("id").get<int64_t>();
    s.seed = j.at("seed").get<uint64_t>();
    s.extent = j.at("extent").get<double>();
    for (const json& a : j.at("agents"))
        s.agents.push_back(SE2{a.at("x").get<double>(), a.at("y").get<double>(), a.at("yaw").get<double>()});
    for (const json& o : j.at("objects"))
        s.objects.push_back({Rect{o.at("cx").get<double>(), o.at("cy").get<double>(),
                                  o.at("w").get<double>(), o.at("l").get<double>()},
                             o.at("height").get<double>()});
    return s;
}

void save_scene(const Scene& scene, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_scene: cannot open " + path);
    out << scene_to_json(scene) << "\n";
}

Scene load_scene(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_scene: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return scene_from_json(text);
}

} // namespace coview
