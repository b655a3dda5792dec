#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "coview/geometry.hpp"
#include "coview/tensor.hpp"

namespace coview {

struct SceneObject {
    Rect box;       // axis-aligned in the world frame
    double height;  // meters
};

struct SceneConfig {
    double extent = 64.0;  // square world side, meters
    int min_objects = 3;
    int max_objects = 5;
    // re-boxing after the scene rotation can inflate a side by sqrt(2); these
    // bounds keep worst-case foreground under half of a 16 m label window
    double min_obj_side = 1.5;
    double max_obj_side = 3.0;
    double min_obj_height = 1.0;
    double max_obj_height = 3.0;
    double object_radius = 10.0;  // objects placed within this disc around the world center
    double object_margin = 0.2;   // minimum gap between object boxes
    int min_agents = 2;
    int max_agents = 5;
    double agent_radius = 6.0;      // agents placed within this disc
    double agent_separation = 2.0;  // minimum distance between agents
    double agent_clearance = 0.4;   // minimum distance from agents to object boxes
    int placement_budget = 2000;    // rejection-sampling attempts per entity

    void validate() const;
};

struct Scene {
    int64_t id = 0;
    uint64_t seed = 0;
    double extent = 0.0;
    std::vector<SceneObject> objects;
    std::vector<SE2> agents;

    int num_agents() const { return static_cast<int>(agents.size()); }
};

// Deterministic in (seed, config). Samples axis-aligned boxes, applies one
// scene-level rotation about the world center to their corners, re-boxes the
// rotated corners, and rejection-samples until boxes are pairwise
// non-overlapping and agents have clearance.
Scene generate_scene(uint64_t seed, const SceneConfig& config);

struct SensorConfig {
    int rays = 360;
    double max_range = 28.0;
    double vertical_step = 0.5;    // spacing of vertical samples on a hit surface
    double vertical_start = 0.25;  // height of the lowest sample
};

struct SensorPoint {
    double x = 0.0;  // world frame, meters
    double y = 0.0;
    double z = 0.0;
    int object = -1;  // index of the hit object
};

// Casts `rays` evenly spaced rays from the agent pose; each ray reports only
// the first object-boundary intersection (hard occlusion). A hit emits one
// point per vertical sample below the object's height.
std::vector<SensorPoint> raycast_observe(const Scene& scene, int agent_index,
                                         const SensorConfig& config);

// first intersection of the ray with any object boundary; returns distance or
// a negative value when nothing is hit within max_range
double first_hit(const Scene& scene, Vec2 origin, Vec2 dir, double max_range, int* object_index);

struct BevConfig {
    int h = 32;
    int w = 32;
    int channels = 4;
    double resolution = 0.5;   // meters per voxel
    double max_height = 3.0;   // vertical extent covered by the channel bands

    double band_height() const { return max_height / channels; }
    double half_extent_x() const { return 0.5 * w * resolution; }
    double half_extent_y() const { return 0.5 * h * resolution; }
};

struct BevGrid {
    Tensor occupancy;  // [h, w, channels], values in {0, 1}
    double resolution = 0.0;
};

// Points are transformed into the ego frame, cropped to the grid window, and
// binned; a cell reads 1 if at least one point falls in it.
BevGrid voxelize(std::span<const SensorPoint> points, const SE2& ego, const BevConfig& config);

struct LabelGrid {
    Tensor foreground;  // [h, w] in {0, 1}
    Tensor regression;  // [h, w, 4]: (dx, dy, log w, log l), valid where foreground=1
    std::vector<Rect> boxes;  // ego-frame ground-truth boxes (re-boxed AABBs)
};

// Ground truth for the ego agent: objects are re-boxed into ego-frame AABBs;
// boxes whose center is outside the grid window are dropped.
LabelGrid make_labels(const Scene& scene, const SE2& ego, const BevConfig& config);

// true when some object inside the ego's window yields no ego hits while some
// other agent sees it with at least `min_remote_hits` in-window points
bool scene_has_ego_occluded_object(const Scene& scene, int ego_index, const SensorConfig& sensor,
                                   const BevConfig& bev, int min_remote_hits = 3);

struct SuiteConfig {
    int count = 0;
    uint64_t seed = 0;
    SceneConfig scene;
    SensorConfig sensor;
    BevConfig bev;
    bool require_occlusion = true;
    int ego_index = 0;
    int min_remote_hits = 3;
};

// Deterministic scene suite; when require_occlusion is set, candidate seeds
// that fail scene_has_ego_occluded_object are skipped.
std::vector<Scene> generate_suite(const SuiteConfig& config);

// scene plus cached per-agent observations and ground truth
struct PreparedScene {
    Scene scene;
    std::vector<BevGrid> bev;      // one per agent, in that agent's frame
    std::vector<LabelGrid> labels; // one per agent
};

using Dataset = std::vector<PreparedScene>;

Dataset prepare_dataset(std::span<const Scene> scenes, const SensorConfig& sensor,
                        const BevConfig& bev);

// self-describing structured text record (JSON), one scene per file
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);

} // namespace coview
