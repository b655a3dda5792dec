#pragma once

#include <map>
#include <string>
#include <vector>

#include "coview/mvmi.hpp"
#include "coview/net.hpp"
#include "coview/rng.hpp"
#include "coview/scene.hpp"

namespace coview {

enum class CollabMode { None, Early, Late, Intermediate };

std::string collab_mode_name(CollabMode mode);
CollabMode collab_mode_from_name(const std::string& name);

struct ModeSpec {
    CollabMode mode = CollabMode::None;
    int ratio_exponent = 0;   // transmit 1/2^n of the feature values
    double noise_std = 0.0;   // pose noise applied to sender poses, meters

    void validate() const;
};

struct EvalReport {
    ModeSpec spec;
    double ap50 = 0.0;
    double ap70 = 0.0;
    long long comm_bytes = 0;
    int scenes = 0;
    uint64_t seed = 0;
};

struct EvalConfig {
    NetConfig net;
    BevConfig bev;
    int ego_index = 0;
    int bytes_per_value = 4;  // bandwidth accounting convention
};

// nearest-neighbor warp of every agent's binary grid into the ego frame,
// merged by elementwise max
BevGrid early_aggregate(std::span<const BevGrid> grids, std::span<const SE2> poses, int ego,
                        const BevConfig& bev);

DetectionOutput run_no_collab(const PreparedScene& scene, int ego, const ParamStore& params,
                              const EvalConfig& cfg);
DetectionOutput run_early_collab(const PreparedScene& scene, int ego, const ParamStore& params,
                                 const EvalConfig& cfg, std::span<const SE2> poses);
// every agent detects alone, boxes are re-boxed into the ego frame and merged
// by NMS; comm_bytes_out (optional) receives the transmitted box payload size
DetectionOutput run_late_collab(const PreparedScene& scene, const ParamStore& params,
                                const EvalConfig& cfg, std::span<const SE2> poses,
                                long long* comm_bytes_out = nullptr);
DetectionOutput run_intermediate(const PreparedScene& scene, int ego, const ParamStore& params,
                                 const EvalConfig& cfg, std::span<const SE2> poses);

// global score-sorted greedy matching, all-point area under the PR curve
double compute_ap(const std::vector<std::vector<ScoredBox>>& detections,
                  const std::vector<std::vector<Rect>>& ground_truth, double iou_threshold);

// senders * H*W*(C/2^n) * bytes_per_value; requires divisibility
long long comm_volume(int h, int w, int c, int bytes_per_value, int ratio_exponent, int senders);

// independent Gaussian noise on x and y; yaw untouched
SE2 inject_pose_noise(const SE2& pose, double std_meters, Rng& rng);

EvalReport evaluate(const ParamStore& params, const ModeSpec& spec, const Dataset& test,
                    const EvalConfig& cfg, uint64_t seed);

// one trained checkpoint per mode name ("none", "early", "intermediate");
// "late" reuses the "none" checkpoint
std::vector<EvalReport> run_benchmark(const std::map<std::string, const ParamStore*>& checkpoints,
                                      const std::vector<ModeSpec>& modes, const Dataset& test,
                                      const EvalConfig& cfg, std::span<const uint64_t> seeds);

// comma-separated sweep table:
// mode,ratio_denominator,noise_std,seed,ap50,ap70,comm_bytes
std::string sweep_table_csv(std::span<const EvalReport> reports);

// post-softmax fusion weight maps for one scene and ego, keyed by sender
std::map<int, Tensor> weight_heatmaps(const PreparedScene& scene, int ego,
                                      const ParamStore& params, const EvalConfig& cfg);

} // namespace coview
