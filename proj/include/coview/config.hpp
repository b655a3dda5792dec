#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coview/bench.hpp"
#include "coview/mvmi.hpp"
#include "coview/net.hpp"
#include "coview/scene.hpp"
#include "coview/trainer.hpp"

namespace coview {

struct DataConfig {
    int train_scenes = 200;
    int test_scenes = 50;
    uint64_t suite_seed = 7;
    bool require_occlusion = true;
    int ego_index = 0;
    int min_remote_hits = 3;
};

struct TrainSettings {
    int epochs = 30;
    int batch = 4;
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct SweepConfig {
    std::vector<int> ratio_exponents = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<double> noise_stds = {0.0, 0.2, 0.4};
};

struct ExperimentConfig {
    SceneConfig scene;
    SensorConfig sensor;
    BevConfig bev;
    NetConfig net;
    MvmiConfig mvmi;
    LossConfig loss;
    TrainSettings train;
    DataConfig data;
    SweepConfig sweep;
    int bytes_per_value = 4;
    std::string out_dir = "out";

    void validate() const;
};

// Strict parser over a JSON document: defaults fill absent keys, unknown keys
// and type mismatches are rejected with their full key path.
ExperimentConfig parse_config(const std::string& text);
std::string emit_config(const ExperimentConfig& cfg);  // canonical form

// "dotted.path=value" with JSON-literal values; strings may be unquoted
ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment);

// experiment plumbing shared by the CLI and the acceptance harness
std::vector<Scene> build_suite(const ExperimentConfig& cfg, bool test_split);
Dataset build_dataset(const ExperimentConfig& cfg, bool test_split);
TrainConfig make_train_config(const ExperimentConfig& cfg, CollabMode mode, double alpha,
                              int ratio_exponent, uint64_t seed);
EvalConfig make_eval_config(const ExperimentConfig& cfg);

} // namespace coview
