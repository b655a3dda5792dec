#pragma once

#include <span>
#include <vector>

#include "coview/bench.hpp"
#include "coview/mvmi.hpp"
#include "coview/net.hpp"
#include "coview/scene.hpp"

namespace coview {

struct LossConfig {
    double alpha = 0.2;    // supervised vs MI trade-off
    double lambda = 0.1;   // MI loss rescale
    double beta_g = 0.5;
    double beta_l = 0.5;
    double lr_pipeline = 1e-3;
    double lr_mvmi = 1e-4;
    std::vector<int> milestones;  // epochs at which the rate decays
    double gamma = 0.5;

    void validate() const;
};

struct LossBreakdown {
    double cls = 0.0;
    double reg = 0.0;
    double gmi = 0.0;
    double lmi = 0.0;
    double mi = 0.0;
    double total = 0.0;
};

// total = (1-alpha)(cls+reg) + alpha*mi,  mi = lambda*(beta_g*gmi + beta_l*lmi)
LossBreakdown total_loss(double cls, double reg, double gmi, double lmi, const LossConfig& cfg);

struct DownstreamLoss {
    Tensor cls_loss;  // scalar
    Tensor reg_loss;  // scalar
};

// class-balanced binary cross-entropy over voxels plus smooth-L1 on the
// regression channels at foreground voxels
DownstreamLoss downstream_loss(Graph& g, const HeadOutput& head, const LabelGrid& labels);

// gamma^(number of milestones at or before step)
double lr_schedule(int step, std::span<const int> milestones, double gamma);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// one update from the accumulated gradients; group_lrs indexed by entry group
void adam_step(ParamStore& store, std::span<const double> group_lrs, int t,
               const AdamConfig& cfg = {});

struct TrainConfig {
    CollabMode mode = CollabMode::Intermediate;
    int epochs = 30;
    int batch = 4;
    LossConfig loss;
    NetConfig net;
    MvmiConfig mvmi;
    uint64_t seed = 1;
    BevConfig bev;  // geometry for early aggregation and box decoding
};

struct EpochLog {
    int epoch = 0;
    LossBreakdown mean;
    double lr_mult = 1.0;
    double wall_seconds = 0.0;
};

struct TrainResult {
    ParamStore params;
    std::vector<EpochLog> log;
};

// Joint optimization of the pipeline and the MI discriminators. Each
// iteration samples `batch` scenes plus `batch` disjoint negative scenes,
// runs encode/align/fuse/decode for every ego, forms the per-ego pair
// batches, and takes one Adam step per parameter group. Deterministic in
// (dataset order, config, seed).
TrainResult train(const Dataset& dataset, const TrainConfig& cfg);

// one structured text record (JSON) per epoch
std::string train_log_to_jsonl(std::span<const EpochLog> log);

} // namespace coview
