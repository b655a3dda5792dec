#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coview/net.hpp"
#include "coview/params.hpp"

namespace coview {

struct MvmiConfig {
    int proj_dim = 64;      // collaborative-view projection size
    int global_width = 128; // global scoring head width
    int local_width = 64;   // local 1x1 stack width

    void validate() const;
};

// global discriminator (projection + scoring head) and local discriminator
// parameters; the two sets are disjoint
void init_mvmi_params(ParamStore& store, const MvmiConfig& cfg, const NetConfig& net, Rng& rng);

struct BoundMvmi {
    Tensor projw, projb;
    Tensor g1w, g1b, g2w, g2b, g3w, g3b;
    Tensor l1w, l1b, l2w, l2b;
};

BoundMvmi make_bound_mvmi(const ParamStore& store, const GraphBinding& binding);

// (individual view, collaborative view) pair; for negatives the individual
// view comes from a disjoint scene while the collaborative view keeps its own
struct ViewPair {
    int sender = -1;
    int64_t individual_scene = 0;
    int64_t collab_scene = 0;
    FeatureMap individual;
    FeatureMap collab;
};

// per-scene inputs to pair sampling
struct SceneViews {
    int64_t scene_id = 0;
    std::vector<FeatureMap> aligned;  // one per sender, any order
    FeatureMap collab;                // ego's collaborative view (unused for negatives)
    bool has_collab = false;
};

struct PairBatch {
    int ego = -1;
    int num_senders = 0;
    std::vector<ViewPair> positives;  // N*B, sender-major after sorting by scene id
    std::vector<ViewPair> negatives;  // N*B
};

// Builds exactly N*B positive and N*B negative pairs. Scene id sets must be
// disjoint; the assignment of negative scenes to batch scenes is a seeded
// permutation, so the result is independent of caller ordering.
PairBatch sample_pairs(std::span<const SceneViews> batch, std::span<const SceneViews> negatives,
                       int ego, uint64_t seed);

// flatten -> linear projection of the collaborative view
Tensor project(Graph& g, const BoundMvmi& d, const FeatureMap& collab);

// concat(flatten(individual), project(collab)) -> scoring head -> scalar
Tensor score_global(Graph& g, const BoundMvmi& d, const FeatureMap& individual,
                    const FeatureMap& collab);

// one score per pair, stacked: [k, 1]; projections are shared across pairs
// that reference the same collaborative view
Tensor score_global_batch(Graph& g, const BoundMvmi& d, std::span<const ViewPair> pairs);

// per-voxel scores: each voxel's channel vector is paired with the projected
// collaborative view and scored by the 1x1 stack
Tensor score_local(Graph& g, const BoundMvmi& d, const FeatureMap& individual,
                   const FeatureMap& collab);  // [H, W]

// mean over positives of -softplus(-t) minus mean over negatives of softplus(t)
double estimate_js_mi(std::span<const double> pos_scores, std::span<const double> neg_scores);
Tensor estimate_js_mi(Graph& g, const Tensor& pos_scores, const Tensor& neg_scores);

// local estimate over explicit pair lists: score maps per pair, estimator
// averaged over voxels (equivalently over the flattened maps)
Tensor estimate_local_mi(Graph& g, const BoundMvmi& d,
                         std::span<const ViewPair> positives,
                         std::span<const ViewPair> negatives);

struct MvmiTerms {
    Tensor gmi_loss;   // scalar graph tensor, L_GMI
    Tensor lmi_loss;   // scalar graph tensor, L_LMI
    Tensor combined;   // beta_g * (-L_GMI) + beta_l * (-L_LMI), the maximized estimate
    double gmi_value = 0.0;
    double lmi_value = 0.0;
    double combined_value = 0.0;
};

// Per-sender JS estimates averaged over senders, for one ego's pair batch.
// Scoring is batched across pairs; with equal per-sender pair counts the
// pooled mean equals the per-sender average exactly (up to rounding).
MvmiTerms mvmi_objective(Graph& g, const BoundMvmi& d, const PairBatch& batch, double beta_g,
                         double beta_l);

} // namespace coview
