#pragma once

#include <vector>

#include "coview/params.hpp"
#include "coview/rng.hpp"
#include "coview/scene.hpp"
#include "coview/tensor.hpp"

namespace coview {

struct NetConfig {
    int bev_h = 32;
    int bev_w = 32;
    int bev_c = 4;
    double bev_res = 0.5;
    int enc_mid = 16;
    int enc_out = 32;
    int col_mid = 32;
    int dec_mid = 32;
    int dec_out = 16;
    double score_threshold = 0.5;
    double nms_iou = 0.1;
    int compress_exponent = 0;  // transmit H*W*C / 2^n values; 0 = uncompressed

    int feat_h() const { return bev_h / 2; }
    int feat_w() const { return bev_w / 2; }
    double feat_res() const { return bev_res * 2.0; }

    void validate() const;
    // channel count on the wire and extra spatial halvings for this exponent
    int wire_channels() const;
    int spatial_halvings() const;
};

enum class ViewOrigin { Individual, Aligned, Collaborative };

struct FeatureMap {
    Tensor data;  // [H, W, C]
    int frame = -1;   // agent id the spatial axes are aligned to
    int sender = -1;  // agent whose measurements produced the feature
    ViewOrigin origin = ViewOrigin::Individual;
};

struct ScoredBox {
    Rect box;
    double score = 0.0;
};

struct HeadOutput {
    Tensor cls_logits;  // [H, W]
    Tensor cls;         // [H, W], sigmoid of the logits
    Tensor reg;         // [H, W, 4]
};

struct DetectionOutput {
    Tensor cls;  // [H, W] in (0,1)
    Tensor reg;  // [H, W, 4]
    std::vector<ScoredBox> boxes;  // thresholded, decoded, NMS-merged
};

// Registers every pipeline parameter (encoder, collaboration encoder,
// decoder, heads, optional compressor) with deterministic initialization.
void init_pipeline_params(ParamStore& store, const NetConfig& cfg, Rng& rng);

// Graph-bound pipeline parameters, resolved once per graph.
struct BoundNet {
    Tensor enc1w, enc1b, enc2w, enc2b, enc3w, enc3b;
    Tensor col1w, col1b, col2w, col2b;
    Tensor dec1w, dec1b, dec2w, dec2b;
    Tensor clsw, clsb, regw, regb;
    bool has_comp = false;
    Tensor compw, compb, dcmpw, dcmpb;
};

BoundNet make_bound_net(const ParamStore& store, const GraphBinding& binding);

FeatureMap encode(Graph& g, const BoundNet& net, const NetConfig& cfg, const Tensor& bev, int agent);

// Pose alignment into the ego frame; gradients flow through the feature only.
FeatureMap warp_to_ego(Graph& g, const NetConfig& cfg, const FeatureMap& view,
                       const SE2& sender_pose, const SE2& ego_pose);

// single-channel importance logits for one (aligned view, ego view) pair
Tensor collab_logits(Graph& g, const BoundNet& net, const FeatureMap& aligned,
                     const FeatureMap& ego);

struct FusionResult {
    FeatureMap collab;
    std::vector<int> senders;          // ascending agent ids
    std::vector<Tensor> weights;       // [H,W,1] per sender, post-softmax
};

// Per-voxel softmax over agents of the collaboration logits, then the
// weighted sum of aligned views. The ego's own identity-warped view must be
// present among the aligned views.
FusionResult fuse_views(Graph& g, const BoundNet& net, const FeatureMap& ego_individual,
                        const std::vector<FeatureMap>& aligned);

HeadOutput decode_and_head(Graph& g, const BoundNet& net, const NetConfig& cfg,
                           const FeatureMap& collab);

// box decoding at voxels with cls >= threshold; centers outside the grid
// window are dropped
std::vector<ScoredBox> decode_boxes(const HeadOutput& head, const NetConfig& cfg,
                                    double score_threshold);

// greedy descending-score suppression; ties broken by score then
// lexicographic box coordinates
std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold);

// learned channel compression (strided when the exponent exceeds the channel
// budget); applied in the sender frame before transmission
Tensor compress_feature(Graph& g, const BoundNet& net, const NetConfig& cfg, const Tensor& feature);
Tensor decompress_feature(Graph& g, const BoundNet& net, const NetConfig& cfg,
                          const Tensor& transmitted);

} // namespace coview
