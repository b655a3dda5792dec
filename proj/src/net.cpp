#include "coview/net.hpp"

#include <algorithm>
#include <cmath>

namespace coview {

void NetConfig::validate() const {
    if (bev_h <= 0 || bev_w <= 0 || bev_c <= 0) throw ConfigError("net: BEV dims must be positive");
    if (bev_h % 2 != 0 || bev_w % 2 != 0)
        throw ConfigError("net: BEV dims must be even (one stride-2 stage)");
    if (enc_mid <= 0 || enc_out <= 0 || col_mid <= 0 || dec_mid <= 0 || dec_out <= 0)
        throw ConfigError("net: widths must be positive");
    if (compress_exponent < 0) throw ConfigError("net: compress_exponent must be >= 0");
    int64_t values = static_cast<int64_t>(feat_h()) * feat_w() * enc_out;
    if (compress_exponent > 0 && values % (1LL << compress_exponent) != 0)
        throw ConfigError("net: 2^compress_exponent must divide the transmitted value count");
    if (spatial_halvings() > 0) {
        int hh = spatial_halvings() / 2 + spatial_halvings() % 2;
        int wh = spatial_halvings() / 2;
        if (feat_h() % (1 << hh) != 0 || feat_w() % (1 << wh) != 0)
            throw ConfigError("net: compress_exponent exceeds the divisible spatial extent");
    }
}

int NetConfig::wire_channels() const {
    int c = enc_out;
    int n = compress_exponent;
    while (n > 0 && c % 2 == 0) {
        c /= 2;
        --n;
    }
    return c;
}

int NetConfig::spatial_halvings() const {
    int c = enc_out;
    int n = compress_exponent;
    while (n > 0 && c % 2 == 0) {
        c /= 2;
        --n;
    }
    return n;
}

namespace {

Tensor init_weight(const Shape& shape, double fan_in, Rng& rng, double gain) {
    std::vector<double> v(shape_numel(shape));
    double std = gain * std::sqrt(1.0 / fan_in);
    for (double& x : v) x = rng.normal(0.0, std);
    return tensor_of(shape, v);
}

} // namespace

void init_pipeline_params(ParamStore& store, const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    const double relu_gain = std::sqrt(2.0);
    auto conv = [&](const std::string& name, int k, int cin, int cout, double gain) {
        store.add(name + ".w", init_weight({k, k, cin, cout}, k * k * cin, rng, gain),
                  kGroupPipeline);
        store.add(name + ".b", zeros({cout}), kGroupPipeline);
    };
    conv("enc.conv1", 3, cfg.bev_c, cfg.enc_mid, relu_gain);
    conv("enc.conv2", 3, cfg.enc_mid, cfg.enc_out, relu_gain);
    conv("enc.conv3", 3, cfg.enc_out, cfg.enc_out, relu_gain);
    conv("col.conv1", 1, 2 * cfg.enc_out, cfg.col_mid, relu_gain);
    conv("col.conv2", 1, cfg.col_mid, 1, 1.0);
    conv("dec.conv1", 3, cfg.enc_out, cfg.dec_mid, relu_gain);
    conv("dec.conv2", 3, cfg.dec_mid, cfg.dec_out, relu_gain);
    conv("head.cls", 1, cfg.dec_out, 1, 1.0);
    conv("head.reg", 1, cfg.dec_out, 4, 1.0);
    // background-heavy grids: start the classifier at a low foreground prior
    store.at("head.cls.b").value = full({1}, -2.0);
    if (cfg.compress_exponent > 0) {
        int wc = cfg.wire_channels();
        conv("comp.enc", 1, cfg.enc_out, wc, 1.0);
        conv("comp.dec", 1, wc, cfg.enc_out, 1.0);
    }
}

BoundNet make_bound_net(const ParamStore& store, const GraphBinding& b) {
    BoundNet n;
    n.enc1w = b.get(store, "enc.conv1.w");
    n.enc1b = b.get(store, "enc.conv1.b");
    n.enc2w = b.get(store, "enc.conv2.w");
    n.enc2b = b.get(store, "enc.conv2.b");
    n.enc3w = b.get(store, "enc.conv3.w");
    n.enc3b = b.get(store, "enc.conv3.b");
    n.col1w = b.get(store, "col.conv1.w");
    n.col1b = b.get(store, "col.conv1.b");
    n.col2w = b.get(store, "col.conv2.w");
    n.col2b = b.get(store, "col.conv2.b");
    n.dec1w = b.get(store, "dec.conv1.w");
    n.dec1b = b.get(store, "dec.conv1.b");
    n.dec2w = b.get(store, "dec.conv2.w");
    n.dec2b = b.get(store, "dec.conv2.b");
    n.clsw = b.get(store, "head.cls.w");
    n.clsb = b.get(store, "head.cls.b");
    n.regw = b.get(store, "head.reg.w");
    n.regb = b.get(store, "head.reg.b");
    if (store.has("comp.enc.w")) {
        n.has_comp = true;
        n.compw = b.get(store, "comp.enc.w");
        n.compb = b.get(store, "comp.enc.b");
        n.dcmpw = b.get(store, "comp.dec.w");
        n.dcmpb = b.get(store, "comp.dec.b");
    }
    return n;
}

FeatureMap encode(Graph& g, const BoundNet& net, const NetConfig& cfg, const Tensor& bev,
                  int agent) {
    require_dims(bev.shape == Shape{cfg.bev_h, cfg.bev_w, cfg.bev_c},
                 "encode: BEV shape " + shape_str(bev.shape) + " does not match configured " +
                     shape_str({cfg.bev_h, cfg.bev_w, cfg.bev_c}));
    Tensor x = g.owns(bev) ? bev : g.input(bev);
    x = g.relu(g.channel_bias(g.conv2d(x, net.enc1w, 1, Padding::Same), net.enc1b));
    x = g.relu(g.channel_bias(g.conv2d(x, net.enc2w, 2, Padding::Same), net.enc2b));
    x = g.relu(g.channel_bias(g.conv2d(x, net.enc3w, 1, Padding::Same), net.enc3b));
    return {x, agent, agent, ViewOrigin::Individual};
}

FeatureMap warp_to_ego(Graph& g, const NetConfig& cfg, const FeatureMap& view,
                       const SE2& sender_pose, const SE2& ego_pose) {
    require(view.origin == ViewOrigin::Individual,
            "warp_to_ego: expected an individual view before alignment");
    SE2 rel = ego_pose.inverse().compose(sender_pose);
    SE2 vox{rel.x / cfg.feat_res(), rel.y / cfg.feat_res(), rel.yaw};
    Tensor data = g.bilinear_warp(view.data, vox);
    return {data, /*frame=*/-1, view.sender, ViewOrigin::Aligned};
}

Tensor collab_logits(Graph& g, const BoundNet& net, const FeatureMap& aligned,
                     const FeatureMap& ego) {
    require_dims(aligned.data.shape == ego.data.shape,
                 "collab_logits: view shapes differ: " + shape_str(aligned.data.shape) + " vs " +
                     shape_str(ego.data.shape));
    Tensor x = g.concat_channels({aligned.data, ego.data});
    x = g.relu(g.channel_bias(g.conv2d(x, net.col1w, 1, Padding::Same), net.col1b));
    x = g.channel_bias(g.conv2d(x, net.col2w, 1, Padding::Same), net.col2b);
    return x;  // [H, W, 1]
}

FusionResult fuse_views(Graph& g, const BoundNet& net, const FeatureMap& ego_individual,
                        const std::vector<FeatureMap>& aligned) {
    require(!aligned.empty(), "fuse_views: empty view list");
    std::vector<const FeatureMap*> order;
    order.reserve(aligned.size());
    bool has_ego = false;
    for (const FeatureMap& v : aligned) {
        order.push_back(&v);
        has_ego = has_ego || v.sender == ego_individual.sender;
    }
    require(has_ego, "fuse_views: the ego's identity-warped view must be among the aligned views");
    // deterministic summation order regardless of caller ordering
    std::sort(order.begin(), order.end(),
              [](const FeatureMap* a, const FeatureMap* b) { return a->sender < b->sender; });

    std::vector<Tensor> logit_maps;
    logit_maps.reserve(order.size());
    for (const FeatureMap* v : order) logit_maps.push_back(collab_logits(g, net, *v, ego_individual));

    FusionResult out;
    int n = static_cast<int>(order.size());
    Tensor weights = g.softmax_channels(g.concat_channels(logit_maps));  // [H, W, N]
    Tensor fused;
    for (int j = 0; j < n; ++j) {
        Tensor wj = g.slice_channels(weights, j, j + 1);
        Tensor term = g.mul_channel(order[j]->data, wj);
        fused = j == 0 ? term : g.add(fused, term);
        out.senders.push_back(order[j]->sender);
        out.weights.push_back(wj);
    }
    out.collab = {fused, ego_individual.sender, ego_individual.sender, ViewOrigin::Collaborative};
    return out;
}

HeadOutput decode_and_head(Graph& g, const BoundNet& net, const NetConfig& cfg,
                           const FeatureMap& collab) {
    require(collab.origin != ViewOrigin::Aligned,
            "decode_and_head: expected a collaborative or individual view");
    Tensor x = g.relu(g.channel_bias(g.conv2d(collab.data, net.dec1w, 1, Padding::Same), net.dec1b));
    x = g.relu(g.channel_bias(g.conv2d(x, net.dec2w, 1, Padding::Same), net.dec2b));
    x = g.upsample_nearest(x, 2, 2);
    Tensor cls = g.channel_bias(g.conv2d(x, net.clsw, 1, Padding::Same), net.clsb);
    cls = g.reshape(cls, {cfg.bev_h, cfg.bev_w});
    Tensor reg = g.channel_bias(g.conv2d(x, net.regw, 1, Padding::Same), net.regb);
    return {cls, g.sigmoid(cls), reg};
}

std::vector<ScoredBox> decode_boxes(const HeadOutput& head, const NetConfig& cfg,
                                    double score_threshold) {
    int h = head.cls.shape[0], w = head.cls.shape[1];
    double half_x = 0.5 * w * cfg.bev_res;
    double half_y = 0.5 * h * cfg.bev_res;
    std::vector<ScoredBox> boxes;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double score = head.cls.at({r, c});
            if (score < score_threshold) continue;
            double vx = (c + 0.5) * cfg.bev_res - half_x;
            double vy = (r + 0.5) * cfg.bev_res - half_y;
            Rect box;
            box.cx = vx + head.reg.at({r, c, 0});
            box.cy = vy + head.reg.at({r, c, 1});
            // untrained heads can emit extreme log-dims; clamp before exp
            box.w = std::exp(std::clamp(head.reg.at({r, c, 2}), -4.0, 4.0));
            box.l = std::exp(std::clamp(head.reg.at({r, c, 3}), -4.0, 4.0));
            if (std::fabs(box.cx) > half_x || std::fabs(box.cy) > half_y) continue;
            boxes.push_back({box, score});
        }
    }
    return boxes;
}

namespace {
bool box_before(const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
    if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.box.l < b.box.l;
}
} // namespace

std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold) {
    for (const ScoredBox& b : boxes)
        require(std::isfinite(b.score), "nms: scores must be finite");
    std::sort(boxes.begin(), boxes.end(), box_before);
    std::vector<ScoredBox> kept;
    for (const ScoredBox& cand : boxes) {
        bool suppressed = false;
        for (const ScoredBox& k : kept)
            if (rect_iou(cand.box, k.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

Tensor compress_feature(Graph& g, const BoundNet& net, const NetConfig& cfg, const Tensor& feature) {
    if (cfg.compress_exponent == 0) return feature;
    require(net.has_comp, "compress_feature: compressor parameters are missing");
    Tensor x = g.channel_bias(g.conv2d(feature, net.compw, 1, Padding::Same), net.compb);
    int halvings = cfg.spatial_halvings();
    for (int i = 0; i < halvings; ++i)
        x = (i % 2 == 0) ? g.avgpool(x, 2, 1) : g.avgpool(x, 1, 2);
    return x;
}

Tensor decompress_feature(Graph& g, const BoundNet& net, const NetConfig& cfg,
                          const Tensor& transmitted) {
    if (cfg.compress_exponent == 0) return transmitted;
    require(net.has_comp, "decompress_feature: compressor parameters are missing");
    Tensor x = transmitted;
    int halvings = cfg.spatial_halvings();
    for (int i = halvings - 1; i >= 0; --i)
        x = (i % 2 == 0) ? g.upsample_nearest(x, 2, 1) : g.upsample_nearest(x, 1, 2);
    return g.channel_bias(g.conv2d(x, net.dcmpw, 1, Padding::Same), net.dcmpb);
}

} // namespace coview
