#include "coview/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace coview {

std::string collab_mode_name(CollabMode mode) {
    switch (mode) {
        case CollabMode::None: return "none";
        case CollabMode::Early: return "early";
        case CollabMode::Late: return "late";
        case CollabMode::Intermediate: return "intermediate";
    }
    return "?";
}

CollabMode collab_mode_from_name(const std::string& name) {
    if (name == "none") return CollabMode::None;
    if (name == "early") return CollabMode::Early;
    if (name == "late") return CollabMode::Late;
    if (name == "intermediate") return CollabMode::Intermediate;
    throw ConfigError("unknown collaboration mode: " + name);
}

void ModeSpec::validate() const {
    if (ratio_exponent < 0) throw ConfigError("mode.ratio_exponent must be >= 0");
    if (noise_std < 0.0) throw ConfigError("mode.noise_std must be >= 0");
    if (ratio_exponent > 0 && mode != CollabMode::Intermediate)
        throw ConfigError("feature compression applies to intermediate collaboration only");
}

BevGrid early_aggregate(std::span<const BevGrid> grids, std::span<const SE2> poses, int ego,
                        const BevConfig& bev) {
    require(!grids.empty() && grids.size() == poses.size(),
            "early_aggregate: need one grid per pose");
    require(ego >= 0 && ego < static_cast<int>(grids.size()), "early_aggregate: bad ego index");
    int h = bev.h, w = bev.w, c = bev.channels;
    std::vector<double> out(static_cast<size_t>(h) * w * c, 0.0);
    for (size_t j = 0; j < grids.size(); ++j) {
        // map ego voxel centers into the sender frame, nearest-neighbor read
        SE2 to_sender = poses[j].inverse().compose(poses[ego]);
        const std::vector<double>& src = grids[j].occupancy.data();
        for (int r = 0; r < h; ++r) {
            for (int cl = 0; cl < w; ++cl) {
                double ex = (cl + 0.5) * bev.resolution - bev.half_extent_x();
                double ey = (r + 0.5) * bev.resolution - bev.half_extent_y();
                Vec2 s = to_sender.apply({ex, ey});
                int sc = static_cast<int>(std::floor((s.x + bev.half_extent_x()) / bev.resolution));
                int sr = static_cast<int>(std::floor((s.y + bev.half_extent_y()) / bev.resolution));
                if (sc < 0 || sc >= w || sr < 0 || sr >= h) continue;
                const double* cell = src.data() + (static_cast<size_t>(sr) * w + sc) * c;
                double* dst = out.data() + (static_cast<size_t>(r) * w + cl) * c;
                for (int ch = 0; ch < c; ++ch) dst[ch] = std::max(dst[ch], cell[ch]);
            }
        }
    }
    BevGrid g;
    g.occupancy = tensor_of({h, w, c}, std::move(out));
    g.resolution = bev.resolution;
    return g;
}

namespace {

DetectionOutput finish_detection(const HeadOutput& head, const EvalConfig& cfg) {
    DetectionOutput out;
    out.cls = head.cls;
    out.reg = head.reg;
    out.boxes = nms(decode_boxes(head, cfg.net, cfg.net.score_threshold), cfg.net.nms_iou);
    return out;
}

DetectionOutput single_agent_detect(const Tensor& bev, int agent, const ParamStore& params,
                                    const EvalConfig& cfg) {
    Graph g;
    BoundNet net = make_bound_net(params, bind_params(g, params, false));
    FeatureMap f = encode(g, net, cfg.net, bev, agent);
    return finish_detection(decode_and_head(g, net, cfg.net, f), cfg);
}

} // namespace

DetectionOutput run_no_collab(const PreparedScene& scene, int ego, const ParamStore& params,
                              const EvalConfig& cfg) {
    return single_agent_detect(scene.bev[ego].occupancy, ego, params, cfg);
}

DetectionOutput run_early_collab(const PreparedScene& scene, int ego, const ParamStore& params,
                                 const EvalConfig& cfg, std::span<const SE2> poses) {
    BevGrid agg = early_aggregate(scene.bev, poses, ego, cfg.bev);
    return single_agent_detect(agg.occupancy, ego, params, cfg);
}

DetectionOutput run_late_collab(const PreparedScene& scene, const ParamStore& params,
                                const EvalConfig& cfg, std::span<const SE2> poses,
                                long long* comm_bytes_out) {
    int ego = cfg.ego_index;
    int n = scene.scene.num_agents();
    double half_x = 0.5 * cfg.net.bev_w * cfg.net.bev_res;
    double half_y = 0.5 * cfg.net.bev_h * cfg.net.bev_res;
    std::vector<ScoredBox> pooled;
    long long transmitted = 0;
    for (int a = 0; a < n; ++a) {
        DetectionOutput det = run_no_collab(scene, a, params, cfg);
        if (a != ego) transmitted += static_cast<long long>(det.boxes.size()) * 5 * 4;
        SE2 to_ego = poses[ego].inverse().compose(poses[a]);
        for (const ScoredBox& sb : det.boxes) {
            Rect moved = a == ego ? sb.box : transform_rect_aabb(sb.box, to_ego);
            if (std::fabs(moved.cx) > half_x || std::fabs(moved.cy) > half_y) continue;
            pooled.push_back({moved, sb.score});
        }
    }
    if (comm_bytes_out != nullptr) *comm_bytes_out = transmitted;
    DetectionOutput ego_det = run_no_collab(scene, ego, params, cfg);
    DetectionOutput out;
    out.cls = ego_det.cls;
    out.reg = ego_det.reg;
    out.boxes = nms(std::move(pooled), cfg.net.nms_iou);
    return out;
}

DetectionOutput run_intermediate(const PreparedScene& scene, int ego, const ParamStore& params,
                                 const EvalConfig& cfg, std::span<const SE2> poses) {
    int n = scene.scene.num_agents();
    Graph g;
    BoundNet net = make_bound_net(params, bind_params(g, params, false));
    std::vector<FeatureMap> aligned;
    FeatureMap ego_view;
    for (int j = 0; j < n; ++j) {
        FeatureMap f = encode(g, net, cfg.net, scene.bev[j].occupancy, j);
        if (j == ego) {
            ego_view = f;
            aligned.push_back(warp_to_ego(g, cfg.net, f, poses[ego], poses[ego]));
        } else {
            if (cfg.net.compress_exponent > 0) {
                Tensor wire = compress_feature(g, net, cfg.net, f.data);
                f = {decompress_feature(g, net, cfg.net, wire), j, j, ViewOrigin::Individual};
            }
            aligned.push_back(warp_to_ego(g, cfg.net, f, poses[j], poses[ego]));
        }
    }
    FusionResult fr = fuse_views(g, net, ego_view, aligned);
    return finish_detection(decode_and_head(g, net, cfg.net, fr.collab), cfg);
}

double compute_ap(const std::vector<std::vector<ScoredBox>>& detections,
                  const std::vector<std::vector<Rect>>& ground_truth, double iou_threshold) {
    require(iou_threshold > 0.0 && iou_threshold < 1.0, "compute_ap: threshold must be in (0,1)");
    require(detections.size() == ground_truth.size(),
            "compute_ap: detections and ground truth must cover the same scenes");

    struct Det {
        int scene;
        ScoredBox sb;
    };
    std::vector<Det> all;
    size_t total_gt = 0;
    for (size_t s = 0; s < detections.size(); ++s) {
        for (const ScoredBox& sb : detections[s]) all.push_back({static_cast<int>(s), sb});
        total_gt += ground_truth[s].size();
    }
    if (total_gt == 0 || all.empty()) return 0.0;

    // scene-order-independent tie-break: score, then box coordinates
    std::sort(all.begin(), all.end(), [](const Det& a, const Det& b) {
        if (a.sb.score != b.sb.score) return a.sb.score > b.sb.score;
        if (a.sb.box.cx != b.sb.box.cx) return a.sb.box.cx < b.sb.box.cx;
        if (a.sb.box.cy != b.sb.box.cy) return a.sb.box.cy < b.sb.box.cy;
        if (a.sb.box.w != b.sb.box.w) return a.sb.box.w < b.sb.box.w;
        return a.sb.box.l < b.sb.box.l;
    });

    std::vector<std::vector<bool>> taken(ground_truth.size());
    for (size_t s = 0; s < ground_truth.size(); ++s) taken[s].assign(ground_truth[s].size(), false);

    std::vector<double> precision, recall;
    size_t tp = 0, fp = 0;
    for (const Det& d : all) {
        const std::vector<Rect>& gts = ground_truth[d.scene];
        int best = -1;
        double best_iou = 0.0;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (taken[d.scene][gi]) continue;
            double iou = rect_iou(d.sb.box, gts[gi]);
            if (iou >= iou_threshold && (best < 0 || iou > best_iou)) {
                best = static_cast<int>(gi);
                best_iou = iou;
            }
        }
        if (best >= 0) {
            taken[d.scene][best] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }

    // all-point interpolation: integrate the precision envelope over recall
    double ap = 0.0;
    double env = 0.0;
    double last_r = 0.0;
    std::vector<double> env_at(precision.size());
    for (int i = static_cast<int>(precision.size()) - 1; i >= 0; --i) {
        env = std::max(env, precision[i]);
        env_at[i] = env;
    }
    for (size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - last_r) * env_at[i];
        last_r = recall[i];
    }
    return ap;
}

long long comm_volume(int h, int w, int c, int bytes_per_value, int ratio_exponent, int senders) {
    require(h > 0 && w > 0 && c > 0 && bytes_per_value > 0, "comm_volume: dims must be positive");
    require(ratio_exponent >= 0 && senders >= 0, "comm_volume: negative ratio or sender count");
    long long values = static_cast<long long>(h) * w * c;
    long long denom = 1LL << ratio_exponent;
    if (values % denom != 0)
        throw ConfigError("comm_volume: 2^" + std::to_string(ratio_exponent) +
                          " does not divide the transmitted value count " + std::to_string(values));
    return static_cast<long long>(senders) * (values / denom) * bytes_per_value;
}

SE2 inject_pose_noise(const SE2& pose, double std_meters, Rng& rng) {
    require(std_meters >= 0.0, "inject_pose_noise: std must be >= 0");
    if (std_meters == 0.0) return pose;
    return SE2{pose.x + rng.normal(0.0, std_meters), pose.y + rng.normal(0.0, std_meters), pose.yaw};
}

EvalReport evaluate(const ParamStore& params, const ModeSpec& spec, const Dataset& test,
                    const EvalConfig& cfg, uint64_t seed) {
    spec.validate();
    require(!test.empty(), "evaluate: need at least one test scene");
    EvalConfig mode_cfg = cfg;
    mode_cfg.net.compress_exponent = spec.mode == CollabMode::Intermediate ? spec.ratio_exponent : 0;

    Rng noise_master(seed);
    std::vector<std::vector<ScoredBox>> dets;
    std::vector<std::vector<Rect>> gts;
    long long comm_accum = 0;
    for (size_t si = 0; si < test.size(); ++si) {
        const PreparedScene& ps = test[si];
        int n = ps.scene.num_agents();
        int ego = cfg.ego_index;
        require(ego >= 0 && ego < n, "evaluate: ego index out of range");

        Rng noise = noise_master.fork(ps.scene.seed);
        std::vector<SE2> poses = ps.scene.agents;
        for (int a = 0; a < n; ++a)
            if (a != ego) poses[a] = inject_pose_noise(poses[a], spec.noise_std, noise);

        DetectionOutput det;
        long long scene_comm = 0;
        switch (spec.mode) {
            case CollabMode::None:
                det = run_no_collab(ps, ego, params, mode_cfg);
                scene_comm = 0;
                break;
            case CollabMode::Early:
                det = run_early_collab(ps, ego, params, mode_cfg, poses);
                scene_comm = static_cast<long long>(n - 1) * cfg.bev.h * cfg.bev.w *
                             cfg.bev.channels * cfg.bytes_per_value;
                break;
            case CollabMode::Late:
                det = run_late_collab(ps, params, mode_cfg, poses, &scene_comm);
                break;
            case CollabMode::Intermediate:
                det = run_intermediate(ps, ego, params, mode_cfg, poses);
                scene_comm = comm_volume(mode_cfg.net.feat_h(), mode_cfg.net.feat_w(),
                                         mode_cfg.net.enc_out, cfg.bytes_per_value,
                                         spec.ratio_exponent, n - 1);
                break;
        }
        comm_accum += scene_comm;
        dets.push_back(det.boxes);
        gts.push_back(ps.labels[ego].boxes);
    }

    EvalReport report;
    report.spec = spec;
    report.ap50 = compute_ap(dets, gts, 0.5);
    report.ap70 = compute_ap(dets, gts, 0.7);
    report.comm_bytes = static_cast<long long>(
        std::llround(static_cast<double>(comm_accum) / static_cast<double>(test.size())));
    report.scenes = static_cast<int>(test.size());
    report.seed = seed;
    return report;
}

std::vector<EvalReport> run_benchmark(const std::map<std::string, const ParamStore*>& checkpoints,
                                      const std::vector<ModeSpec>& modes, const Dataset& test,
                                      const EvalConfig& cfg, std::span<const uint64_t> seeds) {
    require(!test.empty(), "run_benchmark: need at least one test scene");
    require(!modes.empty() && !seeds.empty(), "run_benchmark: need modes and seeds");
    auto checkpoint_key = [](const ModeSpec& spec) {
        std::string key = collab_mode_name(spec.mode);
        if (spec.mode == CollabMode::Late) key = "none";
        if (spec.mode == CollabMode::Intermediate && spec.ratio_exponent > 0)
            key += "_r" + std::to_string(spec.ratio_exponent);
        return key;
    };
    std::vector<EvalReport> reports;
    for (uint64_t seed : seeds) {
        for (const ModeSpec& spec : modes) {
            std::string key = checkpoint_key(spec);
            auto it = checkpoints.find(key);
            if (it == checkpoints.end() || it->second == nullptr)
                throw ConfigError("run_benchmark: missing checkpoint for mode \"" + key + "\"");
            reports.push_back(evaluate(*it->second, spec, test, cfg, seed));
        }
    }
    return reports;
}

std::string sweep_table_csv(std::span<const EvalReport> reports) {
    std::string out = "mode,ratio_denominator,noise_std,seed,ap50,ap70,comm_bytes\n";
    char buf[256];
    for (const EvalReport& r : reports) {
        std::snprintf(buf, sizeof(buf), "%s,%lld,%.17g,%llu,%.17g,%.17g,%lld\n",
                      collab_mode_name(r.spec.mode).c_str(), 1LL << r.spec.ratio_exponent,
                      r.spec.noise_std, static_cast<unsigned long long>(r.seed), r.ap50, r.ap70,
                      r.comm_bytes);
        out += buf;
    }
    return out;
}

std::map<int, Tensor> weight_heatmaps(const PreparedScene& scene, int ego,
                                      const ParamStore& params, const EvalConfig& cfg) {
    int n = scene.scene.num_agents();
    require(ego >= 0 && ego < n, "weight_heatmaps: ego index out of range");
    Graph g;
    BoundNet net = make_bound_net(params, bind_params(g, params, false));
    std::vector<FeatureMap> aligned;
    FeatureMap ego_view;
    for (int j = 0; j < n; ++j) {
        FeatureMap f = encode(g, net, cfg.net, scene.bev[j].occupancy, j);
        if (j == ego) ego_view = f;
        aligned.push_back(
            warp_to_ego(g, cfg.net, f, scene.scene.agents[j], scene.scene.agents[ego]));
    }
    FusionResult fr = fuse_views(g, net, ego_view, aligned);
    std::map<int, Tensor> out;
    for (size_t k = 0; k < fr.senders.size(); ++k) out[fr.senders[k]] = fr.weights[k];
    return out;
}

} // namespace coview
