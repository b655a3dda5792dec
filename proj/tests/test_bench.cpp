#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coview/bench.hpp"
#include "coview/trainer.hpp"
#include "test_util.hpp"

using namespace coview;
using namespace coview::testutil;

namespace {

EvalConfig default_eval() {
    EvalConfig cfg;
    return cfg;
}

ParamStore pipeline_store(const NetConfig& net, uint64_t seed) {
    ParamStore store;
    Rng rng(seed);
    init_pipeline_params(store, net, rng);
    return store;
}

PreparedScene prepare_one(const Scene& s) {
    SensorConfig sensor;
    BevConfig bev;
    PreparedScene ps;
    ps.scene = s;
    for (int a = 0; a < s.num_agents(); ++a) {
        ps.bev.push_back(voxelize(raycast_observe(s, a, sensor), s.agents[a], bev));
        ps.labels.push_back(make_labels(s, s.agents[a], bev));
    }
    return ps;
}

} // namespace

TEST_CASE("comm_volume reproduces the published bandwidth table") {
    // (32,32,256) 4-byte features, one sender
    CHECK(comm_volume(32, 32, 256, 4, 0, 1) == 1048576);      // 1024 KB
    CHECK(comm_volume(32, 32, 256, 4, 5, 1) == 32768);        // 1/32 -> 32 KB
    CHECK(comm_volume(32, 32, 256, 4, 0, 0) == 0);            // no senders
    CHECK_THROWS_AS(comm_volume(3, 3, 3, 4, 2, 1), ConfigError);
}

TEST_CASE("comm_volume is linear in senders and inverse ratio") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        int n = rng.uniform_int(0, 5);
        int e = rng.uniform_int(0, 6);
        long long base = comm_volume(16, 16, 64, 4, e, 1);
        CHECK(comm_volume(16, 16, 64, 4, e, n) == n * base);
        if (e > 0) CHECK(comm_volume(16, 16, 64, 4, e - 1, 1) == 2 * base);
    }
}

TEST_CASE("pose noise is unbiased with the requested spread and vanishes at std 0") {
    SE2 pose = SE2::make(3.0, -2.0, 0.7);
    Rng rng(2);
    SE2 same = inject_pose_noise(pose, 0.0, rng);
    CHECK(same.x == pose.x);
    CHECK(same.y == pose.y);
    CHECK(same.yaw == pose.yaw);

    int n = 100000;
    double sx = 0.0, sxx = 0.0, sy = 0.0;
    for (int i = 0; i < n; ++i) {
        SE2 p = inject_pose_noise(pose, 0.2, rng);
        CHECK(p.yaw == pose.yaw);
        sx += p.x - pose.x;
        sy += p.y - pose.y;
        sxx += (p.x - pose.x) * (p.x - pose.x);
    }
    double mean_x = sx / n, mean_y = sy / n;
    double std_x = std::sqrt(sxx / n - mean_x * mean_x);
    CHECK(std_x >= 0.195);
    CHECK(std_x <= 0.205);
    CHECK(std::hypot(mean_x, mean_y) < 0.005);
}

TEST_CASE("compute_ap endpoints: exact match scores 1, no detections score 0") {
    std::vector<std::vector<Rect>> gt = {{Rect{1.0, 2.0, 2.0, 3.0}}};
    std::vector<std::vector<ScoredBox>> det = {{{Rect{1.0, 2.0, 2.0, 3.0}, 0.9}}};
    CHECK(compute_ap(det, gt, 0.5) == 1.0);
    std::vector<std::vector<ScoredBox>> none = {{}};
    CHECK(compute_ap(none, gt, 0.5) == 0.0);
    CHECK_THROWS_AS(compute_ap(det, gt, 0.0), ContractError);
}

namespace {
// exhaustive oracle: re-run greedy matching from scratch for every prefix of
// the score-ranked detection list, then integrate the envelope directly
double brute_ap(const std::vector<std::vector<ScoredBox>>& dets,
                const std::vector<std::vector<Rect>>& gt, double iou) {
    struct D {
        int scene;
        ScoredBox sb;
    };
    std::vector<D> all;
    size_t total_gt = 0;
    for (size_t s = 0; s < dets.size(); ++s) {
        for (const ScoredBox& sb : dets[s]) all.push_back({static_cast<int>(s), sb});
        total_gt += gt[s].size();
    }
    if (total_gt == 0 || all.empty()) return 0.0;
    std::sort(all.begin(), all.end(), [](const D& a, const D& b) {
        if (a.sb.score != b.sb.score) return a.sb.score > b.sb.score;
        if (a.sb.box.cx != b.sb.box.cx) return a.sb.box.cx < b.sb.box.cx;
        if (a.sb.box.cy != b.sb.box.cy) return a.sb.box.cy < b.sb.box.cy;
        if (a.sb.box.w != b.sb.box.w) return a.sb.box.w < b.sb.box.w;
        return a.sb.box.l < b.sb.box.l;
    });
    std::vector<double> precision, recall;
    for (size_t k = 1; k <= all.size(); ++k) {
        // match the top-k prefix from scratch
        std::vector<std::vector<bool>> taken(gt.size());
        for (size_t s = 0; s < gt.size(); ++s) taken[s].assign(gt[s].size(), false);
        size_t tp = 0;
        for (size_t i = 0; i < k; ++i) {
            int best = -1;
            double best_iou = 0.0;
            for (size_t gi = 0; gi < gt[all[i].scene].size(); ++gi) {
                if (taken[all[i].scene][gi]) continue;
                double v = rect_iou(all[i].sb.box, gt[all[i].scene][gi]);
                if (v >= iou && (best < 0 || v > best_iou)) {
                    best = static_cast<int>(gi);
                    best_iou = v;
                }
            }
            if (best >= 0) {
                taken[all[i].scene][best] = true;
                ++tp;
            }
        }
        precision.push_back(static_cast<double>(tp) / k);
        recall.push_back(static_cast<double>(tp) / total_gt);
    }
    double ap = 0.0;
    for (size_t i = 0; i < precision.size(); ++i) {
        double r_lo = i == 0 ? 0.0 : recall[i - 1];
        double env = 0.0;
        for (size_t j = i; j < precision.size(); ++j) env = std::max(env, precision[j]);
        ap += (recall[i] - r_lo) * env;
    }
    return ap;
}
} // namespace

TEST_CASE("compute_ap matches the exhaustive PR enumeration oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 120; ++trial) {
        std::vector<std::vector<Rect>> gt(rng.uniform_int(1, 3));
        std::vector<std::vector<ScoredBox>> det(gt.size());
        for (size_t s = 0; s < gt.size(); ++s) {
            int n_gt = rng.uniform_int(0, 5);
            for (int i = 0; i < n_gt; ++i)
                gt[s].push_back({rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(1, 3),
                                 rng.uniform(1, 3)});
            int n_det = rng.uniform_int(0, 10);
            for (int i = 0; i < n_det; ++i) {
                Rect r;
                if (!gt[s].empty() && rng.uniform() < 0.6) {
                    const Rect& base = gt[s][rng.uniform_int(0, static_cast<int>(gt[s].size()) - 1)];
                    r = {base.cx + rng.uniform(-0.8, 0.8), base.cy + rng.uniform(-0.8, 0.8),
                         base.w * rng.uniform(0.7, 1.3), base.l * rng.uniform(0.7, 1.3)};
                } else {
                    r = {rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(1, 3), rng.uniform(1, 3)};
                }
                det[s].push_back({r, rng.uniform(0.05, 1.0)});
            }
        }
        for (double iou : {0.5, 0.7}) {
            double got = compute_ap(det, gt, iou);
            double want = brute_ap(det, gt, iou);
            CHECK(std::fabs(got - want) <= 1e-10);
            CHECK(got >= 0.0);
            CHECK(got <= 1.0);
        }
    }
}

TEST_CASE("compute_ap ignores scene and detection ordering") {
    Rng rng(4);
    std::vector<std::vector<Rect>> gt = {
        {{0, 0, 2, 2}, {4, 4, 2, 2}}, {{-3, 1, 2, 1.5}}, {{2, -2, 1.5, 2}}};
    std::vector<std::vector<ScoredBox>> det(3);
    for (size_t s = 0; s < 3; ++s)
        for (const Rect& r : gt[s]) {
            det[s].push_back({{r.cx + 0.2, r.cy, r.w, r.l}, rng.uniform(0.2, 1.0)});
            det[s].push_back({{r.cx + 3.0, r.cy + 3.0, r.w, r.l}, rng.uniform(0.2, 1.0)});
        }
    double base = compute_ap(det, gt, 0.5);
    std::swap(det[0], det[2]);
    std::swap(gt[0], gt[2]);
    std::swap(det[1][0], det[1][1]);
    CHECK(compute_ap(det, gt, 0.5) == base);
}

TEST_CASE("early aggregation dominates the ego grid and matches union voxelization") {
    SceneConfig sc;
    sc.min_agents = 3;
    sc.max_agents = 3;
    BevConfig bev;
    SensorConfig sensor;
    Scene s = generate_scene(42, sc);
    // integer-voxel translations, zero yaw: nearest-neighbor warp is exact
    s.agents[0] = SE2::make(30.0, 30.0, 0.0);
    s.agents[1] = SE2::make(32.0, 31.0, 0.0);
    s.agents[2] = SE2::make(28.5, 33.5, 0.0);

    // a grid only ever holds points inside its own observer's crop window, so
    // the union oracle must apply the same cut before re-binning at the ego
    auto in_window = [&](const SensorPoint& p, const SE2& pose) {
        Vec2 local = pose.inverse().apply({p.x, p.y});
        return std::fabs(local.x) < bev.half_extent_x() - 1e-9 &&
               std::fabs(local.y) < bev.half_extent_y() - 1e-9;
    };
    std::vector<BevGrid> grids;
    std::vector<SensorPoint> all_points;
    for (int a = 0; a < 3; ++a) {
        std::vector<SensorPoint> pts = raycast_observe(s, a, sensor);
        for (const SensorPoint& p : pts)
            if (in_window(p, s.agents[a])) all_points.push_back(p);
        grids.push_back(voxelize(pts, s.agents[a], bev));
    }
    BevGrid agg = early_aggregate(grids, s.agents, 0, bev);
    for (int64_t i = 0; i < agg.occupancy.numel(); ++i)
        CHECK(agg.occupancy.data()[i] >= grids[0].occupancy.data()[i]);

    BevGrid uni = voxelize(all_points, s.agents[0], bev);
    CHECK(agg.occupancy.data() == uni.occupancy.data());

    // a single grid aggregates to itself
    BevGrid solo = early_aggregate(std::vector<BevGrid>{grids[0]},
                                   std::vector<SE2>{s.agents[0]}, 0, bev);
    CHECK(solo.occupancy.data() == grids[0].occupancy.data());
}

TEST_CASE("early aggregation approximates union voxelization under arbitrary poses") {
    SceneConfig sc;
    sc.min_agents = 3;
    sc.max_agents = 3;
    BevConfig bev;
    SensorConfig sensor;
    int agree = 0, total = 0;
    for (uint64_t seed : {7ULL, 8ULL, 9ULL}) {
        Scene s = generate_scene(seed, sc);
        std::vector<BevGrid> grids;
        std::vector<SensorPoint> all_points;
        auto in_window = [&](const SensorPoint& p, const SE2& pose) {
            Vec2 local = pose.inverse().apply({p.x, p.y});
            return std::fabs(local.x) < bev.half_extent_x() && std::fabs(local.y) < bev.half_extent_y();
        };
        for (int a = 0; a < s.num_agents(); ++a) {
            std::vector<SensorPoint> pts = raycast_observe(s, a, sensor);
            for (const SensorPoint& p : pts)
                if (in_window(p, s.agents[a])) all_points.push_back(p);
            grids.push_back(voxelize(pts, s.agents[a], bev));
        }
        BevGrid agg = early_aggregate(grids, s.agents, 0, bev);
        BevGrid uni = voxelize(all_points, s.agents[0], bev);
        for (int64_t i = 0; i < agg.occupancy.numel(); ++i) {
            agree += agg.occupancy.data()[i] == uni.occupancy.data()[i];
            ++total;
        }
    }
    CHECK(static_cast<double>(agree) / total >= 0.9);
}

TEST_CASE("single-agent scenes make every collaboration mode coincide") {
    Scene s;
    s.id = 900;
    s.extent = 64.0;
    s.agents = {SE2::make(31.0, 30.0, 0.4)};
    s.objects.push_back({Rect{35.0, 31.0, 2.5, 2.0}, 2.0});
    PreparedScene ps = prepare_one(s);
    EvalConfig cfg = default_eval();
    cfg.net.score_threshold = 0.05;  // untrained nets score low
    ParamStore params = pipeline_store(cfg.net, 50);

    DetectionOutput solo = run_no_collab(ps, 0, params, cfg);
    DetectionOutput early = run_early_collab(ps, 0, params, cfg, ps.scene.agents);
    DetectionOutput late = run_late_collab(ps, params, cfg, ps.scene.agents);
    DetectionOutput inter = run_intermediate(ps, 0, params, cfg, ps.scene.agents);

    CHECK(solo.cls.data() == early.cls.data());
    CHECK(solo.cls.data() == inter.cls.data());
    REQUIRE(solo.boxes.size() == late.boxes.size());
    REQUIRE(solo.boxes.size() == inter.boxes.size());
    for (size_t i = 0; i < solo.boxes.size(); ++i) {
        CHECK(solo.boxes[i].score == inter.boxes[i].score);
        CHECK(solo.boxes[i].box.cx == inter.boxes[i].box.cx);
        CHECK(solo.boxes[i].score == late.boxes[i].score);
    }
}

TEST_CASE("late collaboration collapses duplicate detections from co-located agents") {
    Scene s;
    s.id = 901;
    s.extent = 64.0;
    SE2 pose = SE2::make(30.0, 30.0, 0.0);
    s.agents = {pose, pose};  // identical vantage points
    s.objects.push_back({Rect{34.0, 30.0, 2.0, 2.0}, 2.0});
    PreparedScene ps = prepare_one(s);
    EvalConfig cfg = default_eval();
    cfg.net.score_threshold = 0.05;
    ParamStore params = pipeline_store(cfg.net, 51);

    DetectionOutput solo = run_no_collab(ps, 0, params, cfg);
    long long bytes = 0;
    DetectionOutput late = run_late_collab(ps, params, cfg, ps.scene.agents, &bytes);
    CHECK(late.boxes.size() == solo.boxes.size());
    CHECK(bytes == static_cast<long long>(solo.boxes.size()) * 20);
}

TEST_CASE("evaluate reports zero communication for no-collaboration") {
    SceneConfig sc;
    sc.min_agents = 3;
    sc.max_agents = 3;
    std::vector<Scene> scenes = {generate_scene(60, sc), generate_scene(61, sc)};
    Dataset data = prepare_dataset(scenes, SensorConfig{}, BevConfig{});
    EvalConfig cfg = default_eval();
    ParamStore params = pipeline_store(cfg.net, 52);
    EvalReport r = evaluate(params, ModeSpec{CollabMode::None, 0, 0.0}, data, cfg, 1);
    CHECK(r.comm_bytes == 0);
    CHECK(r.scenes == 2);
    EvalReport ri = evaluate(params, ModeSpec{CollabMode::Intermediate, 0, 0.0}, data, cfg, 1);
    CHECK(ri.comm_bytes == comm_volume(16, 16, 32, 4, 0, 2));
}

TEST_CASE("the compression sweep emits nine rows and AP@0.7 never exceeds AP@0.5") {
    SceneConfig sc;
    sc.min_agents = 3;
    sc.max_agents = 3;
    std::vector<Scene> scenes = {generate_scene(70, sc), generate_scene(71, sc)};
    Dataset data = prepare_dataset(scenes, SensorConfig{}, BevConfig{});
    EvalConfig cfg = default_eval();

    std::vector<ModeSpec> modes;
    std::map<std::string, const ParamStore*> checkpoints;
    std::vector<ParamStore> stores;
    stores.reserve(9);
    for (int n = 0; n <= 8; ++n) {
        NetConfig net = cfg.net;
        net.compress_exponent = n;
        ParamStore store;
        Rng rng(80 + n);
        init_pipeline_params(store, net, rng);
        stores.push_back(std::move(store));
        modes.push_back(ModeSpec{CollabMode::Intermediate, n, 0.0});
    }
    for (int n = 0; n <= 8; ++n)
        checkpoints[n == 0 ? "intermediate" : "intermediate_r" + std::to_string(n)] = &stores[n];

    std::vector<uint64_t> seeds = {5};
    std::vector<EvalReport> reports = run_benchmark(checkpoints, modes, data, cfg, seeds);
    CHECK(reports.size() == 9);
    for (const EvalReport& r : reports) CHECK(r.ap70 <= r.ap50);
    // bandwidth halves with every exponent step
    for (int n = 1; n <= 8; ++n) CHECK(reports[n].comm_bytes * 2 == reports[n - 1].comm_bytes);

    std::string csv = sweep_table_csv(reports);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);  // header + 9 rows
    CHECK(csv.rfind("mode,ratio_denominator,noise_std,seed,ap50,ap70,comm_bytes\n", 0) == 0);
}

TEST_CASE("run_benchmark names the missing checkpoint and rejects empty scene sets") {
    EvalConfig cfg = default_eval();
    ParamStore params = pipeline_store(cfg.net, 53);
    std::map<std::string, const ParamStore*> checkpoints = {{"none", &params}};
    std::vector<ModeSpec> modes = {ModeSpec{CollabMode::Early, 0, 0.0}};
    SceneConfig sc;
    sc.min_agents = 2;
    sc.max_agents = 2;
    std::vector<Scene> scenes = {generate_scene(90, sc)};
    Dataset data = prepare_dataset(scenes, SensorConfig{}, BevConfig{});
    std::vector<uint64_t> seeds = {1};
    CHECK_THROWS_WITH_AS(run_benchmark(checkpoints, modes, data, cfg, seeds),
                         doctest::Contains("early"), ConfigError);
    Dataset empty;
    std::vector<ModeSpec> none_mode = {ModeSpec{CollabMode::None, 0, 0.0}};
    CHECK_THROWS_AS(run_benchmark(checkpoints, none_mode, empty, cfg, seeds), ContractError);
}

TEST_CASE("pose noise perturbs warped features only when the std is positive") {
    SceneConfig sc;
    sc.min_agents = 2;
    sc.max_agents = 2;
    std::vector<Scene> scenes = {generate_scene(95, sc)};
    Dataset data = prepare_dataset(scenes, SensorConfig{}, BevConfig{});
    EvalConfig cfg = default_eval();
    ParamStore params = pipeline_store(cfg.net, 54);

    EvalReport clean1 = evaluate(params, ModeSpec{CollabMode::Intermediate, 0, 0.0}, data, cfg, 7);
    EvalReport clean2 = evaluate(params, ModeSpec{CollabMode::Intermediate, 0, 0.0}, data, cfg, 8);
    CHECK(clean1.ap50 == clean2.ap50);  // std 0: seed has no effect on the forward pass

    // a noisy pose changes the fused feature map
    const PreparedScene& ps = data[0];
    Rng rng(11);
    std::vector<SE2> noisy = ps.scene.agents;
    noisy[1] = inject_pose_noise(noisy[1], 0.2, rng);
    DetectionOutput a = run_intermediate(ps, 0, params, cfg, ps.scene.agents);
    DetectionOutput b = run_intermediate(ps, 0, params, cfg, noisy);
    CHECK(a.cls.data() != b.cls.data());
}

TEST_CASE("weight heatmaps cover every sender and sum to one per voxel") {
    SceneConfig sc;
    sc.min_agents = 3;
    sc.max_agents = 3;
    std::vector<Scene> scenes = {generate_scene(96, sc)};
    Dataset data = prepare_dataset(scenes, SensorConfig{}, BevConfig{});
    EvalConfig cfg = default_eval();
    ParamStore params = pipeline_store(cfg.net, 55);
    std::map<int, Tensor> maps = weight_heatmaps(data[0], 0, params, cfg);
    REQUIRE(maps.size() == 3);
    for (int r = 0; r < cfg.net.feat_h(); ++r)
        for (int c = 0; c < cfg.net.feat_w(); ++c) {
            double s = 0.0;
            for (auto& [sender, m] : maps) s += m.at({r, c, 0});
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
}
