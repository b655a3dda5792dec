#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "coview/gradcheck.hpp"
#include "coview/net.hpp"
#include "test_util.hpp"

using namespace coview;
using namespace coview::testutil;

namespace {

NetConfig tiny_net() {
    NetConfig cfg;
    cfg.bev_h = 8;
    cfg.bev_w = 8;
    cfg.bev_c = 2;
    cfg.enc_mid = 4;
    cfg.enc_out = 6;
    cfg.col_mid = 4;
    cfg.dec_mid = 4;
    cfg.dec_out = 4;
    return cfg;
}

ParamStore make_store(const NetConfig& cfg, uint64_t seed) {
    ParamStore store;
    Rng rng(seed);
    init_pipeline_params(store, cfg, rng);
    return store;
}

} // namespace

TEST_CASE("encode produces the configured (Hb/2 x Wb/2 x C) feature map") {
    NetConfig cfg;  // defaults: 32x32x4 -> 16x16x32
    ParamStore store = make_store(cfg, 1);
    Graph g;
    GraphBinding b = bind_params(g, store, false);
    BoundNet net = make_bound_net(store, b);
    Rng rng(2);
    FeatureMap f = encode(g, net, cfg, rand_tensor({32, 32, 4}, rng, 0.0, 1.0), 0);
    CHECK(f.data.shape == Shape{16, 16, 32});
    CHECK(f.origin == ViewOrigin::Individual);
}

TEST_CASE("an all-zero BEV encodes to a spatially constant, bias-determined map") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 3);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap f = encode(g, net, cfg, zeros({8, 8, 2}), 0);
    for (int ch = 0; ch < cfg.enc_out; ++ch) {
        double ref = f.data.at({0, 0, ch});
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) CHECK(f.data.at({r, c, ch}) == ref);
        CHECK(ref == 0.0);  // freshly initialized biases are zero
    }
}

TEST_CASE("encode gradient w.r.t. the BEV input passes the 1e-4 composite check") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 4);
    Rng rng(5);
    Tensor bev = rand_tensor({8, 8, 2}, rng, 0.05, 1.0);
    auto f = [&](Graph& g, const Tensor& probe) {
        BoundNet net = make_bound_net(store, bind_params(g, store, false));
        FeatureMap fm = encode(g, net, cfg, probe, 0);
        return g.mean(g.mul(fm.data, fm.data));
    };
    CHECK(finite_difference_check(f, bev, 1e-6).max_rel_err <= 1e-4);
}

TEST_CASE("warp_to_ego with identical poses is exact") {
    NetConfig cfg = tiny_net();
    Rng rng(6);
    Graph g;
    Tensor data = g.input(rand_tensor({4, 4, 6}, rng));
    FeatureMap view{data, 1, 1, ViewOrigin::Individual};
    SE2 pose = SE2::make(3.3, -1.7, 0.8);
    FeatureMap aligned = warp_to_ego(g, cfg, view, pose, pose);
    CHECK(aligned.origin == ViewOrigin::Aligned);
    CHECK(max_abs_diff(aligned.data.data(), data.data()) == 0.0);
}

TEST_CASE("a 4 m offset at 0.5 m/voxel feature resolution shifts an impulse 8 voxels") {
    NetConfig cfg;
    cfg.bev_res = 0.25;  // feature resolution = 0.5 m/voxel
    Graph g;
    std::vector<double> v(16 * 16, 0.0);
    v[8 * 16 + 3] = 1.0;  // impulse at (row 8, col 3)
    FeatureMap view{g.input(tensor_of({16, 16, 1}, v)), 1, 1, ViewOrigin::Individual};
    SE2 ego = SE2::make(0.0, 0.0, 0.0);
    SE2 sender = SE2::make(4.0, 0.0, 0.0);
    FeatureMap aligned = warp_to_ego(g, cfg, view, sender, ego);
    CHECK(aligned.data.at({8, 11, 0}) == 1.0);
    double total = 0.0;
    for (double x : aligned.data.data()) total += x;
    CHECK(total == 1.0);
}

TEST_CASE("fuse with one view is the identity and with two identical views reproduces them") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 7);
    Rng rng(8);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, rng, 0.0, 1.0), 0);
    FeatureMap self_aligned = ego;
    self_aligned.origin = ViewOrigin::Aligned;

    FusionResult one = fuse_views(g, net, ego, {self_aligned});
    CHECK(one.collab.origin == ViewOrigin::Collaborative);
    CHECK(max_abs_diff(one.collab.data.data(), ego.data.data()) == 0.0);

    FeatureMap twin = self_aligned;
    twin.sender = 1;
    FusionResult two = fuse_views(g, net, ego, {self_aligned, twin});
    CHECK(max_abs_diff(two.collab.data.data(), ego.data.data()) == 0.0);
    for (const Tensor& w : two.weights)
        for (double x : w.data()) CHECK(x == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fuse requires the ego view and rejects empty lists") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 9);
    Rng rng(10);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, rng, 0.0, 1.0), 0);
    CHECK_THROWS_AS(fuse_views(g, net, ego, {}), ContractError);
    FeatureMap other = ego;
    other.sender = 2;
    other.origin = ViewOrigin::Aligned;
    CHECK_THROWS_AS(fuse_views(g, net, ego, {other}), ContractError);
}

TEST_CASE("fused voxels equal the hand-computed softmax-weighted sum") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 11);
    Rng rng(12);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, rng, 0.0, 1.0), 0);
    std::vector<FeatureMap> views;
    for (int j = 0; j < 3; ++j) {
        FeatureMap v{g.input(rand_tensor({4, 4, 6}, rng)), 0, j, ViewOrigin::Aligned};
        views.push_back(v);
    }
    std::vector<Tensor> logits;
    for (const FeatureMap& v : views) logits.push_back(collab_logits(g, net, v, ego));
    FusionResult fr = fuse_views(g, net, ego, views);

    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            double z[3], mx = -1e300;
            for (int j = 0; j < 3; ++j) mx = std::max(mx, logits[j].at({r, c, 0}));
            double denom = 0.0;
            for (int j = 0; j < 3; ++j) {
                z[j] = std::exp(logits[j].at({r, c, 0}) - mx);
                denom += z[j];
            }
            for (int ch = 0; ch < 6; ++ch) {
                double expect = 0.0;
                for (int j = 0; j < 3; ++j) expect += z[j] / denom * views[j].data.at({r, c, ch});
                CHECK(std::fabs(fr.collab.data.at({r, c, ch}) - expect) <= 1e-12);
            }
        }
}

TEST_CASE("fusion weights form a per-voxel simplex and ignore caller ordering") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 13);
    Rng rng(14);
    auto build = [&](const std::vector<int>& order) {
        Graph g;
        BoundNet net = make_bound_net(store, bind_params(g, store, false));
        Rng local(99);
        FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, local, 0.0, 1.0), 0);
        std::vector<FeatureMap> pool;
        for (int j = 0; j < 3; ++j)
            pool.push_back({g.input(rand_tensor({4, 4, 6}, local)), 0, j, ViewOrigin::Aligned});
        std::vector<FeatureMap> shuffled;
        for (int idx : order) shuffled.push_back(pool[idx]);
        FusionResult fr = fuse_views(g, net, ego, shuffled);
        return std::make_pair(fr.collab.data.data(), fr);
    };
    auto [a, fa] = build({0, 1, 2});
    auto [b, fb] = build({2, 0, 1});
    CHECK(a == b);  // bitwise identical under permutation
    CHECK(fa.senders == fb.senders);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            double s = 0.0;
            for (const Tensor& w : fa.weights) {
                double x = w.at({r, c, 0});
                CHECK(x >= 0.0);
                CHECK(x <= 1.0);
                s += x;
            }
            CHECK(std::fabs(s - 1.0) <= 1e-6);
        }
}

TEST_CASE("forcing constant collaboration logits reduces fusion to the arithmetic mean") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 15);
    store.at("col.conv2.w").value = zeros(store.at("col.conv2.w").value.shape);
    store.at("col.conv2.b").value = zeros({1});
    Rng rng(16);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, rng, 0.0, 1.0), 0);
    std::vector<FeatureMap> views;
    for (int j = 0; j < 4; ++j)
        views.push_back({g.input(rand_tensor({4, 4, 6}, rng)), 0, j, ViewOrigin::Aligned});
    FusionResult fr = fuse_views(g, net, ego, views);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            for (int ch = 0; ch < 6; ++ch) {
                double mean = 0.0;
                for (const FeatureMap& v : views) mean += v.data.at({r, c, ch});
                mean /= 4.0;
                CHECK(std::fabs(fr.collab.data.at({r, c, ch}) - mean) <= 1e-12);
            }
}

TEST_CASE("decode_and_head emits sigmoid scores in (0,1) and respects the threshold") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 17);
    Rng rng(18);
    Graph g;
    BoundNet net = make_bound_net(store, bind_params(g, store, false));
    FeatureMap ego = encode(g, net, cfg, rand_tensor({8, 8, 2}, rng, 0.0, 1.0), 0);
    FeatureMap self = ego;
    self.origin = ViewOrigin::Aligned;
    FusionResult fr = fuse_views(g, net, ego, {self});
    HeadOutput head = decode_and_head(g, net, cfg, fr.collab);
    CHECK(head.cls.shape == Shape{8, 8});
    CHECK(head.reg.shape == Shape{8, 8, 4});
    for (double v : head.cls.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK(decode_boxes(head, cfg, 1.0).empty());
}

TEST_CASE("gradient check through fuse and decode at an 8x8 grid stays under 1e-4") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 19);
    Rng rng(20);
    Tensor bev_a = rand_tensor({8, 8, 2}, rng, 0.05, 1.0);
    Tensor bev_b = rand_tensor({8, 8, 2}, rng, 0.05, 1.0);
    SE2 pose_a = SE2::make(0.0, 0.0, 0.0);
    SE2 pose_b = SE2::make(0.9, -0.6, 0.25);
    auto composite = [&](Graph& g, const Tensor& probe) {
        BoundNet net = make_bound_net(store, bind_params(g, store, false));
        FeatureMap fa = encode(g, net, cfg, probe, 0);
        FeatureMap fb = encode(g, net, cfg, bev_b, 1);
        FeatureMap aa = warp_to_ego(g, cfg, fa, pose_a, pose_a);
        FeatureMap ab = warp_to_ego(g, cfg, fb, pose_b, pose_a);
        FusionResult fr = fuse_views(g, net, fa, {aa, ab});
        HeadOutput head = decode_and_head(g, net, cfg, fr.collab);
        Tensor loss = g.add(g.mean(g.mul(head.cls_logits, head.cls_logits)),
                            g.mean(g.mul(head.reg, head.reg)));
        return loss;
    };
    CHECK(finite_difference_check(composite, bev_a, 1e-6).max_rel_err <= 1e-4);
}

TEST_CASE("a classification loss reaches every contributing agent's BEV through warp and fuse") {
    NetConfig cfg = tiny_net();
    ParamStore store = make_store(cfg, 21);
    Rng rng(22);
    Graph g;
    GraphBinding binding = bind_params(g, store, true);
    BoundNet net = make_bound_net(store, binding);
    Tensor bev_a = g.param(rand_tensor({8, 8, 2}, rng, 0.0, 1.0));
    Tensor bev_b = g.param(rand_tensor({8, 8, 2}, rng, 0.0, 1.0));
    FeatureMap fa = encode(g, net, cfg, bev_a, 0);
    FeatureMap fb = encode(g, net, cfg, bev_b, 1);
    FeatureMap aa = warp_to_ego(g, cfg, fa, SE2{}, SE2{});
    FeatureMap ab = warp_to_ego(g, cfg, fb, SE2::make(1.0, 0.5, 0.2), SE2{});
    FusionResult fr = fuse_views(g, net, fa, {aa, ab});
    HeadOutput head = decode_and_head(g, net, cfg, fr.collab);
    g.backward(g.mean(g.mul(head.cls_logits, head.cls_logits)));
    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    CHECK(norm(g.grad(bev_a)) > 0.0);
    CHECK(norm(g.grad(bev_b)) > 0.0);
    CHECK(norm(g.grad(binding.get(store, "enc.conv1.w"))) > 0.0);
    CHECK(norm(g.grad(binding.get(store, "col.conv1.w"))) > 0.0);
}

TEST_CASE("nms keeps a single box and drops exact duplicates by score") {
    std::vector<ScoredBox> one = {{Rect{0, 0, 2, 2}, 0.7}};
    std::vector<ScoredBox> kept = nms(one, 0.1);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.7);

    std::vector<ScoredBox> dup = {{Rect{0, 0, 2, 2}, 0.8}, {Rect{0, 0, 2, 2}, 0.9}};
    kept = nms(dup, 0.1);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
}

namespace {
// independent reference: a box survives iff no surviving higher-priority box
// overlaps it; recomputed by fixpoint rather than a single greedy pass
std::vector<ScoredBox> reference_nms(std::vector<ScoredBox> boxes, double iou) {
    std::sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
        if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
        if (a.box.w != b.box.w) return a.box.w < b.box.w;
        return a.box.l < b.box.l;
    });
    std::vector<int> alive(boxes.size(), -1);  // -1 unknown, 0 dead, 1 alive
    for (size_t i = 0; i < boxes.size(); ++i) {
        bool dead = false;
        for (size_t j = 0; j < i; ++j)
            if (alive[j] == 1 && rect_iou(boxes[i].box, boxes[j].box) > iou) dead = true;
        alive[i] = dead ? 0 : 1;
    }
    std::vector<ScoredBox> out;
    for (size_t i = 0; i < boxes.size(); ++i)
        if (alive[i] == 1) out.push_back(boxes[i]);
    return out;
}
} // namespace

TEST_CASE("nms matches the brute-force reference on random instances") {
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<ScoredBox> boxes;
        int n = rng.uniform_int(1, 10);
        for (int i = 0; i < n; ++i) {
            Rect r{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(0.5, 3), rng.uniform(0.5, 3)};
            boxes.push_back({r, rng.uniform(0.1, 1.0)});
        }
        double iou = rng.uniform(0.05, 0.6);
        std::vector<ScoredBox> a = nms(boxes, iou);
        std::vector<ScoredBox> b = reference_nms(boxes, iou);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].score == b[i].score);
            CHECK(a[i].box.cx == b[i].box.cx);
            CHECK(a[i].box.cy == b[i].box.cy);
        }
    }
}

TEST_CASE("checkpoints round trip bitwise") {
    NetConfig cfg = tiny_net();
    cfg.compress_exponent = 2;
    ParamStore store = make_store(cfg, 24);
    std::string path = "/tmp/coview_test_ckpt.bin";
    store.save(path);
    ParamStore back = ParamStore::load(path);
    REQUIRE(back.size() == store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& a = store.entries()[i];
        const auto& b = back.entries()[i];
        CHECK(a.name == b.name);
        CHECK(a.group == b.group);
        CHECK(a.value.shape == b.value.shape);
        CHECK(a.value.data() == b.value.data());
    }
    std::remove(path.c_str());
}

TEST_CASE("compression transmits the advertised channel counts and round-trips shapes") {
    // ratio 1: bypass
    NetConfig plain;
    plain.compress_exponent = 0;
    ParamStore store0 = make_store(plain, 25);
    Graph g0;
    BoundNet net0 = make_bound_net(store0, bind_params(g0, store0, false));
    Rng rng(26);
    Tensor f = g0.input(rand_tensor({16, 16, 32}, rng));
    Tensor sent = compress_feature(g0, net0, plain, f);
    CHECK(sent.values.get() == f.values.get());

    // ratio 1/4 with C=32 transmits 8 channels
    NetConfig quarter;
    quarter.compress_exponent = 2;
    CHECK(quarter.wire_channels() == 8);

    // every ratio 1/2^n, n=1..8, preserves shape through the round trip
    for (int n = 1; n <= 8; ++n) {
        NetConfig cfg;
        cfg.compress_exponent = n;
        cfg.validate();
        ParamStore store = make_store(cfg, 100 + n);
        Graph g;
        BoundNet net = make_bound_net(store, bind_params(g, store, false));
        Tensor feat = g.input(rand_tensor({16, 16, 32}, rng));
        Tensor wire = compress_feature(g, net, cfg, feat);
        CHECK(wire.numel() == feat.numel() / (1LL << n));
        Tensor back = decompress_feature(g, net, cfg, wire);
        CHECK(back.shape == feat.shape);
    }
}
