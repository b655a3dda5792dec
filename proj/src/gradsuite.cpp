#include "coview/gradsuite.hpp"

#include <functional>

#include "coview/mvmi.hpp"
#include "coview/net.hpp"
#include "coview/rng.hpp"

namespace coview {

namespace {

Tensor rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return tensor_of(shape, v);
}

// bounded away from zero so the relu kink cannot sit inside the FD stencil
Tensor rand_signed(const Shape& shape, Rng& rng, double gap = 0.05) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        double m = rng.uniform(gap, 1.0);
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return tensor_of(shape, v);
}

using CaseFn = std::function<double(Rng&)>;  // returns max relative error

GradCheckItem run_item(const std::string& name, double tol, int seeds, const CaseFn& fn) {
    GradCheckItem item;
    item.name = name;
    item.tolerance = tol;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(1000 + 17 * s);
        item.worst = std::max(item.worst, fn(rng));
    }
    item.pass = item.worst <= tol;
    return item;
}

double quadratic_probe(const ScalarFn& f, const Tensor& point, double step = 1e-6) {
    return finite_difference_check(f, point, step).max_rel_err;
}

} // namespace

GradSuiteResult run_gradient_suite(int seeds) {
    GradSuiteResult suite;
    auto add = [&](const std::string& name, double tol, const CaseFn& fn) {
        suite.items.push_back(run_item(name, tol, seeds, fn));
    };

    add("linear.input", 1e-6, [](Rng& rng) {
        Tensor w = rand_tensor({16, 8}, rng);
        Tensor b = rand_tensor({8}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor bb = g.input(b);
                Tensor y = g.linear(x, g.input(w), &bb);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({16}, rng), 1e-5);
    });
    add("linear.weight", 1e-6, [](Rng& rng) {
        Tensor x = rand_tensor({12}, rng);
        Tensor b = rand_tensor({6}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& w) {
                Tensor bb = g.input(b);
                Tensor y = g.linear(g.input(x), w, &bb);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({12, 6}, rng), 1e-5);
    });
    add("linear.bias", 1e-6, [](Rng& rng) {
        Tensor x = rand_tensor({5, 12}, rng);
        Tensor w = rand_tensor({12, 6}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& b) {
                Tensor y = g.linear(g.input(x), g.input(w), &b);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({6}, rng), 1e-5);
    });
    add("activation.relu", 1e-6, [](Rng& rng) {
        return quadratic_probe(
            [](Graph& g, const Tensor& x) { return g.mean(g.mul(g.relu(x), g.relu(x))); },
            rand_signed({48}, rng));
    });
    add("activation.sigmoid", 1e-6, [](Rng& rng) {
        return quadratic_probe([](Graph& g, const Tensor& x) { return g.mean(g.sigmoid(x)); },
                               rand_tensor({48}, rng, -3.0, 3.0));
    });
    add("activation.softplus", 1e-6, [](Rng& rng) {
        return quadratic_probe([](Graph& g, const Tensor& x) { return g.mean(g.softplus(x)); },
                               rand_tensor({48}, rng, -3.0, 3.0));
    });
    add("conv2d.input", 1e-4, [](Rng& rng) {
        Tensor k = rand_tensor({3, 3, 2, 4}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.conv2d(x, g.input(k), 1, Padding::Same);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({8, 8, 2}, rng));
    });
    add("conv2d.kernel", 1e-4, [](Rng& rng) {
        Tensor x = rand_tensor({8, 8, 2}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& k) {
                Tensor y = g.conv2d(g.input(x), k, 2, Padding::Same);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({3, 3, 2, 4}, rng));
    });
    add("channel_bias", 1e-4, [](Rng& rng) {
        Tensor x = rand_tensor({5, 5, 3}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& b) {
                Tensor y = g.channel_bias(g.input(x), b);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({3}, rng));
    });
    add("bilinear_warp", 1e-4, [](Rng& rng) {
        SE2 tau = SE2::make(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1));
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.bilinear_warp(x, tau);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({7, 7, 2}, rng));
    });
    add("softmax_channels", 1e-4, [](Rng& rng) {
        Tensor coef = rand_tensor({3, 3, 4}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                return g.mean(g.mul(g.softmax_channels(x), g.input(coef)));
            },
            rand_tensor({3, 3, 4}, rng, -2.0, 2.0));
    });
    add("mul_channel", 1e-4, [](Rng& rng) {
        Tensor w = rand_tensor({4, 4, 1}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.mul_channel(x, g.input(w));
                return g.mean(g.mul(y, y));
            },
            rand_tensor({4, 4, 3}, rng));
    });
    add("concat_slice", 1e-4, [](Rng& rng) {
        Tensor b = rand_tensor({4, 4, 2}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.slice_channels(g.concat_channels({x, g.input(b)}), 1, 4);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({4, 4, 3}, rng));
    });
    add("pool_upsample", 1e-4, [](Rng& rng) {
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.upsample_nearest(g.avgpool(x, 2, 2), 2, 2);
                return g.mean(g.mul(y, y));
            },
            rand_tensor({6, 6, 2}, rng));
    });
    add("elementwise", 1e-4, [](Rng& rng) {
        Tensor b = rand_tensor({20}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor y = g.sub(g.mul(x, g.input(b)), g.scale(x, 0.7));
                return g.add(g.sum(g.huber(y)), g.mean(g.mul(x, x)));
            },
            rand_tensor({20}, rng));
    });
    add("stack_rows", 1e-4, [](Rng& rng) {
        Tensor v = rand_tensor({5}, rng);
        Tensor other = rand_tensor({3, 8}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& x) {
                Tensor rows = g.rows_with_vector(x, g.input(v));  // [9, 8]
                Tensor stacked = g.vstack({rows, g.input(other)});
                return g.mean(g.mul(stacked, stacked));
            },
            rand_tensor({3, 3, 3}, rng));
    });

    // composites at an 8x8 grid
    NetConfig net;
    net.bev_h = 8;
    net.bev_w = 8;
    net.bev_c = 2;
    net.enc_mid = 4;
    net.enc_out = 6;
    net.col_mid = 4;
    net.dec_mid = 4;
    net.dec_out = 4;
    MvmiConfig mvmi;
    mvmi.proj_dim = 8;
    mvmi.global_width = 12;
    mvmi.local_width = 8;

    add("composite.encode_warp_fuse_decode", 1e-4, [&](Rng& rng) {
        ParamStore store;
        Rng init = rng.fork(1);
        init_pipeline_params(store, net, init);
        Tensor bev_b = rand_tensor({8, 8, 2}, rng, 0.05, 1.0);
        SE2 pose_b = SE2::make(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5));
        // the deep composite needs a wider stencil: at 1e-6 the eps/h roundoff
        // dominates the near-zero boundary gradients
        return quadratic_probe(
            [&](Graph& g, const Tensor& probe) {
                BoundNet bn = make_bound_net(store, bind_params(g, store, false));
                FeatureMap fa = encode(g, bn, net, probe, 0);
                FeatureMap fb = encode(g, bn, net, bev_b, 1);
                FeatureMap aa = warp_to_ego(g, net, fa, SE2{}, SE2{});
                FeatureMap ab = warp_to_ego(g, net, fb, pose_b, SE2{});
                FusionResult fr = fuse_views(g, bn, fa, {aa, ab});
                HeadOutput head = decode_and_head(g, bn, net, fr.collab);
                return g.add(g.mean(g.mul(head.cls_logits, head.cls_logits)),
                             g.mean(g.mul(head.reg, head.reg)));
            },
            rand_tensor({8, 8, 2}, rng, 0.05, 1.0), 1e-5);
    });
    add("composite.score_global", 1e-4, [&](Rng& rng) {
        ParamStore store;
        Rng init = rng.fork(2);
        init_mvmi_params(store, mvmi, net, init);
        Tensor collab = rand_tensor({4, 4, 6}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& probe) {
                BoundMvmi d = make_bound_mvmi(store, bind_params(g, store, false));
                FeatureMap ind{probe, 0, 0, ViewOrigin::Aligned};
                FeatureMap col{g.input(collab), 0, 0, ViewOrigin::Collaborative};
                return score_global(g, d, ind, col);
            },
            rand_tensor({4, 4, 6}, rng));
    });
    add("composite.score_local", 1e-4, [&](Rng& rng) {
        ParamStore store;
        Rng init = rng.fork(3);
        init_mvmi_params(store, mvmi, net, init);
        Tensor collab = rand_tensor({4, 4, 6}, rng);
        return quadratic_probe(
            [&](Graph& g, const Tensor& probe) {
                BoundMvmi d = make_bound_mvmi(store, bind_params(g, store, false));
                FeatureMap ind{probe, 0, 0, ViewOrigin::Aligned};
                FeatureMap col{g.input(collab), 0, 0, ViewOrigin::Collaborative};
                Tensor map = score_local(g, d, ind, col);
                return g.mean(g.mul(map, map));
            },
            rand_tensor({4, 4, 6}, rng));
    });

    suite.all_pass = true;
    for (const GradCheckItem& item : suite.items) suite.all_pass = suite.all_pass && item.pass;
    return suite;
}

} // namespace coview
