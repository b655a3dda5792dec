#include "coview/trainer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <map>

namespace coview {

void LossConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("loss.alpha must lie in [0,1]");
    if (lambda <= 0.0) throw ConfigError("loss.lambda must be positive");
    if (beta_g < 0.0 || beta_l < 0.0) throw ConfigError("loss.beta_g/beta_l must be nonnegative");
    if (alpha > 0.0 && beta_g + beta_l <= 0.0)
        throw ConfigError("loss.beta_g + loss.beta_l must be positive when alpha > 0");
    if (lr_pipeline <= 0.0 || lr_mvmi <= 0.0) throw ConfigError("learning rates must be positive");
    if (gamma <= 0.0 || gamma > 1.0) throw ConfigError("loss.gamma must lie in (0,1]");
    for (size_t i = 1; i < milestones.size(); ++i)
        if (milestones[i] <= milestones[i - 1])
            throw ConfigError("loss.milestones must be strictly increasing");
}

LossBreakdown total_loss(double cls, double reg, double gmi, double lmi, const LossConfig& cfg) {
    cfg.validate();
    LossBreakdown out;
    out.cls = cls;
    out.reg = reg;
    out.gmi = gmi;
    out.lmi = lmi;
    out.mi = cfg.lambda * (cfg.beta_g * gmi + cfg.beta_l * lmi);
    out.total = (1.0 - cfg.alpha) * (cls + reg) + cfg.alpha * out.mi;
    return out;
}

DownstreamLoss downstream_loss(Graph& g, const HeadOutput& head, const LabelGrid& labels) {
    require_dims(head.cls_logits.shape == labels.foreground.shape,
                 "downstream_loss: cls shape " + shape_str(head.cls_logits.shape) +
                     " != labels " + shape_str(labels.foreground.shape));
    require_dims(head.reg.shape == labels.regression.shape,
                 "downstream_loss: reg shape " + shape_str(head.reg.shape) + " != labels " +
                     shape_str(labels.regression.shape));

    int64_t n = labels.foreground.numel();
    double fg_count = 0.0;
    for (double v : labels.foreground.data()) fg_count += v;
    double bg_count = static_cast<double>(n) - fg_count;
    double w_fg = fg_count > 0.0 ? std::clamp(bg_count / fg_count, 1.0, 100.0) : 1.0;

    // class-balanced BCE with logits: y*w_fg*softplus(-x) + (1-y)*softplus(x)
    std::vector<double> fg_w(n), bg_w(n);
    for (int64_t i = 0; i < n; ++i) {
        double y = labels.foreground.data()[i];
        fg_w[i] = y * w_fg;
        bg_w[i] = 1.0 - y;
    }
    Tensor x = head.cls_logits;
    Tensor pos_term = g.mul(g.softplus(g.scale(x, -1.0)), g.input(tensor_of(x.shape, fg_w)));
    Tensor neg_term = g.mul(g.softplus(x), g.input(tensor_of(x.shape, bg_w)));
    Tensor cls_loss = g.mean(g.add(pos_term, neg_term));

    Tensor reg_loss;
    if (fg_count > 0.0) {
        std::vector<double> mask4(labels.regression.numel());
        for (int64_t i = 0; i < labels.regression.numel(); ++i)
            mask4[i] = labels.foreground.data()[i / 4];
        Tensor diff = g.sub(head.reg, g.input(labels.regression));
        Tensor masked = g.mul(g.huber(diff), g.input(tensor_of(labels.regression.shape, mask4)));
        reg_loss = g.scale(g.sum(masked), 1.0 / (4.0 * fg_count));
    } else {
        reg_loss = g.input(zeros({1}));
    }
    return {cls_loss, reg_loss};
}

double lr_schedule(int step, std::span<const int> milestones, double gamma) {
    for (size_t i = 1; i < milestones.size(); ++i)
        require(milestones[i] > milestones[i - 1], "lr_schedule: milestones must be increasing");
    int passed = 0;
    for (int m : milestones)
        if (step >= m) ++passed;
    return std::pow(gamma, passed);
}

void adam_step(ParamStore& store, std::span<const double> group_lrs, int t, const AdamConfig& cfg) {
    require(t >= 1, "adam_step: step index is 1-based");
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (ParamStore::Entry& e : store.entries()) {
        require(e.group >= 0 && e.group < static_cast<int>(group_lrs.size()),
                "adam_step: no learning rate for group " + std::to_string(e.group));
        double lr = group_lrs[e.group];
        std::vector<double> vals = e.value.data();
        for (size_t i = 0; i < vals.size(); ++i) {
            double gr = e.grad[i];
            e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * gr;
            e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * gr * gr;
            double mhat = e.m[i] / bc1;
            double vhat = e.v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        e.value = tensor_of(e.value.shape, std::move(vals));
    }
}

namespace {

Tensor mean_of(Graph& g, const std::vector<Tensor>& terms) {
    require(!terms.empty(), "mean_of: no terms");
    Tensor acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return g.scale(acc, 1.0 / static_cast<double>(terms.size()));
}

// encode + (compress/decompress) + align, for every (ego, sender) pair of one
// scene; collaborative views are produced only when `with_collab`
struct ScenePass {
    std::vector<FeatureMap> individual;          // per agent
    std::vector<std::vector<FeatureMap>> aligned; // [ego][sender index]
    std::vector<FeatureMap> collab;              // per ego (when with_collab)
    std::vector<HeadOutput> heads;               // per ego (when with_heads)
};

ScenePass intermediate_pass(Graph& g, const BoundNet& net, const TrainConfig& cfg,
                            const PreparedScene& ps, bool with_collab, bool with_heads) {
    int n = ps.scene.num_agents();
    ScenePass pass;
    for (int j = 0; j < n; ++j)
        pass.individual.push_back(encode(g, net, cfg.net, ps.bev[j].occupancy, j));

    // a sender's transmitted view is compressed once, in its own frame
    std::vector<Tensor> wire(n);
    if (cfg.net.compress_exponent > 0)
        for (int j = 0; j < n; ++j)
            wire[j] = decompress_feature(
                g, net, cfg.net, compress_feature(g, net, cfg.net, pass.individual[j].data));

    pass.aligned.resize(n);
    for (int ego = 0; ego < n; ++ego) {
        for (int j = 0; j < n; ++j) {
            FeatureMap src = pass.individual[j];
            if (j != ego && cfg.net.compress_exponent > 0)
                src = {wire[j], j, j, ViewOrigin::Individual};
            pass.aligned[ego].push_back(
                warp_to_ego(g, cfg.net, src, ps.scene.agents[j], ps.scene.agents[ego]));
        }
        if (with_collab) {
            FusionResult fr = fuse_views(g, net, pass.individual[ego], pass.aligned[ego]);
            pass.collab.push_back(fr.collab);
            if (with_heads) pass.heads.push_back(decode_and_head(g, net, cfg.net, fr.collab));
        }
    }
    return pass;
}

} // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& cfg) {
    cfg.loss.validate();
    cfg.net.validate();
    require(cfg.batch >= 1, "train: batch size must be >= 1");
    require(cfg.epochs >= 1, "train: epochs must be >= 1");
    require(static_cast<int>(dataset.size()) >= 2 * cfg.batch,
            "train: dataset of " + std::to_string(dataset.size()) +
                " scenes cannot form disjoint negative batches of size " +
                std::to_string(cfg.batch));
    require(cfg.mode != CollabMode::Late, "train: late collaboration has no trainable pipeline");

    bool mi_on = cfg.mode == CollabMode::Intermediate && cfg.loss.alpha > 0.0;
    int n_agents = dataset.front().scene.num_agents();
    if (mi_on)
        for (const PreparedScene& ps : dataset)
            require(ps.scene.num_agents() == n_agents,
                    "train: pair sampling requires a uniform agent count across the dataset");

    Rng master(cfg.seed);
    Rng init_rng = master.fork(1);
    Rng shuffle_rng = master.fork(2);
    Rng negative_rng = master.fork(3);
    Rng pair_rng = master.fork(4);

    TrainResult result;
    init_pipeline_params(result.params, cfg.net, init_rng);
    if (cfg.mode == CollabMode::Intermediate)
        init_mvmi_params(result.params, cfg.mvmi, cfg.net, init_rng);
    ParamStore& params = result.params;

    std::map<std::pair<int, int>, BevGrid> early_cache;
    auto early_bev = [&](int scene_idx, int ego) -> const BevGrid& {
        auto key = std::make_pair(scene_idx, ego);
        auto it = early_cache.find(key);
        if (it != early_cache.end()) return it->second;
        const PreparedScene& ps = dataset[scene_idx];
        BevGrid agg = early_aggregate(ps.bev, ps.scene.agents, ego, cfg.bev);
        return early_cache.emplace(key, std::move(agg)).first->second;
    };

    std::vector<int> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    const std::vector<double> group_base = {cfg.loss.lr_pipeline, cfg.loss.lr_mvmi};
    int iterations_per_epoch = static_cast<int>(dataset.size()) / cfg.batch;
    int step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double mult = lr_schedule(epoch, cfg.loss.milestones, cfg.loss.gamma);
        std::vector<double> lrs = {group_base[0] * mult, group_base[1] * mult};

        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        LossBreakdown epoch_sum;
        for (int it = 0; it < iterations_per_epoch; ++it) {
            std::vector<int> batch_idx(order.begin() + it * cfg.batch,
                                       order.begin() + (it + 1) * cfg.batch);
            std::vector<int> neg_idx;
            if (mi_on) {
                std::vector<int> pool;
                for (size_t k = 0; k < dataset.size(); ++k) {
                    bool used = false;
                    for (int b : batch_idx) used = used || b == static_cast<int>(k);
                    if (!used) pool.push_back(static_cast<int>(k));
                }
                for (int k = 0; k < cfg.batch; ++k) {
                    int pick = negative_rng.uniform_int(0, static_cast<int>(pool.size()) - 1 - k);
                    neg_idx.push_back(pool[pick]);
                    std::swap(pool[pick], pool[pool.size() - 1 - k]);
                }
            }

            Graph g;
            GraphBinding binding = bind_params(g, params, true);
            BoundNet net = make_bound_net(params, binding);

            std::vector<Tensor> cls_terms, reg_terms;
            std::vector<std::vector<SceneViews>> views_by_ego(n_agents);

            for (int bi : batch_idx) {
                const PreparedScene& ps = dataset[bi];
                int n = ps.scene.num_agents();
                switch (cfg.mode) {
                    case CollabMode::None: {
                        for (int a = 0; a < n; ++a) {
                            FeatureMap f = encode(g, net, cfg.net, ps.bev[a].occupancy, a);
                            HeadOutput head = decode_and_head(g, net, cfg.net, f);
                            DownstreamLoss dl = downstream_loss(g, head, ps.labels[a]);
                            cls_terms.push_back(dl.cls_loss);
                            reg_terms.push_back(dl.reg_loss);
                        }
                        break;
                    }
                    case CollabMode::Early: {
                        for (int a = 0; a < n; ++a) {
                            FeatureMap f =
                                encode(g, net, cfg.net, early_bev(bi, a).occupancy, a);
                            HeadOutput head = decode_and_head(g, net, cfg.net, f);
                            DownstreamLoss dl = downstream_loss(g, head, ps.labels[a]);
                            cls_terms.push_back(dl.cls_loss);
                            reg_terms.push_back(dl.reg_loss);
                        }
                        break;
                    }
                    case CollabMode::Intermediate: {
                        ScenePass pass = intermediate_pass(g, net, cfg, ps, true, true);
                        for (int ego = 0; ego < n; ++ego) {
                            DownstreamLoss dl = downstream_loss(g, pass.heads[ego], ps.labels[ego]);
                            cls_terms.push_back(dl.cls_loss);
                            reg_terms.push_back(dl.reg_loss);
                            if (mi_on) {
                                SceneViews sv;
                                sv.scene_id = ps.scene.id;
                                sv.aligned = pass.aligned[ego];
                                sv.collab = pass.collab[ego];
                                sv.has_collab = true;
                                views_by_ego[ego].push_back(std::move(sv));
                            }
                        }
                        break;
                    }
                    case CollabMode::Late:
                        break;  // rejected above
                }
            }

            Tensor cls_mean = mean_of(g, cls_terms);
            Tensor reg_mean = mean_of(g, reg_terms);

            LossBreakdown bd;
            Tensor total;
            if (mi_on) {
                std::vector<std::vector<SceneViews>> neg_by_ego(n_agents);
                for (int ni : neg_idx) {
                    const PreparedScene& ps = dataset[ni];
                    ScenePass pass = intermediate_pass(g, net, cfg, ps, false, false);
                    for (int ego = 0; ego < n_agents; ++ego) {
                        SceneViews sv;
                        sv.scene_id = ps.scene.id;
                        sv.aligned = pass.aligned[ego];
                        neg_by_ego[ego].push_back(std::move(sv));
                    }
                }
                BoundMvmi disc = make_bound_mvmi(params, binding);
                std::vector<Tensor> gmi_terms, lmi_terms;
                for (int ego = 0; ego < n_agents; ++ego) {
                    PairBatch pb = sample_pairs(views_by_ego[ego], neg_by_ego[ego], ego,
                                                pair_rng.next_u64());
                    MvmiTerms terms =
                        mvmi_objective(g, disc, pb, cfg.loss.beta_g, cfg.loss.beta_l);
                    gmi_terms.push_back(terms.gmi_loss);
                    lmi_terms.push_back(terms.lmi_loss);
                }
                Tensor gmi_mean = mean_of(g, gmi_terms);
                Tensor lmi_mean = mean_of(g, lmi_terms);
                Tensor mi = g.scale(g.add(g.scale(gmi_mean, cfg.loss.beta_g),
                                          g.scale(lmi_mean, cfg.loss.beta_l)),
                                    cfg.loss.lambda);
                total = g.add(g.scale(g.add(cls_mean, reg_mean), 1.0 - cfg.loss.alpha),
                              g.scale(mi, cfg.loss.alpha));
                bd = total_loss(cls_mean.scalar(), reg_mean.scalar(), gmi_mean.scalar(),
                                lmi_mean.scalar(), cfg.loss);
            } else {
                total = g.scale(g.add(cls_mean, reg_mean), 1.0 - cfg.loss.alpha);
                bd = total_loss(cls_mean.scalar(), reg_mean.scalar(), 0.0, 0.0, cfg.loss);
            }

            params.zero_grads();
            g.backward(total);
            pull_grads(g, params, binding);
            adam_step(params, lrs, ++step);

            epoch_sum.cls += bd.cls;
            epoch_sum.reg += bd.reg;
            epoch_sum.gmi += bd.gmi;
            epoch_sum.lmi += bd.lmi;
            epoch_sum.mi += bd.mi;
            epoch_sum.total += bd.total;
        }

        EpochLog log;
        log.epoch = epoch;
        double inv = 1.0 / std::max(1, iterations_per_epoch);
        log.mean = {epoch_sum.cls * inv, epoch_sum.reg * inv,  epoch_sum.gmi * inv,
                    epoch_sum.lmi * inv, epoch_sum.mi * inv,   epoch_sum.total * inv};
        log.lr_mult = mult;
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(log);
    }
    return result;
}

std::string train_log_to_jsonl(std::span<const EpochLog> log) {
    std::string out;
    for (const EpochLog& e : log) {
        nlohmann::json j;
        j["epoch"] = e.epoch;
        j["cls"] = e.mean.cls;
        j["reg"] = e.mean.reg;
        j["gmi"] = e.mean.gmi;
        j["lmi"] = e.mean.lmi;
        j["mi"] = e.mean.mi;
        j["total"] = e.mean.total;
        j["lr_mult"] = e.lr_mult;
        j["wall_seconds"] = e.wall_seconds;
        out += j.dump();
        out += "\n";
    }
    return out;
}

} // namespace coview
