#include "coview/mvmi.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace coview {

void MvmiConfig::validate() const {
    if (proj_dim <= 0 || global_width <= 0 || local_width <= 0)
        throw ConfigError("mvmi: widths must be positive");
}

namespace {
Tensor init_weight(const Shape& shape, double fan_in, Rng& rng, double gain) {
    std::vector<double> v(shape_numel(shape));
    double std = gain * std::sqrt(1.0 / fan_in);
    for (double& x : v) x = rng.normal(0.0, std);
    return tensor_of(shape, v);
}
} // namespace

void init_mvmi_params(ParamStore& store, const MvmiConfig& cfg, const NetConfig& net, Rng& rng) {
    cfg.validate();
    const double relu_gain = std::sqrt(2.0);
    int flat = net.feat_h() * net.feat_w() * net.enc_out;
    int d = cfg.proj_dim;
    int gw = cfg.global_width;
    store.add("mvmi.proj.w", init_weight({flat, d}, flat, rng, 1.0), kGroupMvmi);
    store.add("mvmi.proj.b", zeros({d}), kGroupMvmi);
    store.add("mvmi.g1.w", init_weight({flat + d, gw}, flat + d, rng, relu_gain), kGroupMvmi);
    store.add("mvmi.g1.b", zeros({gw}), kGroupMvmi);
    store.add("mvmi.g2.w", init_weight({gw, gw}, gw, rng, relu_gain), kGroupMvmi);
    store.add("mvmi.g2.b", zeros({gw}), kGroupMvmi);
    store.add("mvmi.g3.w", init_weight({gw, 1}, gw, rng, 1.0), kGroupMvmi);
    store.add("mvmi.g3.b", zeros({1}), kGroupMvmi);
    int lw = cfg.local_width;
    store.add("mvmi.l1.w", init_weight({net.enc_out + d, lw}, net.enc_out + d, rng, relu_gain),
              kGroupMvmi);
    store.add("mvmi.l1.b", zeros({lw}), kGroupMvmi);
    store.add("mvmi.l2.w", init_weight({lw, 1}, lw, rng, 1.0), kGroupMvmi);
    store.add("mvmi.l2.b", zeros({1}), kGroupMvmi);
}

BoundMvmi make_bound_mvmi(const ParamStore& store, const GraphBinding& b) {
    BoundMvmi d;
    d.projw = b.get(store, "mvmi.proj.w");
    d.projb = b.get(store, "mvmi.proj.b");
    d.g1w = b.get(store, "mvmi.g1.w");
    d.g1b = b.get(store, "mvmi.g1.b");
    d.g2w = b.get(store, "mvmi.g2.w");
    d.g2b = b.get(store, "mvmi.g2.b");
    d.g3w = b.get(store, "mvmi.g3.w");
    d.g3b = b.get(store, "mvmi.g3.b");
    d.l1w = b.get(store, "mvmi.l1.w");
    d.l1b = b.get(store, "mvmi.l1.b");
    d.l2w = b.get(store, "mvmi.l2.w");
    d.l2b = b.get(store, "mvmi.l2.b");
    return d;
}

PairBatch sample_pairs(std::span<const SceneViews> batch, std::span<const SceneViews> negatives,
                       int ego, uint64_t seed) {
    require(!batch.empty() && !negatives.empty(), "sample_pairs: scene lists must be nonempty");
    require(batch.size() == negatives.size(),
            "sample_pairs: need one negative scene per batch scene");

    std::set<int64_t> batch_ids, neg_ids;
    for (const SceneViews& s : batch) batch_ids.insert(s.scene_id);
    for (const SceneViews& s : negatives) neg_ids.insert(s.scene_id);
    require(batch_ids.size() == batch.size() && neg_ids.size() == negatives.size(),
            "sample_pairs: duplicate scene ids within a list");
    for (int64_t id : batch_ids)
        require(!neg_ids.count(id),
                "sample_pairs: scene " + std::to_string(id) + " appears in both lists");

    size_t n_senders = batch.front().aligned.size();
    require(n_senders > 0, "sample_pairs: scenes carry no aligned views");
    for (const SceneViews& s : batch) {
        require(s.aligned.size() == n_senders, "sample_pairs: inconsistent view counts");
        require(s.has_collab, "sample_pairs: batch scenes need the ego's collaborative view");
    }
    for (const SceneViews& s : negatives)
        require(s.aligned.size() == n_senders, "sample_pairs: inconsistent view counts");

    // canonical order: scenes by id, views by sender
    std::vector<const SceneViews*> pos_sorted, neg_sorted;
    for (const SceneViews& s : batch) pos_sorted.push_back(&s);
    for (const SceneViews& s : negatives) neg_sorted.push_back(&s);
    auto by_id = [](const SceneViews* a, const SceneViews* b) { return a->scene_id < b->scene_id; };
    std::sort(pos_sorted.begin(), pos_sorted.end(), by_id);
    std::sort(neg_sorted.begin(), neg_sorted.end(), by_id);

    auto sorted_views = [&](const SceneViews& s) {
        std::vector<const FeatureMap*> v;
        for (const FeatureMap& f : s.aligned) v.push_back(&f);
        std::sort(v.begin(), v.end(),
                  [](const FeatureMap* a, const FeatureMap* b) { return a->sender < b->sender; });
        return v;
    };

    // seeded assignment of negative scenes to batch scenes
    std::vector<size_t> perm(neg_sorted.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(seed);
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int>(i) - 1)]);

    PairBatch out;
    out.ego = ego;
    out.num_senders = static_cast<int>(n_senders);
    for (size_t b = 0; b < pos_sorted.size(); ++b) {
        const SceneViews& pos = *pos_sorted[b];
        const SceneViews& neg = *neg_sorted[perm[b]];
        std::vector<const FeatureMap*> pv = sorted_views(pos);
        std::vector<const FeatureMap*> nv = sorted_views(neg);
        for (size_t j = 0; j < n_senders; ++j) {
            out.positives.push_back(
                {pv[j]->sender, pos.scene_id, pos.scene_id, *pv[j], pos.collab});
            out.negatives.push_back(
                {nv[j]->sender, neg.scene_id, pos.scene_id, *nv[j], pos.collab});
        }
    }
    return out;
}

Tensor project(Graph& g, const BoundMvmi& d, const FeatureMap& collab) {
    Tensor flat = g.flatten(collab.data);
    return g.linear(flat, d.projw, &d.projb);
}

namespace {
Tensor global_head(Graph& g, const BoundMvmi& d, const Tensor& rows) {
    Tensor x = g.relu(g.linear(rows, d.g1w, &d.g1b));
    x = g.relu(g.linear(x, d.g2w, &d.g2b));
    return g.linear(x, d.g3w, &d.g3b);
}

Tensor local_head(Graph& g, const BoundMvmi& d, const Tensor& rows) {
    Tensor x = g.relu(g.linear(rows, d.l1w, &d.l1b));
    return g.linear(x, d.l2w, &d.l2b);
}
} // namespace

Tensor score_global(Graph& g, const BoundMvmi& d, const FeatureMap& individual,
                    const FeatureMap& collab) {
    Tensor row = g.concat_flat({g.flatten(individual.data), project(g, d, collab)});
    return global_head(g, d, row);
}

Tensor score_local(Graph& g, const BoundMvmi& d, const FeatureMap& individual,
                   const FeatureMap& collab) {
    int h = individual.data.shape[0], w = individual.data.shape[1];
    Tensor rows = g.rows_with_vector(individual.data, project(g, d, collab));
    Tensor scores = local_head(g, d, rows);  // [H*W, 1]
    return g.reshape(scores, {h, w});
}

double estimate_js_mi(std::span<const double> pos_scores, std::span<const double> neg_scores) {
    require(!pos_scores.empty() && !neg_scores.empty(),
            "estimate_js_mi: score lists must be nonempty");
    double pos = 0.0, neg = 0.0;
    for (double t : pos_scores) pos += -softplus_value(-t);
    for (double t : neg_scores) neg += softplus_value(t);
    return pos / static_cast<double>(pos_scores.size()) - neg / static_cast<double>(neg_scores.size());
}

Tensor estimate_js_mi(Graph& g, const Tensor& pos_scores, const Tensor& neg_scores) {
    require(pos_scores.numel() > 0 && neg_scores.numel() > 0,
            "estimate_js_mi: score tensors must be nonempty");
    Tensor pos_term = g.scale(g.mean(g.softplus(g.scale(pos_scores, -1.0))), -1.0);
    Tensor neg_term = g.mean(g.softplus(neg_scores));
    return g.sub(pos_term, neg_term);
}

namespace {
// one projection per distinct collaborative view (keyed by graph node)
Tensor projection_for(Graph& g, const BoundMvmi& d, const FeatureMap& collab,
                      std::map<int, Tensor>& cache) {
    auto it = cache.find(collab.data.node);
    if (it != cache.end()) return it->second;
    Tensor p = project(g, d, collab);
    cache.emplace(collab.data.node, p);
    return p;
}

Tensor global_scores_batched(Graph& g, const BoundMvmi& d, std::span<const ViewPair> pairs,
                             std::map<int, Tensor>& proj_cache) {
    std::vector<Tensor> rows;
    rows.reserve(pairs.size());
    for (const ViewPair& p : pairs)
        rows.push_back(g.concat_flat(
            {g.flatten(p.individual.data), projection_for(g, d, p.collab, proj_cache)}));
    return global_head(g, d, g.vstack(rows));  // [k, 1]
}

Tensor local_scores_batched(Graph& g, const BoundMvmi& d, std::span<const ViewPair> pairs,
                            std::map<int, Tensor>& proj_cache) {
    std::vector<Tensor> blocks;
    blocks.reserve(pairs.size());
    for (const ViewPair& p : pairs)
        blocks.push_back(
            g.rows_with_vector(p.individual.data, projection_for(g, d, p.collab, proj_cache)));
    return local_head(g, d, g.vstack(blocks));  // [k*H*W, 1]
}
} // namespace

Tensor score_global_batch(Graph& g, const BoundMvmi& d, std::span<const ViewPair> pairs) {
    require(!pairs.empty(), "score_global_batch: empty pair list");
    std::map<int, Tensor> cache;
    return global_scores_batched(g, d, pairs, cache);
}

Tensor estimate_local_mi(Graph& g, const BoundMvmi& d, std::span<const ViewPair> positives,
                         std::span<const ViewPair> negatives) {
    require(!positives.empty() && !negatives.empty(),
            "estimate_local_mi: pair lists must be nonempty");
    const Shape& ref = positives.front().individual.data.shape;
    for (const ViewPair& p : positives)
        require(p.individual.data.shape == ref, "estimate_local_mi: mismatched view shapes");
    for (const ViewPair& p : negatives)
        require(p.individual.data.shape == ref, "estimate_local_mi: mismatched view shapes");
    std::map<int, Tensor> cache;
    Tensor pos = local_scores_batched(g, d, positives, cache);
    Tensor neg = local_scores_batched(g, d, negatives, cache);
    return estimate_js_mi(g, pos, neg);
}

MvmiTerms mvmi_objective(Graph& g, const BoundMvmi& d, const PairBatch& batch, double beta_g,
                         double beta_l) {
    require(!batch.positives.empty() && !batch.negatives.empty(),
            "mvmi_objective: pair batch is empty");
    require(batch.positives.size() == batch.negatives.size(),
            "mvmi_objective: positive/negative counts differ");

    std::map<int, Tensor> cache;
    Tensor gpos = global_scores_batched(g, d, batch.positives, cache);
    Tensor gneg = global_scores_batched(g, d, batch.negatives, cache);
    Tensor global_est = estimate_js_mi(g, gpos, gneg);

    Tensor lpos = local_scores_batched(g, d, batch.positives, cache);
    Tensor lneg = local_scores_batched(g, d, batch.negatives, cache);
    Tensor local_est = estimate_js_mi(g, lpos, lneg);

    MvmiTerms out;
    out.gmi_loss = g.scale(global_est, -1.0);
    out.lmi_loss = g.scale(local_est, -1.0);
    out.combined = g.add(g.scale(global_est, beta_g), g.scale(local_est, beta_l));
    out.gmi_value = out.gmi_loss.scalar();
    out.lmi_value = out.lmi_loss.scalar();
    out.combined_value = out.combined.scalar();
    return out;
}

} // namespace coview
