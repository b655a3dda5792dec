#include "coview/config.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace coview {

using nlohmann::json;

namespace {

// strict object reader: tracks consumed keys, reports full paths
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config error at " + where() + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    void get(const std::string& key, T& out, const char* kind) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config error at " + join(key) + ": expected " + kind);
        }
    }

    void number(const std::string& key, double& out) { get(key, out, "a number"); }
    void integer(const std::string& key, int& out) {
        if (j_.contains(key) && !j_.at(key).is_number_integer())
            throw ConfigError("config error at " + join(key) + ": expected an integer");
        get(key, out, "an integer");
    }
    void u64(const std::string& key, uint64_t& out) { get(key, out, "an unsigned integer"); }
    void boolean(const std::string& key, bool& out) { get(key, out, "a boolean"); }
    void text(const std::string& key, std::string& out) { get(key, out, "a string"); }
    void int_list(const std::string& key, std::vector<int>& out) {
        get(key, out, "a list of integers");
    }
    void u64_list(const std::string& key, std::vector<uint64_t>& out) {
        get(key, out, "a list of unsigned integers");
    }
    void number_list(const std::string& key, std::vector<double>& out) {
        get(key, out, "a list of numbers");
    }

    Reader child(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key))
            return Reader(empty_, join(key));
        return Reader(j_.at(key), join(key));
    }

    // every remaining key is unknown
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("config error at " + join(it.key()) + ": unknown key");
    }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    static const json empty_;
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

const json Reader::empty_ = json::object();

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    Reader root(j, "");

    {
        Reader r = root.child("scene");
        r.number("extent", cfg.scene.extent);
        r.integer("min_objects", cfg.scene.min_objects);
        r.integer("max_objects", cfg.scene.max_objects);
        r.number("min_obj_side", cfg.scene.min_obj_side);
        r.number("max_obj_side", cfg.scene.max_obj_side);
        r.number("min_obj_height", cfg.scene.min_obj_height);
        r.number("max_obj_height", cfg.scene.max_obj_height);
        r.number("object_radius", cfg.scene.object_radius);
        r.number("object_margin", cfg.scene.object_margin);
        r.integer("min_agents", cfg.scene.min_agents);
        r.integer("max_agents", cfg.scene.max_agents);
        r.number("agent_radius", cfg.scene.agent_radius);
        r.number("agent_separation", cfg.scene.agent_separation);
        r.number("agent_clearance", cfg.scene.agent_clearance);
        r.integer("placement_budget", cfg.scene.placement_budget);
        r.finish();
    }
    {
        Reader r = root.child("sensor");
        r.integer("rays", cfg.sensor.rays);
        r.number("max_range", cfg.sensor.max_range);
        r.number("vertical_step", cfg.sensor.vertical_step);
        r.number("vertical_start", cfg.sensor.vertical_start);
        r.finish();
    }
    {
        Reader r = root.child("bev");
        r.integer("h", cfg.bev.h);
        r.integer("w", cfg.bev.w);
        r.integer("channels", cfg.bev.channels);
        r.number("resolution", cfg.bev.resolution);
        r.number("max_height", cfg.bev.max_height);
        r.finish();
    }
    {
        Reader r = root.child("net");
        r.integer("enc_mid", cfg.net.enc_mid);
        r.integer("enc_out", cfg.net.enc_out);
        r.integer("col_mid", cfg.net.col_mid);
        r.integer("dec_mid", cfg.net.dec_mid);
        r.integer("dec_out", cfg.net.dec_out);
        r.number("score_threshold", cfg.net.score_threshold);
        r.number("nms_iou", cfg.net.nms_iou);
        r.finish();
    }
    {
        Reader r = root.child("mvmi");
        r.integer("proj_dim", cfg.mvmi.proj_dim);
        r.integer("global_width", cfg.mvmi.global_width);
        r.integer("local_width", cfg.mvmi.local_width);
        r.finish();
    }
    {
        Reader r = root.child("loss");
        r.number("alpha", cfg.loss.alpha);
        r.number("lambda", cfg.loss.lambda);
        r.number("beta_g", cfg.loss.beta_g);
        r.number("beta_l", cfg.loss.beta_l);
        r.number("lr_pipeline", cfg.loss.lr_pipeline);
        r.number("lr_mvmi", cfg.loss.lr_mvmi);
        r.int_list("milestones", cfg.loss.milestones);
        r.number("gamma", cfg.loss.gamma);
        r.finish();
    }
    {
        Reader r = root.child("train");
        r.integer("epochs", cfg.train.epochs);
        r.integer("batch", cfg.train.batch);
        r.u64_list("seeds", cfg.train.seeds);
        r.finish();
    }
    {
        Reader r = root.child("data");
        r.integer("train_scenes", cfg.data.train_scenes);
        r.integer("test_scenes", cfg.data.test_scenes);
        r.u64("suite_seed", cfg.data.suite_seed);
        r.boolean("require_occlusion", cfg.data.require_occlusion);
        r.integer("ego_index", cfg.data.ego_index);
        r.integer("min_remote_hits", cfg.data.min_remote_hits);
        r.finish();
    }
    {
        Reader r = root.child("sweep");
        r.int_list("ratio_exponents", cfg.sweep.ratio_exponents);
        r.number_list("noise_stds", cfg.sweep.noise_stds);
        r.finish();
    }
    root.integer("bytes_per_value", cfg.bytes_per_value);
    root.text("out_dir", cfg.out_dir);
    root.finish();

    // BEV geometry is owned by the bev block; the network mirrors it
    cfg.net.bev_h = cfg.bev.h;
    cfg.net.bev_w = cfg.bev.w;
    cfg.net.bev_c = cfg.bev.channels;
    cfg.net.bev_res = cfg.bev.resolution;

    cfg.validate();
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["scene"] = {{"extent", cfg.scene.extent},
                  {"min_objects", cfg.scene.min_objects},
                  {"max_objects", cfg.scene.max_objects},
                  {"min_obj_side", cfg.scene.min_obj_side},
                  {"max_obj_side", cfg.scene.max_obj_side},
                  {"min_obj_height", cfg.scene.min_obj_height},
                  {"max_obj_height", cfg.scene.max_obj_height},
                  {"object_radius", cfg.scene.object_radius},
                  {"object_margin", cfg.scene.object_margin},
                  {"min_agents", cfg.scene.min_agents},
                  {"max_agents", cfg.scene.max_agents},
                  {"agent_radius", cfg.scene.agent_radius},
                  {"agent_separation", cfg.scene.agent_separation},
                  {"agent_clearance", cfg.scene.agent_clearance},
                  {"placement_budget", cfg.scene.placement_budget}};
    j["sensor"] = {{"rays", cfg.sensor.rays},
                   {"max_range", cfg.sensor.max_range},
                   {"vertical_step", cfg.sensor.vertical_step},
                   {"vertical_start", cfg.sensor.vertical_start}};
    j["bev"] = {{"h", cfg.bev.h},
                {"w", cfg.bev.w},
                {"channels", cfg.bev.channels},
                {"resolution", cfg.bev.resolution},
                {"max_height", cfg.bev.max_height}};
    j["net"] = {{"enc_mid", cfg.net.enc_mid},
                {"enc_out", cfg.net.enc_out},
                {"col_mid", cfg.net.col_mid},
                {"dec_mid", cfg.net.dec_mid},
                {"dec_out", cfg.net.dec_out},
                {"score_threshold", cfg.net.score_threshold},
                {"nms_iou", cfg.net.nms_iou}};
    j["mvmi"] = {{"proj_dim", cfg.mvmi.proj_dim},
                 {"global_width", cfg.mvmi.global_width},
                 {"local_width", cfg.mvmi.local_width}};
    j["loss"] = {{"alpha", cfg.loss.alpha},
                 {"lambda", cfg.loss.lambda},
                 {"beta_g", cfg.loss.beta_g},
                 {"beta_l", cfg.loss.beta_l},
                 {"lr_pipeline", cfg.loss.lr_pipeline},
                 {"lr_mvmi", cfg.loss.lr_mvmi},
                 {"milestones", cfg.loss.milestones},
                 {"gamma", cfg.loss.gamma}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch", cfg.train.batch},
                  {"seeds", cfg.train.seeds}};
    j["data"] = {{"train_scenes", cfg.data.train_scenes},
                 {"test_scenes", cfg.data.test_scenes},
                 {"suite_seed", cfg.data.suite_seed},
                 {"require_occlusion", cfg.data.require_occlusion},
                 {"ego_index", cfg.data.ego_index},
                 {"min_remote_hits", cfg.data.min_remote_hits}};
    j["sweep"] = {{"ratio_exponents", cfg.sweep.ratio_exponents},
                  {"noise_stds", cfg.sweep.noise_stds}};
    j["bytes_per_value"] = cfg.bytes_per_value;
    j["out_dir"] = cfg.out_dir;
    return j;
}

} // namespace

void ExperimentConfig::validate() const {
    scene.validate();
    net.validate();
    mvmi.validate();
    loss.validate();
    if (bev.h <= 0 || bev.w <= 0 || bev.channels <= 0 || bev.resolution <= 0.0)
        throw ConfigError("config error at bev: dimensions and resolution must be positive");
    if (sensor.rays <= 0 || sensor.max_range <= 0.0)
        throw ConfigError("config error at sensor: rays and max_range must be positive");
    if (train.epochs < 1 || train.batch < 1)
        throw ConfigError("config error at train: epochs and batch must be >= 1");
    if (train.seeds.empty()) throw ConfigError("config error at train.seeds: need at least one seed");
    if (data.train_scenes < 1 || data.test_scenes < 1)
        throw ConfigError("config error at data: scene counts must be >= 1");
    if (data.ego_index < 0) throw ConfigError("config error at data.ego_index: must be >= 0");
    for (int e : sweep.ratio_exponents)
        if (e < 0) throw ConfigError("config error at sweep.ratio_exponents: must be >= 0");
    for (double s : sweep.noise_stds)
        if (s < 0.0) throw ConfigError("config error at sweep.noise_stds: must be >= 0");
    if (bytes_per_value <= 0)
        throw ConfigError("config error at bytes_per_value: must be positive");
    if (out_dir.empty()) throw ConfigError("config error at out_dir: must be nonempty");
}

ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config error: invalid JSON: ") + e.what());
    }
    return config_from_json(j);
}

std::string emit_config(const ExperimentConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("config override must look like key.path=value, got \"" + assignment + "\"");
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json v;
    try {
        v = json::parse(value);
    } catch (const json::exception&) {
        v = value;  // unquoted string
    }

    json doc = config_to_json(cfg);
    json* node = &doc;
    size_t start = 0;
    while (true) {
        size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot - start);
        if (key.empty()) throw ConfigError("config override has an empty key segment: " + path);
        if (dot == std::string::npos) {
            if (!node->contains(key))
                throw ConfigError("config error at " + path + ": unknown key");
            (*node)[key] = v;
            break;
        }
        if (!node->contains(key) || !(*node)[key].is_object())
            throw ConfigError("config error at " + path.substr(0, dot) + ": unknown key");
        node = &(*node)[key];
        start = dot + 1;
    }
    return config_from_json(doc);
}

std::vector<Scene> build_suite(const ExperimentConfig& cfg, bool test_split) {
    SuiteConfig suite;
    suite.count = test_split ? cfg.data.test_scenes : cfg.data.train_scenes;
    // disjoint deterministic streams for the two splits
    suite.seed = splitmix64(cfg.data.suite_seed ^ (test_split ? 0x7e57ULL : 0x7ea17ULL));
    suite.scene = cfg.scene;
    suite.sensor = cfg.sensor;
    suite.bev = cfg.bev;
    suite.require_occlusion = cfg.data.require_occlusion;
    suite.ego_index = cfg.data.ego_index;
    suite.min_remote_hits = cfg.data.min_remote_hits;
    return generate_suite(suite);
}

Dataset build_dataset(const ExperimentConfig& cfg, bool test_split) {
    std::vector<Scene> scenes = build_suite(cfg, test_split);
    return prepare_dataset(scenes, cfg.sensor, cfg.bev);
}

TrainConfig make_train_config(const ExperimentConfig& cfg, CollabMode mode, double alpha,
                              int ratio_exponent, uint64_t seed) {
    TrainConfig tc;
    tc.mode = mode;
    tc.epochs = cfg.train.epochs;
    tc.batch = cfg.train.batch;
    tc.loss = cfg.loss;
    tc.loss.alpha = alpha;
    if (tc.loss.milestones.empty()) {
        // decay at 60% and 80% of the run
        tc.loss.milestones = {(cfg.train.epochs * 6) / 10, (cfg.train.epochs * 8) / 10};
        if (tc.loss.milestones[1] <= tc.loss.milestones[0]) tc.loss.milestones.pop_back();
    }
    tc.net = cfg.net;
    tc.net.compress_exponent = ratio_exponent;
    tc.mvmi = cfg.mvmi;
    tc.bev = cfg.bev;
    tc.seed = seed;
    return tc;
}

EvalConfig make_eval_config(const ExperimentConfig& cfg) {
    EvalConfig ec;
    ec.net = cfg.net;
    ec.bev = cfg.bev;
    ec.ego_index = cfg.data.ego_index;
    ec.bytes_per_value = cfg.bytes_per_value;
    return ec;
}

} // namespace coview
