#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>

#include "coview/config.hpp"
#include "coview/gradsuite.hpp"
#include "coview/io.hpp"

namespace fs = std::filesystem;
using namespace coview;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct Cli {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_override;

    ExperimentConfig load() const {
        ExperimentConfig cfg =
            config_path.empty() ? parse_config("{}") : parse_config(read_file(config_path));
        for (const std::string& kv : overrides) cfg = apply_override(cfg, kv);
        if (!out_override.empty()) {
            cfg.out_dir = out_override;
        } else if (const char* env = std::getenv("COVIEW_OUT"); env != nullptr && *env != '\0') {
            cfg.out_dir = env;
        }
        return cfg;
    }
};

fs::path ensure_dir(const fs::path& dir) {
    fs::create_directories(dir);
    return dir;
}

std::string run_tag(CollabMode mode, int ratio_exponent, uint64_t seed) {
    std::string tag = collab_mode_name(mode);
    if (ratio_exponent > 0) tag += "_r" + std::to_string(ratio_exponent);
    return tag + "_seed-" + std::to_string(seed);
}

nlohmann::json report_json(const EvalReport& r) {
    return {{"mode", collab_mode_name(r.spec.mode)},
            {"ratio_denominator", 1LL << r.spec.ratio_exponent},
            {"noise_std", r.spec.noise_std},
            {"seed", r.seed},
            {"ap50", r.ap50},
            {"ap70", r.ap70},
            {"comm_bytes", r.comm_bytes},
            {"scenes", r.scenes}};
}

// plain CSV for plotting plus a structured summary document
void write_reports(const fs::path& stem, const std::vector<EvalReport>& rows) {
    write_text_file_atomic(stem.string() + ".csv", sweep_table_csv(rows));
    nlohmann::json summary;
    summary["rows"] = nlohmann::json::array();
    for (const EvalReport& r : rows) summary["rows"].push_back(report_json(r));
    write_text_file_atomic(stem.string() + ".json", summary.dump(2) + "\n");
}

fs::path train_one(const ExperimentConfig& cfg, const Dataset& data, CollabMode mode, double alpha,
                   int ratio_exponent, uint64_t seed, bool quiet = false) {
    TrainConfig tc = make_train_config(cfg, mode, alpha, ratio_exponent, seed);
    TrainResult result = train(data, tc);
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "runs" / run_tag(mode, ratio_exponent, seed));
    result.params.save((dir / "checkpoint.bin").string());
    write_text_file_atomic((dir / "trainlog.jsonl").string(), train_log_to_jsonl(result.log));
    write_text_file_atomic((dir / "config.json").string(), emit_config(cfg));
    if (!quiet)
        std::printf("trained %s: final total loss %.6f -> %s\n",
                    run_tag(mode, ratio_exponent, seed).c_str(), result.log.back().mean.total,
                    (dir / "checkpoint.bin").c_str());
    return dir / "checkpoint.bin";
}

int cmd_gen_data(const Cli& cli, bool with_bev) {
    ExperimentConfig cfg = cli.load();
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "scenes");
    int written = 0;
    for (bool test_split : {false, true}) {
        std::vector<Scene> scenes = build_suite(cfg, test_split);
        const char* split = test_split ? "test" : "train";
        for (const Scene& s : scenes) {
            save_scene(s, (dir / (std::string(split) + "_" + std::to_string(s.seed) + ".json")).string());
            ++written;
            if (with_bev) {
                for (int a = 0; a < s.num_agents(); ++a) {
                    BevGrid g = voxelize(raycast_observe(s, a, cfg.sensor), s.agents[a], cfg.bev);
                    write_bev_file(g, (dir / (std::string(split) + "_" + std::to_string(s.seed) +
                                              "_agent" + std::to_string(a) + ".bev"))
                                          .string());
                }
            }
        }
    }
    std::printf("wrote %d scene files under %s\n", written, dir.c_str());
    return 0;
}

int cmd_train(const Cli& cli, const std::string& mode_name, std::optional<double> alpha,
              int ratio_exponent, std::optional<uint64_t> seed) {
    ExperimentConfig cfg = cli.load();
    CollabMode mode = collab_mode_from_name(mode_name);
    double a = alpha.value_or(mode == CollabMode::Intermediate ? cfg.loss.alpha : 0.0);
    uint64_t s = seed.value_or(cfg.train.seeds.front());
    Dataset data = build_dataset(cfg, false);
    train_one(cfg, data, mode, a, ratio_exponent, s);
    return 0;
}

int cmd_eval(const Cli& cli, const std::string& checkpoint, const std::string& mode_name,
             int ratio_exponent, double noise_std, std::optional<uint64_t> seed) {
    ExperimentConfig cfg = cli.load();
    if (!fs::exists(checkpoint))
        throw std::runtime_error("checkpoint not found: " + checkpoint);
    ParamStore params = ParamStore::load(checkpoint);
    ModeSpec spec{collab_mode_from_name(mode_name), ratio_exponent, noise_std};
    uint64_t s = seed.value_or(cfg.train.seeds.front());
    Dataset test = build_dataset(cfg, true);
    EvalReport report = evaluate(params, spec, test, make_eval_config(cfg), s);
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "eval");
    char name[160];
    std::snprintf(name, sizeof(name), "eval_%s_r%d_noise-%g_seed-%llu",
                  collab_mode_name(spec.mode).c_str(), spec.ratio_exponent, spec.noise_std,
                  static_cast<unsigned long long>(s));
    write_reports(dir / name, {report});
    std::printf("%s: ap50=%.4f ap70=%.4f comm_bytes=%lld scenes=%d -> %s.csv\n",
                collab_mode_name(spec.mode).c_str(), report.ap50, report.ap70, report.comm_bytes,
                report.scenes, (dir / name).c_str());
    return 0;
}

int cmd_sweep_compression(const Cli& cli, std::optional<uint64_t> seed) {
    ExperimentConfig cfg = cli.load();
    uint64_t s = seed.value_or(cfg.train.seeds.front());
    Dataset train_data = build_dataset(cfg, false);
    Dataset test_data = build_dataset(cfg, true);
    EvalConfig ec = make_eval_config(cfg);
    std::vector<EvalReport> rows;
    for (int exp : cfg.sweep.ratio_exponents) {
        fs::path ckpt =
            train_one(cfg, train_data, CollabMode::Intermediate, cfg.loss.alpha, exp, s, true);
        ParamStore params = ParamStore::load(ckpt.string());
        rows.push_back(evaluate(params, ModeSpec{CollabMode::Intermediate, exp, 0.0}, test_data,
                                ec, s));
        std::printf("ratio 1/%d: ap50=%.4f ap70=%.4f comm_bytes=%lld\n", 1 << exp,
                    rows.back().ap50, rows.back().ap70, rows.back().comm_bytes);
    }
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "sweeps");
    fs::path out = dir / ("compression_seed-" + std::to_string(s));
    write_reports(out, rows);
    std::printf("wrote %zu rows -> %s.csv\n", rows.size(), out.c_str());
    return 0;
}

int cmd_sweep_noise(const Cli& cli, std::string checkpoint, std::optional<uint64_t> seed) {
    ExperimentConfig cfg = cli.load();
    uint64_t s = seed.value_or(cfg.train.seeds.front());
    if (checkpoint.empty()) {
        Dataset train_data = build_dataset(cfg, false);
        checkpoint =
            train_one(cfg, train_data, CollabMode::Intermediate, cfg.loss.alpha, 0, s, true)
                .string();
    } else if (!fs::exists(checkpoint)) {
        throw std::runtime_error("checkpoint not found: " + checkpoint);
    }
    ParamStore params = ParamStore::load(checkpoint);
    Dataset test_data = build_dataset(cfg, true);
    EvalConfig ec = make_eval_config(cfg);
    std::vector<EvalReport> rows;
    for (double std_m : cfg.sweep.noise_stds) {
        rows.push_back(
            evaluate(params, ModeSpec{CollabMode::Intermediate, 0, std_m}, test_data, ec, s));
        std::printf("noise %.2f m: ap50=%.4f ap70=%.4f\n", std_m, rows.back().ap50,
                    rows.back().ap70);
    }
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "sweeps");
    fs::path out = dir / ("noise_seed-" + std::to_string(s));
    write_reports(out, rows);
    std::printf("wrote %zu rows -> %s.csv\n", rows.size(), out.c_str());
    return 0;
}

int cmd_grad_check(int seeds) {
    GradSuiteResult suite = run_gradient_suite(seeds);
    for (const GradCheckItem& item : suite.items)
        std::printf("%s %-36s worst %.3e (tolerance %.0e)\n", item.pass ? "ok  " : "FAIL",
                    item.name.c_str(), item.worst, item.tolerance);
    std::printf("%s\n", suite.all_pass ? "all gradient checks passed" : "gradient checks FAILED");
    return suite.all_pass ? 0 : 1;
}

int cmd_export_heatmaps(const Cli& cli, const std::string& checkpoint, int count,
                        std::optional<int> ego_opt) {
    ExperimentConfig cfg = cli.load();
    if (!fs::exists(checkpoint))
        throw std::runtime_error("checkpoint not found: " + checkpoint);
    ParamStore params = ParamStore::load(checkpoint);
    Dataset test = build_dataset(cfg, true);
    int ego = ego_opt.value_or(cfg.data.ego_index);
    fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "heatmaps");
    int written = 0;
    for (int i = 0; i < count && i < static_cast<int>(test.size()); ++i) {
        std::map<int, Tensor> maps = weight_heatmaps(test[i], ego, params, make_eval_config(cfg));
        for (const auto& [sender, map] : maps) {
            char name[160];
            std::snprintf(name, sizeof(name), "scene-%lld_ego-%d_from-%d.csv",
                          static_cast<long long>(test[i].scene.id), ego, sender);
            write_csv_matrix(map, (dir / name).string());
            ++written;
        }
    }
    std::printf("wrote %d heatmaps under %s\n", written, dir.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    Cli cli;
    CLI::App app{"desk-scale multi-agent BEV perception testbed"};
    app.require_subcommand(1);
    app.add_option("--config", cli.config_path, "experiment config file (JSON)");
    app.add_option("--set", cli.overrides, "override a config key, e.g. --set loss.alpha=0.3");
    app.add_option("--out", cli.out_override, "output root (overrides config and COVIEW_OUT)");

    bool with_bev = false;
    CLI::App* gen = app.add_subcommand("gen-data", "generate the scene suites");
    gen->add_flag("--with-bev", with_bev, "also export per-agent BEV grids");

    std::string mode_name = "intermediate";
    double alpha_val = -1.0;
    int ratio_exponent = 0;
    uint64_t seed_val = 0;
    bool seed_set = false, alpha_set = false;
    CLI::App* tr = app.add_subcommand("train", "train one pipeline");
    tr->add_option("--mode", mode_name, "none | early | intermediate");
    tr->add_option("--alpha", alpha_val, "MI loss weight")->check(CLI::Range(0.0, 1.0));
    tr->add_option("--ratio", ratio_exponent, "compression exponent n (ratio 1/2^n)");
    tr->add_option("--seed", seed_val, "training seed");

    std::string checkpoint;
    double noise_std = 0.0;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test suite");
    ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    ev->add_option("--mode", mode_name, "none | early | late | intermediate");
    ev->add_option("--ratio", ratio_exponent, "compression exponent n");
    ev->add_option("--noise", noise_std, "pose noise std in meters");
    ev->add_option("--seed", seed_val, "evaluation seed");

    CLI::App* sc = app.add_subcommand("sweep-compression",
                                      "train and evaluate every configured compression ratio");
    sc->add_option("--seed", seed_val, "seed");

    CLI::App* sn = app.add_subcommand("sweep-noise", "evaluate across the configured noise levels");
    sn->add_option("--checkpoint", checkpoint, "reuse an existing checkpoint");
    sn->add_option("--seed", seed_val, "seed");

    int grad_seeds = 10;
    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
    gc->add_option("--seeds", grad_seeds, "random draws per check");

    int heat_count = 3;
    int heat_ego = -1;
    CLI::App* hm = app.add_subcommand("export-heatmaps", "export fusion weight matrices as CSV");
    hm->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    hm->add_option("--scenes", heat_count, "number of test scenes to export");
    hm->add_option("--ego", heat_ego, "ego agent index");

    CLI11_PARSE(app, argc, argv);
    seed_set = tr->count("--seed") || ev->count("--seed") || sc->count("--seed") || sn->count("--seed");
    alpha_set = tr->count("--alpha") > 0;

    try {
        std::optional<uint64_t> seed = seed_set ? std::optional<uint64_t>(seed_val) : std::nullopt;
        std::optional<double> alpha = alpha_set ? std::optional<double>(alpha_val) : std::nullopt;
        if (gen->parsed()) return cmd_gen_data(cli, with_bev);
        if (tr->parsed()) return cmd_train(cli, mode_name, alpha, ratio_exponent, seed);
        if (ev->parsed()) return cmd_eval(cli, checkpoint, mode_name, ratio_exponent, noise_std, seed);
        if (sc->parsed()) return cmd_sweep_compression(cli, seed);
        if (sn->parsed()) return cmd_sweep_noise(cli, checkpoint, seed);
        if (gc->parsed()) return cmd_grad_check(grad_seeds);
        if (hm->parsed())
            return cmd_export_heatmaps(cli, checkpoint, heat_count,
                                       heat_ego >= 0 ? std::optional<int>(heat_ego) : std::nullopt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
