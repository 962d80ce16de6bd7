#include "repq/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "repq/trainer.hpp"
#include "repq/verify.hpp"

namespace repq {

namespace {

namespace fs = std::filesystem;

DatasetPair load_data(const ExperimentConfig& cfg) {
    if (cfg.dataset.type == "synthetic")
        return make_synthetic(cfg.dataset.train, cfg.dataset.eval, cfg.dataset.noise,
                              cfg.dataset.seed);
    DatasetPair p;
    p.train = load_u8_folder(cfg.dataset.path + "/train");
    p.eval_set = load_u8_folder(cfg.dataset.path + "/eval");
    return p;
}

std::string bn_mode_label(const std::string& strategy) {
    if (strategy == "repq_bnest") return "estimate";
    if (strategy == "repq_bn" || strategy == "merged") return "exact_fold";
    return "none";
}

void write_metrics(const std::string& path, const std::vector<EpochRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& r : rows) {
        nlohmann::json j{{"stage", r.stage},   {"epoch", r.epoch},   {"train_loss", r.train_loss},
                         {"eval_acc", r.eval_acc}, {"wall_s", r.wall_s}, {"mults", r.mults},
                         {"seed", r.seed}};
        os << j.dump() << "\n";
    }
}

struct SeedOutcome {
    uint64_t seed;
    double fp_best = 0;
    double qat_best = 0;
};

SeedOutcome run_one_seed(const ExperimentConfig& cfg, const DatasetPair& data, uint64_t seed) {
    SeedOutcome out;
    out.seed = seed;

    Model fp_model = build_fp_model(cfg, seed, data.train.num_classes);
    auto fp_res = train_fp(fp_model, data, cfg, seed);
    out.fp_best = fp_res.best_eval;

    Checkpoint fp_ck;
    fp_ck.stage = "fp";
    fp_model.save_state(fp_ck);
    fp_ck.save(cfg.out_dir + "/fp_seed" + std::to_string(seed) + ".ckpt");

    Model qat_model = convert_for_qat(fp_ck, cfg, data.train.num_classes);
    auto qat_res = train_qat(qat_model, data, cfg, seed);
    out.qat_best = cfg.qat.epochs > 0 ? qat_res.best_eval : qat_model.evaluate(data.eval_set);

    Checkpoint qat_ck;
    qat_ck.stage = "qat";
    qat_model.save_state(qat_ck);
    qat_ck.save(cfg.out_dir + "/qat_seed" + std::to_string(seed) + ".ckpt");

    std::vector<EpochRow> rows = fp_res.rows;
    rows.insert(rows.end(), qat_res.rows.begin(), qat_res.rows.end());
    write_metrics(cfg.out_dir + "/metrics_seed" + std::to_string(seed) + ".jsonl", rows);
    return out;
}

}  // namespace

int cmd_run(const std::string& config_path) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::load(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        fs::create_directories(cfg.out_dir);
        auto data = load_data(cfg);
        std::vector<SeedOutcome> outcomes;
        for (uint64_t seed : cfg.seeds) {
            std::cout << "== " << cfg.strategy << " " << cfg.bits << "-bit seed " << seed
                      << " ==\n";
            auto oc = run_one_seed(cfg, data, seed);
            std::cout << "   fp best acc " << oc.fp_best << ", qat best acc " << oc.qat_best
                      << "\n";
            outcomes.push_back(oc);
        }
        const std::string summary_path = cfg.out_dir + "/summary.csv";
        bool fresh = !fs::exists(summary_path);
        std::ofstream cs(summary_path, std::ios::app);
        if (fresh) cs << "model,strategy,bn_mode,bits,seed,metric\n";
        for (const auto& oc : outcomes)
            cs << cfg.model << "," << cfg.strategy << "," << bn_mode_label(cfg.strategy) << ","
               << cfg.bits << "," << oc.seed << "," << oc.qat_best << "\n";
        std::cout << "summary appended to " << summary_path << "\n";
        return kExitOk;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return kExitFailure;
    }
}

int cmd_verify(bool json_output, const std::string& sabotage) {
    static const std::vector<std::string> known{"", "bnfold", "merge", "bnest", "quant"};
    if (std::find(known.begin(), known.end(), sabotage) == known.end()) {
        std::cerr << "unknown sabotage target '" << sabotage
                  << "' (expected bnfold|merge|bnest|quant)\n";
        return kExitUsage;
    }
    VerifyOptions opts;
    opts.sabotage = sabotage;
    auto results = run_invariant_checks(opts);
    bool all_pass = true;
    if (json_output) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : results) {
            arr.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
            all_pass = all_pass && r.pass;
        }
        std::cout << arr.dump(2) << "\n";
    } else {
        for (const auto& r : results) {
            std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
            all_pass = all_pass && r.pass;
        }
    }
    return all_pass ? kExitOk : kExitFailure;
}

FlopsReport run_flops(const ExperimentConfig& cfg) {
    FlopsReport rep;
    auto data = make_synthetic(cfg.fp.batch, 8, cfg.dataset.noise, cfg.dataset.seed);
    std::vector<int64_t> idx(size_t(cfg.fp.batch));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = int64_t(i);
    auto x0 = batch_images(data.train, idx);
    auto labels = batch_labels(data.train, idx);

    bool first_mode = true;
    for (BnMode mode : {BnMode::Exact, BnMode::Estimate}) {
        ExperimentConfig mc = cfg;
        mc.strategy = mode == BnMode::Exact ? "repq_bn" : "repq_bnest";
        auto plan = make_plan(mc, /*qat_stage=*/true);
        Model m = Model::build(plan, cfg.seeds.empty() ? 1 : cfg.seeds[0], cfg.bn_momentum,
                               cfg.bn_eps);
        m.attach_quantizers();
        // warm-up pass so MinError initialization cost stays out of the count
        softmax_cross_entropy(m.forward(x0, Mode::Train), labels);

        MulCountScope whole;
        Tensor<float> h = x0;
        uint64_t layer_total = 0;
        for (size_t li = 0; li < m.layers.size(); ++li) {
            auto& l = m.layers[li];
            Model::LayerCost cost;
            h = m.layer_forward(li, h, Mode::Train, &cost);
            layer_total += cost.stats + cost.conv;
            if (first_mode) {
                LayerFlops lf;
                lf.name = "layer" + std::to_string(li) + "(" + topology_name(l.plan.topo) + " " +
                          std::to_string(l.plan.cin) + "->" + std::to_string(l.plan.cout) + ")";
                lf.stats_exact = cost.stats;
                lf.conv = cost.conv;
                rep.layers.push_back(lf);
            } else {
                rep.layers[li].stats_est = cost.stats;
            }
        }
        MulCountScope tail_scope;
        auto loss = softmax_cross_entropy(add_channel(matmul(global_avg_pool(h), m.head_w),
                                                      m.head_b),
                                          labels);
        for (auto& p : m.parameters()) p.tensor.zero_grad();
        loss.backward();
        uint64_t tail = tail_scope.elapsed();
        if (first_mode) {
            rep.head_and_backward_exact = tail;
            rep.total_exact = layer_total + tail;
            rep.whole_step_exact = whole.elapsed();
        } else {
            rep.head_and_backward_est = tail;
            rep.total_est = layer_total + tail;
            rep.whole_step_est = whole.elapsed();
        }
        first_mode = false;
    }
    return rep;
}

int cmd_flops(const std::string& config_path) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::load(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        auto rep = run_flops(cfg);
        std::cout << "multiply counts per training step (batch " << cfg.fp.batch << ")\n";
        std::cout << "layer, stats(exact-bn), stats(bn-est), conv-path\n";
        for (const auto& l : rep.layers)
            std::cout << l.name << ", " << l.stats_exact << ", " << l.stats_est << ", " << l.conv
                      << "\n";
        std::cout << "head+backward: exact " << rep.head_and_backward_exact << ", est "
                  << rep.head_and_backward_est << "\n";
        std::cout << "total: exact-bn " << rep.total_exact << " (whole-step counter "
                  << rep.whole_step_exact << "), bn-est " << rep.total_est
                  << " (whole-step counter " << rep.whole_step_est << ")\n";
        uint64_t se = 0, ss = 0;
        for (const auto& l : rep.layers) {
            se += l.stats_exact;
            ss += l.stats_est;
        }
        std::cout << "statistics cost ratio est/exact: " << double(ss) / double(se ? se : 1)
                  << "\n";
        std::cout << "per-step cost ratio est/exact: "
                  << double(rep.total_est) / double(rep.total_exact) << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "flops failed: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace repq
