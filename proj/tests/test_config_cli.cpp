#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "repq/commands.hpp"
#include "repq/dataset.hpp"
#include "repq/model.hpp"
#include "repq/verify.hpp"

using namespace repq;
namespace fs = std::filesystem;

namespace {
nlohmann::json minimal_json() {
    return nlohmann::json{{"strategy", "repq_bn"}, {"bits", 4}};
}

std::string write_tmp(const nlohmann::json& j, const std::string& name) {
    std::string path = "/tmp/repq_cfg_" + name + ".json";
    std::ofstream os(path);
    os << j.dump(2);
    return path;
}
}  // namespace

TEST_CASE("config parsing") {
    SUBCASE("minimal config fills defaults") {
        auto c = ExperimentConfig::from_json(minimal_json());
        CHECK(c.model == "minivgg");
        CHECK(c.bits == 4);
        CHECK(c.dataset.train == 5000);
        CHECK(c.dataset.eval == 1000);
    }
    SUBCASE("missing required keys are named") {
        CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(nlohmann::json{{"bits", 4}}),
                             "missing required key 'strategy'", ConfigError);
        CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(nlohmann::json{{"strategy", "plain"}}),
                             "missing required key 'bits'", ConfigError);
    }
    SUBCASE("unknown keys rejected, fail-fast") {
        auto j = minimal_json();
        j["typo_key"] = 1;
        CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(j),
                             "unknown key 'typo_key' in config root", ConfigError);
        j = minimal_json();
        j["dataset"] = {{"trian", 100}};
        CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    }
    SUBCASE("value validation") {
        auto j = minimal_json();
        j["bits"] = 5;
        CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
        j = minimal_json();
        j["strategy"] = "qrepq";
        CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
        j = minimal_json();
        j["seeds"] = nlohmann::json::array();
        CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    }
    SUBCASE("round-trips losslessly") {
        auto j = minimal_json();
        j["seeds"] = {3, 5, 8};
        j["layers"] = {nlohmann::json{{"bits", 8}}, nlohmann::json::object(),
                       nlohmann::json::object(), nlohmann::json{{"keep_bn", true}}};
        j["dataset"] = {{"train", 123}, {"noise", 1.5}};
        auto c1 = ExperimentConfig::from_json(j);
        auto c2 = ExperimentConfig::from_json(c1.to_json());
        CHECK(c1 == c2);
        CHECK(c1.to_json().dump() == c2.to_json().dump());
    }
}

TEST_CASE("bundled configs parse cleanly") {
#ifdef REPQ_CONFIGS_DIR
    int seen = 0;
    for (auto& e : fs::directory_iterator(REPQ_CONFIGS_DIR)) {
        if (e.path().extension() != ".json") continue;
        CAPTURE(e.path().string());
        auto cfg = ExperimentConfig::load(e.path().string());
        CHECK(!cfg.strategy.empty());
        ++seen;
    }
    CHECK(seen >= 5);
#endif
}

TEST_CASE("strategy table: where re-parametrization is active") {
    CHECK(!strategy_fp_reparam(Strategy::Plain));
    CHECK(!strategy_qat_reparam(Strategy::Plain));
    CHECK(strategy_fp_reparam(Strategy::Merged));
    CHECK(!strategy_qat_reparam(Strategy::Merged));
    for (auto s : {Strategy::RepQ, Strategy::RepQBN, Strategy::RepQBNEst}) {
        CHECK(strategy_fp_reparam(s));
        CHECK(strategy_qat_reparam(s));
    }
}

TEST_CASE("make_plan honours strategies and overrides") {
    auto c = ExperimentConfig::from_json(minimal_json());
    SUBCASE("qat arch per strategy") {
        c.strategy = "plain";
        CHECK(make_plan(c, true).arch == ArchKind::Plain);
        c.strategy = "merged";
        CHECK(make_plan(c, false).arch == ArchKind::Reparam);
        CHECK(make_plan(c, true).arch == ArchKind::MergedSingle);
        c.strategy = "repq_bn";
        CHECK(make_plan(c, true).arch == ArchKind::Reparam);
    }
    SUBCASE("fold flag and bn mode") {
        c.strategy = "repq_bnest";
        auto p = make_plan(c, true);
        CHECK(p.layers[0].fold_outer_bn);
        CHECK(p.layers[0].bn_mode == BnMode::Estimate);
        c.strategy = "repq";
        p = make_plan(c, true);
        CHECK(p.layers[0].outer_bn);
        CHECK(!p.layers[0].fold_outer_bn);
    }
    SUBCASE("per-layer overrides") {
        c.strategy = "repq_bnest";
        c.layers.resize(4);
        c.layers[0].bits = 8;
        c.layers[3].keep_bn = true;
        c.layers[1].block = "repvgg";
        auto p = make_plan(c, true);
        CHECK(p.layers[0].bits == 8);
        CHECK(p.layers[1].topo == BlockTopology::RepVgg);
        CHECK(!p.layers[1].outer_bn);  // internal BN topology
        CHECK(p.layers[3].bn_mode == BnMode::Exact);
        c.layers.resize(2);
        CHECK_THROWS_AS(make_plan(c, true), ConfigError);
    }
}

TEST_CASE("u8 folder dataset round trip") {
    std::string dir = "/tmp/repq_u8_test";
    fs::create_directories(dir);
    {
        std::ofstream meta(dir + "/meta.json");
        meta << R"({"count":4,"height":2,"width":2,"channels":1,"num_classes":2})";
        std::ofstream img(dir + "/images.u8", std::ios::binary);
        for (int i = 0; i < 16; ++i) img.put(char(i * 16));
        std::ofstream lab(dir + "/labels.u8", std::ios::binary);
        for (unsigned char l : {0, 1, 0, 1}) lab.put(char(l));
    }
    auto ds = load_u8_folder(dir);
    CHECK(ds.count() == 4);
    CHECK(ds.num_classes == 2);
    CHECK(ds.images[1] == doctest::Approx(16.0 / 256.0));
    CHECK(ds.labels == std::vector<int>{0, 1, 0, 1});
    fs::remove_all(dir);
}

TEST_CASE("cmd_run") {
    SUBCASE("malformed config missing bits exits with usage code") {
        auto path = write_tmp(nlohmann::json{{"strategy", "plain"}}, "nobits");
        CHECK(cmd_run(path) == kExitUsage);
    }
    SUBCASE("seed list produces one metrics file per seed and a summary") {
        fs::remove_all("/tmp/repq_cli_out");
        nlohmann::json j{{"strategy", "plain"},
                         {"bits", 8},
                         {"seeds", {1, 2, 3}},
                         {"out_dir", "/tmp/repq_cli_out"},
                         {"dataset", {{"train", 60}, {"eval", 30}, {"noise", 1.0}}},
                         {"fp", {{"epochs", 1}, {"lr", 0.05}, {"batch", 30}}},
                         {"qat", {{"epochs", 1}}}};
        CHECK(cmd_run(write_tmp(j, "seeds")) == kExitOk);
        int metric_files = 0;
        for (auto& e : fs::directory_iterator("/tmp/repq_cli_out"))
            if (e.path().filename().string().rfind("metrics_seed", 0) == 0) ++metric_files;
        CHECK(metric_files == 3);
        std::ifstream cs("/tmp/repq_cli_out/summary.csv");
        std::string header;
        std::getline(cs, header);
        CHECK(header == "model,strategy,bn_mode,bits,seed,metric");
        int rows = 0;
        for (std::string line; std::getline(cs, line);)
            if (!line.empty()) ++rows;
        CHECK(rows == 3);
        // metrics lines are valid JSON with the expected fields
        std::ifstream ms("/tmp/repq_cli_out/metrics_seed1.jsonl");
        std::string line;
        REQUIRE(std::getline(ms, line));
        auto rec = nlohmann::json::parse(line);
        for (const char* k : {"stage", "epoch", "train_loss", "eval_acc", "wall_s", "mults",
                              "seed"})
            CHECK(rec.contains(k));
        fs::remove_all("/tmp/repq_cli_out");
    }
}

TEST_CASE("run reproducibility: identical outputs for identical config+seed") {
    nlohmann::json j{{"strategy", "repq_bn"},
                     {"bits", 4},
                     {"seeds", {9}},
                     {"dataset", {{"train", 60}, {"eval", 30}, {"noise", 1.0}}},
                     {"fp", {{"epochs", 1}, {"lr", 0.05}, {"batch", 30}}},
                     {"qat", {{"epochs", 1}}}};
    std::vector<std::string> ck_bytes;
    for (const std::string run : {"a", "b"}) {
        std::string out = "/tmp/repq_repro_" + run;
        fs::remove_all(out);
        j["out_dir"] = out;
        REQUIRE(cmd_run(write_tmp(j, "repro" + run)) == kExitOk);
        std::ifstream is(out + "/qat_seed9.ckpt", std::ios::binary);
        ck_bytes.emplace_back(std::istreambuf_iterator<char>(is),
                              std::istreambuf_iterator<char>());
    }
    CHECK(ck_bytes[0] == ck_bytes[1]);
    fs::remove_all("/tmp/repq_repro_a");
    fs::remove_all("/tmp/repq_repro_b");
}

TEST_CASE("cmd_verify") {
    SUBCASE("clean run passes and sabotage fails the targeted check") {
        CHECK(cmd_verify(false, "") == kExitOk);
        CHECK(cmd_verify(true, "bnfold") == kExitFailure);
        CHECK(cmd_verify(false, "bogus") == kExitUsage);
    }
    SUBCASE("sabotage hits exactly the named check") {
        VerifyOptions opts;
        opts.sabotage = "bnfold";
        opts.conv_instances = 20;
        opts.bn_instances = 20;
        opts.quant_samples = 1000;
        opts.edge_seeds = 5;
        for (const auto& r : run_invariant_checks(opts))
            CHECK(r.pass == (r.name != "bn_fold_identity"));
    }
}

TEST_CASE("flops report") {
    ExperimentConfig cfg = ExperimentConfig::from_json(minimal_json());
    cfg.fp.batch = 16;
    cfg.dataset.noise = 1.0;
    auto rep = run_flops(cfg);
    REQUIRE(rep.layers.size() == 4);
    // totals equal the sum of per-layer counters plus the tail
    uint64_t sum_exact = rep.head_and_backward_exact, sum_est = rep.head_and_backward_est;
    for (const auto& l : rep.layers) {
        sum_exact += l.stats_exact + l.conv;
        sum_est += l.stats_est + l.conv;
    }
    CHECK(rep.total_exact == sum_exact);
    CHECK(rep.whole_step_exact == rep.total_exact);
    CHECK(rep.whole_step_est == rep.total_est);
    // statistics estimation must undercut the exact-fold statistics path
    for (const auto& l : rep.layers) CHECK(l.stats_est < l.stats_exact);
    CHECK(rep.total_est < rep.total_exact);
}

TEST_CASE("estimation cost advantage on a wide 1x1 layer") {
    // IN=16, OUT=64: estimated statistics cost at most 1/32 of the conv path
    Rng rng(3);
    Tensor<double> x({4, 8, 8, 16});
    for (auto& v : x.data()) v = rng.uniform(-1, 1);
    Tensor<double> w({1, 1, 16, 64});
    for (auto& v : w.data()) v = rng.uniform(-1, 1);
    MulCountScope est;
    bn_est_mean(x, w);
    bn_est_var(x, w);
    uint64_t est_cost = est.elapsed();
    MulCountScope conv;
    auto y = conv2d(x, w, ConvSpec{1, 1, 16, 64, Padding::Valid, 1});
    mean_bhd(y);
    var_bhd(y);
    uint64_t conv_cost = conv.elapsed();
    CHECK(est_cost * 32 <= conv_cost);

    // OUT=1 sanity bound: no order-of-magnitude advantage left
    Tensor<double> w1({1, 1, 16, 1});
    for (auto& v : w1.data()) v = rng.uniform(-1, 1);
    MulCountScope est1;
    bn_est_mean(x, w1);
    bn_est_var(x, w1);
    MulCountScope conv1;
    auto y1 = conv2d(x, w1, ConvSpec{1, 1, 16, 1, Padding::Valid, 1});
    mean_bhd(y1);
    var_bhd(y1);
    double ratio = double(est1.elapsed()) / double(conv1.elapsed());
    CHECK(ratio > 0.2);
    CHECK(ratio < 2.0);
}
