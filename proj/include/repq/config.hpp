#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace repq {

// Invalid or malformed experiment configuration; maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DatasetCfg {
    std::string type = "synthetic";  // synthetic | u8_folder
    int64_t train = 5000;
    int64_t eval = 1000;
    double noise = 0.25;
    uint64_t seed = 1234;
    std::string path;  // u8_folder only

    bool operator==(const DatasetCfg&) const = default;
};

struct FpCfg {
    int epochs = 10;
    double lr = 0.05;
    int batch = 50;
    double weight_decay = 1e-4;

    bool operator==(const FpCfg&) const = default;
};

struct QatCfg {
    int epochs = 6;
    double lr_ratio = 0.1;        // QAT lr = fp lr * lr_ratio
    double steps_lr_ratio = 0.1;  // quantizer-step lr = lr * steps_lr_ratio

    bool operator==(const QatCfg&) const = default;
};

struct LayerOverride {
    std::optional<int> bits;
    std::optional<bool> use_bn_est;
    std::optional<bool> keep_bn;
    std::optional<std::string> block;

    bool operator==(const LayerOverride&) const = default;
};

struct ExperimentConfig {
    std::string model = "minivgg";  // minivgg | miniresnet
    std::string strategy;           // plain | merged | repq | repq_bn | repq_bnest
    int bits = 0;                   // QAT bit width; 32 disables the quantizers
    std::vector<uint64_t> seeds = {1};
    std::string out_dir = "runs/out";
    DatasetCfg dataset;
    FpCfg fp;
    QatCfg qat;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    std::vector<LayerOverride> layers;

    bool operator==(const ExperimentConfig&) const = default;

    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static ExperimentConfig load(const std::string& path);
};

}  // namespace repq
