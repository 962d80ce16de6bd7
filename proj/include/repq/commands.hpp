#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repq/config.hpp"

namespace repq {

// Exit codes shared by the CLI: 0 ok, 1 invariant or training failure,
// 2 usage/config error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Full pipeline for every seed in the config: FP pre-training, conversion,
// QAT, metrics JSON-lines, checkpoints and a summary CSV under out_dir.
int cmd_run(const std::string& config_path);

// Runs the invariant suites; prints one pass/fail line each (or a JSON
// report). `sabotage` injects a fault into the named check.
int cmd_verify(bool json_output, const std::string& sabotage);

int cmd_flops(const std::string& config_path);

struct LayerFlops {
    std::string name;
    uint64_t stats_exact = 0;  // statistics + fold cost under exact BN
    uint64_t stats_est = 0;    // same under BN estimation
    uint64_t conv = 0;         // quantize + conv + activation cost
};

struct FlopsReport {
    std::vector<LayerFlops> layers;
    uint64_t head_and_backward_exact = 0;
    uint64_t head_and_backward_est = 0;
    uint64_t total_exact = 0;  // sum over per-layer counters
    uint64_t total_est = 0;
    uint64_t whole_step_exact = 0;  // independent whole-step counter
    uint64_t whole_step_est = 0;
};

// Instrumented multiply counts for one training step of the config's model
// under exact BN folding vs BN estimation.
FlopsReport run_flops(const ExperimentConfig& cfg);

}  // namespace repq
