#pragma once

#include "repq/model.hpp"

namespace repq {

// Training aborted on a non-finite loss; carries step diagnostics.
struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

struct EpochRow {
    std::string stage;  // "fp" | "qat"
    int epoch = 0;
    double train_loss = 0;
    double eval_acc = 0;
    double wall_s = 0;
    uint64_t mults = 0;
    uint64_t seed = 0;
};

struct StageOpts {
    int epochs = 1;
    double lr = 0.05;
    int batch = 50;
    double weight_decay = 0;
    double momentum = 0.9;
    double steps_lr_ratio = 0.1;
    uint64_t seed = 1;
    int max_steps = -1;  // stop after this many optimizer steps if >= 0
    bool eval_each_epoch = true;
    std::string stage_name = "fp";
};

struct StageResult {
    std::vector<EpochRow> rows;
    double best_eval = 0;
    std::vector<double> step_losses;
};

// SGD with momentum and cosine learning-rate decay over the stage. Weight
// decay applies only to conv/dense kernels; quantizer steps train at
// lr * steps_lr_ratio and are floored at 1e-8 to stay positive.
StageResult train_stage(Model& m, const Dataset& train, const Dataset* eval_set,
                        const StageOpts& opts);

Model build_fp_model(const ExperimentConfig& cfg, uint64_t seed, int num_classes = 10);
StageResult train_fp(Model& m, const DatasetPair& data, const ExperimentConfig& cfg,
                     uint64_t seed);

// Reshapes an FP checkpoint into the model the strategy trains during QAT:
// copy for Plain, eval-mode fold to single convs for Merged, structure-
// preserving copy plus quantizers for the RepQ variants.
Model convert_for_qat(const Checkpoint& ck, const ExperimentConfig& cfg,
                      int num_classes = 10);

StageResult train_qat(Model& m, const DatasetPair& data, const ExperimentConfig& cfg,
                      uint64_t seed);

}  // namespace repq
