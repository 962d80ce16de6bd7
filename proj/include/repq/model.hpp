#pragma once

#include <optional>

#include "repq/checkpoint.hpp"
#include "repq/config.hpp"
#include "repq/dataset.hpp"
#include "repq/quant.hpp"
#include "repq/reparam.hpp"

namespace repq {

enum class Strategy { Plain, Merged, RepQ, RepQBN, RepQBNEst };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& s);

// Table of stage behaviours: Plain trains regular convs in both stages,
// Merged pre-trains re-parametrized and folds before QAT, the RepQ variants
// keep the branch structure through QAT.
bool strategy_fp_reparam(Strategy s);
bool strategy_qat_reparam(Strategy s);

enum class ArchKind { Plain, Reparam, MergedSingle };

struct LayerPlan {
    BlockTopology topo = BlockTopology::PlainConv;
    int64_t cin = 1, cout = 1;
    bool outer_bn = false;      // BN after the conv/block output
    bool fold_outer_bn = false; // fold that BN into the merged kernel each step
    bool pool_after = false;    // 2x2 average pool
    bool residual = false;      // add the layer input back before the ReLU
    int bits = 32;              // weight/activation bits; 32 = quantizer disabled
    BnMode bn_mode = BnMode::Exact;
};

struct ModelPlan {
    std::string model_name;  // minivgg | miniresnet
    ArchKind arch = ArchKind::Plain;
    std::vector<LayerPlan> layers;
    int64_t head_in = 0;
    int num_classes = 10;
};

// Stage plan derived from the experiment config; `qat_stage` picks the
// architecture the strategy prescribes for that stage.
ModelPlan make_plan(const ExperimentConfig& cfg, bool qat_stage);

struct ConvLayer {
    LayerPlan plan;
    // Reparam form
    ReparamBlock<float> block;
    // Plain / MergedSingle form
    Tensor<float> weight;
    Tensor<float> bias;  // MergedSingle only
    std::optional<BNState<float>> outer_bn;
    // QAT
    bool quant = false;
    QuantizerState<float> wq, aq;
};

class Model {
public:
    ModelPlan plan;
    std::vector<ConvLayer> layers;
    Tensor<float> head_w, head_b;

    static Model build(const ModelPlan& plan, uint64_t seed, double bn_momentum = 0.1,
                       double bn_eps = 1e-5);

    // Training-path forward; records the autodiff graph. Train-mode BN
    // statistics come from the batch (exact or estimated per layer plan).
    Tensor<float> forward(const Tensor<float>& x, Mode mode);

    struct LayerCost {
        uint64_t stats = 0;  // merged-weight computation + statistics + fold
        uint64_t conv = 0;   // quantizers + convolution + activation
    };
    Tensor<float> layer_forward(size_t i, const Tensor<float>& h, Mode mode,
                                LayerCost* cost = nullptr);

    // Layer i as a single eval-mode convolution (running statistics,
    // unquantized): the conversion target for the Merged strategy.
    FoldResult<float> folded_layer(size_t i);

    // Enables quantization on every layer whose planned bit width is < 32.
    // Steps are MinError-initialized lazily on the first training forward.
    void attach_quantizers();

    struct Param {
        Tensor<float> tensor;
        bool decay = false;
        bool is_step = false;
    };
    std::vector<Param> parameters();

    // key -> (shape, values) copies of all weights, BN buffers and
    // initialized quantizer steps
    void save_state(Checkpoint& ck) const;
    void load_state(const Checkpoint& ck);

    // Folds every re-parametrized layer once with running statistics, then
    // scores the dataset; deterministic.
    double evaluate(const Dataset& ds, int batch = 100);

private:
    struct EvalLayer {
        Tensor<float> weight;          // folded (and quantized) kernel
        Tensor<float> bias;            // folded bias; undefined if none
        std::vector<float> bn_scale;   // eval-mode affine of an unfolded BN
        std::vector<float> bn_shift;
        bool has_outer = false;
    };
    std::vector<EvalLayer> fold_for_eval();

    // (kernel, bias) the layer convolves with, before quantization: the
    // merged block kernel, with the block-output BN folded in when the plan
    // says so. `h` is only needed for train-mode statistics.
    FoldResult<float> layer_kernel(size_t i, const Tensor<float>& h, Mode mode);
};

}  // namespace repq
