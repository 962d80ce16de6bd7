#include "repq/model.hpp"

#include <algorithm>

namespace repq {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Plain: return "plain";
        case Strategy::Merged: return "merged";
        case Strategy::RepQ: return "repq";
        case Strategy::RepQBN: return "repq_bn";
        case Strategy::RepQBNEst: return "repq_bnest";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& s) {
    if (s == "plain") return Strategy::Plain;
    if (s == "merged") return Strategy::Merged;
    if (s == "repq") return Strategy::RepQ;
    if (s == "repq_bn") return Strategy::RepQBN;
    if (s == "repq_bnest") return Strategy::RepQBNEst;
    throw ConfigError("unknown strategy '" + s + "'");
}

bool strategy_fp_reparam(Strategy s) { return s != Strategy::Plain; }
bool strategy_qat_reparam(Strategy s) {
    return s == Strategy::RepQ || s == Strategy::RepQBN || s == Strategy::RepQBNEst;
}

namespace {

// Base layer grid per architecture: (cin, cout, pool_after, residual).
struct BaseLayer {
    int64_t cin, cout;
    bool pool, residual;
};

std::vector<BaseLayer> base_layers(const std::string& model) {
    if (model == "minivgg")
        return {{1, 16, true, false}, {16, 32, true, false}, {32, 64, true, false},
                {64, 64, false, false}};
    // miniresnet: stem + 4 residual units
    return {{1, 16, false, false},
            {16, 16, true, true},
            {16, 16, false, true},
            {16, 16, true, true},
            {16, 16, false, true}};
}

// The trainer builds catalogue blocks without internal BN and normalizes the
// block output with one BN; the RepQ-BN/BNEst strategies fold that BN into
// the merged kernel every step, which keeps the normalization structure of
// the Plain baseline while training the expanded weight set.
BlockTopology default_topology(int64_t cin, int64_t cout) {
    return cin == cout ? BlockTopology::ConvIdentity : BlockTopology::TwoConvChain;
}

bool topology_has_bn(BlockTopology t) {
    return t == BlockTopology::ACNet || t == BlockTopology::RepVgg;
}

}  // namespace

ModelPlan make_plan(const ExperimentConfig& cfg, bool qat_stage) {
    Strategy strat = strategy_from_name(cfg.strategy);
    ModelPlan plan;
    plan.model_name = cfg.model;
    bool reparam = qat_stage ? strategy_qat_reparam(strat) : strategy_fp_reparam(strat);
    if (qat_stage && strat == Strategy::Merged)
        plan.arch = ArchKind::MergedSingle;
    else
        plan.arch = reparam ? ArchKind::Reparam : ArchKind::Plain;
    auto base = base_layers(cfg.model);
    if (!cfg.layers.empty() && cfg.layers.size() != base.size())
        throw ConfigError("layers[] has " + std::to_string(cfg.layers.size()) +
                          " entries but model " + cfg.model + " has " +
                          std::to_string(base.size()) + " conv layers");
    BnMode default_bn = strat == Strategy::RepQBNEst ? BnMode::Estimate : BnMode::Exact;
    // strategies that fold the block-output BN during training
    bool fold_bn = strat == Strategy::Merged || strat == Strategy::RepQBN ||
                   strat == Strategy::RepQBNEst;
    for (size_t i = 0; i < base.size(); ++i) {
        LayerPlan lp;
        lp.cin = base[i].cin;
        lp.cout = base[i].cout;
        lp.pool_after = base[i].pool;
        lp.residual = base[i].residual;
        lp.topo = default_topology(lp.cin, lp.cout);
        lp.bits = qat_stage ? cfg.bits : 32;
        lp.bn_mode = default_bn;
        if (!cfg.layers.empty()) {
            const auto& ov = cfg.layers[i];
            if (ov.block) {
                auto t = topology_from_name(*ov.block);
                if (!t) throw ConfigError("unknown block topology '" + *ov.block + "'");
                lp.topo = *t;
            }
            if (ov.bits && qat_stage) lp.bits = *ov.bits;
            if (ov.use_bn_est && *ov.use_bn_est) lp.bn_mode = BnMode::Estimate;
            if (ov.keep_bn && *ov.keep_bn) lp.bn_mode = BnMode::Exact;
        }
        if (lp.residual && lp.cin != lp.cout)
            throw ConfigError("residual layers need matching channel counts");
        // plain layers and blocks without internal BN get a block-output BN
        lp.outer_bn = plan.arch == ArchKind::Plain ||
                      (plan.arch == ArchKind::Reparam && !topology_has_bn(lp.topo));
        lp.fold_outer_bn = lp.outer_bn && plan.arch == ArchKind::Reparam && fold_bn;
        plan.layers.push_back(lp);
    }
    plan.head_in = base.back().cout;
    plan.num_classes = 10;
    return plan;
}

Model Model::build(const ModelPlan& plan, uint64_t seed, double bn_momentum, double bn_eps) {
    Model m;
    m.plan = plan;
    Rng rng(seed);
    for (const auto& lp : plan.layers) {
        ConvLayer layer;
        layer.plan = lp;
        if (plan.arch == ArchKind::Reparam) {
            layer.block = make_block<float>(lp.topo, lp.cin, lp.cout, rng, float(bn_momentum),
                                            float(bn_eps));
        } else {
            layer.weight = random_kernel<float>(3, 3, lp.cin, lp.cout, rng);
            if (plan.arch == ArchKind::MergedSingle) {
                layer.bias = Tensor<float>::zeros({lp.cout});
                layer.bias.set_requires_grad(true);
            }
        }
        if (lp.outer_bn)
            layer.outer_bn = BNState<float>::make(lp.cout, float(bn_momentum), float(bn_eps));
        m.layers.push_back(std::move(layer));
    }
    m.head_w = Tensor<float>({plan.head_in, plan.num_classes});
    const double hstd = std::sqrt(2.0 / double(plan.head_in));
    for (auto& v : m.head_w.data()) v = float(rng.normal() * hstd);
    m.head_w.set_requires_grad(true);
    m.head_b = Tensor<float>::zeros({plan.num_classes});
    m.head_b.set_requires_grad(true);
    return m;
}

void Model::attach_quantizers() {
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        if (l.plan.bits >= 32) continue;
        l.quant = true;
        l.wq = QuantizerState<float>::weights(l.plan.bits);
        // first layer sees raw (signed) inputs; later layers follow ReLU
        l.aq = QuantizerState<float>::activations(l.plan.bits, i == 0);
    }
}

FoldResult<float> Model::layer_kernel(size_t i, const Tensor<float>& h, Mode mode) {
    auto& l = layers[i];
    if (plan.arch != ArchKind::Reparam) return {l.weight, l.bias};
    auto fold = l.block.merged_weight(h, mode, l.plan.bn_mode);
    if (!l.plan.fold_outer_bn) return fold;

    // Fold the block-output BN into the merged kernel. Train mode draws the
    // statistics from this batch: exactly (one extra convolution) or from the
    // input moments and kernel sums; eval mode uses the running statistics.
    auto& bn = *l.outer_bn;
    Tensor<float> mu_conv, var;
    if (mode == Mode::Eval) {
        Tensor<float> rm({bn.channels()}, bn.running_mean);
        var = Tensor<float>({bn.channels()}, bn.running_var);
        mu_conv = sub(rm, fold.bias);
    } else if (l.plan.bn_mode == BnMode::Exact) {
        ConvSpec spec{fold.weight.dim(0), fold.weight.dim(1), fold.weight.dim(2),
                      fold.weight.dim(3), Padding::Same, 1};
        auto y0 = add_channel(conv2d(h, fold.weight, spec), fold.bias);
        auto mu_y = mean_bhd(y0);
        var = var_bhd(y0);
        update_running(bn, mu_y.data(), var.data());
        mu_conv = sub(mu_y, fold.bias);
    } else {
        mu_conv = bn_est_mean(h, fold.weight);
        var = bn_est_var(h, fold.weight);
        auto mu_y = add(mu_conv, fold.bias);
        update_running(bn, mu_y.data(), var.data());
    }
    return bn_fold(fold.weight, mu_conv, var, bn);
}

Tensor<float> Model::layer_forward(size_t i, const Tensor<float>& h, Mode mode,
                                   LayerCost* cost) {
    auto& l = layers[i];
    Tensor<float> skip = h;
    MulCountScope stats_scope;
    auto fold = layer_kernel(i, h, mode);
    Tensor<float> weight = fold.weight;
    if (cost) cost->stats = stats_scope.elapsed();

    MulCountScope conv_scope;
    Tensor<float> hin = h;
    if (l.quant) {
        if (!l.wq.initialized) {
            if (mode != Mode::Train)
                throw std::runtime_error("forward: quantizer used before initialization");
            min_error_init(weight, l.wq);
        }
        if (!l.aq.initialized) min_error_init(hin, l.aq);
        weight = quantize(weight, l.wq);
        hin = quantize(hin, l.aq);
    }
    ConvSpec spec{weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3), Padding::Same, 1};
    Tensor<float> y = conv2d(hin, weight, spec);
    if (fold.bias.defined()) y = add_channel(y, fold.bias);
    if (l.outer_bn && !l.plan.fold_outer_bn) y = bn_forward(y, *l.outer_bn, mode);
    if (l.plan.residual) y = add(y, skip);
    y = relu(y);
    if (l.plan.pool_after) y = avg_pool_2x2(y);
    if (cost) cost->conv = conv_scope.elapsed();
    return y;
}

Tensor<float> Model::forward(const Tensor<float>& x, Mode mode) {
    Tensor<float> h = x;
    for (size_t i = 0; i < layers.size(); ++i) h = layer_forward(i, h, mode);
    return add_channel(matmul(global_avg_pool(h), head_w), head_b);
}

FoldResult<float> Model::folded_layer(size_t i) {
    auto fold = layer_kernel(i, Tensor<float>(), Mode::Eval);
    if (layers[i].outer_bn && !layers[i].plan.fold_outer_bn) {
        // an unfolded block-output BN still collapses into the kernel at
        // eval time
        const auto& bn = *layers[i].outer_bn;
        Tensor<float> rm({bn.channels()}, bn.running_mean);
        Tensor<float> rv({bn.channels()}, bn.running_var);
        Tensor<float> mu_conv =
            fold.bias.defined() ? sub(rm, fold.bias) : rm;
        return bn_fold(fold.weight, mu_conv, rv, bn);
    }
    return fold;
}

std::vector<Model::Param> Model::parameters() {
    std::vector<Param> ps;
    auto push = [&](Tensor<float> t, bool decay, bool is_step = false) {
        ps.push_back({std::move(t), decay, is_step});
    };
    for (auto& l : layers) {
        if (plan.arch == ArchKind::Reparam) {
            for (auto& br : l.block.branches)
                for (auto& bl : br.layers) {
                    if (bl.kind == LayerKind::Conv) push(bl.weight, true);
                    if (bl.kind == LayerKind::Scale) push(bl.scale, false);
                    if (bl.kind == LayerKind::BatchNorm) {
                        push(bl.bn->gamma, false);
                        push(bl.bn->beta, false);
                    }
                }
        } else {
            push(l.weight, true);
            if (l.bias.defined()) push(l.bias, false);
        }
        if (l.outer_bn) {
            push(l.outer_bn->gamma, false);
            push(l.outer_bn->beta, false);
        }
        if (l.quant) {
            if (l.wq.initialized) push(l.wq.steps, false, true);
            if (l.aq.initialized) push(l.aq.steps, false, true);
        }
    }
    push(head_w, true);
    push(head_b, false);
    return ps;
}

namespace {
std::string lkey(size_t i, const std::string& suffix) {
    return "layer" + std::to_string(i) + "." + suffix;
}

void put_tensor(Checkpoint& ck, const std::string& name, const Tensor<float>& t) {
    ck.put(name, t.shape(), t.data());
}

void put_vec(Checkpoint& ck, const std::string& name, const std::vector<float>& v) {
    ck.put(name, {int64_t(v.size())}, v);
}

void load_tensor(const Checkpoint& ck, const std::string& name, Tensor<float>& t) {
    const auto& [shape, data] = ck.get(name);
    require(shape == t.shape(), "checkpoint: shape mismatch for " + name + ", file has " +
                                    shape_str(shape) + ", model wants " + shape_str(t.shape()));
    t.data() = data;
}

void load_vec(const Checkpoint& ck, const std::string& name, std::vector<float>& v) {
    const auto& [shape, data] = ck.get(name);
    require(data.size() == v.size(), "checkpoint: size mismatch for " + name);
    v = data;
}

void bn_state_save(Checkpoint& ck, const std::string& prefix, const BNState<float>& bn) {
    put_tensor(ck, prefix + ".gamma", bn.gamma);
    put_tensor(ck, prefix + ".beta", bn.beta);
    put_vec(ck, prefix + ".running_mean", bn.running_mean);
    put_vec(ck, prefix + ".running_var", bn.running_var);
}

void bn_state_load(const Checkpoint& ck, const std::string& prefix, BNState<float>& bn) {
    load_tensor(ck, prefix + ".gamma", bn.gamma);
    load_tensor(ck, prefix + ".beta", bn.beta);
    load_vec(ck, prefix + ".running_mean", bn.running_mean);
    load_vec(ck, prefix + ".running_var", bn.running_var);
}
}  // namespace

void Model::save_state(Checkpoint& ck) const {
    ck.model_name = plan.model_name;
    ck.arch = plan.arch == ArchKind::Plain      ? "plain"
              : plan.arch == ArchKind::Reparam  ? "reparam"
                                                : "merged";
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (plan.arch == ArchKind::Reparam) {
            for (size_t b = 0; b < l.block.branches.size(); ++b)
                for (size_t k = 0; k < l.block.branches[b].layers.size(); ++k) {
                    const auto& bl = l.block.branches[b].layers[k];
                    std::string p =
                        lkey(i, "b" + std::to_string(b) + ".l" + std::to_string(k));
                    if (bl.kind == LayerKind::Conv) put_tensor(ck, p + ".weight", bl.weight);
                    if (bl.kind == LayerKind::Scale) put_tensor(ck, p + ".scale", bl.scale);
                    if (bl.kind == LayerKind::BatchNorm) bn_state_save(ck, p + ".bn", *bl.bn);
                }
        } else {
            put_tensor(ck, lkey(i, "weight"), l.weight);
            if (l.bias.defined()) put_tensor(ck, lkey(i, "bias"), l.bias);
        }
        if (l.outer_bn) bn_state_save(ck, lkey(i, "outer_bn"), *l.outer_bn);
        if (l.quant) {
            if (l.wq.initialized) put_tensor(ck, lkey(i, "wq.steps"), l.wq.steps);
            if (l.aq.initialized) put_tensor(ck, lkey(i, "aq.steps"), l.aq.steps);
        }
    }
    put_tensor(ck, "head.weight", head_w);
    put_tensor(ck, "head.bias", head_b);
}

void Model::load_state(const Checkpoint& ck) {
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        if (plan.arch == ArchKind::Reparam) {
            for (size_t b = 0; b < l.block.branches.size(); ++b)
                for (size_t k = 0; k < l.block.branches[b].layers.size(); ++k) {
                    auto& bl = l.block.branches[b].layers[k];
                    std::string p =
                        lkey(i, "b" + std::to_string(b) + ".l" + std::to_string(k));
                    if (bl.kind == LayerKind::Conv) load_tensor(ck, p + ".weight", bl.weight);
                    if (bl.kind == LayerKind::Scale) load_tensor(ck, p + ".scale", bl.scale);
                    if (bl.kind == LayerKind::BatchNorm) bn_state_load(ck, p + ".bn", *bl.bn);
                }
        } else {
            load_tensor(ck, lkey(i, "weight"), l.weight);
            if (l.bias.defined()) load_tensor(ck, lkey(i, "bias"), l.bias);
        }
        if (l.outer_bn) bn_state_load(ck, lkey(i, "outer_bn"), *l.outer_bn);
        if (l.quant) {
            if (ck.has(lkey(i, "wq.steps"))) {
                l.wq.steps = Tensor<float>({l.plan.cout});
                load_tensor(ck, lkey(i, "wq.steps"), l.wq.steps);
                l.wq.steps.set_requires_grad(true);
                l.wq.initialized = true;
            }
            if (ck.has(lkey(i, "aq.steps"))) {
                l.aq.steps = Tensor<float>({1});
                load_tensor(ck, lkey(i, "aq.steps"), l.aq.steps);
                l.aq.steps.set_requires_grad(true);
                l.aq.initialized = true;
            }
        }
    }
    load_tensor(ck, "head.weight", head_w);
    load_tensor(ck, "head.bias", head_b);
}

std::vector<Model::EvalLayer> Model::fold_for_eval() {
    std::vector<EvalLayer> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        EvalLayer e;
        auto fold = layer_kernel(i, Tensor<float>(), Mode::Eval);
        Tensor<float> weight = fold.weight;
        Tensor<float> bias = fold.bias;
        if (l.quant) weight = quantize(weight, l.wq);
        e.weight = Tensor<float>(weight.shape(), weight.data());
        if (bias.defined()) e.bias = Tensor<float>(bias.shape(), bias.data());
        if (l.outer_bn && !l.plan.fold_outer_bn) {
            e.has_outer = true;
            const auto& bn = *l.outer_bn;
            e.bn_scale.resize(size_t(bn.channels()));
            e.bn_shift.resize(size_t(bn.channels()));
            for (int64_t c = 0; c < bn.channels(); ++c) {
                float s = bn.gamma.data()[c] / std::sqrt(bn.running_var[c] + bn.epsilon);
                e.bn_scale[c] = s;
                e.bn_shift[c] = bn.beta.data()[c] - bn.running_mean[c] * s;
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

double Model::evaluate(const Dataset& ds, int batch) {
    if (ds.count() == 0) throw std::invalid_argument("evaluate: empty dataset");
    auto folded = fold_for_eval();  // re-parametrized layers fold exactly once
    int64_t correct = 0;
    for (int64_t start = 0; start < ds.count(); start += batch) {
        std::vector<int64_t> idx;
        for (int64_t i = start; i < std::min(ds.count(), start + batch); ++i) idx.push_back(i);
        Tensor<float> h = batch_images(ds, idx);
        for (size_t li = 0; li < layers.size(); ++li) {
            auto& l = layers[li];
            auto& e = folded[li];
            Tensor<float> skip = h;
            Tensor<float> hin = h;
            if (l.quant) hin = quantize(hin, l.aq);
            ConvSpec spec{e.weight.dim(0), e.weight.dim(1), e.weight.dim(2), e.weight.dim(3),
                          Padding::Same, 1};
            Tensor<float> y = conv2d(hin, e.weight, spec);
            if (e.bias.defined()) y = add_channel(y, e.bias);
            if (e.has_outer) {
                Tensor<float> sc({int64_t(e.bn_scale.size())}, e.bn_scale);
                Tensor<float> sh({int64_t(e.bn_shift.size())}, e.bn_shift);
                y = add_channel(scale_channels(y, sc), sh);
            }
            if (l.plan.residual) y = add(y, skip);
            y = relu(y);
            if (l.plan.pool_after) y = avg_pool_2x2(y);
            h = y;
        }
        auto logits = add_channel(matmul(global_avg_pool(h), head_w), head_b);
        auto labels = batch_labels(ds, idx);
        const int64_t K = logits.dim(1);
        for (size_t b = 0; b < idx.size(); ++b) {
            int64_t arg = 0;
            for (int64_t k = 1; k < K; ++k)
                if (logits.data()[int64_t(b) * K + k] > logits.data()[int64_t(b) * K + arg])
                    arg = k;
            if (int(arg) == labels[b]) ++correct;
        }
    }
    return double(correct) / double(ds.count());
}

}  // namespace repq
