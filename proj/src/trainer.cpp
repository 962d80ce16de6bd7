#include "repq/trainer.hpp"

#include <chrono>
#include <cmath>

namespace repq {

namespace {

struct Sgd {
    std::vector<Model::Param> params;
    std::vector<std::vector<float>> velocity;
    double momentum;

    void bind(std::vector<Model::Param> ps) {
        params = std::move(ps);
        velocity.assign(params.size(), {});
        for (size_t i = 0; i < params.size(); ++i)
            velocity[i].assign(size_t(params[i].tensor.numel()), 0.0f);
    }

    void zero_grad() {
        for (auto& p : params) p.tensor.zero_grad();
    }

    void step(double lr, double steps_lr_ratio, double weight_decay) {
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.tensor.has_grad()) continue;
            auto& w = p.tensor.data();
            auto& g = p.tensor.grad();
            auto& v = velocity[i];
            const float eff_lr = float(p.is_step ? lr * steps_lr_ratio : lr);
            const float wd = p.decay ? float(weight_decay) : 0.0f;
            const float mom = float(momentum);
            for (size_t k = 0; k < w.size(); ++k) {
                v[k] = mom * v[k] + g[k] + wd * w[k];
                w[k] -= eff_lr * v[k];
            }
            if (p.is_step)
                for (auto& s : w) s = std::max(s, 1e-8f);
        }
    }
};

}  // namespace

StageResult train_stage(Model& m, const Dataset& train, const Dataset* eval_set,
                        const StageOpts& opts) {
    require(opts.batch > 0, "train_stage: batch size must be positive");
    StageResult res;
    const int64_t n = train.count();
    const int64_t steps_per_epoch = (n + opts.batch - 1) / opts.batch;
    int64_t total_steps = steps_per_epoch * opts.epochs;
    if (opts.max_steps >= 0) total_steps = std::min<int64_t>(total_steps, opts.max_steps);
    if (total_steps == 0) return res;  // zero-epoch run: parameters untouched

    Sgd sgd;
    sgd.momentum = opts.momentum;
    bool bound = false;
    int64_t gstep = 0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        MulCountScope mults;
        std::vector<int64_t> order(static_cast<size_t>(n), 0);
        for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
        Rng shuffle_rng(opts.seed * 1000003ull + uint64_t(epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0;
        int64_t batches = 0;
        for (int64_t start = 0; start < n; start += opts.batch) {
            if (opts.max_steps >= 0 && gstep >= opts.max_steps) break;
            std::vector<int64_t> idx(order.begin() + start,
                                     order.begin() + std::min(n, start + opts.batch));
            auto x = batch_images(train, idx);
            auto labels = batch_labels(train, idx);
            auto loss = softmax_cross_entropy(m.forward(x, Mode::Train), labels);
            const double lval = loss.item();
            if (!std::isfinite(lval))
                throw TrainingDiverged("non-finite loss at stage '" + opts.stage_name +
                                       "' epoch " + std::to_string(epoch) + " step " +
                                       std::to_string(gstep) + " (seed " +
                                       std::to_string(opts.seed) + ")");
            res.step_losses.push_back(lval);
            loss_sum += lval;
            ++batches;
            if (!bound) {
                // quantizer steps exist only after the first forward
                sgd.bind(m.parameters());
                bound = true;
            }
            sgd.zero_grad();
            loss.backward();
            const double lr_t =
                opts.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * double(gstep) /
                                                double(total_steps)));
            sgd.step(lr_t, opts.steps_lr_ratio, opts.weight_decay);
            ++gstep;
        }

        EpochRow row;
        row.stage = opts.stage_name;
        row.epoch = epoch;
        row.seed = opts.seed;
        row.train_loss = batches ? loss_sum / double(batches) : 0.0;
        if (eval_set && opts.eval_each_epoch) {
            row.eval_acc = m.evaluate(*eval_set);
            res.best_eval = std::max(res.best_eval, row.eval_acc);
        }
        row.mults = mults.elapsed();
        row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.rows.push_back(row);
        if (opts.max_steps >= 0 && gstep >= opts.max_steps) break;
    }
    return res;
}

Model build_fp_model(const ExperimentConfig& cfg, uint64_t seed, int num_classes) {
    auto plan = make_plan(cfg, /*qat_stage=*/false);
    plan.num_classes = num_classes;
    return Model::build(plan, seed, cfg.bn_momentum, cfg.bn_eps);
}

StageResult train_fp(Model& m, const DatasetPair& data, const ExperimentConfig& cfg,
                     uint64_t seed) {
    StageOpts o;
    o.epochs = cfg.fp.epochs;
    o.lr = cfg.fp.lr;
    o.batch = cfg.fp.batch;
    o.weight_decay = cfg.fp.weight_decay;
    o.seed = seed;
    o.stage_name = "fp";
    return train_stage(m, data.train, &data.eval_set, o);
}

Model convert_for_qat(const Checkpoint& ck, const ExperimentConfig& cfg, int num_classes) {
    Strategy strat = strategy_from_name(cfg.strategy);
    const std::string want_arch = strategy_fp_reparam(strat) ? "reparam" : "plain";
    if (ck.stage != "fp")
        throw std::invalid_argument("convert_for_qat: checkpoint stage '" + ck.stage +
                                    "' is not an FP checkpoint");
    if (ck.arch != want_arch)
        throw std::invalid_argument("convert_for_qat: strategy '" + cfg.strategy +
                                    "' expects a " + want_arch + " FP checkpoint, got " +
                                    ck.arch);
    if (ck.model_name != cfg.model)
        throw std::invalid_argument("convert_for_qat: checkpoint model '" + ck.model_name +
                                    "' does not match config model '" + cfg.model + "'");

    auto qplan = make_plan(cfg, /*qat_stage=*/true);
    qplan.num_classes = num_classes;
    Model qm = Model::build(qplan, /*seed=*/0, cfg.bn_momentum, cfg.bn_eps);

    if (strat == Strategy::Merged) {
        // rebuild the FP model, then fold every layer with running statistics
        auto fplan = make_plan(cfg, /*qat_stage=*/false);
        fplan.num_classes = num_classes;
        Model fm = Model::build(fplan, 0, cfg.bn_momentum, cfg.bn_eps);
        fm.load_state(ck);
        for (size_t i = 0; i < fm.layers.size(); ++i) {
            auto fold = fm.folded_layer(i);
            qm.layers[i].weight.data() = fold.weight.data();
            qm.layers[i].bias.data() = fold.bias.defined()
                                           ? fold.bias.data()
                                           : std::vector<float>(size_t(fold.weight.dim(3)), 0.0f);
        }
        qm.head_w.data() = fm.head_w.data();
        qm.head_b.data() = fm.head_b.data();
    } else {
        qm.load_state(ck);
    }
    qm.attach_quantizers();
    return qm;
}

StageResult train_qat(Model& m, const DatasetPair& data, const ExperimentConfig& cfg,
                      uint64_t seed) {
    StageOpts o;
    o.epochs = cfg.qat.epochs;
    o.lr = cfg.fp.lr * cfg.qat.lr_ratio;
    o.batch = cfg.fp.batch;
    o.weight_decay = cfg.fp.weight_decay;
    o.steps_lr_ratio = cfg.qat.steps_lr_ratio;
    o.seed = seed;
    o.stage_name = "qat";
    return train_stage(m, data.train, &data.eval_set, o);
}

}  // namespace repq
