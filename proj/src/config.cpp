#include "repq/config.hpp"

#include <fstream>
#include <set>

namespace repq {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
T get_or(const json& j, const std::string& key, const T& fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("key '" + key + "' has the wrong type");
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    reject_unknown(j,
                   {"model", "strategy", "bits", "seeds", "out_dir", "dataset", "fp", "qat", "bn",
                    "layers"},
                   "config root");
    ExperimentConfig c;
    if (!j.contains("strategy")) throw ConfigError("missing required key 'strategy'");
    if (!j.contains("bits")) throw ConfigError("missing required key 'bits'");
    c.model = get_or<std::string>(j, "model", c.model);
    c.strategy = j.at("strategy").get<std::string>();
    c.bits = j.at("bits").get<int>();
    c.seeds = get_or<std::vector<uint64_t>>(j, "seeds", c.seeds);
    c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);

    static const std::set<std::string> strategies{"plain", "merged", "repq", "repq_bn",
                                                  "repq_bnest"};
    if (!strategies.count(c.strategy))
        throw ConfigError("strategy '" + c.strategy +
                          "' is not one of plain|merged|repq|repq_bn|repq_bnest");
    static const std::set<int> bit_choices{2, 3, 4, 8, 32};
    if (!bit_choices.count(c.bits)) throw ConfigError("bits must be one of 2,3,4,8 or 32");
    if (c.model != "minivgg" && c.model != "miniresnet")
        throw ConfigError("model '" + c.model + "' is not one of minivgg|miniresnet");
    if (c.seeds.empty()) throw ConfigError("seeds must be a nonempty list");

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        reject_unknown(d, {"type", "train", "eval", "noise", "seed", "path"}, "dataset");
        c.dataset.type = get_or<std::string>(d, "type", c.dataset.type);
        c.dataset.train = get_or<int64_t>(d, "train", c.dataset.train);
        c.dataset.eval = get_or<int64_t>(d, "eval", c.dataset.eval);
        c.dataset.noise = get_or<double>(d, "noise", c.dataset.noise);
        c.dataset.seed = get_or<uint64_t>(d, "seed", c.dataset.seed);
        c.dataset.path = get_or<std::string>(d, "path", c.dataset.path);
        if (c.dataset.type != "synthetic" && c.dataset.type != "u8_folder")
            throw ConfigError("dataset.type must be synthetic or u8_folder");
        if (c.dataset.type == "u8_folder" && c.dataset.path.empty())
            throw ConfigError("dataset.path is required for u8_folder datasets");
    }
    if (j.contains("fp")) {
        const auto& f = j.at("fp");
        reject_unknown(f, {"epochs", "lr", "batch", "weight_decay"}, "fp");
        c.fp.epochs = get_or<int>(f, "epochs", c.fp.epochs);
        c.fp.lr = get_or<double>(f, "lr", c.fp.lr);
        c.fp.batch = get_or<int>(f, "batch", c.fp.batch);
        c.fp.weight_decay = get_or<double>(f, "weight_decay", c.fp.weight_decay);
        if (c.fp.epochs < 0 || c.fp.batch <= 0 || c.fp.lr <= 0)
            throw ConfigError("fp stage hyperparameters out of range");
    }
    if (j.contains("qat")) {
        const auto& q = j.at("qat");
        reject_unknown(q, {"epochs", "lr_ratio", "steps_lr_ratio"}, "qat");
        c.qat.epochs = get_or<int>(q, "epochs", c.qat.epochs);
        c.qat.lr_ratio = get_or<double>(q, "lr_ratio", c.qat.lr_ratio);
        c.qat.steps_lr_ratio = get_or<double>(q, "steps_lr_ratio", c.qat.steps_lr_ratio);
        if (c.qat.epochs < 0 || c.qat.lr_ratio <= 0 || c.qat.steps_lr_ratio <= 0)
            throw ConfigError("qat stage hyperparameters out of range");
    }
    if (j.contains("bn")) {
        const auto& b = j.at("bn");
        reject_unknown(b, {"momentum", "epsilon"}, "bn");
        c.bn_momentum = get_or<double>(b, "momentum", c.bn_momentum);
        c.bn_eps = get_or<double>(b, "epsilon", c.bn_eps);
        if (c.bn_momentum <= 0 || c.bn_momentum > 1 || c.bn_eps <= 0)
            throw ConfigError("bn.momentum must be in (0,1] and bn.epsilon > 0");
    }
    if (j.contains("layers")) {
        if (!j.at("layers").is_array()) throw ConfigError("layers must be an array");
        for (const auto& l : j.at("layers")) {
            reject_unknown(l, {"bits", "use_bn_est", "keep_bn", "block"}, "layers[]");
            LayerOverride ov;
            if (l.contains("bits")) ov.bits = l.at("bits").get<int>();
            if (l.contains("use_bn_est")) ov.use_bn_est = l.at("use_bn_est").get<bool>();
            if (l.contains("keep_bn")) ov.keep_bn = l.at("keep_bn").get<bool>();
            if (l.contains("block")) ov.block = l.at("block").get<std::string>();
            if (ov.bits && !bit_choices.count(*ov.bits))
                throw ConfigError("layer bits must be one of 2,3,4,8 or 32");
            c.layers.push_back(std::move(ov));
        }
    }
    return c;
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["strategy"] = strategy;
    j["bits"] = bits;
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    j["dataset"] = {{"type", dataset.type}, {"train", dataset.train}, {"eval", dataset.eval},
                    {"noise", dataset.noise}, {"seed", dataset.seed}, {"path", dataset.path}};
    j["fp"] = {{"epochs", fp.epochs},
               {"lr", fp.lr},
               {"batch", fp.batch},
               {"weight_decay", fp.weight_decay}};
    j["qat"] = {{"epochs", qat.epochs},
                {"lr_ratio", qat.lr_ratio},
                {"steps_lr_ratio", qat.steps_lr_ratio}};
    j["bn"] = {{"momentum", bn_momentum}, {"epsilon", bn_eps}};
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json lj = nlohmann::json::object();
        if (l.bits) lj["bits"] = *l.bits;
        if (l.use_bn_est) lj["use_bn_est"] = *l.use_bn_est;
        if (l.keep_bn) lj["keep_bn"] = *l.keep_bn;
        if (l.block) lj["block"] = *l.block;
        layers_json.push_back(lj);
    }
    j["layers"] = layers_json;
    return j;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_json(j);
}

}  // namespace repq
