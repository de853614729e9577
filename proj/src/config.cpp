#include "mims/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace mims {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::mims: return "mims";
        case Variant::mims_noresizing: return "mims-noresizing";
        case Variant::si_cnn: return "si-cnn";
        case Variant::mi_pre_conv: return "mi-pre-conv";
        case Variant::mi_pre: return "mi-pre";
        case Variant::pyramid_input: return "pyramid-input";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "mims") return Variant::mims;
    if (name == "mims-noresizing") return Variant::mims_noresizing;
    if (name == "si-cnn") return Variant::si_cnn;
    if (name == "mi-pre-conv") return Variant::mi_pre_conv;
    if (name == "mi-pre") return Variant::mi_pre;
    if (name == "pyramid-input") return Variant::pyramid_input;
    throw std::invalid_argument("unknown variant name '" + name + "'");
}

void ExperimentConfig::validate() const {
    variant_enum();
    pool_enum();
    if (k < 1) throw std::invalid_argument("config: k must be positive");
    if (scales.empty()) throw std::invalid_argument("config: empty scale list");
    if (kernel_groups.empty()) throw std::invalid_argument("config: empty kernel group list");
    if (stem_channels.empty()) throw std::invalid_argument("config: empty stem channel list");
    if (lr < 0) throw std::invalid_argument("config: negative learning rate");
    if (epochs < 0) throw std::invalid_argument("config: negative epoch count");
    if (batch_bags < 1) throw std::invalid_argument("config: batch_bags must be positive");
    if (backbone_lr_factor <= 0)
        throw std::invalid_argument("config: backbone_lr_factor must be positive");
    if (optimizer != "adam" && optimizer != "sgd")
        throw std::invalid_argument("config: optimizer must be adam or sgd");
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["variant"] = variant;
    j["pool"] = pool;
    j["k"] = k;
    j["decay"] = decay;
    j["scales"] = scales;
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : kernel_groups) groups.push_back({g.size, g.out_channels});
    j["kernel_groups"] = groups;
    j["stem_channels"] = stem_channels;
    j["in_channels"] = in_channels;
    j["optimizer"] = optimizer;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["epochs"] = epochs;
    j["batch_bags"] = batch_bags;
    j["seed"] = seed;
    j["backbone_lr_factor"] = backbone_lr_factor;
    j["dataset_root"] = dataset_root;
    j["pyramid_scales"] = pyramid_scales;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "variant",  "pool",          "k",          "decay",      "scales",
        "kernel_groups", "stem_channels", "in_channels", "optimizer", "lr",
        "beta1",    "beta2",         "adam_eps",   "epochs",     "batch_bags",
        "seed",     "backbone_lr_factor", "dataset_root", "pyramid_scales"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");

    ExperimentConfig c;
    if (j.contains("variant")) c.variant = j["variant"].get<std::string>();
    if (j.contains("pool")) c.pool = j["pool"].get<std::string>();
    if (j.contains("k")) c.k = j["k"].get<int>();
    if (j.contains("decay")) c.decay = j["decay"].get<double>();
    if (j.contains("scales")) c.scales = j["scales"].get<std::vector<double>>();
    if (j.contains("kernel_groups")) {
        c.kernel_groups.clear();
        for (const auto& g : j["kernel_groups"]) {
            if (!g.is_array() || g.size() != 2)
                throw std::invalid_argument("config: kernel_groups entries must be [size, channels]");
            c.kernel_groups.push_back({g[0].get<int>(), g[1].get<int>()});
        }
    }
    if (j.contains("stem_channels")) c.stem_channels = j["stem_channels"].get<std::vector<int>>();
    if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
    if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<std::string>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
    if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("batch_bags")) c.batch_bags = j["batch_bags"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("backbone_lr_factor")) c.backbone_lr_factor = j["backbone_lr_factor"].get<double>();
    if (j.contains("dataset_root")) c.dataset_root = j["dataset_root"].get<std::string>();
    if (j.contains("pyramid_scales")) c.pyramid_scales = j["pyramid_scales"].get<std::vector<double>>();
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

} // namespace mims
