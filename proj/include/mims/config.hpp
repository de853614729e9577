#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mims/msconv.hpp"
#include "mims/pooling.hpp"

namespace mims {

// Rows of the experiment matrix. pyramid_input reuses the no-resizing model
// and pursues multi-scaledness with an input pyramid instead.
enum class Variant { mims, mims_noresizing, si_cnn, mi_pre_conv, mi_pre, pyramid_input };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ExperimentConfig {
    std::string variant = "mims";
    std::string pool = "topk";
    int k = 5;
    double decay = 1.0;
    std::vector<double> scales{0.5, 0.75, 1.0};
    std::vector<KernelGroup> kernel_groups{{2, 8}, {3, 10}};
    std::vector<int> stem_channels{8, 16, 32};
    int in_channels = 1;

    std::string optimizer = "adam";
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int epochs = 12;
    int batch_bags = 4;
    std::uint64_t seed = 1;
    double backbone_lr_factor = 0.5;

    std::string dataset_root;
    std::vector<double> pyramid_scales{0.5, 0.75, 1.0};

    Variant variant_enum() const { return variant_from_name(variant); }
    PoolScheme pool_enum() const { return pool_scheme_from_name(pool); }
    bool input_pyramid() const { return variant_enum() == Variant::pyramid_input; }
    void validate() const;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load_file(const std::string& path);
};

} // namespace mims
