#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mims/config.hpp"
#include "mims/msconv.hpp"
#include "mims/nn.hpp"
#include "mims/pooling.hpp"

namespace mims {

// MIL unit: an ordered set of 2D instances (slices or patches) with one
// image-level binary label.
struct Bag {
    std::string id;
    std::vector<Tensor> instances; // each [c, h, w], identical shapes
    int label = 0;
};

Tensor stack_instances(const std::vector<Tensor>& instances, const std::string& bag_id);

// Small trainable stem standing in for a pretrained extractor; produces the
// primary feature maps consumed by MSConv.
class BackboneStem {
public:
    BackboneStem() = default;
    BackboneStem(int in_channels, const std::vector<int>& channels, std::uint64_t seed);

    NodePtr forward(const NodePtr& x);
    int out_channels() const { return channels_.empty() ? 0 : channels_.back(); }
    void set_training(bool training);
    void collect_parameters(std::vector<Parameter>& out, const std::string& prefix, real lr_scale);
    void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix);

private:
    struct Block {
        Conv2DKernel conv;
        BatchNorm2D bn;
    };
    std::vector<Block> blocks_;
    std::vector<int> channels_;
};

struct BagForward {
    NodePtr logit;    // [1,1] bag-level logit
    Tensor feature;   // [N] pooled bag feature
    NodePtr input;    // first stacked-instance constant
    NodePtr primary;  // stem output (primary feature maps) of `input`
    NodePtr instance_logits; // [n,1]; only for instance-based schemes
};

// Full pipeline of Fig-1 shape: stem -> MSConv -> MIL pooling -> FC
// classifier, with the ablation variants toggling MSConv parts on and off.
class MimsModel {
public:
    MimsModel() = default;
    explicit MimsModel(const ExperimentConfig& config);

    BagForward forward(const Bag& bag);
    // Same layers applied per single-instance sub-bag; returns sigmoid outputs.
    std::vector<double> forward_instancewise(const Bag& bag);
    // Embedding pipeline over one stacked instance batch (used by forward and
    // by the localization pass, which needs the primary feature map node).
    BagForward forward_instances(const std::vector<Tensor>& instances, const std::string& bag_id);
    // Stem only; feature_corr measures correlations on these maps.
    NodePtr stem_forward(const NodePtr& x) { return stem_.forward(x); }

    void set_training(bool training);
    bool training() const { return training_; }

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    std::vector<std::pair<std::string, Tensor*>> state(); // params + buffers

    Variant variant() const { return variant_; }
    PoolScheme scheme() const { return scheme_; }
    const TopKPool& pool() const { return pool_; }
    TopKPool& pool() { return pool_; }
    int feature_dim() const { return feature_dim_; }
    const ExperimentConfig& config() const { return config_; }

private:
    ExperimentConfig config_;
    Variant variant_ = Variant::mims;
    PoolScheme scheme_ = PoolScheme::topk;
    BackboneStem stem_;
    std::optional<MSConvLayer> msconv_;
    TopKPool pool_;
    NodePtr fc_w_, fc_b_;
    int feature_dim_ = 0;
    bool training_ = true;
    std::vector<Parameter> params_;
    std::vector<std::pair<std::string, Tensor*>> buffers_;
};

MimsModel build_model(const ExperimentConfig& config);

// Checkpoint: binary container of RTF records plus a JSON index
// (name -> byte offset) and the experiment config, stored at <path> and
// <path>.json.
void save_checkpoint(MimsModel& model, const std::string& path);
MimsModel load_checkpoint(const std::string& path);

} // namespace mims
