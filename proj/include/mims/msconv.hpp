#pragma once

#include <string>
#include <vector>

#include "mims/nn.hpp"

namespace mims {

struct KernelGroup {
    int size = 3;         // square kernel extent
    int out_channels = 8; // channels this group contributes
};

struct MSConvConfig {
    std::vector<std::pair<double, double>> scales{{0.5, 0.5}, {0.75, 0.75}, {1.0, 1.0}};
    std::vector<KernelGroup> kernel_groups{{2, 8}, {3, 10}};
    bool use_norm = true;
    bool use_scale_weights = true;

    int total_channels() const;
    int num_scales() const { return static_cast<int>(scales.size()); }
    int num_groups() const { return static_cast<int>(kernel_groups.size()); }
    void validate() const; // scales isotropic in [1/4, 2], N > 0
};

int receptive_field_count(const MSConvConfig& config); // m * n

// Multi-scale convolutional layer: the input feature maps are resized to m
// scales and every scale is convolved with the same kernel groups, so one
// kernel set realizes m*n receptive fields. Each (scale, channel) stream is
// batch-normalized and multiplied by its own learnable scalar sw_ij before
// the relu, which stops larger scales from drowning out smaller ones.
//
// Kernels keep their spatial grid aligned via padding (k-1)/2, so per scale
// an even-sized group yields (h-1, w-1) maps and an odd-sized group (h, w);
// group outputs therefore stay separate tensors and downstream pooling
// treats channels [offset, offset+out_channels) of group g as the flat
// channel index j of the layer.
class MSConvLayer {
public:
    MSConvLayer() = default;
    MSConvLayer(const MSConvConfig& config, int in_channels, std::uint64_t seed);

    // One output tensor per (scale, group): out[i][g] is [b, out_ch_g, h', w'].
    std::vector<std::vector<NodePtr>> forward(const NodePtr& x);

    const MSConvConfig& config() const { return config_; }
    int in_channels() const { return in_channels_; }
    int channel_offset(int group) const;
    void set_training(bool training);
    void collect_parameters(std::vector<Parameter>& out, const std::string& prefix);
    // buffers = non-trainable state (batchnorm running stats)
    void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix);

    std::vector<Conv2DKernel>& kernels() { return kernels_; }
    std::vector<std::vector<BatchNorm2D>>& norms() { return norms_; }
    std::vector<std::vector<NodePtr>>& scale_weights() { return scale_weights_; }

private:
    MSConvConfig config_;
    int in_channels_ = 0;
    std::vector<Conv2DKernel> kernels_;              // one per group, shared by all scales
    std::vector<std::vector<BatchNorm2D>> norms_;    // [scale][group], N channels per scale
    std::vector<std::vector<NodePtr>> scale_weights_; // [scale][group] vectors sw_ij
};

} // namespace mims
