#include "mims/msconv.hpp"

#include <cmath>
#include <stdexcept>

#include "mims/rng.hpp"

namespace mims {

int MSConvConfig::total_channels() const {
    int n = 0;
    for (const auto& g : kernel_groups) n += g.out_channels;
    return n;
}

void MSConvConfig::validate() const {
    if (scales.empty()) throw std::invalid_argument("msconv: no scales configured");
    for (const auto& [h, w] : scales) {
        if (h != w)
            throw std::invalid_argument("msconv: anisotropic scale (" + std::to_string(h) + "," +
                                        std::to_string(w) + ") not supported");
        if (h < 0.25 || h > 2.0)
            throw std::invalid_argument("msconv: scale " + std::to_string(h) +
                                        " outside [0.25, 2]");
    }
    if (kernel_groups.empty()) throw std::invalid_argument("msconv: no kernel groups configured");
    for (const auto& g : kernel_groups)
        if (g.size < 1 || g.out_channels < 1)
            throw std::invalid_argument("msconv: bad kernel group (" + std::to_string(g.size) +
                                        "," + std::to_string(g.out_channels) + ")");
    if (total_channels() <= 0) throw std::invalid_argument("msconv: zero output channels");
}

int receptive_field_count(const MSConvConfig& config) {
    return config.num_scales() * config.num_groups();
}

namespace {

void he_init(Tensor& w, int fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i)
        w.at(i) = static_cast<real>(rng.gauss() * std_dev);
}

} // namespace

MSConvLayer::MSConvLayer(const MSConvConfig& config, int in_channels, std::uint64_t seed)
    : config_(config), in_channels_(in_channels) {
    config_.validate();
    Rng rng(seed);
    const int m = config_.num_scales();
    for (int g = 0; g < config_.num_groups(); ++g) {
        const auto& kg = config_.kernel_groups[static_cast<std::size_t>(g)];
        // bias would be cancelled by the per-stream batchnorm, so it exists
        // only in the un-normalized configurations
        Conv2DKernel k = make_conv_kernel(kg.out_channels, in_channels, kg.size,
                                          /*with_bias=*/!config_.use_norm, /*stride=*/1,
                                          /*padding=*/(kg.size - 1) / 2);
        he_init(k.weights->value, in_channels * kg.size * kg.size, rng);
        kernels_.push_back(std::move(k));
    }
    if (config_.use_norm) {
        norms_.resize(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i)
            for (int g = 0; g < config_.num_groups(); ++g)
                norms_[static_cast<std::size_t>(i)].emplace_back(
                    config_.kernel_groups[static_cast<std::size_t>(g)].out_channels);
    }
    if (config_.use_scale_weights) {
        scale_weights_.resize(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i)
            for (int g = 0; g < config_.num_groups(); ++g)
                scale_weights_[static_cast<std::size_t>(i)].push_back(leaf(
                    Tensor::ones({config_.kernel_groups[static_cast<std::size_t>(g)].out_channels}),
                    true));
    }
}

int MSConvLayer::channel_offset(int group) const {
    int off = 0;
    for (int g = 0; g < group; ++g) off += config_.kernel_groups[static_cast<std::size_t>(g)].out_channels;
    return off;
}

std::vector<std::vector<NodePtr>> MSConvLayer::forward(const NodePtr& x) {
    const int m = config_.num_scales();
    std::vector<std::vector<NodePtr>> out(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const auto& [hs, ws] = config_.scales[static_cast<std::size_t>(i)];
        NodePtr xi = (hs == 1.0 && ws == 1.0) ? x : bilinear_resize(x, hs, ws);
        const int rh = xi->value.dim(2), rw = xi->value.dim(3);
        for (int g = 0; g < config_.num_groups(); ++g) {
            const int ks = config_.kernel_groups[static_cast<std::size_t>(g)].size;
            if (rh < ks || rw < ks)
                throw std::invalid_argument(
                    "msconv: scale " + std::to_string(hs) + " resizes input to " +
                    std::to_string(rh) + "x" + std::to_string(rw) +
                    ", smaller than kernel size " + std::to_string(ks));
            NodePtr y = conv2d(xi, kernels_[static_cast<std::size_t>(g)]);
            if (config_.use_norm)
                y = batchnorm2d(y, norms_[static_cast<std::size_t>(i)][static_cast<std::size_t>(g)]);
            if (config_.use_scale_weights)
                y = channel_scale(y, scale_weights_[static_cast<std::size_t>(i)][static_cast<std::size_t>(g)]);
            out[static_cast<std::size_t>(i)].push_back(relu(y));
        }
    }
    return out;
}

void MSConvLayer::set_training(bool training) {
    for (auto& per_scale : norms_)
        for (auto& bn : per_scale) bn.training = training;
}

void MSConvLayer::collect_parameters(std::vector<Parameter>& out, const std::string& prefix) {
    for (std::size_t g = 0; g < kernels_.size(); ++g) {
        out.push_back({prefix + ".conv" + std::to_string(g) + ".w", kernels_[g].weights});
        if (kernels_[g].bias) out.push_back({prefix + ".conv" + std::to_string(g) + ".b", kernels_[g].bias});
    }
    for (std::size_t i = 0; i < norms_.size(); ++i)
        for (std::size_t g = 0; g < norms_[i].size(); ++g) {
            const std::string base = prefix + ".bn" + std::to_string(i) + "_" + std::to_string(g);
            out.push_back({base + ".gamma", norms_[i][g].gamma});
            out.push_back({base + ".beta", norms_[i][g].beta});
        }
    for (std::size_t i = 0; i < scale_weights_.size(); ++i)
        for (std::size_t g = 0; g < scale_weights_[i].size(); ++g)
            out.push_back({prefix + ".sw" + std::to_string(i) + "_" + std::to_string(g),
                           scale_weights_[i][g]});
}

void MSConvLayer::collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out,
                                  const std::string& prefix) {
    for (std::size_t i = 0; i < norms_.size(); ++i)
        for (std::size_t g = 0; g < norms_[i].size(); ++g) {
            const std::string base = prefix + ".bn" + std::to_string(i) + "_" + std::to_string(g);
            out.emplace_back(base + ".running_mean", &norms_[i][g].running_mean);
            out.emplace_back(base + ".running_var", &norms_[i][g].running_var);
        }
}

} // namespace mims
