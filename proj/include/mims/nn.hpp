#pragma once

#include "mims/graph.hpp"

namespace mims {

// Square-kernel 2D convolution parameters. `bias` may be null (layers that
// are followed by a batchnorm drop it).
struct Conv2DKernel {
    NodePtr weights; // [out_ch, in_ch, kh, kw], kh == kw
    NodePtr bias;    // [out_ch] or null
    int stride = 1;
    int padding = 0;
};

Conv2DKernel make_conv_kernel(int out_ch, int in_ch, int ksize, bool with_bias,
                              int stride = 1, int padding = 0);

// Cross-correlation (no kernel flip). h' = floor((h + 2p - kh)/stride) + 1.
NodePtr conv2d(const NodePtr& x, const Conv2DKernel& k);

// Half-pixel-center bilinear resampling. Output extent per axis is
// round-half-up(size * scale); source coord s = (d + 0.5)/scale - 0.5,
// clamped to [0, size-1]. Gradient follows the same blend weights.
NodePtr bilinear_resize(const NodePtr& x, double h_scale, double w_scale);

// Tensor-level variant used outside graphs (data pipeline, heatmaps).
Tensor bilinear_resize_tensor(const Tensor& x, double h_scale, double w_scale);
int resize_extent(int size, double scale);

struct BatchNorm2D {
    NodePtr gamma; // [ch]
    NodePtr beta;  // [ch]
    Tensor running_mean;
    Tensor running_var;
    real momentum = real(0.1);
    real epsilon = real(1e-5);
    bool training = true;

    BatchNorm2D() = default;
    explicit BatchNorm2D(int channels);
    int channels() const { return gamma ? gamma->value.dim(0) : 0; }
};

// Train mode: per-channel batch mean / biased variance, then affine;
// running stats updated as r <- (1-momentum)*r + momentum*batch.
// Eval mode: running stats, treated as constants by backward.
NodePtr batchnorm2d(const NodePtr& x, BatchNorm2D& bn);

NodePtr maxpool2x2(const NodePtr& x);

NodePtr fully_connected(const NodePtr& x, const NodePtr& w, const NodePtr& bias);

// Mean over the batch of the numerically stable form
// max(z,0) - z*y + log(1 + exp(-|z|)); labels must be 0/1.
NodePtr bce_with_logits(const NodePtr& logits, const Tensor& labels);

} // namespace mims
