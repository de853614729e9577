#pragma once

#include <vector>

#include "mims/graph.hpp"

namespace mims {

// Learnable top-k pooling weights. The simplex constraint (w_r >= 0,
// sum w_r = 1) holds by construction: w = softmax(logits), so unconstrained
// gradient steps on the logits can never leave the simplex. Initial weights
// decay exponentially with rank: w_r proportional to exp(-decay*(r-1)).
struct TopKPool {
    int k = 5;
    real decay = real(1);
    NodePtr logits; // [k]

    TopKPool() = default;
    TopKPool(int k_, real decay_);

    NodePtr weights() const { return softmax1d(logits); } // fresh graph node
    Tensor weight_values() const;                         // w reconstructed outside a graph
};

enum class PoolScheme { topk, mean, max, max_inst, patchcls_mean };
const char* pool_scheme_name(PoolScheme s);
PoolScheme pool_scheme_from_name(const std::string& name);

// Weighted average of the k largest elements across all supplied tensors
// (one pooling domain). If fewer than k elements exist, the leading weights
// are renormalized to sum 1. Ties select the earlier tensor / lower flat
// index. Gradient reaches each selected element with its weight and the
// weights with (a_r - out)/S.
NodePtr topk_pool(const std::vector<NodePtr>& values, const TopKPool& pool);

// One entry per tensor feeding the bag pool: `channel_offset` maps the
// tensor's local channel c to the global channel offset+c.
struct PoolInput {
    NodePtr maps; // [b, c, h, w]
    int channel_offset = 0;
};

// Collapses scales + instances + spatial positions per global channel into a
// [1, N] feature row. scheme topk uses `weights` (softmax of the pool
// logits); mean/max use the same pooling domain.
NodePtr bag_pool(const std::vector<PoolInput>& inputs, int total_channels, PoolScheme scheme,
                 const NodePtr& weights);

// Instance-based MIL baseline: bag score is the max instance probability.
double max_inst_aggregate(const std::vector<double>& instance_probs);

} // namespace mims
