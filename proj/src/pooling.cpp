#include "mims/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mims {

namespace detail {
NodePtr make_node(OpTag op, Tensor value, std::vector<NodePtr> inputs);
}
using detail::make_node;

TopKPool::TopKPool(int k_, real decay_) : k(k_), decay(decay_) {
    if (k < 1) throw std::invalid_argument("topk_pool: k must be positive");
    Tensor init({k});
    for (int r = 0; r < k; ++r) init.at(static_cast<std::size_t>(r)) = -decay * static_cast<real>(r);
    logits = leaf(std::move(init), true);
}

Tensor TopKPool::weight_values() const {
    const std::size_t n = logits->value.size();
    Tensor w({static_cast<int>(n)});
    real mx = logits->value.at(0);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits->value.at(i));
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(static_cast<double>(logits->value.at(i) - mx));
    for (std::size_t i = 0; i < n; ++i)
        w.at(i) = static_cast<real>(std::exp(static_cast<double>(logits->value.at(i) - mx)) / denom);
    return w;
}

const char* pool_scheme_name(PoolScheme s) {
    switch (s) {
        case PoolScheme::topk: return "topk";
        case PoolScheme::mean: return "mean";
        case PoolScheme::max: return "max";
        case PoolScheme::max_inst: return "max-inst";
        case PoolScheme::patchcls_mean: return "patchcls-mean";
    }
    return "?";
}

PoolScheme pool_scheme_from_name(const std::string& name) {
    if (name == "topk") return PoolScheme::topk;
    if (name == "mean") return PoolScheme::mean;
    if (name == "max") return PoolScheme::max;
    if (name == "max-inst") return PoolScheme::max_inst;
    if (name == "patchcls-mean") return PoolScheme::patchcls_mean;
    throw std::invalid_argument("unknown pooling scheme '" + name + "'");
}

namespace {

struct Pick {
    int tensor;
    std::size_t index;
    real value;
};

// Largest k' elements over the per-channel candidate stream, ties resolved
// toward the earlier tensor / lower flat index. Candidates arrive in exactly
// that order, so insertion keeps the tie rule for free.
void select_topk(std::vector<Pick>& heap, int tensor, std::size_t index, real v, std::size_t k) {
    // linear insertion into a small sorted array (k is tiny)
    if (heap.size() == k && v <= heap.back().value) return;
    Pick p{tensor, index, v};
    auto it = heap.begin();
    while (it != heap.end() && it->value >= v) ++it; // strict: keeps earlier candidates ahead on ties
    heap.insert(it, p);
    if (heap.size() > k) heap.pop_back();
}

} // namespace

NodePtr topk_pool(const std::vector<NodePtr>& values, const TopKPool& pool) {
    if (values.empty()) throw std::invalid_argument("topk_pool: empty input list");
    NodePtr weights = pool.weights();
    const std::size_t k = static_cast<std::size_t>(pool.k);

    std::vector<Pick> picks;
    picks.reserve(k + 1);
    for (std::size_t t = 0; t < values.size(); ++t) {
        const Tensor& v = values[t]->value;
        for (std::size_t i = 0; i < v.size(); ++i)
            select_topk(picks, static_cast<int>(t), i, v.at(i), k);
    }
    const std::size_t kp = picks.size();
    double s = 0.0;
    for (std::size_t r = 0; r < kp; ++r) s += static_cast<double>(weights->value.at(r));
    double out = 0.0;
    for (std::size_t r = 0; r < kp; ++r)
        out += static_cast<double>(weights->value.at(r)) * picks[r].value;
    out /= s;

    std::vector<NodePtr> ins = values;
    ins.push_back(weights);
    auto node = make_node(OpTag::topk_pool, Tensor::scalar(static_cast<real>(out)), std::move(ins));
    Node* self = node.get();
    std::vector<Node*> raw;
    raw.reserve(values.size());
    for (const auto& v : values) raw.push_back(v.get());
    Node* nw = weights.get();
    node->backward_fn = [self, raw, nw, picks, kp, s, out]() {
        const double dy = static_cast<double>(self->grad.at(0));
        for (std::size_t r = 0; r < kp; ++r) {
            const double wr = static_cast<double>(nw->value.at(r));
            raw[static_cast<std::size_t>(picks[r].tensor)]->grad.at(picks[r].index) +=
                static_cast<real>(dy * wr / s);
            nw->grad.at(r) += static_cast<real>(dy * (static_cast<double>(picks[r].value) - out) / s);
        }
    };
    return node;
}

NodePtr bag_pool(const std::vector<PoolInput>& inputs, int total_channels, PoolScheme scheme,
                 const NodePtr& weights) {
    if (inputs.empty()) throw std::invalid_argument("bag_pool: empty input list");
    if (scheme != PoolScheme::topk && scheme != PoolScheme::mean && scheme != PoolScheme::max)
        throw std::invalid_argument("bag_pool: scheme must be topk, mean or max");
    if (scheme == PoolScheme::topk && !weights)
        throw std::invalid_argument("bag_pool: topk scheme needs weights");
    for (const auto& in : inputs)
        if (in.maps->value.ndim() != 4)
            throw std::invalid_argument("bag_pool: expected 4-d maps, got " +
                                        shape_str(in.maps->value.shape()));

    const int n = total_channels;
    Tensor out({1, n});
    // per-channel selections for backward
    std::vector<std::vector<Pick>> picks(static_cast<std::size_t>(n));
    std::vector<double> denom(static_cast<std::size_t>(n), 0.0);
    std::vector<double> outv(static_cast<std::size_t>(n), 0.0);
    const std::size_t k = scheme == PoolScheme::topk ? static_cast<std::size_t>(weights->value.size())
                                                     : (scheme == PoolScheme::max ? 1 : 0);

    for (int j = 0; j < n; ++j) {
        auto& pk = picks[static_cast<std::size_t>(j)];
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            const Tensor& v = inputs[t].maps->value;
            const int c = v.dim(1);
            const int lc = j - inputs[t].channel_offset;
            if (lc < 0 || lc >= c) continue;
            const int b = v.dim(0);
            const std::size_t hw = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
            for (int bi = 0; bi < b; ++bi) {
                const std::size_t base = (static_cast<std::size_t>(bi) * c + lc) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const real val = v.at(base + i);
                    if (scheme == PoolScheme::mean) {
                        sum += static_cast<double>(val);
                    } else {
                        select_topk(pk, static_cast<int>(t), base + i, val, k);
                    }
                    ++count;
                }
            }
        }
        if (count == 0)
            throw std::invalid_argument("bag_pool: channel " + std::to_string(j) +
                                        " has no contributing maps");
        if (scheme == PoolScheme::mean) {
            denom[static_cast<std::size_t>(j)] = static_cast<double>(count);
            outv[static_cast<std::size_t>(j)] = sum / static_cast<double>(count);
        } else if (scheme == PoolScheme::max) {
            outv[static_cast<std::size_t>(j)] = static_cast<double>(pk[0].value);
        } else {
            double s = 0.0, o = 0.0;
            for (std::size_t r = 0; r < pk.size(); ++r) {
                s += static_cast<double>(weights->value.at(r));
                o += static_cast<double>(weights->value.at(r)) * pk[r].value;
            }
            denom[static_cast<std::size_t>(j)] = s;
            outv[static_cast<std::size_t>(j)] = o / s;
        }
        out.at(static_cast<std::size_t>(j)) = static_cast<real>(outv[static_cast<std::size_t>(j)]);
    }

    std::vector<NodePtr> ins;
    ins.reserve(inputs.size() + 1);
    for (const auto& in : inputs) ins.push_back(in.maps);
    if (scheme == PoolScheme::topk) ins.push_back(weights);
    auto node = make_node(OpTag::bag_pool, std::move(out), std::move(ins));
    Node* self = node.get();
    std::vector<Node*> raw;
    raw.reserve(inputs.size());
    for (const auto& in : inputs) raw.push_back(in.maps.get());
    Node* nw = scheme == PoolScheme::topk ? node->inputs.back().get() : nullptr;
    std::vector<int> offsets;
    offsets.reserve(inputs.size());
    for (const auto& in : inputs) offsets.push_back(in.channel_offset);

    node->backward_fn = [self, raw, nw, offsets, picks, denom, outv, n, scheme]() {
        for (int j = 0; j < n; ++j) {
            const double dy = static_cast<double>(self->grad.at(static_cast<std::size_t>(j)));
            if (scheme == PoolScheme::mean) {
                const real g = static_cast<real>(dy / denom[static_cast<std::size_t>(j)]);
                for (std::size_t t = 0; t < raw.size(); ++t) {
                    const Tensor& v = raw[t]->value;
                    const int c = v.dim(1);
                    const int lc = j - offsets[t];
                    if (lc < 0 || lc >= c) continue;
                    const int b = v.dim(0);
                    const std::size_t hw = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
                    for (int bi = 0; bi < b; ++bi) {
                        const std::size_t base = (static_cast<std::size_t>(bi) * c + lc) * hw;
                        for (std::size_t i = 0; i < hw; ++i) raw[t]->grad.at(base + i) += g;
                    }
                }
            } else if (scheme == PoolScheme::max) {
                const Pick& p = picks[static_cast<std::size_t>(j)][0];
                raw[static_cast<std::size_t>(p.tensor)]->grad.at(p.index) += static_cast<real>(dy);
            } else {
                const auto& pk = picks[static_cast<std::size_t>(j)];
                const double s = denom[static_cast<std::size_t>(j)];
                const double o = outv[static_cast<std::size_t>(j)];
                for (std::size_t r = 0; r < pk.size(); ++r) {
                    const double wr = static_cast<double>(nw->value.at(r));
                    raw[static_cast<std::size_t>(pk[r].tensor)]->grad.at(pk[r].index) +=
                        static_cast<real>(dy * wr / s);
                    nw->grad.at(r) += static_cast<real>(dy * (static_cast<double>(pk[r].value) - o) / s);
                }
            }
        }
    };
    return node;
}

double max_inst_aggregate(const std::vector<double>& instance_probs) {
    if (instance_probs.empty())
        throw std::invalid_argument("max_inst_aggregate: empty instance list");
    return *std::max_element(instance_probs.begin(), instance_probs.end());
}

} // namespace mims
