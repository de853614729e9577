#include <algorithm>
#include <cmath>
#include <functional>

#include "mims/harness.hpp"
#include "mims/localization.hpp"
#include "mims/rng.hpp"

namespace mims {

double gradcheck_tolerance() {
#ifdef MIMS_REAL64
    return 1e-5;
#else
    return 1e-2;
#endif
}

namespace {

#ifdef MIMS_REAL64
constexpr double kStep = 1e-5;
constexpr double kStepComposite = 1e-5;
#else
constexpr double kStep = 1e-2;
// deep composites: smaller step keeps FD probes away from relu/max kinks
constexpr double kStepComposite = 2e-3;
#endif

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t.at(i) = static_cast<real>(rng.uniform(lo, hi));
    return t;
}

// Pairwise-distinct values with gaps well above the FD step, for ops whose
// subgradient picks ranked elements (max, maxpool, top-k).
Tensor spaced_tensor(Shape shape, Rng& rng, double gap = 0.06) {
    Tensor t(std::move(shape));
    const std::size_t n = t.size();
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    const double base = rng.uniform(-0.5, 0.5);
    for (std::size_t i = 0; i < n; ++i)
        t.at(perm[i]) = static_cast<real>(base + gap * static_cast<double>(i));
    return t;
}

// Avoids the relu kink: |v| >= margin.
Tensor offzero_tensor(Shape shape, Rng& rng, double margin = 0.05) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        t.at(i) = static_cast<real>(sign * (margin + rng.uniform() * 0.95));
    }
    return t;
}

NodePtr weighted_sum(const NodePtr& x, const Tensor& coeff) {
    return reduce_sum(mul(x, constant(coeff)));
}

using CaseFn = std::function<double(Rng&)>;

double run_cases(const CaseFn& one_case, std::uint64_t seed, int cases) {
    double worst = 0.0;
    for (int c = 0; c < cases; ++c) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
        worst = std::max(worst, one_case(rng));
    }
    return worst;
}

// FD check of a full model: analytic grads from one backward pass vs central
// differences on sampled input pixels and parameter elements.
double model_case(Rng& rng) {
    ExperimentConfig cfg;
    cfg.stem_channels = {4, 8};
    cfg.kernel_groups = {{2, 3}, {3, 3}};
    cfg.k = 3;
    cfg.seed = rng.next();
    MimsModel model(cfg);
    model.set_training(true);

    Bag bag;
    bag.id = "gradcheck";
    bag.label = static_cast<int>(rng.uniform_int(2));
    for (int i = 0; i < 2; ++i) {
        Tensor inst = rand_tensor({1, 24, 24}, rng, 0.0, 1.0);
        bag.instances.push_back(inst);
    }

    auto loss_value = [&]() {
        BagForward fw = model.forward(bag);
        NodePtr loss = bce_with_logits(fw.logit, Tensor::full({1, 1}, static_cast<real>(bag.label)));
        return loss;
    };

    NodePtr loss = loss_value();
    backward(loss);
    // snapshot analytic grads before the FD evals rebuild graphs
    std::vector<Tensor> param_grads;
    for (auto& p : model.parameters()) param_grads.push_back(p.node->grad.clone());

    const double h = kStepComposite;
    double worst = 0.0;
    auto probe = [&](real* slot, double analytic) {
        const real orig = *slot;
        *slot = orig + static_cast<real>(h);
        const double fp = static_cast<double>(loss_value()->value.at(0));
        *slot = orig - static_cast<real>(h);
        const double fm = static_cast<double>(loss_value()->value.at(0));
        *slot = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    };

    // parameters: a few elements per tensor
    auto& params = model.parameters();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& v = params[pi].node->value;
        const std::size_t samples = std::min<std::size_t>(2, v.size());
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t idx = rng.uniform_int(v.size());
            probe(&v.at(idx), static_cast<double>(param_grads[pi].at(idx)));
        }
        params[pi].node->zero_grad();
    }
    return worst;
}

double msconv_case(Rng& rng) {
    MSConvConfig mc;
    mc.scales = {{0.5, 0.5}, {0.75, 0.75}, {1.0, 1.0}};
    mc.kernel_groups = {{2, 2}, {3, 2}};
    mc.use_norm = true;
    mc.use_scale_weights = true;
    MSConvLayer layer(mc, 2, rng.next());

    Tensor x = offzero_tensor({1, 2, 8, 8}, rng);
    std::vector<Tensor> coeffs;
    auto builder = [&](const std::vector<NodePtr>& leaves) {
        auto maps = layer.forward(leaves[0]);
        NodePtr total;
        std::size_t ci = 0;
        for (auto& per_scale : maps)
            for (auto& m : per_scale) {
                if (coeffs.size() <= ci) {
                    Rng crng(mix_seed(0xC0FFEE, ci));
                    coeffs.push_back(rand_tensor(m->value.shape(), crng));
                }
                NodePtr term = weighted_sum(m, coeffs[ci++]);
                total = total ? add(total, term) : term;
            }
        return total;
    };
    return grad_check(builder, {x}, kStepComposite);
}

} // namespace

std::vector<std::pair<std::string, double>> gradcheck_suite(std::uint64_t seed, int cases) {
    std::vector<std::pair<std::string, double>> results;
    auto record = [&](const char* name, const CaseFn& fn) {
        results.emplace_back(name, run_cases(fn, mix_seed(seed, results.size() + 7), cases));
    };

    record("add", [](Rng& rng) {
        Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(add(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("add_scalar_broadcast", [](Rng& rng) {
        Tensor a = rand_tensor({1}, rng), b = rand_tensor({2, 3}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(add(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("sub", [](Rng& rng) {
        Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(sub(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("mul", [](Rng& rng) {
        Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(mul(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("mul_scalar_broadcast", [](Rng& rng) {
        Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({1}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(mul(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("smul", [](Rng& rng) {
        Tensor a = rand_tensor({2, 3}, rng);
        Tensor r = rand_tensor({2, 3}, rng);
        const real c = static_cast<real>(rng.uniform(-2.0, 2.0));
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(smul(l[0], c), r); }, {a},
            kStep);
    });
    record("matmul", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng);
        Tensor r = rand_tensor({3, 2}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(matmul(l[0], l[1]), r); },
            {a, b}, kStep);
    });
    record("reshape", [](Rng& rng) {
        Tensor a = rand_tensor({2, 6}, rng);
        Tensor r = rand_tensor({3, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(reshape(l[0], {3, 4}), r); },
            {a}, kStep);
    });
    record("concat", [](Rng& rng) {
        Tensor a = rand_tensor({2, 1, 3}, rng), b = rand_tensor({2, 2, 3}, rng),
               c = rand_tensor({2, 1, 3}, rng);
        Tensor r = rand_tensor({2, 4, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                return weighted_sum(concat({l[0], l[1], l[2]}, 1), r);
            },
            {a, b, c}, kStep);
    });
    record("reduce_sum", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng);
        return grad_check([&](const std::vector<NodePtr>& l) { return reduce_sum(l[0]); }, {a},
                          kStep);
    });
    record("reduce_mean", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng);
        return grad_check([&](const std::vector<NodePtr>& l) { return reduce_mean(l[0]); }, {a},
                          kStep);
    });
    record("reduce_max", [](Rng& rng) {
        Tensor a = spaced_tensor({3, 4}, rng);
        return grad_check([&](const std::vector<NodePtr>& l) { return reduce_max(l[0]); }, {a},
                          kStep);
    });
    record("relu", [](Rng& rng) {
        Tensor a = offzero_tensor({3, 4}, rng);
        Tensor r = rand_tensor({3, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(relu(l[0]), r); }, {a}, kStep);
    });
    record("sigmoid", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return reduce_sum(sigmoid(l[0])); }, {a}, kStep);
    });
    record("exp", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng);
        Tensor r = rand_tensor({3, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(vexp(l[0]), r); }, {a}, kStep);
    });
    record("log", [](Rng& rng) {
        Tensor a = rand_tensor({3, 4}, rng, 0.2, 1.2);
        Tensor r = rand_tensor({3, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(vlog(l[0]), r); }, {a}, kStep);
    });
    record("softmax", [](Rng& rng) {
        Tensor a = rand_tensor({5}, rng);
        Tensor r = rand_tensor({5}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(softmax1d(l[0]), r); }, {a},
            kStep);
    });
    record("channel_scale", [](Rng& rng) {
        Tensor x = rand_tensor({2, 3, 2, 2}, rng), s = rand_tensor({3}, rng);
        Tensor r = rand_tensor({2, 3, 2, 2}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(channel_scale(l[0], l[1]), r); },
            {x, s}, kStep);
    });
    record("conv2d", [](Rng& rng) {
        Tensor x = rand_tensor({2, 2, 5, 5}, rng);
        Tensor w = rand_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor b = rand_tensor({2}, rng);
        Tensor r = rand_tensor({2, 2, 5, 5}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                Conv2DKernel k{l[1], l[2], 1, 1};
                return weighted_sum(conv2d(l[0], k), r);
            },
            {x, w, b}, kStep);
    });
    record("conv2d_strided", [](Rng& rng) {
        Tensor x = rand_tensor({1, 2, 6, 6}, rng);
        Tensor w = rand_tensor({3, 2, 2, 2}, rng, -0.5, 0.5);
        Tensor r = rand_tensor({1, 3, 3, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                Conv2DKernel k{l[1], nullptr, 2, 0};
                return weighted_sum(conv2d(l[0], k), r);
            },
            {x, w}, kStep);
    });
    record("bilinear_resize", [](Rng& rng) {
        Tensor x = rand_tensor({1, 2, 4, 4}, rng);
        const double s = rng.uniform() < 0.5 ? 0.5 : 1.3;
        Tensor r;
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                NodePtr y = bilinear_resize(l[0], s, s);
                if (r.empty()) {
                    Rng crng(0xFEED);
                    r = rand_tensor(y->value.shape(), crng);
                }
                return weighted_sum(y, r);
            },
            {x}, kStep);
    });
    record("batchnorm2d_train", [](Rng& rng) {
        Tensor x = rand_tensor({2, 3, 3, 3}, rng);
        Tensor g = rand_tensor({3}, rng, 0.5, 1.5);
        Tensor be = rand_tensor({3}, rng);
        Tensor r = rand_tensor({2, 3, 3, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                BatchNorm2D bn(3);
                bn.gamma = l[1];
                bn.beta = l[2];
                bn.training = true;
                return weighted_sum(batchnorm2d(l[0], bn), r);
            },
            {x, g, be}, kStep);
    });
    record("batchnorm2d_eval", [](Rng& rng) {
        Tensor x = rand_tensor({2, 3, 3, 3}, rng);
        Tensor g = rand_tensor({3}, rng, 0.5, 1.5);
        Tensor be = rand_tensor({3}, rng);
        Tensor rm = rand_tensor({3}, rng);
        Tensor rv = rand_tensor({3}, rng, 0.5, 1.5);
        Tensor r = rand_tensor({2, 3, 3, 3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                BatchNorm2D bn(3);
                bn.gamma = l[1];
                bn.beta = l[2];
                bn.running_mean = rm.clone();
                bn.running_var = rv.clone();
                bn.training = false;
                return weighted_sum(batchnorm2d(l[0], bn), r);
            },
            {x, g, be}, kStep);
    });
    record("maxpool2x2", [](Rng& rng) {
        Tensor x = spaced_tensor({1, 2, 4, 4}, rng);
        Tensor r = rand_tensor({1, 2, 2, 2}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return weighted_sum(maxpool2x2(l[0]), r); }, {x},
            kStep);
    });
    record("fully_connected", [](Rng& rng) {
        Tensor x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 2}, rng), b = rand_tensor({2}, rng);
        Tensor r = rand_tensor({3, 2}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                return weighted_sum(fully_connected(l[0], l[1], l[2]), r);
            },
            {x, w, b}, kStep);
    });
    record("bce_with_logits", [](Rng& rng) {
        Tensor z = rand_tensor({3, 1}, rng, -2.0, 2.0);
        Tensor y({3, 1});
        for (std::size_t i = 0; i < 3; ++i) y.at(i) = static_cast<real>(rng.uniform_int(2));
        return grad_check(
            [&](const std::vector<NodePtr>& l) { return bce_with_logits(l[0], y); }, {z}, kStep);
    });
    record("topk_pool", [](Rng& rng) {
        Tensor a = spaced_tensor({2, 3}, rng), b = spaced_tensor({4}, rng);
        // keep the two tensors' values interleaved but still spaced
        for (std::size_t i = 0; i < b.size(); ++i) b.at(i) += real(0.03);
        Tensor logits = rand_tensor({3}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                TopKPool pool;
                pool.k = 3;
                pool.logits = l[2];
                return topk_pool({l[0], l[1]}, pool);
            },
            {a, b, logits}, kStep);
    });
    record("topk_pool_truncated", [](Rng& rng) {
        Tensor a = spaced_tensor({3}, rng);
        Tensor logits = rand_tensor({5}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                TopKPool pool;
                pool.k = 5;
                pool.logits = l[1];
                return topk_pool({l[0]}, pool);
            },
            {a, logits}, kStep);
    });
    record("bag_pool_topk", [](Rng& rng) {
        Tensor a = spaced_tensor({2, 2, 2, 2}, rng), b = spaced_tensor({2, 2, 3, 3}, rng);
        for (std::size_t i = 0; i < b.size(); ++i) b.at(i) += real(0.03);
        Tensor logits = rand_tensor({3}, rng);
        Tensor r = rand_tensor({1, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                NodePtr w = softmax1d(l[2]);
                return weighted_sum(bag_pool({{l[0], 0}, {l[1], 2}}, 4, PoolScheme::topk, w), r);
            },
            {a, b, logits}, kStep);
    });
    record("bag_pool_mean", [](Rng& rng) {
        Tensor a = rand_tensor({2, 2, 2, 2}, rng), b = rand_tensor({2, 2, 3, 3}, rng);
        Tensor r = rand_tensor({1, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                return weighted_sum(bag_pool({{l[0], 0}, {l[1], 2}}, 4, PoolScheme::mean, nullptr), r);
            },
            {a, b}, kStep);
    });
    record("bag_pool_max", [](Rng& rng) {
        Tensor a = spaced_tensor({2, 2, 2, 2}, rng), b = spaced_tensor({2, 2, 3, 3}, rng);
        for (std::size_t i = 0; i < b.size(); ++i) b.at(i) += real(0.03);
        Tensor r = rand_tensor({1, 4}, rng);
        return grad_check(
            [&](const std::vector<NodePtr>& l) {
                return weighted_sum(bag_pool({{l[0], 0}, {l[1], 2}}, 4, PoolScheme::max, nullptr), r);
            },
            {a, b}, kStep);
    });
    record("msconv_composite", msconv_case);
    record("model", model_case);
    return results;
}

} // namespace mims
