#include "mims/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mims {

const char* op_name(OpTag tag) {
    switch (tag) {
        case OpTag::constant: return "constant";
        case OpTag::leaf: return "leaf";
        case OpTag::add: return "add";
        case OpTag::sub: return "sub";
        case OpTag::mul: return "mul";
        case OpTag::smul: return "smul";
        case OpTag::matmul: return "matmul";
        case OpTag::reshape: return "reshape";
        case OpTag::concat: return "concat";
        case OpTag::reduce_sum: return "reduce_sum";
        case OpTag::reduce_mean: return "reduce_mean";
        case OpTag::reduce_max: return "reduce_max";
        case OpTag::relu: return "relu";
        case OpTag::sigmoid: return "sigmoid";
        case OpTag::exp: return "exp";
        case OpTag::log: return "log";
        case OpTag::softmax: return "softmax";
        case OpTag::channel_scale: return "channel_scale";
        case OpTag::conv2d: return "conv2d";
        case OpTag::bilinear_resize: return "bilinear_resize";
        case OpTag::batchnorm2d: return "batchnorm2d";
        case OpTag::maxpool2x2: return "maxpool2x2";
        case OpTag::fully_connected: return "fully_connected";
        case OpTag::bce_with_logits: return "bce_with_logits";
        case OpTag::topk_pool: return "topk_pool";
        case OpTag::bag_pool: return "bag_pool";
    }
    return "?";
}

namespace detail {

NodePtr make_node(OpTag op, Tensor value, std::vector<NodePtr> inputs) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    return n;
}

void gemm_nn(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate) {
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (m > 1 && work > 16384)
    for (int i = 0; i < m; ++i) {
        real* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, real(0));
        const real* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const real av = arow[p];
            const real* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_tn(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate) {
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (m > 1 && work > 16384)
    for (int i = 0; i < m; ++i) {
        real* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, real(0));
        for (int p = 0; p < k; ++p) {
            const real av = a[static_cast<std::size_t>(p) * m + i];
            const real* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate) {
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (m > 1 && work > 16384)
    for (int i = 0; i < m; ++i) {
        real* crow = c + static_cast<std::size_t>(i) * n;
        const real* arow = a + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            real s = accumulate ? crow[j] : real(0);
            const real* brow = b + static_cast<std::size_t>(j) * k;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
}

} // namespace detail

using detail::make_node;

NodePtr constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->op = OpTag::constant;
    n->value = std::move(value);
    return n;
}

NodePtr leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->op = OpTag::leaf;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

void backward(const NodePtr& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->value.size() != 1)
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_str(root->value.shape()));

    // Iterative post-order DFS; shared subgraphs are visited once.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients are recomputed every pass; leaf/constant gradients
    // accumulate across passes (that is what batch accumulation relies on).
    for (Node* n : order) {
        if (!n->inputs.empty() && n->has_grad())
            n->grad.fill(real(0));
        else
            n->ensure_grad();
    }

    root->grad.at(0) += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

double smoothness_margin(const NodePtr& root) {
    double margin = std::numeric_limits<double>::infinity();
    std::unordered_set<Node*> visited;
    std::vector<Node*> stack{root.get()};
    visited.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (n->margin_fn) margin = std::min(margin, n->margin_fn());
        for (const auto& in : n->inputs)
            if (visited.insert(in.get()).second) stack.push_back(in.get());
    }
    return margin;
}

// --- elementwise helpers -----------------------------------------------------

namespace {

enum class Broadcast { same, a_scalar, b_scalar };

Broadcast binary_kind(const NodePtr& a, const NodePtr& b, const char* op) {
    if (a->value.same_shape(b->value)) return Broadcast::same;
    if (a->value.size() == 1) return Broadcast::a_scalar;
    if (b->value.size() == 1) return Broadcast::b_scalar;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
}

double sum_all(const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t.at(i));
    return s;
}

} // namespace

NodePtr add(const NodePtr& a, const NodePtr& b) {
    Broadcast kind = binary_kind(a, b, "add");
    const Tensor& big = kind == Broadcast::a_scalar ? b->value : a->value;
    Tensor out(big.shape());
    const std::size_t n = big.size();
    for (std::size_t i = 0; i < n; ++i) {
        real av = kind == Broadcast::a_scalar ? a->value.at(0) : a->value.at(i);
        real bv = kind == Broadcast::b_scalar ? b->value.at(0) : b->value.at(i);
        out.at(i) = av + bv;
    }
    auto node = make_node(OpTag::add, std::move(out), {a, b});
    Node* self = node.get();
    Node* na = a.get();
    Node* nb = b.get();
    node->backward_fn = [self, na, nb, kind]() {
        const Tensor& dy = self->grad;
        if (kind == Broadcast::a_scalar)
            na->grad.at(0) += static_cast<real>(sum_all(dy));
        else
            for (std::size_t i = 0; i < dy.size(); ++i) na->grad.at(i) += dy.at(i);
        if (kind == Broadcast::b_scalar)
            nb->grad.at(0) += static_cast<real>(sum_all(dy));
        else
            for (std::size_t i = 0; i < dy.size(); ++i) nb->grad.at(i) += dy.at(i);
    };
    return node;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    Broadcast kind = binary_kind(a, b, "sub");
    const Tensor& big = kind == Broadcast::a_scalar ? b->value : a->value;
    Tensor out(big.shape());
    const std::size_t n = big.size();
    for (std::size_t i = 0; i < n; ++i) {
        real av = kind == Broadcast::a_scalar ? a->value.at(0) : a->value.at(i);
        real bv = kind == Broadcast::b_scalar ? b->value.at(0) : b->value.at(i);
        out.at(i) = av - bv;
    }
    auto node = make_node(OpTag::sub, std::move(out), {a, b});
    Node* self = node.get();
    Node* na = a.get();
    Node* nb = b.get();
    node->backward_fn = [self, na, nb, kind]() {
        const Tensor& dy = self->grad;
        if (kind == Broadcast::a_scalar)
            na->grad.at(0) += static_cast<real>(sum_all(dy));
        else
            for (std::size_t i = 0; i < dy.size(); ++i) na->grad.at(i) += dy.at(i);
        if (kind == Broadcast::b_scalar)
            nb->grad.at(0) -= static_cast<real>(sum_all(dy));
        else
            for (std::size_t i = 0; i < dy.size(); ++i) nb->grad.at(i) -= dy.at(i);
    };
    return node;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    Broadcast kind = binary_kind(a, b, "mul");
    const Tensor& big = kind == Broadcast::a_scalar ? b->value : a->value;
    Tensor out(big.shape());
    const std::size_t n = big.size();
    for (std::size_t i = 0; i < n; ++i) {
        real av = kind == Broadcast::a_scalar ? a->value.at(0) : a->value.at(i);
        real bv = kind == Broadcast::b_scalar ? b->value.at(0) : b->value.at(i);
        out.at(i) = av * bv;
    }
    auto node = make_node(OpTag::mul, std::move(out), {a, b});
    Node* self = node.get();
    Node* na = a.get();
    Node* nb = b.get();
    node->backward_fn = [self, na, nb, kind]() {
        const Tensor& dy = self->grad;
        const std::size_t n = dy.size();
        if (kind == Broadcast::a_scalar) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                s += static_cast<double>(dy.at(i)) * nb->value.at(i);
                nb->grad.at(i) += dy.at(i) * na->value.at(0);
            }
            na->grad.at(0) += static_cast<real>(s);
        } else if (kind == Broadcast::b_scalar) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                s += static_cast<double>(dy.at(i)) * na->value.at(i);
                na->grad.at(i) += dy.at(i) * nb->value.at(0);
            }
            nb->grad.at(0) += static_cast<real>(s);
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                na->grad.at(i) += dy.at(i) * nb->value.at(i);
                nb->grad.at(i) += dy.at(i) * na->value.at(i);
            }
        }
    };
    return node;
}

NodePtr smul(const NodePtr& a, real c) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a->value.at(i) * c;
    auto node = make_node(OpTag::smul, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na, c]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i) na->grad.at(i) += self->grad.at(i) * c;
    };
    return node;
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a->value.shape()) +
                                    " vs " + shape_str(b->value.shape()));
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor out({m, n});
    detail::gemm_nn(m, n, k, a->value.data(), b->value.data(), out.data(), false);
    auto node = make_node(OpTag::matmul, std::move(out), {a, b});
    Node* self = node.get();
    Node* na = a.get();
    Node* nb = b.get();
    node->backward_fn = [self, na, nb, m, n, k]() {
        detail::gemm_nt(m, k, n, self->grad.data(), nb->value.data(), na->grad.data(), true);
        detail::gemm_tn(k, n, m, na->value.data(), self->grad.data(), nb->grad.data(), true);
    };
    return node;
}

NodePtr reshape(const NodePtr& a, Shape shape) {
    Tensor out = a->value.reshape(std::move(shape)); // shares the buffer
    auto node = make_node(OpTag::reshape, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i) na->grad.at(i) += self->grad.at(i);
    };
    return node;
}

NodePtr concat(const std::vector<NodePtr>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    const Shape& first = parts[0]->value.shape();
    const int nd = static_cast<int>(first.size());
    if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis");
    Shape out_shape = first;
    int axis_total = 0;
    for (const auto& p : parts) {
        const Shape& s = p->value.shape();
        if (static_cast<int>(s.size()) != nd)
            throw std::invalid_argument("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
        for (int d = 0; d < nd; ++d)
            if (d != axis && s[static_cast<std::size_t>(d)] != first[static_cast<std::size_t>(d)])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        axis_total += s[static_cast<std::size_t>(axis)];
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);
    for (int d = axis + 1; d < nd; ++d) inner *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);

    Tensor out(out_shape);
    std::size_t offset = 0; // in axis units
    for (const auto& p : parts) {
        const std::size_t ax = static_cast<std::size_t>(p->value.dim(axis));
        for (std::size_t o = 0; o < outer; ++o) {
            const real* src = p->value.data() + o * ax * inner;
            real* dst = out.data() + (o * static_cast<std::size_t>(axis_total) + offset) * inner;
            std::copy(src, src + ax * inner, dst);
        }
        offset += ax;
    }

    auto node = make_node(OpTag::concat, std::move(out), parts);
    Node* self = node.get();
    std::vector<Node*> raw;
    raw.reserve(parts.size());
    for (const auto& p : parts) raw.push_back(p.get());
    node->backward_fn = [self, raw, outer, inner, axis_total, axis]() {
        std::size_t offset = 0;
        for (Node* p : raw) {
            const std::size_t ax = static_cast<std::size_t>(p->value.dim(axis));
            for (std::size_t o = 0; o < outer; ++o) {
                const real* src = self->grad.data() + (o * static_cast<std::size_t>(axis_total) + offset) * inner;
                real* dst = p->grad.data() + o * ax * inner;
                for (std::size_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
            }
            offset += ax;
        }
    };
    return node;
}

NodePtr reduce_sum(const NodePtr& a) {
    Tensor out = Tensor::scalar(static_cast<real>(sum_all(a->value)));
    auto node = make_node(OpTag::reduce_sum, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        const real dy = self->grad.at(0);
        for (std::size_t i = 0; i < na->grad.size(); ++i) na->grad.at(i) += dy;
    };
    return node;
}

NodePtr reduce_mean(const NodePtr& a) {
    const double n = static_cast<double>(a->value.size());
    Tensor out = Tensor::scalar(static_cast<real>(sum_all(a->value) / n));
    auto node = make_node(OpTag::reduce_mean, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na, n]() {
        const real dy = static_cast<real>(static_cast<double>(self->grad.at(0)) / n);
        for (std::size_t i = 0; i < na->grad.size(); ++i) na->grad.at(i) += dy;
    };
    return node;
}

NodePtr reduce_max(const NodePtr& a) {
    std::size_t arg = 0;
    real best = a->value.at(0);
    for (std::size_t i = 1; i < a->value.size(); ++i)
        if (a->value.at(i) > best) {
            best = a->value.at(i);
            arg = i;
        }
    auto node = make_node(OpTag::reduce_max, Tensor::scalar(best), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na, arg]() { na->grad.at(arg) += self->grad.at(0); };
    node->margin_fn = [na, arg, best]() {
        if (na->value.size() < 2) return std::numeric_limits<double>::infinity();
        real second = std::numeric_limits<real>::lowest();
        for (std::size_t i = 0; i < na->value.size(); ++i)
            if (i != arg) second = std::max(second, na->value.at(i));
        return static_cast<double>(best - second);
    };
    return node;
}

NodePtr relu(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a->value.at(i) > real(0) ? a->value.at(i) : real(0);
    auto node = make_node(OpTag::relu, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i)
            if (na->value.at(i) > real(0)) na->grad.at(i) += self->grad.at(i);
    };
    node->margin_fn = [na]() {
        double m = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < na->value.size(); ++i)
            m = std::min(m, std::abs(static_cast<double>(na->value.at(i))));
        return m;
    };
    return node;
}

NodePtr sigmoid(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = static_cast<double>(a->value.at(i));
        out.at(i) = static_cast<real>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                             : std::exp(x) / (1.0 + std::exp(x)));
    }
    auto node = make_node(OpTag::sigmoid, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i) {
            const real s = self->value.at(i);
            na->grad.at(i) += self->grad.at(i) * s * (real(1) - s);
        }
    };
    return node;
}

NodePtr vexp(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::exp(a->value.at(i));
    auto node = make_node(OpTag::exp, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i)
            na->grad.at(i) += self->grad.at(i) * self->value.at(i);
    };
    return node;
}

NodePtr vlog(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::log(a->value.at(i));
    auto node = make_node(OpTag::log, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na]() {
        for (std::size_t i = 0; i < self->grad.size(); ++i)
            na->grad.at(i) += self->grad.at(i) / na->value.at(i);
    };
    return node;
}

NodePtr softmax1d(const NodePtr& a) {
    const std::size_t n = a->value.size();
    real mx = a->value.at(0);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, a->value.at(i));
    Tensor out(a->value.shape());
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(static_cast<double>(a->value.at(i) - mx));
    for (std::size_t i = 0; i < n; ++i)
        out.at(i) = static_cast<real>(std::exp(static_cast<double>(a->value.at(i) - mx)) / denom);
    auto node = make_node(OpTag::softmax, std::move(out), {a});
    Node* self = node.get();
    Node* na = a.get();
    node->backward_fn = [self, na, n]() {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            dot += static_cast<double>(self->grad.at(i)) * self->value.at(i);
        for (std::size_t i = 0; i < n; ++i)
            na->grad.at(i) += self->value.at(i) * (self->grad.at(i) - static_cast<real>(dot));
    };
    return node;
}

NodePtr channel_scale(const NodePtr& x, const NodePtr& s) {
    if (x->value.ndim() != 4)
        throw std::invalid_argument("channel_scale: expected 4-d input, got " + shape_str(x->value.shape()));
    const int b = x->value.dim(0), c = x->value.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
    if (s->value.ndim() != 1 || s->value.dim(0) != c)
        throw std::invalid_argument("channel_scale: scale shape " + shape_str(s->value.shape()) +
                                    " does not match channels of " + shape_str(x->value.shape()));
    Tensor out(x->value.shape());
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const real sv = s->value.at(static_cast<std::size_t>(ci));
            const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) out.at(base + i) = x->value.at(base + i) * sv;
        }
    auto node = make_node(OpTag::channel_scale, std::move(out), {x, s});
    Node* self = node.get();
    Node* nx = x.get();
    Node* ns = s.get();
    node->backward_fn = [self, nx, ns, b, c, hw]() {
        for (int ci = 0; ci < c; ++ci) {
            const real sv = ns->value.at(static_cast<std::size_t>(ci));
            double acc = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const real dy = self->grad.at(base + i);
                    nx->grad.at(base + i) += dy * sv;
                    acc += static_cast<double>(dy) * nx->value.at(base + i);
                }
            }
            ns->grad.at(static_cast<std::size_t>(ci)) += static_cast<real>(acc);
        }
    };
    return node;
}

// --- optimizers --------------------------------------------------------------

void zero_grads(std::vector<Parameter>& params) {
    for (auto& p : params) p.node->zero_grad();
}

void sgd_step(std::vector<Parameter>& params, real lr) {
    for (auto& p : params) {
        if (!p.node->has_grad())
            throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
        Tensor& v = p.node->value;
        const Tensor& g = p.node->grad;
        const real eff = lr * p.lr_scale;
        for (std::size_t i = 0; i < v.size(); ++i) v.at(i) -= eff * g.at(i);
        p.node->zero_grad();
    }
}

Adam::Moments& Adam::moments_for(Node* node, const Shape& shape) {
    for (auto& [n, m] : state_)
        if (n == node) return m;
    state_.push_back({node, Moments{Tensor::zeros(shape), Tensor::zeros(shape)}});
    return state_.back().second;
}

void Adam::step(std::vector<Parameter>& params) {
    ++t_;
    const real bc1 = real(1) - static_cast<real>(std::pow(static_cast<double>(beta1_), t_));
    const real bc2 = real(1) - static_cast<real>(std::pow(static_cast<double>(beta2_), t_));
    for (auto& p : params) {
        if (!p.node->has_grad())
            throw std::runtime_error("adam_step: parameter '" + p.name + "' has no gradient");
        Moments& mo = moments_for(p.node.get(), p.node->value.shape());
        Tensor& v = p.node->value;
        const Tensor& g = p.node->grad;
        const real eff = lr_ * p.lr_scale;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const real gi = g.at(i);
            mo.m.at(i) = beta1_ * mo.m.at(i) + (real(1) - beta1_) * gi;
            mo.v.at(i) = beta2_ * mo.v.at(i) + (real(1) - beta2_) * gi * gi;
            const real mhat = mo.m.at(i) / bc1;
            const real vhat = mo.v.at(i) / bc2;
            v.at(i) -= eff * mhat / (std::sqrt(vhat) + eps_);
        }
        p.node->zero_grad();
    }
}

// --- finite differences ------------------------------------------------------

double grad_check(const GraphBuilder& f, const std::vector<Tensor>& inputs, double step) {
    if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");

    std::vector<NodePtr> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(leaf(t.clone(), true));
    NodePtr root = f(leaves);
    backward(root);

    auto eval = [&](const std::vector<Tensor>& xs) {
        std::vector<NodePtr> ls;
        ls.reserve(xs.size());
        for (const auto& t : xs) ls.push_back(leaf(t.clone(), true));
        NodePtr out = f(ls);
        if (out->value.size() != 1)
            throw std::invalid_argument("grad_check: builder must return a scalar");
        return static_cast<double>(out->value.at(0));
    };

    double max_err = 0.0;
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (const auto& t : inputs) probe.push_back(t.clone());
    for (std::size_t ti = 0; ti < probe.size(); ++ti) {
        for (std::size_t i = 0; i < probe[ti].size(); ++i) {
            const real orig = probe[ti].at(i);
            probe[ti].at(i) = orig + static_cast<real>(step);
            const double fp = eval(probe);
            probe[ti].at(i) = orig - static_cast<real>(step);
            const double fm = eval(probe);
            probe[ti].at(i) = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = static_cast<double>(leaves[ti]->grad.at(i));
            const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
        }
    }
    return max_err;
}

} // namespace mims
