#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mims/tensor.hpp"

namespace mims {

enum class OpTag {
    constant,
    leaf,
    add,
    sub,
    mul,
    smul,
    matmul,
    reshape,
    concat,
    reduce_sum,
    reduce_mean,
    reduce_max,
    relu,
    sigmoid,
    exp,
    log,
    softmax,
    channel_scale,
    conv2d,
    bilinear_resize,
    batchnorm2d,
    maxpool2x2,
    fully_connected,
    bce_with_logits,
    topk_pool,
    bag_pool,
};

const char* op_name(OpTag tag);

// One record of the define-by-run tape: the op, its operands, the forward
// value and (after backward()) the gradient of the root w.r.t. this value.
struct Node {
    OpTag op = OpTag::constant;
    Tensor value;
    Tensor grad; // empty until backward() reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward_fn; // adds into input grads
    // Distance to the nearest non-differentiable point (relu kink, pooling
    // tie); selection ops fill this so finite-difference checks can verify
    // they probe at smooth configurations.
    std::function<double()> margin_fn;

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad = Tensor::zeros(value.shape());
    }
    void zero_grad() { grad = Tensor(); }
};

using NodePtr = std::shared_ptr<Node>;

// Min margin over all selection/kink ops reachable from root; +inf if none.
double smoothness_margin(const NodePtr& root);

NodePtr constant(Tensor value);
NodePtr leaf(Tensor value, bool requires_grad = true);

// Reverse-mode pass from a scalar root. Every node reachable from the root
// receives a gradient tensor of its value's shape; fan-out contributions are
// accumulated by summation. Repeated calls without zeroing keep accumulating.
void backward(const NodePtr& root);

// --- elementwise / structural ops -----------------------------------------
// Binary ops accept equal shapes, or a scalar (1-element) tensor on either
// side which is broadcast; anything else is a shape error.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr smul(const NodePtr& a, real c);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr reshape(const NodePtr& a, Shape shape);
NodePtr concat(const std::vector<NodePtr>& parts, int axis);
NodePtr reduce_sum(const NodePtr& a);
NodePtr reduce_mean(const NodePtr& a);
NodePtr reduce_max(const NodePtr& a); // subgradient to first max in flat order
NodePtr relu(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr vexp(const NodePtr& a);
NodePtr vlog(const NodePtr& a);
NodePtr softmax1d(const NodePtr& a);
// x: [b,c,h,w], s: [c]; multiplies channel c of x by s[c].
NodePtr channel_scale(const NodePtr& x, const NodePtr& s);

// --- trainable parameters ---------------------------------------------------
struct Parameter {
    std::string name;
    NodePtr node;
    real lr_scale = real(1); // backbone layers may train at a reduced rate
};

void sgd_step(std::vector<Parameter>& params, real lr);

class Adam {
public:
    Adam(real lr = real(1e-3), real beta1 = real(0.9), real beta2 = real(0.999),
         real eps = real(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Parameter>& params);
    real lr() const { return lr_; }
    void set_lr(real lr) { lr_ = lr; }

private:
    struct Moments {
        Tensor m, v;
    };
    real lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::pair<Node*, Moments>> state_;
    Moments& moments_for(Node* node, const Shape& shape);
};

void zero_grads(std::vector<Parameter>& params);

// --- finite-difference oracle ----------------------------------------------
using GraphBuilder = std::function<NodePtr(const std::vector<NodePtr>&)>;

// Builds the graph twice per perturbed element with central differences and
// returns max over all elements of |analytic - numeric| / max(1e-8, |a|+|n|).
double grad_check(const GraphBuilder& f, const std::vector<Tensor>& inputs, double step);

// Internal gemm used by matmul/conv/fc; exposed for tests.
namespace detail {
// C[M,N] (+)= A[M,K] * B[K,N]; deterministic: each C element is produced by
// one thread with a fixed k-order accumulation.
void gemm_nn(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate);
void gemm_tn(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate); // A is [K,M]
void gemm_nt(int m, int n, int k, const real* a, const real* b, real* c, bool accumulate); // B is [N,K]
} // namespace detail

} // namespace mims
