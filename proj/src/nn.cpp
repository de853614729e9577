#include "mims/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mims {

namespace detail {
NodePtr make_node(OpTag op, Tensor value, std::vector<NodePtr> inputs);
}
using detail::make_node;

// --- conv2d ------------------------------------------------------------------

Conv2DKernel make_conv_kernel(int out_ch, int in_ch, int ksize, bool with_bias, int stride,
                              int padding) {
    if (out_ch <= 0 || in_ch <= 0 || ksize <= 0 || stride <= 0 || padding < 0)
        throw std::invalid_argument("conv2d: bad kernel geometry");
    Conv2DKernel k;
    k.weights = leaf(Tensor::zeros({out_ch, in_ch, ksize, ksize}), true);
    if (with_bias) k.bias = leaf(Tensor::zeros({out_ch}), true);
    k.stride = stride;
    k.padding = padding;
    return k;
}

namespace {

// col is [ic*kh*kw, oh*ow] for one image.
void im2col(const real* x, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, real* col) {
    for (int c = 0; c < ic; ++c) {
        const real* xc = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                real* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) *
                                      (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[static_cast<std::size_t>(oy) * ow + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                ? xc[static_cast<std::size_t>(iy) * w + ix]
                                : real(0);
                    }
                }
            }
    }
}

void col2im_add(const real* col, int ic, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, real* dx) {
    for (int c = 0; c < ic; ++c) {
        real* xc = dx + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const real* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) *
                                            (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        xc[static_cast<std::size_t>(iy) * w + ix] +=
                            row[static_cast<std::size_t>(oy) * ow + ox];
                    }
                }
            }
    }
}

} // namespace

NodePtr conv2d(const NodePtr& x, const Conv2DKernel& k) {
    const Tensor& xv = x->value;
    const Tensor& wv = k.weights->value;
    if (xv.ndim() != 4)
        throw std::invalid_argument("conv2d: expected 4-d input, got " + shape_str(xv.shape()));
    if (wv.ndim() != 4 || wv.dim(2) != wv.dim(3))
        throw std::invalid_argument("conv2d: expected square kernel, got " + shape_str(wv.shape()));
    const int b = xv.dim(0), ic = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int oc = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != ic)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(ic) +
                                    " do not match kernel " + shape_str(wv.shape()));
    const int stride = k.stride, pad = k.padding;
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw std::invalid_argument("conv2d: input " + shape_str(xv.shape()) +
                                    " too small for kernel size " + std::to_string(kh) +
                                    " with padding " + std::to_string(pad));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    const int kdim = ic * kh * kw;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;

    Tensor out({b, oc, oh, ow});
    std::vector<real> col(static_cast<std::size_t>(kdim) * plane);
    const bool with_bias = static_cast<bool>(k.bias);
    for (int bi = 0; bi < b; ++bi) {
        im2col(xv.data() + static_cast<std::size_t>(bi) * ic * h * w, ic, h, w, kh, kw, stride,
               pad, oh, ow, col.data());
        real* y = out.data() + static_cast<std::size_t>(bi) * oc * plane;
        detail::gemm_nn(oc, static_cast<int>(plane), kdim, wv.data(), col.data(), y, false);
        if (with_bias)
            for (int ci = 0; ci < oc; ++ci) {
                const real bias = k.bias->value.at(static_cast<std::size_t>(ci));
                real* yc = y + static_cast<std::size_t>(ci) * plane;
                for (std::size_t i = 0; i < plane; ++i) yc[i] += bias;
            }
    }

    std::vector<NodePtr> ins{x, k.weights};
    if (with_bias) ins.push_back(k.bias);
    auto node = make_node(OpTag::conv2d, std::move(out), std::move(ins));
    Node* self = node.get();
    Node* nx = x.get();
    Node* nw = k.weights.get();
    Node* nb = with_bias ? k.bias.get() : nullptr;
    node->backward_fn = [self, nx, nw, nb, b, ic, h, w, oc, kh, kw, stride, pad, oh, ow, kdim,
                         plane]() {
        std::vector<real> col(static_cast<std::size_t>(kdim) * plane);
        std::vector<real> dcol(static_cast<std::size_t>(kdim) * plane);
        for (int bi = 0; bi < b; ++bi) {
            const real* dy = self->grad.data() + static_cast<std::size_t>(bi) * oc * plane;
            im2col(nx->value.data() + static_cast<std::size_t>(bi) * ic * h * w, ic, h, w, kh, kw,
                   stride, pad, oh, ow, col.data());
            // dW += dY * col^T
            detail::gemm_nt(oc, kdim, static_cast<int>(plane), dy, col.data(), nw->grad.data(),
                            true);
            // dX += col2im(W^T * dY)
            detail::gemm_tn(kdim, static_cast<int>(plane), oc, nw->value.data(), dy, dcol.data(),
                            false);
            col2im_add(dcol.data(), ic, h, w, kh, kw, stride, pad, oh, ow,
                       nx->grad.data() + static_cast<std::size_t>(bi) * ic * h * w);
            if (nb)
                for (int ci = 0; ci < oc; ++ci) {
                    double s = 0.0;
                    const real* dyc = dy + static_cast<std::size_t>(ci) * plane;
                    for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(dyc[i]);
                    nb->grad.at(static_cast<std::size_t>(ci)) += static_cast<real>(s);
                }
        }
    };
    return node;
}

// --- bilinear resize -----------------------------------------------------------

int resize_extent(int size, double scale) {
    return static_cast<int>(std::floor(static_cast<double>(size) * scale + 0.5));
}

namespace {

struct Blend {
    int lo, hi;
    double f; // weight of hi
};

Blend axis_blend(int d, double scale, int size) {
    double s = (static_cast<double>(d) + 0.5) / scale - 0.5;
    s = std::min(std::max(s, 0.0), static_cast<double>(size - 1));
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, size - 1);
    return {lo, hi, s - static_cast<double>(lo)};
}

} // namespace

Tensor bilinear_resize_tensor(const Tensor& x, double h_scale, double w_scale) {
    if (x.ndim() != 4)
        throw std::invalid_argument("bilinear_resize: expected 4-d input, got " + shape_str(x.shape()));
    if (h_scale <= 0 || h_scale > 8 || w_scale <= 0 || w_scale > 8)
        throw std::invalid_argument("bilinear_resize: scale out of range (0, 8]");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = resize_extent(h, h_scale), ow = resize_extent(w, w_scale);
    if (oh < 1 || ow < 1)
        throw std::invalid_argument("bilinear_resize: non-positive output extent for input " +
                                    shape_str(x.shape()));
    std::vector<Blend> ys(static_cast<std::size_t>(oh)), xs(static_cast<std::size_t>(ow));
    for (int oy = 0; oy < oh; ++oy) ys[static_cast<std::size_t>(oy)] = axis_blend(oy, h_scale, h);
    for (int ox = 0; ox < ow; ++ox) xs[static_cast<std::size_t>(ox)] = axis_blend(ox, w_scale, w);

    Tensor out({b, c, oh, ow});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const real* src = x.data() + (static_cast<std::size_t>(bi) * c + ci) *
                                             (static_cast<std::size_t>(h) * w);
            real* dst = out.data() + (static_cast<std::size_t>(bi) * c + ci) *
                                         (static_cast<std::size_t>(oh) * ow);
            for (int oy = 0; oy < oh; ++oy) {
                const Blend& by = ys[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < ow; ++ox) {
                    const Blend& bx = xs[static_cast<std::size_t>(ox)];
                    const double v00 = src[static_cast<std::size_t>(by.lo) * w + bx.lo];
                    const double v01 = src[static_cast<std::size_t>(by.lo) * w + bx.hi];
                    const double v10 = src[static_cast<std::size_t>(by.hi) * w + bx.lo];
                    const double v11 = src[static_cast<std::size_t>(by.hi) * w + bx.hi];
                    const double v = (1.0 - by.f) * ((1.0 - bx.f) * v00 + bx.f * v01) +
                                     by.f * ((1.0 - bx.f) * v10 + bx.f * v11);
                    dst[static_cast<std::size_t>(oy) * ow + ox] = static_cast<real>(v);
                }
            }
        }
    return out;
}

NodePtr bilinear_resize(const NodePtr& x, double h_scale, double w_scale) {
    Tensor out = bilinear_resize_tensor(x->value, h_scale, w_scale);
    const int b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    const int oh = out.dim(2), ow = out.dim(3);
    auto node = make_node(OpTag::bilinear_resize, std::move(out), {x});
    Node* self = node.get();
    Node* nx = x.get();
    node->backward_fn = [self, nx, b, c, h, w, oh, ow, h_scale, w_scale]() {
        std::vector<Blend> ys(static_cast<std::size_t>(oh)), xs(static_cast<std::size_t>(ow));
        for (int oy = 0; oy < oh; ++oy) ys[static_cast<std::size_t>(oy)] = axis_blend(oy, h_scale, h);
        for (int ox = 0; ox < ow; ++ox) xs[static_cast<std::size_t>(ox)] = axis_blend(ox, w_scale, w);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                real* dx = nx->grad.data() + (static_cast<std::size_t>(bi) * c + ci) *
                                                 (static_cast<std::size_t>(h) * w);
                const real* dy = self->grad.data() + (static_cast<std::size_t>(bi) * c + ci) *
                                                         (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const Blend& by = ys[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < ow; ++ox) {
                        const Blend& bx = xs[static_cast<std::size_t>(ox)];
                        const real g = dy[static_cast<std::size_t>(oy) * ow + ox];
                        dx[static_cast<std::size_t>(by.lo) * w + bx.lo] +=
                            static_cast<real>((1.0 - by.f) * (1.0 - bx.f)) * g;
                        dx[static_cast<std::size_t>(by.lo) * w + bx.hi] +=
                            static_cast<real>((1.0 - by.f) * bx.f) * g;
                        dx[static_cast<std::size_t>(by.hi) * w + bx.lo] +=
                            static_cast<real>(by.f * (1.0 - bx.f)) * g;
                        dx[static_cast<std::size_t>(by.hi) * w + bx.hi] +=
                            static_cast<real>(by.f * bx.f) * g;
                    }
                }
            }
    };
    return node;
}

// --- batchnorm -----------------------------------------------------------------

BatchNorm2D::BatchNorm2D(int channels) {
    gamma = leaf(Tensor::ones({channels}), true);
    beta = leaf(Tensor::zeros({channels}), true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::ones({channels});
}

NodePtr batchnorm2d(const NodePtr& x, BatchNorm2D& bn) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4)
        throw std::invalid_argument("batchnorm2d: expected 4-d input, got " + shape_str(xv.shape()));
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (c != bn.channels())
        throw std::invalid_argument("batchnorm2d: channel mismatch " + shape_str(xv.shape()) +
                                    " vs " + std::to_string(bn.channels()));
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const std::size_t m = static_cast<std::size_t>(b) * hw;
    if (bn.training && m < 2)
        throw std::invalid_argument("batchnorm2d: train mode needs at least 2 samples per channel");

    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<real> invstd(static_cast<std::size_t>(c));

    for (int ci = 0; ci < c; ++ci) {
        double mean, var;
        if (bn.training) {
            double s = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const real* p = xv.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
            }
            mean = s / static_cast<double>(m);
            double sq = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const real* p = xv.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = static_cast<double>(p[i]) - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(m); // biased
            const double mom = static_cast<double>(bn.momentum);
            bn.running_mean.at(static_cast<std::size_t>(ci)) = static_cast<real>(
                (1.0 - mom) * bn.running_mean.at(static_cast<std::size_t>(ci)) + mom * mean);
            bn.running_var.at(static_cast<std::size_t>(ci)) = static_cast<real>(
                (1.0 - mom) * bn.running_var.at(static_cast<std::size_t>(ci)) + mom * var);
        } else {
            mean = static_cast<double>(bn.running_mean.at(static_cast<std::size_t>(ci)));
            var = static_cast<double>(bn.running_var.at(static_cast<std::size_t>(ci)));
        }
        const double istd = 1.0 / std::sqrt(var + static_cast<double>(bn.epsilon));
        invstd[static_cast<std::size_t>(ci)] = static_cast<real>(istd);
        const real g = bn.gamma->value.at(static_cast<std::size_t>(ci));
        const real be = bn.beta->value.at(static_cast<std::size_t>(ci));
        for (int bi = 0; bi < b; ++bi) {
            const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const real xh = static_cast<real>((static_cast<double>(xv.at(base + i)) - mean) * istd);
                xhat.at(base + i) = xh;
                out.at(base + i) = g * xh + be;
            }
        }
    }

    auto node = make_node(OpTag::batchnorm2d, std::move(out), {x, bn.gamma, bn.beta});
    Node* self = node.get();
    Node* nx = x.get();
    Node* ng = bn.gamma.get();
    Node* nbta = bn.beta.get();
    const bool train = bn.training;
    node->backward_fn = [self, nx, ng, nbta, xhat, invstd, b, c, hw, m, train]() {
        for (int ci = 0; ci < c; ++ci) {
            double dsum = 0.0, dxhat_dot = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double dy = static_cast<double>(self->grad.at(base + i));
                    dsum += dy;
                    dxhat_dot += dy * static_cast<double>(xhat.at(base + i));
                }
            }
            ng->grad.at(static_cast<std::size_t>(ci)) += static_cast<real>(dxhat_dot);
            nbta->grad.at(static_cast<std::size_t>(ci)) += static_cast<real>(dsum);
            const double g = static_cast<double>(ng->value.at(static_cast<std::size_t>(ci)));
            const double istd = static_cast<double>(invstd[static_cast<std::size_t>(ci)]);
            if (train) {
                const double inv_m = 1.0 / static_cast<double>(m);
                for (int bi = 0; bi < b; ++bi) {
                    const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double dy = static_cast<double>(self->grad.at(base + i));
                        const double xh = static_cast<double>(xhat.at(base + i));
                        nx->grad.at(base + i) += static_cast<real>(
                            g * istd * (dy - dsum * inv_m - xh * dxhat_dot * inv_m));
                    }
                }
            } else {
                for (int bi = 0; bi < b; ++bi) {
                    const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * hw;
                    for (std::size_t i = 0; i < hw; ++i)
                        nx->grad.at(base + i) +=
                            static_cast<real>(g * istd * static_cast<double>(self->grad.at(base + i)));
                }
            }
        }
    };
    return node;
}

// --- max pooling ----------------------------------------------------------------

NodePtr maxpool2x2(const NodePtr& x) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4)
        throw std::invalid_argument("maxpool2x2: expected 4-d input, got " + shape_str(xv.shape()));
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int oh = h / 2, ow = w / 2;
    if (oh < 1 || ow < 1)
        throw std::invalid_argument("maxpool2x2: input too small " + shape_str(xv.shape()));
    Tensor out({b, c, oh, ow});
    std::vector<std::uint32_t> arg(out.size());
    std::size_t oi = 0;
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const real* src = xv.data() + (static_cast<std::size_t>(bi) * c + ci) *
                                              (static_cast<std::size_t>(h) * w);
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    std::size_t best_idx = (static_cast<std::size_t>(oy) * 2) * w + ox * 2;
                    real best = src[best_idx];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t idx =
                                (static_cast<std::size_t>(oy) * 2 + dy) * w + (ox * 2 + dx);
                            if (src[idx] > best) {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    out.at(oi) = best;
                    arg[oi] = static_cast<std::uint32_t>(
                        (static_cast<std::size_t>(bi) * c + ci) * (static_cast<std::size_t>(h) * w) +
                        best_idx);
                    ++oi;
                }
        }
    auto node = make_node(OpTag::maxpool2x2, std::move(out), {x});
    Node* self = node.get();
    Node* nx = x.get();
    node->backward_fn = [self, nx, arg]() {
        for (std::size_t i = 0; i < arg.size(); ++i)
            nx->grad.at(static_cast<std::size_t>(arg[i])) += self->grad.at(i);
    };
    return node;
}

// --- fully connected --------------------------------------------------------------

NodePtr fully_connected(const NodePtr& x, const NodePtr& w, const NodePtr& bias) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(0))
        throw std::invalid_argument("fully_connected: shape mismatch " + shape_str(xv.shape()) +
                                    " vs " + shape_str(wv.shape()));
    const int b = xv.dim(0), n = xv.dim(1), m = wv.dim(1);
    if (bias->value.size() != static_cast<std::size_t>(m))
        throw std::invalid_argument("fully_connected: bias shape " + shape_str(bias->value.shape()) +
                                    " does not match output width " + std::to_string(m));
    Tensor out({b, m});
    detail::gemm_nn(b, m, n, xv.data(), wv.data(), out.data(), false);
    for (int bi = 0; bi < b; ++bi)
        for (int j = 0; j < m; ++j)
            out.at(static_cast<std::size_t>(bi) * m + j) += bias->value.at(static_cast<std::size_t>(j));
    auto node = make_node(OpTag::fully_connected, std::move(out), {x, w, bias});
    Node* self = node.get();
    Node* nx = x.get();
    Node* nw = w.get();
    Node* nb = bias.get();
    node->backward_fn = [self, nx, nw, nb, b, n, m]() {
        detail::gemm_nt(b, n, m, self->grad.data(), nw->value.data(), nx->grad.data(), true);
        detail::gemm_tn(n, m, b, nx->value.data(), self->grad.data(), nw->grad.data(), true);
        for (int j = 0; j < m; ++j) {
            double s = 0.0;
            for (int bi = 0; bi < b; ++bi)
                s += static_cast<double>(self->grad.at(static_cast<std::size_t>(bi) * m + j));
            nb->grad.at(static_cast<std::size_t>(j)) += static_cast<real>(s);
        }
    };
    return node;
}

// --- loss ---------------------------------------------------------------------------

NodePtr bce_with_logits(const NodePtr& logits, const Tensor& labels) {
    const std::size_t n = logits->value.size();
    if (labels.size() != n)
        throw std::invalid_argument("bce_with_logits: label shape " + shape_str(labels.shape()) +
                                    " does not match logits " + shape_str(logits->value.shape()));
    for (std::size_t i = 0; i < n; ++i)
        if (labels.at(i) != real(0) && labels.at(i) != real(1))
            throw std::invalid_argument("bce_with_logits: labels must be 0 or 1");
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = static_cast<double>(logits->value.at(i));
        const double y = static_cast<double>(labels.at(i));
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    auto labels_node = constant(labels);
    auto node =
        make_node(OpTag::bce_with_logits, Tensor::scalar(static_cast<real>(loss)), {logits, labels_node});
    Node* self = node.get();
    Node* nz = logits.get();
    Node* ny = labels_node.get();
    node->backward_fn = [self, nz, ny, n]() {
        const double dy = static_cast<double>(self->grad.at(0)) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double z = static_cast<double>(nz->value.at(i));
            const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            nz->grad.at(i) += static_cast<real>((sig - static_cast<double>(ny->value.at(i))) * dy);
        }
    };
    return node;
}

} // namespace mims
