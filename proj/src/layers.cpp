#include "attreval/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace attreval {

namespace {

[[noreturn]] void fail(const Layer& layer, const std::string& msg) {
    throw std::runtime_error(std::string(layer_kind(layer)) + ": " + msg);
}

int pooled_extent(int in, int k, int stride) { return (in - k) / stride + 1; }

int conv_extent(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

} // namespace

const char* layer_kind(const Layer& layer) {
    struct Visitor {
        const char* operator()(const Conv2d&) const { return "conv2d"; }
        const char* operator()(const Linear&) const { return "linear"; }
        const char* operator()(const ReLU&) const { return "relu"; }
        const char* operator()(const MaxPool2d&) const { return "maxpool2d"; }
        const char* operator()(const AvgPool2d&) const { return "avgpool2d"; }
        const char* operator()(const GlobalAvgPool&) const { return "globalavgpool"; }
        const char* operator()(const BatchNorm2d&) const { return "batchnorm2d"; }
        const char* operator()(const Flatten&) const { return "flatten"; }
    };
    return std::visit(Visitor{}, layer);
}

void validate_layer(const Layer& layer) {
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        if (c->weight.ndim() != 4) fail(layer, "weight must be 4-d, got " + shape_str(c->weight.shape));
        if (c->bias.ndim() != 1 || c->bias.dim(0) != c->weight.dim(0))
            fail(layer, "bias shape inconsistent with weight");
        if (c->stride < 1 || c->padding < 0) fail(layer, "bad stride/padding");
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
        if (l->weight.ndim() != 2) fail(layer, "weight must be 2-d");
        if (l->bias.ndim() != 1 || l->bias.dim(0) != l->weight.dim(0))
            fail(layer, "bias shape inconsistent with weight");
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        if (p->k < 1 || p->stride < 1) fail(layer, "bad kernel/stride");
    } else if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        if (p->k < 1 || p->stride < 1) fail(layer, "bad kernel/stride");
    } else if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        int c = b->gamma.ndim() == 1 ? b->gamma.dim(0) : -1;
        if (c < 1 || b->beta.shape != b->gamma.shape || b->running_mean.shape != b->gamma.shape ||
            b->running_var.shape != b->gamma.shape)
            fail(layer, "parameter shapes inconsistent");
        if (b->eps <= 0.0f) fail(layer, "eps must be positive");
        for (float v : b->running_var.data)
            if (v < 0.0f) fail(layer, "running_var has negative entries");
    }
}

std::vector<int> layer_output_shape(const Layer& layer, const std::vector<int>& in) {
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        if (in.size() != 3) fail(layer, "expects CxHxW input, got " + shape_str(in));
        if (in[0] != c->weight.dim(1))
            fail(layer, "input has " + std::to_string(in[0]) + " channels, weight expects " +
                            std::to_string(c->weight.dim(1)));
        int oh = conv_extent(in[1], c->weight.dim(2), c->stride, c->padding);
        int ow = conv_extent(in[2], c->weight.dim(3), c->stride, c->padding);
        if (oh < 1 || ow < 1) fail(layer, "kernel larger than padded input " + shape_str(in));
        return {c->weight.dim(0), oh, ow};
    }
    if (const auto* l = std::get_if<Linear>(&layer)) {
        if (in.size() != 1) fail(layer, "expects flat input, got " + shape_str(in));
        if (in[0] != l->weight.dim(1))
            fail(layer, "input width " + std::to_string(in[0]) + " != weight in_features " +
                            std::to_string(l->weight.dim(1)));
        return {l->weight.dim(0)};
    }
    if (std::holds_alternative<ReLU>(layer)) return in;
    if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        if (in.size() != 3) fail(layer, "expects CxHxW input");
        int oh = pooled_extent(in[1], p->k, p->stride);
        int ow = pooled_extent(in[2], p->k, p->stride);
        if (oh < 1 || ow < 1) fail(layer, "pool window larger than input " + shape_str(in));
        return {in[0], oh, ow};
    }
    if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        if (in.size() != 3) fail(layer, "expects CxHxW input");
        int oh = pooled_extent(in[1], p->k, p->stride);
        int ow = pooled_extent(in[2], p->k, p->stride);
        if (oh < 1 || ow < 1) fail(layer, "pool window larger than input " + shape_str(in));
        return {in[0], oh, ow};
    }
    if (std::holds_alternative<GlobalAvgPool>(layer)) {
        if (in.size() != 3) fail(layer, "expects CxHxW input");
        return {in[0]};
    }
    if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        if (in.size() != 3 || in[0] != b->gamma.dim(0)) fail(layer, "channel mismatch " + shape_str(in));
        return in;
    }
    if (std::holds_alternative<Flatten>(layer)) {
        return {static_cast<int>(shape_numel(in))};
    }
    fail(layer, "unhandled layer kind");
}

// ---------------------------------------------------------------- conv kernels

void conv2d_forward_into(const Tensor& in, const Tensor& weight, const float* bias, int stride,
                         int padding, Tensor& out) {
    const int ci = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    const int co = weight.dim(0);
    const int ih = in.dim(1), iw = in.dim(2);
    const int oh = out.dim(1), ow = out.dim(2);
    const float* ip = in.ptr();
    const float* wp = weight.ptr();
    float* op = out.ptr();

    for (int o = 0; o < co; ++o) {
        float* oplane = op + static_cast<size_t>(o) * oh * ow;
        const float b = bias ? bias[o] : 0.0f;
        for (int i = 0; i < oh * ow; ++i) oplane[i] = b;
        for (int c = 0; c < ci; ++c) {
            const float* iplane = ip + static_cast<size_t>(c) * ih * iw;
            const float* wk = wp + ((static_cast<size_t>(o) * ci + c) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const float w = wk[ky * kw + kx];
                    if (w == 0.0f) continue;
                    // output rows where the input row iy = oy*stride + ky - padding is valid
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= ih) continue;
                        const float* irow = iplane + static_cast<size_t>(iy) * iw;
                        float* orow = oplane + static_cast<size_t>(oy) * ow;
                        if (stride == 1) {
                            int ox0 = std::max(0, padding - kx);
                            int ox1 = std::min(ow, iw + padding - kx);
                            const float* isrc = irow + (ox0 + kx - padding);
                            for (int ox = ox0; ox < ox1; ++ox) orow[ox] += w * isrc[ox - ox0];
                        } else {
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - padding;
                                if (ix < 0 || ix >= iw) continue;
                                orow[ox] += w * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_data_into(const Tensor& weight, const Tensor& grad_out, int stride, int padding,
                               Tensor& grad_in) {
    const int co = weight.dim(0), ci = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    const int ih = grad_in.dim(1), iw = grad_in.dim(2);
    std::fill(grad_in.data.begin(), grad_in.data.end(), 0.0f);
    const float* gp = grad_out.ptr();
    const float* wp = weight.ptr();
    float* dp = grad_in.ptr();

    for (int o = 0; o < co; ++o) {
        const float* gplane = gp + static_cast<size_t>(o) * oh * ow;
        for (int c = 0; c < ci; ++c) {
            float* dplane = dp + static_cast<size_t>(c) * ih * iw;
            const float* wk = wp + ((static_cast<size_t>(o) * ci + c) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const float w = wk[ky * kw + kx];
                    if (w == 0.0f) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= ih) continue;
                        const float* grow = gplane + static_cast<size_t>(oy) * ow;
                        float* drow = dplane + static_cast<size_t>(iy) * iw;
                        if (stride == 1) {
                            int ox0 = std::max(0, padding - kx);
                            int ox1 = std::min(ow, iw + padding - kx);
                            float* ddst = drow + (ox0 + kx - padding);
                            for (int ox = ox0; ox < ox1; ++ox) ddst[ox - ox0] += w * grow[ox];
                        } else {
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - padding;
                                if (ix < 0 || ix >= iw) continue;
                                drow[ix] += w * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

namespace {

void conv2d_backward_weights_into(const Tensor& in, const Tensor& grad_out, int stride, int padding,
                                  Tensor& grad_w, Tensor& grad_b) {
    const int co = grad_w.dim(0), ci = grad_w.dim(1), kh = grad_w.dim(2), kw = grad_w.dim(3);
    const int ih = in.dim(1), iw = in.dim(2);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    const float* ip = in.ptr();
    const float* gp = grad_out.ptr();

    for (int o = 0; o < co; ++o) {
        const float* gplane = gp + static_cast<size_t>(o) * oh * ow;
        double bsum = 0.0;
        for (int i = 0; i < oh * ow; ++i) bsum += gplane[i];
        grad_b.at(static_cast<size_t>(o)) += static_cast<float>(bsum);
        for (int c = 0; c < ci; ++c) {
            const float* iplane = ip + static_cast<size_t>(c) * ih * iw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    float acc = 0.0f;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= ih) continue;
                        const float* irow = iplane + static_cast<size_t>(iy) * iw;
                        const float* grow = gplane + static_cast<size_t>(oy) * ow;
                        if (stride == 1) {
                            int ox0 = std::max(0, padding - kx);
                            int ox1 = std::min(ow, iw + padding - kx);
                            const float* isrc = irow + (ox0 + kx - padding);
                            for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * isrc[ox - ox0];
                        } else {
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - padding;
                                if (ix < 0 || ix >= iw) continue;
                                acc += grow[ox] * irow[ix];
                            }
                        }
                    }
                    grad_w.at4(o, c, ky, kx) += acc;
                }
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------- forward

Tensor layer_forward(const Layer& layer, const Tensor& in) {
    Tensor out(layer_output_shape(layer, in.shape));
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        conv2d_forward_into(in, c->weight, c->bias.ptr(), c->stride, c->padding, out);
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
        const int no = l->weight.dim(0), ni = l->weight.dim(1);
        for (int o = 0; o < no; ++o) {
            const float* wrow = l->weight.ptr() + static_cast<size_t>(o) * ni;
            float acc = l->bias.at(static_cast<size_t>(o));
            for (int i = 0; i < ni; ++i) acc += wrow[i] * in.at(static_cast<size_t>(i));
            out.at(static_cast<size_t>(o)) = acc;
        }
    } else if (std::holds_alternative<ReLU>(layer)) {
        for (size_t i = 0; i < in.numel(); ++i) out.at(i) = in.at(i) > 0.0f ? in.at(i) : 0.0f;
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        const int ch = in.dim(0);
        for (int c = 0; c < ch; ++c)
            for (int oy = 0; oy < out.dim(1); ++oy)
                for (int ox = 0; ox < out.dim(2); ++ox) {
                    float best = in.at3(c, oy * p->stride, ox * p->stride);
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx) {
                            float v = in.at3(c, oy * p->stride + ky, ox * p->stride + kx);
                            if (v > best) best = v;
                        }
                    out.at3(c, oy, ox) = best;
                }
    } else if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        const int ch = in.dim(0);
        const float inv = 1.0f / static_cast<float>(p->k * p->k);
        for (int c = 0; c < ch; ++c)
            for (int oy = 0; oy < out.dim(1); ++oy)
                for (int ox = 0; ox < out.dim(2); ++ox) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            acc += in.at3(c, oy * p->stride + ky, ox * p->stride + kx);
                    out.at3(c, oy, ox) = acc * inv;
                }
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
        const int ch = in.dim(0);
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        const float inv = 1.0f / static_cast<float>(hw);
        for (int c = 0; c < ch; ++c) {
            const float* plane = in.ptr() + static_cast<size_t>(c) * hw;
            float acc = 0.0f;
            for (size_t i = 0; i < hw; ++i) acc += plane[i];
            out.at(static_cast<size_t>(c)) = acc * inv;
        }
    } else if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        const int ch = in.dim(0);
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        for (int c = 0; c < ch; ++c) {
            const float scale = b->gamma.at(static_cast<size_t>(c)) /
                                std::sqrt(b->running_var.at(static_cast<size_t>(c)) + b->eps);
            const float shift =
                b->beta.at(static_cast<size_t>(c)) - scale * b->running_mean.at(static_cast<size_t>(c));
            const float* src = in.ptr() + static_cast<size_t>(c) * hw;
            float* dst = out.ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] = src[i] * scale + shift;
        }
    } else if (std::holds_alternative<Flatten>(layer)) {
        out.data = in.data;
    }
    return out;
}

// ---------------------------------------------------------------- backward

Tensor layer_backward_data(const Layer& layer, const Tensor& in, const Tensor& grad_out, ReluMode mode) {
    Tensor grad_in(in.shape);
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        conv2d_backward_data_into(c->weight, grad_out, c->stride, c->padding, grad_in);
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
        const int no = l->weight.dim(0), ni = l->weight.dim(1);
        for (int o = 0; o < no; ++o) {
            const float g = grad_out.at(static_cast<size_t>(o));
            if (g == 0.0f) continue;
            const float* wrow = l->weight.ptr() + static_cast<size_t>(o) * ni;
            for (int i = 0; i < ni; ++i) grad_in.at(static_cast<size_t>(i)) += g * wrow[i];
        }
    } else if (std::holds_alternative<ReLU>(layer)) {
        if (mode == ReluMode::Guided) {
            for (size_t i = 0; i < in.numel(); ++i)
                grad_in.at(i) = (in.at(i) > 0.0f && grad_out.at(i) > 0.0f) ? grad_out.at(i) : 0.0f;
        } else {
            for (size_t i = 0; i < in.numel(); ++i)
                grad_in.at(i) = in.at(i) > 0.0f ? grad_out.at(i) : 0.0f;
        }
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        const int ch = in.dim(0);
        const int oh = grad_out.dim(1), ow = grad_out.dim(2);
        for (int c = 0; c < ch; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    // argmax, first occurrence in row-major order wins ties
                    int by = oy * p->stride, bx = ox * p->stride;
                    float best = in.at3(c, by, bx);
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx) {
                            float v = in.at3(c, oy * p->stride + ky, ox * p->stride + kx);
                            if (v > best) {
                                best = v;
                                by = oy * p->stride + ky;
                                bx = ox * p->stride + kx;
                            }
                        }
                    grad_in.at3(c, by, bx) += grad_out.at3(c, oy, ox);
                }
    } else if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        const int ch = in.dim(0);
        const int oh = grad_out.dim(1), ow = grad_out.dim(2);
        const float inv = 1.0f / static_cast<float>(p->k * p->k);
        for (int c = 0; c < ch; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const float g = grad_out.at3(c, oy, ox) * inv;
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            grad_in.at3(c, oy * p->stride + ky, ox * p->stride + kx) += g;
                }
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
        const int ch = in.dim(0);
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        const float inv = 1.0f / static_cast<float>(hw);
        for (int c = 0; c < ch; ++c) {
            const float g = grad_out.at(static_cast<size_t>(c)) * inv;
            float* dst = grad_in.ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] = g;
        }
    } else if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        const int ch = in.dim(0);
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        for (int c = 0; c < ch; ++c) {
            const float scale = b->gamma.at(static_cast<size_t>(c)) /
                                std::sqrt(b->running_var.at(static_cast<size_t>(c)) + b->eps);
            const float* src = grad_out.ptr() + static_cast<size_t>(c) * hw;
            float* dst = grad_in.ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] = src[i] * scale;
        }
    } else if (std::holds_alternative<Flatten>(layer)) {
        grad_in.data = grad_out.data;
    }
    return grad_in;
}

ParamGrads layer_param_grads(const Layer& layer, const Tensor& in, const Tensor& grad_out) {
    ParamGrads g;
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        g.weight = Tensor(c->weight.shape);
        g.bias = Tensor(c->bias.shape);
        conv2d_backward_weights_into(in, grad_out, c->stride, c->padding, g.weight, g.bias);
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
        g.weight = Tensor(l->weight.shape);
        g.bias = Tensor(l->bias.shape);
        const int no = l->weight.dim(0), ni = l->weight.dim(1);
        for (int o = 0; o < no; ++o) {
            const float go = grad_out.at(static_cast<size_t>(o));
            g.bias.at(static_cast<size_t>(o)) = go;
            float* wrow = g.weight.ptr() + static_cast<size_t>(o) * ni;
            for (int i = 0; i < ni; ++i) wrow[i] = go * in.at(static_cast<size_t>(i));
        }
    } else {
        throw std::runtime_error(std::string(layer_kind(layer)) + ": layer has no trainable parameters");
    }
    return g;
}

} // namespace attreval
