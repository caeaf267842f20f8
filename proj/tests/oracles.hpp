#pragma once

// Independent reference implementations used as test oracles. Everything here
// is written as plain index loops against the math definitions and must stay
// independent of the code paths under test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "attreval/layers.hpp"
#include "attreval/rng.hpp"
#include "attreval/tensor.hpp"

namespace oracle {

using attreval::Rng;
using attreval::Tensor;

inline Tensor ref_conv2d(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int co = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int ih = in.dim(1), iw = in.dim(2);
    const int oh = (ih + 2 * pad - kh) / stride + 1;
    const int ow = (iw + 2 * pad - kw) / stride + 1;
    Tensor out({co, oh, ow});
    for (int o = 0; o < co; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float acc = b.numel() ? b.at(static_cast<size_t>(o)) : 0.0f;
                for (int c = 0; c < ci; ++c)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                            acc += w.at4(o, c, ky, kx) * in.at3(c, iy, ix);
                        }
                out.at3(o, oy, ox) = acc;
            }
    return out;
}

inline Tensor ref_linear(const Tensor& in, const Tensor& w, const Tensor& b) {
    Tensor out({w.dim(0)});
    for (int o = 0; o < w.dim(0); ++o) {
        float acc = b.numel() ? b.at(static_cast<size_t>(o)) : 0.0f;
        for (int i = 0; i < w.dim(1); ++i) acc += w.at2(o, i) * in.at(static_cast<size_t>(i));
        out.at(static_cast<size_t>(o)) = acc;
    }
    return out;
}

inline Tensor ref_maxpool(const Tensor& in, int k, int stride) {
    const int c = in.dim(0), oh = (in.dim(1) - k) / stride + 1, ow = (in.dim(2) - k) / stride + 1;
    Tensor out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float best = -1e30f;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx)
                        best = std::max(best, in.at3(ch, oy * stride + ky, ox * stride + kx));
                out.at3(ch, oy, ox) = best;
            }
    return out;
}

inline Tensor ref_channel_sum(const Tensor& chw) {
    Tensor out({chw.dim(1), chw.dim(2)});
    for (int c = 0; c < chw.dim(0); ++c)
        for (int y = 0; y < chw.dim(1); ++y)
            for (int x = 0; x < chw.dim(2); ++x) out.at2(y, x) += chw.at3(c, y, x);
    return out;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// pushes values away from zero so ReLU/MaxPool finite differences stay off kinks
inline void avoid_kinks(Tensor& t, float margin = 0.05f) {
    for (float& v : t.data) {
        if (std::fabs(v) < margin) v = v < 0.0f ? v - margin : v + margin;
    }
}

// central finite differences of a scalar function w.r.t. every element of x
inline std::vector<double> finite_diff(Tensor& x, const std::function<double()>& f, double h = 1e-3) {
    std::vector<double> g(x.numel());
    for (size_t i = 0; i < x.numel(); ++i) {
        const float saved = x.at(i);
        x.at(i) = saved + static_cast<float>(h);
        const double fp = f();
        x.at(i) = saved - static_cast<float>(h);
        const double fm = f();
        x.at(i) = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// ------------------------------------------------------------------ double-
// precision reference forward. Finite differencing through f32 forward passes
// drowns in rounding noise; the reference math in f64 isolates the backward
// kernels' correctness instead.

struct DTensor {
    std::vector<int> shape;
    std::vector<double> data;

    DTensor() = default;
    explicit DTensor(std::vector<int> s) : shape(std::move(s)) {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        data.assign(n, 0.0);
    }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    double& at3(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double at3(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
};

inline DTensor to_d(const Tensor& t) {
    DTensor d(t.shape);
    for (size_t i = 0; i < t.numel(); ++i) d.data[i] = t.at(i);
    return d;
}

inline DTensor dlayer_forward(const attreval::Layer& layer, const DTensor& in) {
    using namespace attreval;
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        const int co = c->weight.dim(0), ci = c->weight.dim(1);
        const int kh = c->weight.dim(2), kw = c->weight.dim(3);
        const int ih = in.dim(1), iw = in.dim(2);
        const int oh = (ih + 2 * c->padding - kh) / c->stride + 1;
        const int ow = (iw + 2 * c->padding - kw) / c->stride + 1;
        DTensor out({co, oh, ow});
        for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = c->bias.at(static_cast<size_t>(o));
                    for (int ch = 0; ch < ci; ++ch)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * c->stride + ky - c->padding;
                                const int ix = ox * c->stride + kx - c->padding;
                                if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                                acc += static_cast<double>(c->weight.at4(o, ch, ky, kx)) *
                                       in.at3(ch, iy, ix);
                            }
                    out.at3(o, oy, ox) = acc;
                }
        return out;
    }
    if (const auto* l = std::get_if<Linear>(&layer)) {
        DTensor out({l->weight.dim(0)});
        for (int o = 0; o < l->weight.dim(0); ++o) {
            double acc = l->bias.at(static_cast<size_t>(o));
            for (int i = 0; i < l->weight.dim(1); ++i)
                acc += static_cast<double>(l->weight.at2(o, i)) * in.data[static_cast<size_t>(i)];
            out.data[static_cast<size_t>(o)] = acc;
        }
        return out;
    }
    if (std::holds_alternative<ReLU>(layer)) {
        DTensor out = in;
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        return out;
    }
    if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        const int c = in.dim(0);
        const int oh = (in.dim(1) - p->k) / p->stride + 1, ow = (in.dim(2) - p->k) / p->stride + 1;
        DTensor out({c, oh, ow});
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double best = in.at3(ch, oy * p->stride, ox * p->stride);
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            best = std::max(best, in.at3(ch, oy * p->stride + ky, ox * p->stride + kx));
                    out.at3(ch, oy, ox) = best;
                }
        return out;
    }
    if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        const int c = in.dim(0);
        const int oh = (in.dim(1) - p->k) / p->stride + 1, ow = (in.dim(2) - p->k) / p->stride + 1;
        DTensor out({c, oh, ow});
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            acc += in.at3(ch, oy * p->stride + ky, ox * p->stride + kx);
                    out.at3(ch, oy, ox) = acc / (p->k * p->k);
                }
        return out;
    }
    if (std::holds_alternative<GlobalAvgPool>(layer)) {
        DTensor out({in.dim(0)});
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        for (int c = 0; c < in.dim(0); ++c) {
            double acc = 0.0;
            for (size_t i = 0; i < hw; ++i) acc += in.data[static_cast<size_t>(c) * hw + i];
            out.data[static_cast<size_t>(c)] = acc / static_cast<double>(hw);
        }
        return out;
    }
    if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        DTensor out = in;
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        for (int c = 0; c < in.dim(0); ++c) {
            const double scale =
                static_cast<double>(b->gamma.at(static_cast<size_t>(c))) /
                std::sqrt(static_cast<double>(b->running_var.at(static_cast<size_t>(c))) + b->eps);
            const double shift = static_cast<double>(b->beta.at(static_cast<size_t>(c))) -
                                 scale * b->running_mean.at(static_cast<size_t>(c));
            for (size_t i = 0; i < hw; ++i) {
                double& v = out.data[static_cast<size_t>(c) * hw + i];
                v = v * scale + shift;
            }
        }
        return out;
    }
    if (std::holds_alternative<Flatten>(layer)) {
        DTensor out = in;
        int n = 1;
        for (int d : in.shape) n *= d;
        out.shape = {n};
        return out;
    }
    throw std::runtime_error("dlayer_forward: unhandled layer kind");
}

inline DTensor dsegment_forward(const std::vector<attreval::Layer>& layers, const DTensor& in) {
    DTensor cur = in;
    for (const auto& l : layers) cur = dlayer_forward(l, cur);
    return cur;
}

// finite differences through the double-precision reference forward
inline std::vector<double> finite_diff_d(DTensor& x, const std::function<double()>& f, double h = 1e-3) {
    std::vector<double> g(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double saved = x.data[i];
        x.data[i] = saved + h;
        const double fp = f();
        x.data[i] = saved - h;
        const double fm = f();
        x.data[i] = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// max relative error with a floor scale, the standard gradient-check metric
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor_scale = 0.01) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::fabs(a[i]), std::fabs(b[i]), floor_scale});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / scale);
    }
    return worst;
}

// brute-force Spearman: ranks with tie averaging, then the Pearson formula
inline double ref_spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < n; ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

} // namespace oracle
