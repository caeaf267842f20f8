#include "attreval/lrp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "attreval/attribution.hpp"

namespace attreval {

namespace {

float sign_plus(float z) { return z < 0.0f ? -1.0f : 1.0f; } // sign(0) = +1

Tensor positive_part(const Tensor& t) {
    Tensor out = t;
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    return out;
}

Tensor negative_part(const Tensor& t) {
    Tensor out = t;
    for (float& v : out.data) v = v < 0.0f ? v : 0.0f;
    return out;
}

// ---------------------------------------------------------------- conv rules

struct ConvComponent {
    Tensor input;  // modified input
    Tensor weight; // modified weight
    float sign = 1.0f;
};

Tensor conv_rule(const Conv2d& conv, const Tensor& in, const Tensor& rel_out,
                 const std::vector<ConvComponent>& comps, const Tensor* bias, float stabilizer,
                 bool guard_zero) {
    Tensor z(rel_out.shape);
    Tensor tmp(rel_out.shape);
    bool first = true;
    for (const auto& c : comps) {
        conv2d_forward_into(c.input, c.weight, nullptr, conv.stride, conv.padding, tmp);
        if (first) {
            for (size_t i = 0; i < z.numel(); ++i) z.at(i) = c.sign * tmp.at(i);
            first = false;
        } else {
            for (size_t i = 0; i < z.numel(); ++i) z.at(i) += c.sign * tmp.at(i);
        }
    }
    if (bias) {
        const int oh = z.dim(1), ow = z.dim(2);
        for (int o = 0; o < z.dim(0); ++o) {
            const float b = bias->at(static_cast<size_t>(o));
            float* plane = z.ptr() + static_cast<size_t>(o) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) plane[i] += b;
        }
    }

    Tensor s(rel_out.shape);
    for (size_t i = 0; i < s.numel(); ++i) {
        const float zi = z.at(i);
        if (guard_zero && zi == 0.0f) {
            s.at(i) = 0.0f;
        } else {
            s.at(i) = rel_out.at(i) / (zi + stabilizer * sign_plus(zi));
        }
    }

    Tensor rel_in(in.shape);
    Tensor back(in.shape);
    for (const auto& c : comps) {
        conv2d_backward_data_into(c.weight, s, conv.stride, conv.padding, back);
        for (size_t i = 0; i < rel_in.numel(); ++i)
            rel_in.at(i) += c.sign * c.input.at(i) * back.at(i);
    }
    return rel_in;
}

// -------------------------------------------------------------- linear rules

struct LinComponent {
    Tensor input;
    Tensor weight;
    float sign = 1.0f;
};

Tensor linear_rule(const Tensor& in, const Tensor& rel_out, const std::vector<LinComponent>& comps,
                   const Tensor* bias, float stabilizer, bool guard_zero) {
    const int no = comps[0].weight.dim(0), ni = comps[0].weight.dim(1);
    std::vector<float> z(static_cast<size_t>(no), 0.0f);
    for (const auto& c : comps)
        for (int o = 0; o < no; ++o) {
            const float* wrow = c.weight.ptr() + static_cast<size_t>(o) * ni;
            float acc = 0.0f;
            for (int i = 0; i < ni; ++i) acc += wrow[i] * c.input.at(static_cast<size_t>(i));
            z[static_cast<size_t>(o)] += c.sign * acc;
        }
    if (bias)
        for (int o = 0; o < no; ++o) z[static_cast<size_t>(o)] += bias->at(static_cast<size_t>(o));

    std::vector<float> s(static_cast<size_t>(no));
    for (int o = 0; o < no; ++o) {
        const float zi = z[static_cast<size_t>(o)];
        if (guard_zero && zi == 0.0f)
            s[static_cast<size_t>(o)] = 0.0f;
        else
            s[static_cast<size_t>(o)] =
                rel_out.at(static_cast<size_t>(o)) / (zi + stabilizer * sign_plus(zi));
    }

    Tensor rel_in(in.shape);
    for (const auto& c : comps) {
        for (int o = 0; o < no; ++o) {
            const float so = s[static_cast<size_t>(o)];
            if (so == 0.0f) continue;
            const float* wrow = c.weight.ptr() + static_cast<size_t>(o) * ni;
            for (int i = 0; i < ni; ++i)
                rel_in.at(static_cast<size_t>(i)) +=
                    c.sign * c.input.at(static_cast<size_t>(i)) * wrow[i] * so;
        }
    }
    return rel_in;
}

Tensor const_like(const Tensor& t, float v) { return Tensor(t.shape, v); }

} // namespace

// ------------------------------------------------------------ rule dispatch

Tensor relevance_backward(const Layer& layer, const Tensor& in, const Tensor& rel_out,
                          const LrpRule& rule) {
    if (const auto* conv = std::get_if<Conv2d>(&layer)) {
        switch (rule.kind) {
            case LrpRule::Kind::Epsilon:
                return conv_rule(*conv, in, rel_out, {{in, conv->weight, 1.0f}}, &conv->bias,
                                 rule.epsilon, false);
            case LrpRule::Kind::ZPlus:
                return conv_rule(*conv, in, rel_out,
                                 {{positive_part(in), positive_part(conv->weight), 1.0f},
                                  {negative_part(in), negative_part(conv->weight), 1.0f}},
                                 nullptr, 0.0f, true);
            case LrpRule::Kind::Gamma: {
                if (rule.gamma == 0.0f) // exact algebraic degeneration
                    return conv_rule(*conv, in, rel_out, {{in, conv->weight, 1.0f}}, &conv->bias,
                                     rule.epsilon, false);
                if (std::isinf(rule.gamma))
                    return relevance_backward(layer, in, rel_out,
                                              {LrpRule::Kind::ZPlus, 0.0f, 0.0f, 0.0f, 0.0f});
                Tensor wpos = conv->weight;
                Tensor wneg = conv->weight;
                for (size_t i = 0; i < wpos.numel(); ++i) {
                    const float w = conv->weight.at(i);
                    wpos.at(i) = w + rule.gamma * (w > 0.0f ? w : 0.0f);
                    wneg.at(i) = w + rule.gamma * (w < 0.0f ? w : 0.0f);
                }
                Tensor bmod = conv->bias;
                for (size_t i = 0; i < bmod.numel(); ++i) {
                    const float b = conv->bias.at(i);
                    bmod.at(i) = b + rule.gamma * (b > 0.0f ? b : 0.0f);
                }
                return conv_rule(*conv, in, rel_out,
                                 {{positive_part(in), wpos, 1.0f}, {negative_part(in), wneg, 1.0f}},
                                 &bmod, rule.epsilon, false);
            }
            case LrpRule::Kind::ZB: {
                return conv_rule(*conv, in, rel_out,
                                 {{in, conv->weight, 1.0f},
                                  {const_like(in, rule.low), positive_part(conv->weight), -1.0f},
                                  {const_like(in, rule.high), negative_part(conv->weight), -1.0f}},
                                 &conv->bias, 1e-6f, false);
            }
            case LrpRule::Kind::Passthrough:
                throw std::runtime_error("lrp: conv2d layer needs a propagation rule");
        }
    }
    if (const auto* lin = std::get_if<Linear>(&layer)) {
        switch (rule.kind) {
            case LrpRule::Kind::Epsilon:
                return linear_rule(in, rel_out, {{in, lin->weight, 1.0f}}, &lin->bias, rule.epsilon,
                                   false);
            case LrpRule::Kind::ZPlus:
                return linear_rule(in, rel_out,
                                   {{positive_part(in), positive_part(lin->weight), 1.0f},
                                    {negative_part(in), negative_part(lin->weight), 1.0f}},
                                   nullptr, 0.0f, true);
            case LrpRule::Kind::Gamma: {
                if (rule.gamma == 0.0f)
                    return linear_rule(in, rel_out, {{in, lin->weight, 1.0f}}, &lin->bias,
                                       rule.epsilon, false);
                if (std::isinf(rule.gamma))
                    return relevance_backward(layer, in, rel_out,
                                              {LrpRule::Kind::ZPlus, 0.0f, 0.0f, 0.0f, 0.0f});
                Tensor wpos = lin->weight;
                Tensor wneg = lin->weight;
                for (size_t i = 0; i < wpos.numel(); ++i) {
                    const float w = lin->weight.at(i);
                    wpos.at(i) = w + rule.gamma * (w > 0.0f ? w : 0.0f);
                    wneg.at(i) = w + rule.gamma * (w < 0.0f ? w : 0.0f);
                }
                Tensor bmod = lin->bias;
                for (size_t i = 0; i < bmod.numel(); ++i) {
                    const float b = lin->bias.at(i);
                    bmod.at(i) = b + rule.gamma * (b > 0.0f ? b : 0.0f);
                }
                return linear_rule(in, rel_out,
                                   {{positive_part(in), wpos, 1.0f}, {negative_part(in), wneg, 1.0f}},
                                   &bmod, rule.epsilon, false);
            }
            case LrpRule::Kind::ZB:
                return linear_rule(in, rel_out,
                                   {{in, lin->weight, 1.0f},
                                    {const_like(in, rule.low), positive_part(lin->weight), -1.0f},
                                    {const_like(in, rule.high), negative_part(lin->weight), -1.0f}},
                                   &lin->bias, 1e-6f, false);
            case LrpRule::Kind::Passthrough:
                throw std::runtime_error("lrp: linear layer needs a propagation rule");
        }
    }
    if (std::holds_alternative<ReLU>(layer)) return rel_out;
    if (std::holds_alternative<Flatten>(layer)) return rel_out.reshaped(in.shape);
    if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        // winner takes all, first maximal position on ties
        Tensor rel_in(in.shape);
        for (int c = 0; c < in.dim(0); ++c)
            for (int oy = 0; oy < rel_out.dim(1); ++oy)
                for (int ox = 0; ox < rel_out.dim(2); ++ox) {
                    int by = oy * p->stride, bx = ox * p->stride;
                    float best = in.at3(c, by, bx);
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx) {
                            const float v = in.at3(c, oy * p->stride + ky, ox * p->stride + kx);
                            if (v > best) {
                                best = v;
                                by = oy * p->stride + ky;
                                bx = ox * p->stride + kx;
                            }
                        }
                    rel_in.at3(c, by, bx) += rel_out.at3(c, oy, ox);
                }
        return rel_in;
    }
    if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        // forward routing: shares proportional to the pooled activations
        Tensor rel_in(in.shape);
        for (int c = 0; c < in.dim(0); ++c)
            for (int oy = 0; oy < rel_out.dim(1); ++oy)
                for (int ox = 0; ox < rel_out.dim(2); ++ox) {
                    float denom = 0.0f;
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            denom += in.at3(c, oy * p->stride + ky, ox * p->stride + kx);
                    if (denom == 0.0f) continue;
                    const float r = rel_out.at3(c, oy, ox) / denom;
                    for (int ky = 0; ky < p->k; ++ky)
                        for (int kx = 0; kx < p->k; ++kx)
                            rel_in.at3(c, oy * p->stride + ky, ox * p->stride + kx) +=
                                in.at3(c, oy * p->stride + ky, ox * p->stride + kx) * r;
                }
        return rel_in;
    }
    if (std::holds_alternative<GlobalAvgPool>(layer)) {
        Tensor rel_in(in.shape);
        const size_t hw = static_cast<size_t>(in.dim(1)) * in.dim(2);
        for (int c = 0; c < in.dim(0); ++c) {
            const float* plane = in.ptr() + static_cast<size_t>(c) * hw;
            float denom = 0.0f;
            for (size_t i = 0; i < hw; ++i) denom += plane[i];
            if (denom == 0.0f) continue;
            const float r = rel_out.at(static_cast<size_t>(c)) / denom;
            float* dst = rel_in.ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] = plane[i] * r;
        }
        return rel_in;
    }
    if (std::holds_alternative<BatchNorm2d>(layer))
        throw std::runtime_error("lrp: merge batchnorm layers before relevance propagation");
    throw std::runtime_error(std::string("lrp: unhandled layer kind ") + layer_kind(layer));
}

// --------------------------------------------------------------- config

std::string LrpConfig::name() const {
    switch (preset) {
        case Preset::Focus: return "lrp-focus";
        case Preset::ZPlusAll: return "lrp-zplus";
        case Preset::Composite: {
            char buf[48];
            if (std::isinf(gamma))
                std::snprintf(buf, sizeof buf, "lrp-composite:inf");
            else
                std::snprintf(buf, sizeof buf, "lrp-composite:%g", static_cast<double>(gamma));
            return buf;
        }
    }
    return "lrp";
}

LrpConfig LrpConfig::focus() { return LrpConfig{}; }

LrpConfig LrpConfig::composite(float gamma) {
    LrpConfig c;
    c.preset = Preset::Composite;
    c.gamma = gamma;
    return c;
}

LrpConfig LrpConfig::zplus_all() {
    LrpConfig c;
    c.preset = Preset::ZPlusAll;
    return c;
}

LrpConfig LrpConfig::parse(const std::string& text) {
    if (text == "focus") return focus();
    if (text == "zplus") return zplus_all();
    if (text.rfind("composite", 0) == 0) {
        if (text == "composite") return composite(0.25f);
        if (text.size() > 10 && text[9] == ':') {
            const std::string g = text.substr(10);
            if (g == "inf") return composite(std::numeric_limits<float>::infinity());
            return composite(std::stof(g));
        }
    }
    throw std::runtime_error("unknown lrp configuration '" + text +
                             "' (want focus | composite[:gamma] | zplus)");
}

LrpRule rule_for_layer(const LrpConfig& cfg, const Model& model, int layer_index, bool tap_is_input) {
    const Layer& layer = model.layers[static_cast<size_t>(layer_index)];
    LrpRule rule;
    rule.epsilon = cfg.epsilon;
    if (std::holds_alternative<Linear>(layer)) {
        rule.kind = cfg.preset == LrpConfig::Preset::ZPlusAll ? LrpRule::Kind::ZPlus
                                                              : LrpRule::Kind::Epsilon;
        return rule;
    }
    if (!std::holds_alternative<Conv2d>(layer)) {
        rule.kind = LrpRule::Kind::Passthrough;
        return rule;
    }
    // conv layers
    int first_conv = -1;
    for (size_t i = 0; i < model.layers.size(); ++i)
        if (std::holds_alternative<Conv2d>(model.layers[i])) {
            first_conv = static_cast<int>(i);
            break;
        }
    const bool pixel_layer = tap_is_input && layer_index == first_conv;
    switch (cfg.preset) {
        case LrpConfig::Preset::ZPlusAll: rule.kind = LrpRule::Kind::ZPlus; break;
        case LrpConfig::Preset::Focus:
            rule.kind = pixel_layer ? LrpRule::Kind::ZB : LrpRule::Kind::ZPlus;
            break;
        case LrpConfig::Preset::Composite:
            if (pixel_layer) {
                rule.kind = LrpRule::Kind::ZB;
            } else {
                rule.kind = LrpRule::Kind::Gamma;
                rule.gamma = cfg.gamma;
            }
            break;
    }
    rule.low = cfg.zb_low;
    rule.high = cfg.zb_high;
    return rule;
}

// --------------------------------------------------------------- drivers

namespace {

// relevance over layers [from, end) given captured activations; acts[i] is the
// input of layer from+i
Tensor propagate_range(const Model& model, int from, int end, const std::vector<Tensor>& acts,
                       Tensor rel, const LrpConfig& cfg, bool tap_is_input,
                       std::vector<double>* layer_sums) {
    auto record = [&](const Tensor& r) {
        if (layer_sums) {
            double s = 0.0;
            for (float v : r.data) s += v;
            layer_sums->push_back(s);
        }
    };
    record(rel);
    for (int li = end - 1; li >= from; --li) {
        const LrpRule rule = rule_for_layer(cfg, model, li, tap_is_input);
        rel = relevance_backward(model.layers[static_cast<size_t>(li)],
                                 acts[static_cast<size_t>(li - from)], rel, rule);
        record(rel);
    }
    if (layer_sums) std::reverse(layer_sums->begin(), layer_sums->end());
    return rel;
}

} // namespace

Tensor lrp_attr(const Model& model, int from, const Tensor& x, int target, const LrpConfig& cfg,
                std::vector<double>* layer_sums) {
    const int end = static_cast<int>(model.layers.size());
    for (int li = from; li < end; ++li)
        if (std::holds_alternative<BatchNorm2d>(model.layers[static_cast<size_t>(li)]))
            throw std::runtime_error("lrp_attr: merge batchnorm layers first");
    const auto acts = trace_segment(model, from, end, x);
    const Tensor& logits = acts.back();
    if (target < 0 || target >= static_cast<int>(logits.numel()))
        throw std::runtime_error("lrp_attr: target logit out of range");
    Tensor rel(logits.shape);
    rel.at(static_cast<size_t>(target)) = logits.at(static_cast<size_t>(target));
    Tensor rel_in = propagate_range(model, from, end, acts, rel, cfg, from == 0, layer_sums);
    if (rel_in.ndim() == 3) return channel_sum(rel_in);
    return rel_in;
}

Tensor lrp_attr_grid(const Model& model, Setting setting, const GridGeometry& geom, int from,
                     const Tensor& x, int target_cell, int target_class, const LrpConfig& cfg,
                     const ImplinvHead* transformed) {
    validate_grid_head(model);
    const bool tap_is_input = from == 0;
    for (size_t li = static_cast<size_t>(from); li < model.layers.size(); ++li)
        if (std::holds_alternative<BatchNorm2d>(model.layers[li]))
            throw std::runtime_error("lrp_attr_grid: merge batchnorm layers first");

    if (setting == Setting::GridPG) {
        if (transformed) throw std::runtime_error("lrp_attr_grid: transform applies to difull only");
        const int end = static_cast<int>(model.layers.size());
        const auto acts = trace_segment(model, from, end, x);
        Tensor rel(acts.back().shape);
        rel.at(static_cast<size_t>(target_class)) =
            acts.back().at(static_cast<size_t>(target_class));
        Tensor rel_in = propagate_range(model, from, end, acts, rel, cfg, tap_is_input, nullptr);
        return channel_sum(rel_in);
    }

    if (setting == Setting::DiFull) {
        DifullExplain fn(model, from, geom, transformed);
        const int cells = fn.cells();
        Tensor rel_full(
            {x.dim(0), x.dim(1), x.dim(2)}); // relevance at the tap, composite layout
        if (!transformed) {
            // branches are fully disconnected: only the target branch carries
            // relevance, the rest is exactly zero
            const int end = static_cast<int>(model.layers.size());
            const Tensor cell_in = fn.cell_slice(x, target_cell);
            const auto acts = trace_segment(model, from, end, cell_in);
            Tensor rel(acts.back().shape);
            rel.at(static_cast<size_t>(target_class)) =
                acts.back().at(static_cast<size_t>(target_class));
            Tensor rel_cell = propagate_range(model, from, end, acts, rel, cfg, tap_is_input, nullptr);
            fn.add_cell_block(rel_full, rel_cell, target_cell);
            return channel_sum(rel_full);
        }

        // transformed head couples all cells through the aggregator neurons
        const int ch = transformed->channels;
        std::vector<std::vector<Tensor>> traces;
        std::vector<float> g;
        for (int cell = 0; cell < cells; ++cell) {
            traces.push_back(trace_segment(model, from, fn.backbone_end(), fn.cell_slice(x, cell)));
            const Tensor pooled =
                layer_forward(model.layers[static_cast<size_t>(fn.backbone_end())],
                              traces.back().back());
            g.insert(g.end(), pooled.data.begin(), pooled.data.end());
        }
        Tensor gt({static_cast<int>(g.size())});
        gt.data = g;
        const Linear& s1 = transformed->stage1[static_cast<size_t>(target_cell)];
        const Tensor h = layer_forward(Layer{s1}, gt);
        const Tensor logits = layer_forward(Layer{transformed->stage2}, h);

        LrpRule fc_rule;
        fc_rule.epsilon = cfg.epsilon;
        fc_rule.kind = cfg.preset == LrpConfig::Preset::ZPlusAll ? LrpRule::Kind::ZPlus
                                                                 : LrpRule::Kind::Epsilon;
        Tensor rel_logits({fn.classes()});
        rel_logits.at(static_cast<size_t>(target_class)) =
            logits.at(static_cast<size_t>(target_class));
        const Tensor rel_h =
            relevance_backward(Layer{transformed->stage2}, h, rel_logits, fc_rule);
        const Tensor rel_g = relevance_backward(Layer{s1}, gt, rel_h, fc_rule);

        for (int cell = 0; cell < cells; ++cell) {
            Tensor rel_pool({ch});
            for (int c = 0; c < ch; ++c)
                rel_pool.at(static_cast<size_t>(c)) = rel_g.at(static_cast<size_t>(cell * ch + c));
            const Tensor rel_feat = relevance_backward(
                model.layers[static_cast<size_t>(fn.backbone_end())],
                traces[static_cast<size_t>(cell)].back(), rel_pool, LrpRule{});
            Tensor rel_cell = rel_feat;
            for (int li = fn.backbone_end() - 1; li >= from; --li) {
                const LrpRule rule = rule_for_layer(cfg, model, li, tap_is_input);
                rel_cell = relevance_backward(
                    model.layers[static_cast<size_t>(li)],
                    traces[static_cast<size_t>(cell)][static_cast<size_t>(li - from)], rel_cell,
                    rule);
            }
            fn.add_cell_block(rel_full, rel_cell, cell);
        }
        return channel_sum(rel_full);
    }

    // DiPart: shared backbone, per-cell regional pooling of the head
    if (transformed) throw std::runtime_error("lrp_attr_grid: transform applies to difull only");
    DipartExplain fn(model, from, geom);
    const auto acts = trace_segment(model, from, model.head_start, x);
    const Tensor& feat = acts.back();
    const Linear& head = std::get<Linear>(model.layers[static_cast<size_t>(model.head_start) + 1]);
    const int ch = feat.dim(0);
    const int n = geom.n;

    // per-cell regional average pooling of the features
    Tensor pooled({ch});
    int count = 0;
    for (int y = 0; y < feat.dim(1); ++y)
        for (int xx = 0; xx < feat.dim(2); ++xx)
            if (fn.row_cells()[static_cast<size_t>(y)] == target_cell / n &&
                fn.col_cells()[static_cast<size_t>(xx)] == target_cell % n)
                ++count;
    if (count > 0) {
        const float inv = 1.0f / static_cast<float>(count);
        for (int c = 0; c < ch; ++c) {
            float acc = 0.0f;
            for (int y = 0; y < feat.dim(1); ++y) {
                if (fn.row_cells()[static_cast<size_t>(y)] != target_cell / n) continue;
                for (int xx = 0; xx < feat.dim(2); ++xx) {
                    if (fn.col_cells()[static_cast<size_t>(xx)] != target_cell % n) continue;
                    acc += feat.at3(c, y, xx);
                }
            }
            pooled.at(static_cast<size_t>(c)) = acc * inv;
        }
    }
    const Tensor logits = layer_forward(Layer{head}, pooled);

    LrpRule fc_rule;
    fc_rule.epsilon = cfg.epsilon;
    fc_rule.kind = cfg.preset == LrpConfig::Preset::ZPlusAll ? LrpRule::Kind::ZPlus
                                                             : LrpRule::Kind::Epsilon;
    Tensor rel_logits({head.weight.dim(0)});
    rel_logits.at(static_cast<size_t>(target_class)) =
        logits.at(static_cast<size_t>(target_class));
    const Tensor rel_pool = relevance_backward(Layer{head}, pooled, rel_logits, fc_rule);

    // distribute pooled relevance over the region proportionally to activations
    Tensor rel_feat(feat.shape);
    for (int c = 0; c < ch; ++c) {
        float denom = 0.0f;
        for (int y = 0; y < feat.dim(1); ++y) {
            if (fn.row_cells()[static_cast<size_t>(y)] != target_cell / n) continue;
            for (int xx = 0; xx < feat.dim(2); ++xx) {
                if (fn.col_cells()[static_cast<size_t>(xx)] != target_cell % n) continue;
                denom += feat.at3(c, y, xx);
            }
        }
        if (denom == 0.0f) continue;
        const float r = rel_pool.at(static_cast<size_t>(c)) / denom;
        for (int y = 0; y < feat.dim(1); ++y) {
            if (fn.row_cells()[static_cast<size_t>(y)] != target_cell / n) continue;
            for (int xx = 0; xx < feat.dim(2); ++xx) {
                if (fn.col_cells()[static_cast<size_t>(xx)] != target_cell % n) continue;
                rel_feat.at3(c, y, xx) = feat.at3(c, y, xx) * r;
            }
        }
    }
    Tensor rel = rel_feat;
    for (int li = model.head_start - 1; li >= from; --li) {
        const LrpRule rule = rule_for_layer(cfg, model, li, tap_is_input);
        rel = relevance_backward(model.layers[static_cast<size_t>(li)],
                                 acts[static_cast<size_t>(li - from)], rel, rule);
    }
    return channel_sum(rel);
}

ImplinvHead implinv_transform(const Model& model, int grid_n) {
    validate_grid_head(model);
    const Linear& head = std::get<Linear>(model.layers[static_cast<size_t>(model.head_start) + 1]);
    const int ch = head.weight.dim(1);
    const int classes = head.weight.dim(0);
    const int cells = grid_n * grid_n;

    ImplinvHead t;
    t.channels = ch;
    for (int cell = 0; cell < cells; ++cell) {
        Linear s1;
        s1.weight = Tensor({ch + 2, cells * ch});
        s1.bias = Tensor({ch + 2});
        for (int c = 0; c < ch; ++c) s1.weight.at2(c, cell * ch + c) = 1.0f; // identity block
        for (int j = 0; j < cells; ++j) {
            if (j == cell) continue;
            for (int c = 0; c < ch; ++c) {
                s1.weight.at2(ch, j * ch + c) = 1.0f;      // positive aggregator
                s1.weight.at2(ch + 1, j * ch + c) = -1.0f; // negative aggregator
            }
        }
        t.stage1.push_back(std::move(s1));
    }
    Linear s2;
    s2.weight = Tensor({classes, ch + 2});
    s2.bias = head.bias;
    for (int k = 0; k < classes; ++k) {
        for (int c = 0; c < ch; ++c) s2.weight.at2(k, c) = head.weight.at2(k, c);
        s2.weight.at2(k, ch) = 1.0f;     // aggregators cancel in the forward pass
        s2.weight.at2(k, ch + 1) = 1.0f;
    }
    t.stage2 = std::move(s2);
    return t;
}

} // namespace attreval
