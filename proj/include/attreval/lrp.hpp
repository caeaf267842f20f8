#pragma once

#include <string>
#include <vector>

#include "attreval/explain.hpp"

namespace attreval {

struct LrpRule {
    enum class Kind { Epsilon, Gamma, ZPlus, ZB, Passthrough };
    Kind kind = Kind::Passthrough;
    float epsilon = 0.25f; // Epsilon, and the Gamma stabilizer
    float gamma = 0.0f;
    float low = 0.0f, high = 1.0f; // ZB pixel bounds
};

// Named rule assignments. Focus: z+ on conv layers (z^B on the first conv
// when the tap is the input), epsilon on dense layers. Composite: the
// generalized gamma rule on conv layers instead; gamma=0 degenerates to the
// epsilon rule and gamma=infinity to z+, which makes Composite(inf) == Focus.
// ZPlusAll: z+ on every parameterized layer (implementation-invariance demo).
struct LrpConfig {
    enum class Preset { Focus, Composite, ZPlusAll };
    Preset preset = Preset::Focus;
    float epsilon = 0.25f;
    float gamma = 0.25f; // Composite only
    float zb_low = 0.0f, zb_high = 1.0f;

    std::string name() const;
    static LrpConfig focus();
    static LrpConfig composite(float gamma);
    static LrpConfig zplus_all();
    // parses "focus", "composite:<gamma>", "composite:inf", "zplus"
    static LrpConfig parse(const std::string& text);
};

LrpRule rule_for_layer(const LrpConfig& cfg, const Model& model, int layer_index, bool tap_is_input);

// relevance through one parameterized/pooling layer; `in` is the captured
// forward input of that layer
Tensor relevance_backward(const Layer& layer, const Tensor& in, const Tensor& rel_out,
                          const LrpRule& rule);

// Sequential relevance propagation over layers [from, end) with relevance
// initialized to the target logit. Returns channel-summed relevance at the
// tap input. When layer_sums is given it receives the total relevance at
// every boundary, aligned with [from, end] (last entry = seeded output).
// BatchNorm layers must have been merged beforehand.
Tensor lrp_attr(const Model& model, int from, const Tensor& x, int target, const LrpConfig& cfg,
                std::vector<double>* layer_sums = nullptr);

// relevance maps for the grid settings; target is (cell, class)
Tensor lrp_attr_grid(const Model& model, Setting setting, const GridGeometry& geom, int from,
                     const Tensor& x, int target_cell, int target_class, const LrpConfig& cfg,
                     const ImplinvHead* transformed = nullptr);

// Functionally equivalent DiFull head with k+2 intermediate neurons: identity
// mapping of the target cell's pooled features plus a +/- aggregator pair
// over the disconnected cells, all wired with weight 1 into the classifier.
ImplinvHead implinv_transform(const Model& model, int grid_n);

} // namespace attreval
