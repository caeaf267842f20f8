#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "attreval/layers.hpp"

namespace attreval {

// Ordered sequence of layers with named tap boundaries. A tap index t means
// "the boundary before layers[t]": f_pre = layers[0,t), f_explain = layers[t,end).
struct Model {
    std::vector<Layer> layers;
    std::map<std::string, int> taps; // at minimum input/mid/final for presets
    int head_start = 0;              // first classification-head layer
    std::string arch;                // preset name when built from one

    int num_classes() const;
    // expected input shape is implied by the first conv; presets record it here
    std::vector<int> input_shape;

    // checks layer validity, tap ranges and static shape compatibility end to end
    void validate() const;
    std::vector<std::vector<int>> shape_plan() const; // per-boundary shapes, size layers+1
};

struct ForwardTrace {
    // acts[0] = input, acts[i+1] = output of layers[i]; only [first,last] populated
    // when run on a sub-range. Without capture, only the final activation is kept.
    std::vector<Tensor> acts;
    const Tensor& logits() const { return acts.back(); }
};

// full-model inference forward; capture keeps every intermediate activation
ForwardTrace forward(const Model& model, const Tensor& input, bool capture);

// forward over layers [first, last) without capture
Tensor run_segment(const Model& model, int first, int last, const Tensor& input);

// trace over layers [first, last) with capture; acts has last-first+1 entries
std::vector<Tensor> trace_segment(const Model& model, int first, int last, const Tensor& input);

// per-layer gradients of logits[target] w.r.t. each layer input; grads[i] aligns
// with trace.acts[i]. Requires a capture=true trace of the full model.
std::vector<Tensor> backward_gradient(const Model& model, const ForwardTrace& trace, int target,
                                      ReluMode mode = ReluMode::Standard);

// gradient of logits[target] w.r.t. acts[0] of a captured segment
Tensor backward_segment(const Model& model, int first, int last, const std::vector<Tensor>& acts,
                        const Tensor& grad_at_output, ReluMode mode = ReluMode::Standard);

std::pair<Model, Model> split(const Model& model, const std::string& tap);

// Folds every BatchNorm2d into the directly preceding Conv2d/Linear.
// boundary_map, when given, receives old-boundary -> new-boundary indices
// (size layers+1) so tap indices can be translated.
Model merge_batchnorm(const Model& model, std::vector<int>* boundary_map = nullptr);

bool has_batchnorm(const Model& model);

struct PresetOptions {
    int num_classes = 10;
    int image_size = 32;
};

// "tinyvgg-plain" (8 conv layers, GlobalAvgPool head) or "tinyvgg-bn" (same with
// BatchNorm after each conv). Weights seeded He-uniform.
Model make_preset(const std::string& name, uint64_t seed, const PresetOptions& opt = {});

} // namespace attreval
