#include "attreval/model.hpp"

#include <cmath>
#include <stdexcept>

#include "attreval/rng.hpp"

namespace attreval {

int Model::num_classes() const {
    if (layers.empty()) throw std::runtime_error("model has no layers");
    if (const auto* l = std::get_if<Linear>(&layers.back())) return l->weight.dim(0);
    throw std::runtime_error("model does not end in a linear layer");
}

std::vector<std::vector<int>> Model::shape_plan() const {
    std::vector<std::vector<int>> plan;
    plan.reserve(layers.size() + 1);
    plan.push_back(input_shape);
    std::vector<int> cur = input_shape;
    for (size_t i = 0; i < layers.size(); ++i) {
        try {
            cur = layer_output_shape(layers[i], cur);
        } catch (const std::exception& e) {
            throw std::runtime_error("layer " + std::to_string(i) + " (" + layer_kind(layers[i]) +
                                     "): " + e.what());
        }
        plan.push_back(cur);
    }
    return plan;
}

void Model::validate() const {
    if (layers.empty()) throw std::runtime_error("model has no layers");
    if (input_shape.empty()) throw std::runtime_error("model input shape unset");
    for (size_t i = 0; i < layers.size(); ++i) {
        try {
            validate_layer(layers[i]);
        } catch (const std::exception& e) {
            throw std::runtime_error("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    if (head_start < 0 || head_start >= static_cast<int>(layers.size()))
        throw std::runtime_error("head_start out of range");
    for (const auto& [name, idx] : taps) {
        if (idx < 0 || idx > head_start)
            throw std::runtime_error("tap '" + name + "' index " + std::to_string(idx) +
                                     " outside [0, head_start]");
    }
    shape_plan(); // throws on any static incompatibility
}

ForwardTrace forward(const Model& model, const Tensor& input, bool capture) {
    if (input.shape != model.input_shape)
        throw std::runtime_error("model expects input " + shape_str(model.input_shape) + ", got " +
                                 shape_str(input.shape));
    ForwardTrace trace;
    if (capture) {
        trace.acts = trace_segment(model, 0, static_cast<int>(model.layers.size()), input);
    } else {
        trace.acts.push_back(run_segment(model, 0, static_cast<int>(model.layers.size()), input));
    }
    return trace;
}

Tensor run_segment(const Model& model, int first, int last, const Tensor& input) {
    Tensor cur = input;
    for (int i = first; i < last; ++i) {
        try {
            cur = layer_forward(model.layers[static_cast<size_t>(i)], cur);
        } catch (const std::exception& e) {
            throw std::runtime_error("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    return cur;
}

std::vector<Tensor> trace_segment(const Model& model, int first, int last, const Tensor& input) {
    std::vector<Tensor> acts;
    acts.reserve(static_cast<size_t>(last - first) + 1);
    acts.push_back(input);
    for (int i = first; i < last; ++i) {
        try {
            acts.push_back(layer_forward(model.layers[static_cast<size_t>(i)], acts.back()));
        } catch (const std::exception& e) {
            throw std::runtime_error("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    return acts;
}

std::vector<Tensor> backward_gradient(const Model& model, const ForwardTrace& trace, int target,
                                      ReluMode mode) {
    const int n = static_cast<int>(model.layers.size());
    if (static_cast<int>(trace.acts.size()) != n + 1)
        throw std::runtime_error("backward_gradient requires a capture=true trace");
    const Tensor& logits = trace.logits();
    if (target < 0 || target >= static_cast<int>(logits.numel()))
        throw std::runtime_error("target logit " + std::to_string(target) + " out of range");

    std::vector<Tensor> grads(static_cast<size_t>(n) + 1);
    Tensor seed(logits.shape);
    seed.at(static_cast<size_t>(target)) = 1.0f;
    grads[static_cast<size_t>(n)] = seed;
    for (int i = n - 1; i >= 0; --i) {
        grads[static_cast<size_t>(i)] =
            layer_backward_data(model.layers[static_cast<size_t>(i)], trace.acts[static_cast<size_t>(i)],
                                grads[static_cast<size_t>(i) + 1], mode);
    }
    return grads;
}

Tensor backward_segment(const Model& model, int first, int last, const std::vector<Tensor>& acts,
                        const Tensor& grad_at_output, ReluMode mode) {
    Tensor g = grad_at_output;
    for (int i = last - 1; i >= first; --i) {
        g = layer_backward_data(model.layers[static_cast<size_t>(i)],
                                acts[static_cast<size_t>(i - first)], g, mode);
    }
    return g;
}

std::pair<Model, Model> split(const Model& model, const std::string& tap) {
    auto it = model.taps.find(tap);
    if (it == model.taps.end()) throw std::runtime_error("unknown tap '" + tap + "'");
    const int t = it->second;
    auto plan = model.shape_plan();

    Model pre, post;
    pre.arch = model.arch + ":pre";
    post.arch = model.arch + ":explain";
    pre.input_shape = model.input_shape;
    pre.layers.assign(model.layers.begin(), model.layers.begin() + t);
    pre.head_start = static_cast<int>(pre.layers.size()) ? static_cast<int>(pre.layers.size()) - 1 : 0;
    post.input_shape = plan[static_cast<size_t>(t)];
    post.layers.assign(model.layers.begin() + t, model.layers.end());
    post.head_start = model.head_start - t;
    post.taps["input"] = 0;
    return {pre, post};
}

bool has_batchnorm(const Model& model) {
    for (const auto& l : model.layers)
        if (std::holds_alternative<BatchNorm2d>(l)) return true;
    return false;
}

Model merge_batchnorm(const Model& model) {
    Model out;
    out.arch = model.arch;
    out.input_shape = model.input_shape;
    std::vector<int> index_map(model.layers.size() + 1, 0); // old boundary -> new boundary
    int kept = 0;
    for (size_t i = 0; i < model.layers.size(); ++i) {
        index_map[i] = kept;
        const Layer& layer = model.layers[i];
        if (const auto* bn = std::get_if<BatchNorm2d>(&layer)) {
            if (out.layers.empty())
                throw std::runtime_error("layer " + std::to_string(i) +
                                         ": batchnorm2d without preceding conv2d/linear");
            Layer& prev = out.layers.back();
            const int ch = bn->gamma.dim(0);
            auto scale_of = [&](int c) {
                return bn->gamma.at(static_cast<size_t>(c)) /
                       std::sqrt(bn->running_var.at(static_cast<size_t>(c)) + bn->eps);
            };
            if (auto* conv = std::get_if<Conv2d>(&prev)) {
                if (conv->weight.dim(0) != ch)
                    throw std::runtime_error("layer " + std::to_string(i) +
                                             ": batchnorm2d channel count != conv out channels");
                const size_t per_out = conv->weight.numel() / static_cast<size_t>(ch);
                for (int c = 0; c < ch; ++c) {
                    const float s = scale_of(c);
                    float* w = conv->weight.ptr() + static_cast<size_t>(c) * per_out;
                    for (size_t k = 0; k < per_out; ++k) w[k] *= s;
                    float& b = conv->bias.at(static_cast<size_t>(c));
                    b = (b - bn->running_mean.at(static_cast<size_t>(c))) * s +
                        bn->beta.at(static_cast<size_t>(c));
                }
            } else if (auto* lin = std::get_if<Linear>(&prev)) {
                if (lin->weight.dim(0) != ch)
                    throw std::runtime_error("layer " + std::to_string(i) +
                                             ": batchnorm2d channel count != linear out features");
                const size_t per_out = static_cast<size_t>(lin->weight.dim(1));
                for (int c = 0; c < ch; ++c) {
                    const float s = scale_of(c);
                    float* w = lin->weight.ptr() + static_cast<size_t>(c) * per_out;
                    for (size_t k = 0; k < per_out; ++k) w[k] *= s;
                    float& b = lin->bias.at(static_cast<size_t>(c));
                    b = (b - bn->running_mean.at(static_cast<size_t>(c))) * s +
                        bn->beta.at(static_cast<size_t>(c));
                }
            } else {
                throw std::runtime_error("layer " + std::to_string(i) +
                                         ": batchnorm2d must directly follow conv2d/linear, found " +
                                         layer_kind(prev));
            }
            continue; // BN layer dropped
        }
        out.layers.push_back(layer);
        ++kept;
    }
    index_map[model.layers.size()] = kept;
    out.head_start = index_map[static_cast<size_t>(model.head_start)];
    for (const auto& [name, idx] : model.taps) out.taps[name] = index_map[static_cast<size_t>(idx)];
    out.validate();
    return out;
}

// ---------------------------------------------------------------- presets

namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (float& v : t.data) v = rng.uniform(-limit, limit);
    return t;
}

Conv2d make_conv(int cin, int cout, Rng& rng) {
    Conv2d c;
    c.weight = he_uniform({cout, cin, 3, 3}, cin * 9, rng);
    c.bias = Tensor({cout}); // zero init; stays zero for bias-free training
    c.stride = 1;
    c.padding = 1;
    return c;
}

BatchNorm2d make_bn(int ch) {
    BatchNorm2d b;
    b.gamma = Tensor({ch}, 1.0f);
    b.beta = Tensor({ch});
    b.running_mean = Tensor({ch});
    b.running_var = Tensor({ch}, 1.0f);
    b.eps = 1e-5f;
    return b;
}

} // namespace

Model make_preset(const std::string& name, uint64_t seed, const PresetOptions& opt) {
    const bool with_bn = name == "tinyvgg-bn";
    if (!with_bn && name != "tinyvgg-plain")
        throw std::runtime_error("unknown preset '" + name + "' (want tinyvgg-plain or tinyvgg-bn)");

    Rng rng = Rng::derive(seed, 0x7061726d); // weight stream
    Model m;
    m.arch = name;
    m.input_shape = {3, opt.image_size, opt.image_size};

    // conv widths; pools after conv1, conv2 and conv4
    const int widths[8] = {8, 16, 24, 24, 32, 32, 32, 32};
    int cin = 3;
    auto add_block = [&](int w, bool pool_after) {
        m.layers.push_back(make_conv(cin, w, rng));
        if (with_bn) m.layers.push_back(make_bn(w));
        m.layers.push_back(ReLU{});
        if (pool_after) m.layers.push_back(MaxPool2d{2, 2});
        cin = w;
    };
    add_block(widths[0], true);
    add_block(widths[1], true);
    add_block(widths[2], false);
    add_block(widths[3], true);
    const int mid_tap = static_cast<int>(m.layers.size()) - 1; // boundary after conv4's relu
    add_block(widths[4], false);
    add_block(widths[5], false);
    add_block(widths[6], false);
    add_block(widths[7], false);
    const int final_tap = static_cast<int>(m.layers.size()); // boundary after conv8's relu

    m.layers.push_back(GlobalAvgPool{});
    {
        Linear head;
        head.weight = he_uniform({opt.num_classes, cin}, cin, rng);
        head.bias = Tensor({opt.num_classes});
        m.layers.push_back(head);
    }
    m.head_start = final_tap;
    m.taps = {{"input", 0}, {"mid", mid_tap}, {"final", final_tap}};
    m.validate();
    return m;
}

} // namespace attreval
