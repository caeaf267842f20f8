#pragma once

#include <string>
#include <variant>
#include <vector>

#include "attreval/tensor.hpp"

namespace attreval {

struct Conv2d {
    Tensor weight; // [out, in, kh, kw]
    Tensor bias;   // [out], zeros when the layer is bias-free
    int stride = 1;
    int padding = 0;
};

struct Linear {
    Tensor weight; // [out, in]
    Tensor bias;   // [out]
};

struct ReLU {};

struct MaxPool2d {
    int k = 2;
    int stride = 2;
};

struct AvgPool2d {
    int k = 2;
    int stride = 2;
};

struct GlobalAvgPool {};

struct BatchNorm2d {
    Tensor gamma;        // [c]
    Tensor beta;         // [c]
    Tensor running_mean; // [c]
    Tensor running_var;  // [c], elementwise >= 0
    float eps = 1e-5f;
};

struct Flatten {};

using Layer = std::variant<Conv2d, Linear, ReLU, MaxPool2d, AvgPool2d, GlobalAvgPool, BatchNorm2d, Flatten>;

const char* layer_kind(const Layer& layer);

// validates parameter consistency of a single layer; throws with layer kind in message
void validate_layer(const Layer& layer);

// static shape inference; throws naming the layer when shapes are incompatible
std::vector<int> layer_output_shape(const Layer& layer, const std::vector<int>& in_shape);

// how ReLU routes gradient in the backward pass
enum class ReluMode {
    Standard, // grad * (input > 0)
    Guided    // grad * (input > 0) * (grad > 0)
};

// inference-mode forward (BatchNorm uses running statistics)
Tensor layer_forward(const Layer& layer, const Tensor& in);

// gradient w.r.t. the layer input; `in` is the captured forward input
Tensor layer_backward_data(const Layer& layer, const Tensor& in, const Tensor& grad_out,
                           ReluMode mode = ReluMode::Standard);

// parameter gradients for trainable layers (Conv2d/Linear); accumulates into grads
struct ParamGrads {
    Tensor weight;
    Tensor bias;
};
ParamGrads layer_param_grads(const Layer& layer, const Tensor& in, const Tensor& grad_out);

// raw conv kernels, reused by the LRP rules with modified weights
void conv2d_forward_into(const Tensor& in, const Tensor& weight, const float* bias, int stride,
                         int padding, Tensor& out);
void conv2d_backward_data_into(const Tensor& weight, const Tensor& grad_out, int stride, int padding,
                               Tensor& grad_in);

} // namespace attreval
