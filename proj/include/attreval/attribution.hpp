#pragma once

#include <cstdint>
#include <string>

#include "attreval/explain.hpp"
#include "attreval/rng.hpp"

namespace attreval {

// per-method hyperparameters; defaults are the desk-scale values for 64x64
// composites (occlusion windows scaled from the reference 448x448 protocol)
struct MethodConfig {
    int intgrad_steps = 32;
    float intgrad_baseline = 0.0f; // constant baseline value at the tap

    int smoothgrad_samples = 25;
    float smoothgrad_noise_frac = 0.15f; // std = frac * (max - min of the input)

    int occlusion_k = 8; // input tap
    int occlusion_stride = 4;
    int occlusion_k_feat = 3; // feature taps
    int occlusion_stride_feat = 1;
    float occlusion_baseline = 0.0f;

    int rise_masks = 1000;
    int rise_grid = 7;          // h x h Bernoulli grid
    float rise_keep_prob = 0.5f;

    int smooth_kernel = 17; // S-IxG/S-IntGrad kernel at the input tap; K odd
};

enum class SmoothgradBase { Gradient, IxG, IntGrad };

// all methods take f_explain and a tap input (C x H x W) and return a signed
// or nonnegative 2-d map at the tap's spatial resolution

// |d logit / d input|, channel-summed; nonnegative
Tensor gradient_attr(const ExplainFn& f, const Tensor& x, int target);

// guided backprop: ReLU passes gradient only where input>0 and grad>0;
// absolute value, channel-summed; nonnegative
Tensor guided_backprop_attr(const ExplainFn& f, const Tensor& x, int target);

// input (x) gradient, signed, channel-summed
Tensor ixg_attr(const ExplainFn& f, const Tensor& x, int target);

// (x - baseline) (x) mean gradient over midpoint Riemann samples of the
// straight path; signed, channel-summed
Tensor intgrad_attr(const ExplainFn& f, const Tensor& x, int target, int steps, float baseline);

// mean base-method map over Gaussian-noise perturbed inputs
Tensor smoothgrad_attr(const ExplainFn& f, const Tensor& x, int target, SmoothgradBase base,
                       int n_samples, float noise_frac, const MethodConfig& cfg, uint64_t seed);

// ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean gradient; nonnegative
Tensor gradcam_attr(const ExplainFn& f, const Tensor& x, int target);

// ReLU(sum_k ReLU(grad_k) (x) A_k); nonnegative
Tensor layercam_attr(const ExplainFn& f, const Tensor& x, int target);

// sliding-window score drops spread over the covered elements, averaged by
// coverage count; signed
Tensor occlusion_attr(const ExplainFn& f, const Tensor& x, int target, int k, int stride,
                      float baseline);

// random-mask importance: masks are grid x grid Bernoulli(keep) patterns,
// bilinearly upsampled with a random shift; map = weighted mask average
Tensor rise_attr(const ExplainFn& f, const Tensor& x, int target, int masks, int grid,
                 float keep_prob, uint64_t seed);

// elementwise sum over channels, sign preserved
Tensor channel_sum(const Tensor& chw);

// half-pixel-centre bilinear resize of a 2-d map, coordinates clamped
Tensor upsample_bilinear(const Tensor& map, int out_h, int out_w);

// normalized K x K Gaussian (sigma = K/4), zero padding, same size; K odd
Tensor smooth_gaussian(const Tensor& map, int k);

// a computed map bound to its provenance, plus the full-resolution view
struct AttributionMap {
    Tensor values; // tap resolution
    std::string method;
    std::string tap;
    std::string setting;
    int sample_id = 0;
    int target_cell = 0;
    Tensor upsampled; // composite resolution; may be empty
};

// ATMP map file: magic "ATMP", u32 LE version, u64 LE header length, JSON
// header (method, tap, setting, sample id, target cell, shape), f32 LE payload
// of `values` followed by `upsampled` when present
void save_map(const AttributionMap& map, const std::string& path);
AttributionMap load_map(const std::string& path);

} // namespace attreval
