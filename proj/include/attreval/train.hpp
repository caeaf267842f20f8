#pragma once

#include <cstdint>
#include <vector>

#include "attreval/data.hpp"
#include "attreval/model.hpp"

namespace attreval {

struct TrainConfig {
    int epochs = 15;
    float lr = 0.05f;
    float momentum = 0.9f;
    bool lr_decay = true; // step decay x0.2 at 60% and 85% of the epochs
    int batch_size = 32;
    uint64_t seed = 0;
    int workers = 1;
    bool train_bias = true;    // false keeps conv/linear biases pinned at zero
    bool augment_flip = false; // random horizontal flips
};

struct TrainResult {
    Model model;
    float train_accuracy = 0.0f;
    std::vector<double> epoch_loss;
};

// Cross-entropy SGD (mean loss over each batch). Deterministic for a given
// seed regardless of worker count: per-sample work runs in parallel, all
// reductions happen in sample order. BatchNorm layers use batch statistics
// during training and keep running statistics for inference. Throws when the
// loss turns non-finite.
TrainResult train_sgd(const Model& model, const std::vector<LabeledImage>& dataset,
                      const TrainConfig& cfg);

float model_accuracy(const Model& model, const std::vector<LabeledImage>& dataset, int workers = 1);

} // namespace attreval
