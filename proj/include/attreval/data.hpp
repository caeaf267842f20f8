#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attreval/model.hpp"
#include "attreval/tensor.hpp"

namespace attreval {

struct LabeledImage {
    Tensor pixels; // CxHxW in [0,1]
    int label = 0;
    int id = 0; // stable sample identifier
};

// Synthetic shape/color classification set. Each class is a distinct
// (shape, color) pair rendered at random position and scale over a textured
// background; deterministic per (seed, index); classes balanced round-robin.
std::vector<LabeledImage> gen_synthetic(int num_classes, int size, int count, uint64_t seed);

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (R, G, B planes, each 32x32 row-major), pixels scaled to [0,1] by /255.
// Accepts any positive multiple of the 3073-byte record size.
std::vector<LabeledImage> load_cifar10(const std::string& path);

// inverse of the loader for one image; used by the round-trip property test
std::vector<uint8_t> cifar10_record_bytes(const LabeledImage& img);

std::vector<float> softmax(const std::vector<float>& logits);

// keeps images whose true-class softmax probability reaches the threshold and
// whose argmax equals the true label; preserves input order
std::vector<LabeledImage> filter_confident(const Model& model, const std::vector<LabeledImage>& images,
                                           float threshold = 0.99f, int workers = 1);

} // namespace attreval
