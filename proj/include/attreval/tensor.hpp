#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace attreval {

// Dense row-major f32 tensor. The single value carrier for images,
// activations, gradients and attribution maps.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::vector<int> s, float fill);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    // flat accessors for the common ranks; no bounds checks in release paths
    float& at(size_t i) { return data[i]; }
    float at(size_t i) const { return data[i]; }
    float& at2(int y, int x) { return data[static_cast<size_t>(y) * shape[1] + x]; }
    float at2(int y, int x) const { return data[static_cast<size_t>(y) * shape[1] + x]; }
    float& at3(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    float at3(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    float& at4(int o, int i, int y, int x) {
        return data[((static_cast<size_t>(o) * shape[1] + i) * shape[2] + y) * shape[3] + x];
    }
    float at4(int o, int i, int y, int x) const {
        return data[((static_cast<size_t>(o) * shape[1] + i) * shape[2] + y) * shape[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;

    Tensor reshaped(std::vector<int> s) const;
};

size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// throws std::runtime_error when t contains NaN/Inf; context names the producer
void check_finite(const Tensor& t, const std::string& context);

} // namespace attreval
