#include "attreval/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace attreval {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("tensor shape has non-positive dim " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(std::vector<int> s) const {
    if (shape_numel(s) != numel()) {
        throw std::runtime_error("reshape " + shape_str(shape) + " -> " + shape_str(s) +
                                 ": element count mismatch");
    }
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
}

void check_finite(const Tensor& t, const std::string& context) {
    if (!t.all_finite()) throw std::runtime_error(context + ": non-finite values in tensor");
}

} // namespace attreval
