#include "attreval/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "attreval/parallel.hpp"
#include "attreval/rng.hpp"

namespace attreval {

namespace {

// signed distance to the class shape, in pixels; negative inside
float shape_sdf(int shape_id, float x, float y, float r) {
    switch (shape_id) {
        case 0: { // disk
            return std::sqrt(x * x + y * y) - r;
        }
        case 1: { // square
            const float ax = std::fabs(x), ay = std::fabs(y);
            return std::max(ax, ay) - r * 0.85f;
        }
        case 2: { // triangle (equilateral, tip up)
            const float k = 1.7320508f; // sqrt 3
            const float rr = r * 0.95f;
            float px = std::fabs(x);
            float py = y + rr * 0.5f;
            return std::max((k * px + py) * 0.5f - rr * 0.75f, -py);
        }
        case 3: { // ring
            const float d = std::sqrt(x * x + y * y);
            return std::fabs(d - r * 0.72f) - r * 0.28f;
        }
        case 4: { // cross
            const float w = r * 0.34f;
            const float ax = std::fabs(x), ay = std::fabs(y);
            const float bar_h = std::max(ax - r, ay - w);
            const float bar_v = std::max(ax - w, ay - r);
            return std::min(bar_h, bar_v);
        }
        default:
            throw std::runtime_error("shape id out of range");
    }
}

} // namespace

std::vector<LabeledImage> gen_synthetic(int num_classes, int size, int count, uint64_t seed) {
    if (count <= 0) throw std::runtime_error("gen_synthetic: count must be positive");
    if (num_classes < 1 || num_classes > 10)
        throw std::runtime_error("gen_synthetic: supports 1..10 classes");

    std::vector<LabeledImage> out;
    out.reserve(static_cast<size_t>(count));
    for (int idx = 0; idx < count; ++idx) {
        Rng rng = Rng::derive(seed, static_cast<uint64_t>(idx));
        const int label = idx % num_classes;
        const int shape_id = label % 5;
        const int color_id = label / 5;

        LabeledImage img;
        img.label = label;
        img.id = idx;
        img.pixels = Tensor({3, size, size});

        // textured background: muted base tone + sinusoid + per-pixel noise
        const float base_r = rng.uniform(0.18f, 0.42f);
        const float base_g = rng.uniform(0.18f, 0.42f);
        const float base_b = rng.uniform(0.18f, 0.42f);
        const float freq = rng.uniform(0.15f, 0.45f);
        const float phase = rng.uniform(0.0f, 6.2831853f);
        const bool horizontal = rng.uniform() < 0.5f;

        // shape placement
        const float r = rng.uniform(0.22f, 0.34f) * static_cast<float>(size);
        const float cx = rng.uniform(r + 1.0f, static_cast<float>(size) - r - 1.0f);
        const float cy = rng.uniform(r + 1.0f, static_cast<float>(size) - r - 1.0f);
        const float rot = rng.uniform(0.0f, 6.2831853f);
        const float cos_t = std::cos(rot), sin_t = std::sin(rot);

        // class colors: warm (R-dominant) vs cool (B-dominant), with jitter
        float col[3];
        if (color_id == 0) {
            col[0] = rng.uniform(0.78f, 0.95f);
            col[1] = rng.uniform(0.12f, 0.30f);
            col[2] = rng.uniform(0.05f, 0.22f);
        } else {
            col[0] = rng.uniform(0.05f, 0.22f);
            col[1] = rng.uniform(0.12f, 0.30f);
            col[2] = rng.uniform(0.78f, 0.95f);
        }

        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const float wave =
                    0.04f * std::sin(freq * static_cast<float>(horizontal ? x : y) + phase);
                const float noise = rng.uniform(-0.05f, 0.05f);
                float bg[3] = {base_r + wave + noise, base_g + wave + noise, base_b + wave + noise};

                // rotate into shape frame
                const float dx = static_cast<float>(x) + 0.5f - cx;
                const float dy = static_cast<float>(y) + 0.5f - cy;
                const float sx = cos_t * dx + sin_t * dy;
                const float sy = -sin_t * dx + cos_t * dy;
                const float d = shape_sdf(shape_id, sx, sy, r);
                const float alpha = std::clamp(0.5f - d / 1.2f, 0.0f, 1.0f); // soft edge

                for (int c = 0; c < 3; ++c) {
                    const float v = bg[c] * (1.0f - alpha) + col[c] * alpha;
                    img.pixels.at3(c, y, x) = std::clamp(v, 0.0f, 1.0f);
                }
            }
        }
        out.push_back(std::move(img));
    }
    return out;
}

std::vector<LabeledImage> load_cifar10(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    constexpr size_t kRecord = 3073;
    if (bytes.empty() || bytes.size() % kRecord != 0)
        throw std::runtime_error("cifar10: file size " + std::to_string(bytes.size()) +
                                 " is not a positive multiple of 3073");
    const size_t n = bytes.size() / kRecord;
    std::vector<LabeledImage> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const uint8_t* rec = bytes.data() + i * kRecord;
        if (rec[0] > 9)
            throw std::runtime_error("cifar10: record " + std::to_string(i) + " has label byte " +
                                     std::to_string(int(rec[0])) + " > 9");
        LabeledImage img;
        img.label = rec[0];
        img.id = static_cast<int>(i);
        img.pixels = Tensor({3, 32, 32});
        for (size_t k = 0; k < 3072; ++k)
            img.pixels.at(k) = static_cast<float>(rec[1 + k]) / 255.0f;
        out.push_back(std::move(img));
    }
    return out;
}

std::vector<uint8_t> cifar10_record_bytes(const LabeledImage& img) {
    if (img.pixels.shape != std::vector<int>{3, 32, 32})
        throw std::runtime_error("cifar10_record_bytes: image is not 3x32x32");
    std::vector<uint8_t> rec(3073);
    rec[0] = static_cast<uint8_t>(img.label);
    for (size_t k = 0; k < 3072; ++k)
        rec[1 + k] = static_cast<uint8_t>(std::lround(img.pixels.at(k) * 255.0f));
    return rec;
}

std::vector<float> softmax(const std::vector<float>& logits) {
    std::vector<float> p(logits.size());
    float mx = logits[0];
    for (float v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float& v : p) v *= inv;
    return p;
}

std::vector<LabeledImage> filter_confident(const Model& model, const std::vector<LabeledImage>& images,
                                           float threshold, int workers) {
    std::vector<uint8_t> keep(images.size(), 0);
    parallel_for(static_cast<int>(images.size()), workers, [&](int i) {
        const auto& img = images[static_cast<size_t>(i)];
        const Tensor logits = forward(model, img.pixels, false).logits();
        std::vector<float> lv(logits.data.begin(), logits.data.end());
        const auto p = softmax(lv);
        int argmax = 0;
        for (size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[argmax]) argmax = static_cast<int>(c);
        if (argmax == img.label && p[static_cast<size_t>(img.label)] >= threshold)
            keep[static_cast<size_t>(i)] = 1;
    });
    std::vector<LabeledImage> out;
    for (size_t i = 0; i < images.size(); ++i)
        if (keep[i]) out.push_back(images[i]);
    return out;
}

} // namespace attreval
