#include "attreval/attribution.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace attreval {

namespace {

void require_chw(const Tensor& x, const char* who) {
    if (x.ndim() != 3) throw std::runtime_error(std::string(who) + ": tap input must be CxHxW");
}

void require_map(const Tensor& m, const char* who) {
    if (m.ndim() != 2) throw std::runtime_error(std::string(who) + ": map must be 2-d");
}

} // namespace

Tensor channel_sum(const Tensor& chw) {
    require_chw(chw, "channel_sum");
    Tensor out({chw.dim(1), chw.dim(2)});
    const size_t hw = out.numel();
    for (int c = 0; c < chw.dim(0); ++c) {
        const float* plane = chw.ptr() + static_cast<size_t>(c) * hw;
        for (size_t i = 0; i < hw; ++i) out.at(i) += plane[i];
    }
    return out;
}

Tensor gradient_attr(const ExplainFn& f, const Tensor& x, int target) {
    Tensor g = f.input_gradient(x, target, ReluMode::Standard);
    for (float& v : g.data) v = std::fabs(v);
    return channel_sum(g);
}

Tensor guided_backprop_attr(const ExplainFn& f, const Tensor& x, int target) {
    Tensor g = f.input_gradient(x, target, ReluMode::Guided);
    for (float& v : g.data) v = std::fabs(v);
    return channel_sum(g);
}

Tensor ixg_attr(const ExplainFn& f, const Tensor& x, int target) {
    Tensor g = f.input_gradient(x, target, ReluMode::Standard);
    for (size_t i = 0; i < g.numel(); ++i) g.at(i) *= x.at(i);
    return channel_sum(g);
}

Tensor intgrad_attr(const ExplainFn& f, const Tensor& x, int target, int steps, float baseline) {
    if (steps < 1) throw std::runtime_error("intgrad_attr: steps must be >= 1");
    require_chw(x, "intgrad_attr");
    std::vector<double> mean_grad(x.numel(), 0.0);
    Tensor probe(x.shape);
    for (int m = 0; m < steps; ++m) {
        const float alpha = (static_cast<float>(m) + 0.5f) / static_cast<float>(steps);
        for (size_t i = 0; i < x.numel(); ++i)
            probe.at(i) = baseline + alpha * (x.at(i) - baseline);
        const Tensor g = f.input_gradient(probe, target, ReluMode::Standard);
        for (size_t i = 0; i < g.numel(); ++i) mean_grad[i] += g.at(i);
    }
    Tensor attr(x.shape);
    for (size_t i = 0; i < x.numel(); ++i)
        attr.at(i) = static_cast<float>(mean_grad[i] / steps) * (x.at(i) - baseline);
    return channel_sum(attr);
}

Tensor smoothgrad_attr(const ExplainFn& f, const Tensor& x, int target, SmoothgradBase base,
                       int n_samples, float noise_frac, const MethodConfig& cfg, uint64_t seed) {
    if (n_samples < 1) throw std::runtime_error("smoothgrad_attr: n_samples must be >= 1");
    require_chw(x, "smoothgrad_attr");
    float lo = x.at(0), hi = x.at(0);
    for (float v : x.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float sigma = noise_frac * (hi - lo);

    std::vector<double> acc;
    Tensor noisy(x.shape);
    for (int s = 0; s < n_samples; ++s) {
        Rng rng = Rng::derive(seed, static_cast<uint64_t>(s));
        for (size_t i = 0; i < x.numel(); ++i) noisy.at(i) = x.at(i) + sigma * rng.gaussian();
        Tensor map;
        switch (base) {
            case SmoothgradBase::Gradient: map = gradient_attr(f, noisy, target); break;
            case SmoothgradBase::IxG: map = ixg_attr(f, noisy, target); break;
            case SmoothgradBase::IntGrad:
                map = intgrad_attr(f, noisy, target, cfg.intgrad_steps, cfg.intgrad_baseline);
                break;
        }
        if (acc.empty()) acc.assign(map.numel(), 0.0);
        for (size_t i = 0; i < map.numel(); ++i) acc[i] += map.at(i);
    }
    Tensor out({x.dim(1), x.dim(2)});
    for (size_t i = 0; i < out.numel(); ++i)
        out.at(i) = static_cast<float>(acc[i] / n_samples);
    return out;
}

Tensor gradcam_attr(const ExplainFn& f, const Tensor& x, int target) {
    require_chw(x, "gradcam_attr");
    const Tensor g = f.input_gradient(x, target, ReluMode::Standard);
    const size_t hw = static_cast<size_t>(x.dim(1)) * x.dim(2);
    Tensor out({x.dim(1), x.dim(2)});
    for (int c = 0; c < x.dim(0); ++c) {
        const float* gplane = g.ptr() + static_cast<size_t>(c) * hw;
        double asum = 0.0;
        for (size_t i = 0; i < hw; ++i) asum += gplane[i];
        const float alpha = static_cast<float>(asum / static_cast<double>(hw));
        const float* aplane = x.ptr() + static_cast<size_t>(c) * hw;
        for (size_t i = 0; i < hw; ++i) out.at(i) += alpha * aplane[i];
    }
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    return out;
}

Tensor layercam_attr(const ExplainFn& f, const Tensor& x, int target) {
    require_chw(x, "layercam_attr");
    const Tensor g = f.input_gradient(x, target, ReluMode::Standard);
    const size_t hw = static_cast<size_t>(x.dim(1)) * x.dim(2);
    Tensor out({x.dim(1), x.dim(2)});
    for (int c = 0; c < x.dim(0); ++c) {
        const float* gplane = g.ptr() + static_cast<size_t>(c) * hw;
        const float* aplane = x.ptr() + static_cast<size_t>(c) * hw;
        for (size_t i = 0; i < hw; ++i) {
            const float gp = gplane[i] > 0.0f ? gplane[i] : 0.0f;
            out.at(i) += gp * aplane[i];
        }
    }
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    return out;
}

Tensor occlusion_attr(const ExplainFn& f, const Tensor& x, int target, int k, int stride,
                      float baseline) {
    require_chw(x, "occlusion_attr");
    const int h = x.dim(1), w = x.dim(2);
    if (k > h || k > w) throw std::runtime_error("occlusion_attr: window larger than the input");
    if (stride > k)
        std::fprintf(stderr,
                     "occlusion_attr: stride %d > window %d leaves uncovered elements at zero\n",
                     stride, k);
    const float y0 = f.logit(x, target);

    Tensor acc({h, w});
    Tensor cover({h, w});
    Tensor occluded = x;
    for (int oy = 0; oy + k <= h; oy += stride) {
        for (int ox = 0; ox + k <= w; ox += stride) {
            for (int c = 0; c < x.dim(0); ++c)
                for (int y = oy; y < oy + k; ++y)
                    for (int xx = ox; xx < ox + k; ++xx) occluded.at3(c, y, xx) = baseline;
            const float drop = y0 - f.logit(occluded, target);
            for (int y = oy; y < oy + k; ++y)
                for (int xx = ox; xx < ox + k; ++xx) {
                    acc.at2(y, xx) += drop;
                    cover.at2(y, xx) += 1.0f;
                }
            // restore the window
            for (int c = 0; c < x.dim(0); ++c)
                for (int y = oy; y < oy + k; ++y)
                    for (int xx = ox; xx < ox + k; ++xx) occluded.at3(c, y, xx) = x.at3(c, y, xx);
        }
    }
    for (size_t i = 0; i < acc.numel(); ++i)
        if (cover.at(i) > 0.0f) acc.at(i) /= cover.at(i);
    return acc;
}

Tensor rise_attr(const ExplainFn& f, const Tensor& x, int target, int masks, int grid,
                 float keep_prob, uint64_t seed) {
    require_chw(x, "rise_attr");
    if (masks < 1) throw std::runtime_error("rise_attr: mask count must be >= 1");
    if (keep_prob <= 0.0f || keep_prob >= 1.0f)
        throw std::runtime_error("rise_attr: keep probability must lie in (0,1)");
    const int h = x.dim(1), w = x.dim(2);
    const int cell_h = (h + grid - 1) / grid, cell_w = (w + grid - 1) / grid;

    std::vector<double> acc(static_cast<size_t>(h) * w, 0.0);
    Tensor small({grid, grid});
    Tensor masked(x.shape);
    for (int m = 0; m < masks; ++m) {
        Rng rng = Rng::derive(seed, static_cast<uint64_t>(m));
        for (float& v : small.data) v = rng.uniform() < keep_prob ? 1.0f : 0.0f;
        const Tensor up = upsample_bilinear(small, h + cell_h, w + cell_w);
        const int dy = rng.uniform_int(cell_h);
        const int dx = rng.uniform_int(cell_w);
        for (int c = 0; c < x.dim(0); ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    masked.at3(c, y, xx) = x.at3(c, y, xx) * up.at2(y + dy, xx + dx);
        const double ym = f.logit(masked, target);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                acc[static_cast<size_t>(y) * w + xx] += ym * up.at2(y + dy, xx + dx);
    }
    Tensor out({h, w});
    const double norm = 1.0 / (static_cast<double>(masks) * keep_prob);
    for (size_t i = 0; i < out.numel(); ++i) out.at(i) = static_cast<float>(acc[i] * norm);
    return out;
}

Tensor upsample_bilinear(const Tensor& map, int out_h, int out_w) {
    require_map(map, "upsample_bilinear");
    const int ih = map.dim(0), iw = map.dim(1);
    Tensor out({out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        // half-pixel centres, clamped to the valid range
        float sy = (static_cast<float>(y) + 0.5f) * static_cast<float>(ih) /
                       static_cast<float>(out_h) -
                   0.5f;
        sy = std::min(std::max(sy, 0.0f), static_cast<float>(ih - 1));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, ih - 1);
        const float fy = sy - static_cast<float>(y0);
        for (int x = 0; x < out_w; ++x) {
            float sx = (static_cast<float>(x) + 0.5f) * static_cast<float>(iw) /
                           static_cast<float>(out_w) -
                       0.5f;
            sx = std::min(std::max(sx, 0.0f), static_cast<float>(iw - 1));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, iw - 1);
            const float fx = sx - static_cast<float>(x0);
            const float top = map.at2(y0, x0) * (1.0f - fx) + map.at2(y0, x1) * fx;
            const float bot = map.at2(y1, x0) * (1.0f - fx) + map.at2(y1, x1) * fx;
            out.at2(y, x) = top * (1.0f - fy) + bot * fy;
        }
    }
    return out;
}

Tensor smooth_gaussian(const Tensor& map, int k) {
    require_map(map, "smooth_gaussian");
    if (k < 1 || k % 2 == 0) throw std::runtime_error("smooth_gaussian: kernel size must be odd");
    const int r = k / 2;
    const float sigma = static_cast<float>(k) / 4.0f;
    std::vector<float> kernel(static_cast<size_t>(k) * k);
    double sum = 0.0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const float v = std::exp(-static_cast<float>(dy * dy + dx * dx) / (2.0f * sigma * sigma));
            kernel[static_cast<size_t>(dy + r) * k + (dx + r)] = v;
            sum += v;
        }
    for (float& v : kernel) v = static_cast<float>(v / sum);

    const int h = map.dim(0), w = map.dim(1);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f; // zero padding outside the map
            for (int dy = -r; dy <= r; ++dy) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                for (int dx = -r; dx <= r; ++dx) {
                    const int sx = x + dx;
                    if (sx < 0 || sx >= w) continue;
                    acc += kernel[static_cast<size_t>(dy + r) * k + (dx + r)] * map.at2(sy, sx);
                }
            }
            out.at2(y, x) = acc;
        }
    return out;
}

// ------------------------------------------------------------------- ATMP io

static_assert(std::endian::native == std::endian::little, "ATMP writer assumes a little-endian host");

void save_map(const AttributionMap& map, const std::string& path) {
    nlohmann::json header;
    header["method"] = map.method;
    header["tap"] = map.tap;
    header["setting"] = map.setting;
    header["sample_id"] = map.sample_id;
    header["target_cell"] = map.target_cell;
    header["shape"] = map.values.shape;
    header["upsampled_shape"] =
        map.upsampled.numel() ? map.upsampled.shape : std::vector<int>{};
    const std::string htext = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write("ATMP", 4);
    const uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    f.write(reinterpret_cast<const char*>(map.values.ptr()),
            static_cast<std::streamsize>(map.values.numel() * 4));
    if (map.upsampled.numel())
        f.write(reinterpret_cast<const char*>(map.upsampled.ptr()),
                static_cast<std::streamsize>(map.upsampled.numel() * 4));
    if (!f) throw std::runtime_error("short write to '" + path + "'");
}

AttributionMap load_map(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "ATMP", 4) != 0)
        throw std::runtime_error("ATMP: bad magic in '" + path + "'");
    uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != 1) throw std::runtime_error("ATMP: version mismatch");
    uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (16 + hlen > bytes.size()) throw std::runtime_error("ATMP: truncated header");
    const auto header = nlohmann::json::parse(bytes.begin() + 16,
                                              bytes.begin() + 16 + static_cast<ptrdiff_t>(hlen));
    AttributionMap map;
    map.method = header.at("method").get<std::string>();
    map.tap = header.at("tap").get<std::string>();
    map.setting = header.value("setting", std::string{});
    map.sample_id = header.at("sample_id").get<int>();
    map.target_cell = header.value("target_cell", 0);
    map.values = Tensor(header.at("shape").get<std::vector<int>>());
    const auto up_shape = header.at("upsampled_shape").get<std::vector<int>>();

    const uint8_t* payload = bytes.data() + 16 + hlen;
    const size_t avail = bytes.size() - 16 - static_cast<size_t>(hlen);
    size_t need = map.values.numel() * 4;
    if (!up_shape.empty()) {
        map.upsampled = Tensor(up_shape);
        need += map.upsampled.numel() * 4;
    }
    if (avail < need) throw std::runtime_error("ATMP: truncated payload");
    std::memcpy(map.values.ptr(), payload, map.values.numel() * 4);
    if (!up_shape.empty())
        std::memcpy(map.upsampled.ptr(), payload + map.values.numel() * 4,
                    map.upsampled.numel() * 4);
    return map;
}

} // namespace attreval
