#include "attreval/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little, "ATEV writer assumes a little-endian host");

namespace attreval {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'T', 'E', 'V'};
constexpr uint32_t kVersion = 1;

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void append_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(const uint8_t* p) {
    uint32_t v = 0;
    std::memcpy(&v, p, 4);
    return v;
}

uint64_t read_u64(const uint8_t* p) {
    uint64_t v = 0;
    std::memcpy(&v, p, 8);
    return v;
}

// blob list for a layer, in fixed order
std::vector<const Tensor*> layer_blobs(const Layer& layer) {
    if (const auto* c = std::get_if<Conv2d>(&layer)) return {&c->weight, &c->bias};
    if (const auto* l = std::get_if<Linear>(&layer)) return {&l->weight, &l->bias};
    if (const auto* b = std::get_if<BatchNorm2d>(&layer))
        return {&b->gamma, &b->beta, &b->running_mean, &b->running_var};
    return {};
}

std::vector<Tensor*> layer_blobs(Layer& layer) {
    if (auto* c = std::get_if<Conv2d>(&layer)) return {&c->weight, &c->bias};
    if (auto* l = std::get_if<Linear>(&layer)) return {&l->weight, &l->bias};
    if (auto* b = std::get_if<BatchNorm2d>(&layer))
        return {&b->gamma, &b->beta, &b->running_mean, &b->running_var};
    return {};
}

json describe_layer(const Layer& layer) {
    json d;
    d["kind"] = layer_kind(layer);
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        d["out_channels"] = c->weight.dim(0);
        d["in_channels"] = c->weight.dim(1);
        d["kernel"] = {c->weight.dim(2), c->weight.dim(3)};
        d["stride"] = c->stride;
        d["padding"] = c->padding;
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
        d["out_features"] = l->weight.dim(0);
        d["in_features"] = l->weight.dim(1);
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        d["kernel"] = p->k;
        d["stride"] = p->stride;
    } else if (const auto* p = std::get_if<AvgPool2d>(&layer)) {
        d["kernel"] = p->k;
        d["stride"] = p->stride;
    } else if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
        d["channels"] = b->gamma.dim(0);
        d["eps"] = b->eps;
    }
    return d;
}

Layer layer_from_json(const json& d) {
    const std::string kind = d.at("kind").get<std::string>();
    if (kind == "conv2d") {
        Conv2d c;
        const int out = d.at("out_channels").get<int>();
        const int in = d.at("in_channels").get<int>();
        const auto k = d.at("kernel");
        c.weight = Tensor({out, in, k.at(0).get<int>(), k.at(1).get<int>()});
        c.bias = Tensor({out});
        c.stride = d.at("stride").get<int>();
        c.padding = d.at("padding").get<int>();
        return c;
    }
    if (kind == "linear") {
        Linear l;
        l.weight = Tensor({d.at("out_features").get<int>(), d.at("in_features").get<int>()});
        l.bias = Tensor({d.at("out_features").get<int>()});
        return l;
    }
    if (kind == "relu") return ReLU{};
    if (kind == "maxpool2d") return MaxPool2d{d.at("kernel").get<int>(), d.at("stride").get<int>()};
    if (kind == "avgpool2d") return AvgPool2d{d.at("kernel").get<int>(), d.at("stride").get<int>()};
    if (kind == "globalavgpool") return GlobalAvgPool{};
    if (kind == "batchnorm2d") {
        BatchNorm2d b;
        const int ch = d.at("channels").get<int>();
        b.gamma = Tensor({ch});
        b.beta = Tensor({ch});
        b.running_mean = Tensor({ch});
        b.running_var = Tensor({ch});
        b.eps = d.at("eps").get<float>();
        return b;
    }
    throw std::runtime_error("ATEV header: unknown layer kind '" + kind + "'");
}

} // namespace

std::vector<uint8_t> serialize_model(const Model& model) {
    json header;
    header["arch"] = model.arch;
    header["head_start"] = model.head_start;
    header["input_shape"] = model.input_shape;
    header["taps"] = model.taps;

    json layers = json::array();
    uint64_t offset = 0; // byte offset into the blob section
    for (const auto& layer : model.layers) {
        json d = describe_layer(layer);
        json blobs = json::array();
        for (const Tensor* t : layer_blobs(layer)) {
            blobs.push_back({{"offset", offset}, {"count", t->numel()}});
            offset += t->numel() * 4;
        }
        if (!blobs.empty()) d["blobs"] = blobs;
        layers.push_back(d);
    }
    header["layers"] = layers;

    const std::string htext = header.dump();
    std::vector<uint8_t> out;
    out.reserve(16 + htext.size() + offset);
    out.insert(out.end(), kMagic, kMagic + 4);
    append_u32(out, kVersion);
    append_u64(out, htext.size());
    out.insert(out.end(), htext.begin(), htext.end());
    for (const auto& layer : model.layers) {
        for (const Tensor* t : layer_blobs(layer)) {
            const size_t pos = out.size();
            out.resize(pos + t->numel() * 4);
            std::memcpy(out.data() + pos, t->ptr(), t->numel() * 4);
        }
    }
    return out;
}

Model deserialize_model(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("ATEV: bad magic");
    const uint32_t version = read_u32(bytes.data() + 4);
    if (version != kVersion)
        throw std::runtime_error("ATEV: version mismatch (file has " + std::to_string(version) +
                                 ", reader supports " + std::to_string(kVersion) + ")");
    const uint64_t hlen = read_u64(bytes.data() + 8);
    if (16 + hlen > bytes.size()) throw std::runtime_error("ATEV: truncated header");
    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("ATEV: malformed header JSON: ") + e.what());
    }

    Model m;
    m.arch = header.value("arch", std::string{});
    m.head_start = header.at("head_start").get<int>();
    m.input_shape = header.at("input_shape").get<std::vector<int>>();
    if (header.contains("taps"))
        m.taps = header.at("taps").get<std::map<std::string, int>>();

    const uint8_t* payload = bytes.data() + 16 + hlen;
    const uint64_t payload_len = bytes.size() - 16 - hlen;
    for (const auto& d : header.at("layers")) {
        Layer layer = layer_from_json(d);
        auto blobs = layer_blobs(layer);
        if (!blobs.empty()) {
            const auto& descs = d.at("blobs");
            if (descs.size() != blobs.size())
                throw std::runtime_error(std::string("ATEV: blob count mismatch for ") +
                                         layer_kind(layer));
            for (size_t i = 0; i < blobs.size(); ++i) {
                const uint64_t off = descs[i].at("offset").get<uint64_t>();
                const uint64_t count = descs[i].at("count").get<uint64_t>();
                if (count != blobs[i]->numel())
                    throw std::runtime_error("ATEV: blob size mismatch");
                if (off + count * 4 > payload_len) throw std::runtime_error("ATEV: truncated blob");
                std::memcpy(blobs[i]->ptr(), payload + off, count * 4);
            }
        }
        m.layers.push_back(std::move(layer));
    }
    m.validate();
    return m;
}

void save_model(const Model& model, const std::string& path) {
    const auto bytes = serialize_model(model);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to '" + path + "'");
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

uint64_t model_hash(const Model& model) {
    const auto bytes = serialize_model(model);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace attreval
