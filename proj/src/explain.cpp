#include "attreval/explain.hpp"

#include <cstring>
#include <stdexcept>

namespace attreval {

const char* setting_name(Setting s) {
    switch (s) {
        case Setting::GridPG: return "gridpg";
        case Setting::DiFull: return "difull";
        case Setting::DiPart: return "dipart";
    }
    return "?";
}

Setting setting_from_name(const std::string& name) {
    if (name == "gridpg") return Setting::GridPG;
    if (name == "difull") return Setting::DiFull;
    if (name == "dipart") return Setting::DiPart;
    throw std::runtime_error("unknown setting '" + name + "' (want gridpg|difull|dipart)");
}

float ExplainFn::logit(const Tensor& x, int target) const {
    const auto all = logits(x);
    if (target < 0 || target >= static_cast<int>(all.size()))
        throw std::runtime_error("target logit out of range");
    return all[static_cast<size_t>(target)];
}

void validate_grid_head(const Model& model) {
    const int hs = model.head_start;
    if (hs + 2 != static_cast<int>(model.layers.size()) ||
        !std::holds_alternative<GlobalAvgPool>(model.layers[static_cast<size_t>(hs)]) ||
        !std::holds_alternative<Linear>(model.layers[static_cast<size_t>(hs) + 1]))
        throw std::runtime_error(
            "grid settings expect a [globalavgpool, linear] classification head");
}

// ------------------------------------------------------------- SequentialExplain

SequentialExplain::SequentialExplain(const Model& model, int from_layer)
    : model_(model), from_(from_layer) {
    num_logits_ = static_cast<int>(shape_numel(model.shape_plan().back()));
}

std::vector<float> SequentialExplain::logits(const Tensor& x) const {
    const Tensor out = run_segment(model_, from_, static_cast<int>(model_.layers.size()), x);
    return {out.data.begin(), out.data.end()};
}

Tensor SequentialExplain::input_gradient(const Tensor& x, int target, ReluMode mode) const {
    const int end = static_cast<int>(model_.layers.size());
    const auto acts = trace_segment(model_, from_, end, x);
    const Tensor& out = acts.back();
    if (target < 0 || target >= static_cast<int>(out.numel()))
        throw std::runtime_error("target logit out of range");
    Tensor seed(out.shape);
    seed.at(static_cast<size_t>(target)) = 1.0f;
    return backward_segment(model_, from_, end, acts, seed, mode);
}

// ---------------------------------------------------------------- DifullExplain

DifullExplain::DifullExplain(const Model& model, int from_layer, const GridGeometry& geom,
                             const ImplinvHead* transformed)
    : model_(model), from_(from_layer), backbone_end_(model.head_start), geom_(geom),
      transformed_(transformed) {
    validate_grid_head(model);
    if (from_ < 0 || from_ > backbone_end_)
        throw std::runtime_error("difull: tap must lie within the backbone");
    if (model.input_shape[1] != geom.cell_h || model.input_shape[2] != geom.cell_w)
        throw std::runtime_error("difull: grid cells must match the model input size");
    auto plan = model.shape_plan();
    cell_in_shape_ = plan[static_cast<size_t>(from_)];
    in_shape_ = {cell_in_shape_[0], cell_in_shape_[1] * geom_.n, cell_in_shape_[2] * geom_.n};
    classes_ = model.num_classes();
    num_logits_ = cells() * classes_;
    if (transformed_ && transformed_->stage1.size() != static_cast<size_t>(cells()))
        throw std::runtime_error("difull: transformed head does not match the grid layout");
}

Tensor DifullExplain::cell_slice(const Tensor& x, int cell) const {
    const int ch = cell_in_shape_[0], h = cell_in_shape_[1], w = cell_in_shape_[2];
    const int row = cell / geom_.n, col = cell % geom_.n;
    Tensor out(cell_in_shape_);
    for (int c = 0; c < ch; ++c)
        for (int y = 0; y < h; ++y)
            std::memcpy(&out.at3(c, y, 0), &x.at3(c, row * h + y, col * w), sizeof(float) * w);
    return out;
}

void DifullExplain::add_cell_block(Tensor& dst, const Tensor& cell_tensor, int cell) const {
    const int ch = cell_tensor.dim(0), h = cell_tensor.dim(1), w = cell_tensor.dim(2);
    const int row = cell / geom_.n, col = cell % geom_.n;
    for (int c = 0; c < ch; ++c)
        for (int y = 0; y < h; ++y)
            std::memcpy(&dst.at3(c, row * h + y, col * w), &cell_tensor.at3(c, y, 0),
                        sizeof(float) * w);
}

Tensor DifullExplain::branch_features(const Tensor& x, int cell) const {
    return run_segment(model_, from_, backbone_end_, cell_slice(x, cell));
}

std::vector<float> DifullExplain::pooled_features(const Tensor& x) const {
    std::vector<float> g;
    g.reserve(static_cast<size_t>(cells()) * static_cast<size_t>(cell_in_shape_[0]));
    for (int cell = 0; cell < cells(); ++cell) {
        const Tensor f = branch_features(x, cell);
        const Tensor pooled = layer_forward(model_.layers[static_cast<size_t>(backbone_end_)], f);
        g.insert(g.end(), pooled.data.begin(), pooled.data.end());
    }
    return g;
}

std::vector<float> DifullExplain::logits(const Tensor& x) const {
    if (x.shape != in_shape_)
        throw std::runtime_error("difull: tap input is " + shape_str(x.shape) + ", expected " +
                                 shape_str(in_shape_));
    std::vector<float> out;
    out.reserve(static_cast<size_t>(num_logits_));
    if (!transformed_) {
        for (int cell = 0; cell < cells(); ++cell) {
            const Tensor cell_logits =
                run_segment(model_, from_, static_cast<int>(model_.layers.size()),
                            cell_slice(x, cell));
            out.insert(out.end(), cell_logits.data.begin(), cell_logits.data.end());
        }
        return out;
    }
    const std::vector<float> g = pooled_features(x);
    Tensor gt({static_cast<int>(g.size())});
    gt.data = g;
    for (int cell = 0; cell < cells(); ++cell) {
        const Tensor h = layer_forward(Layer{transformed_->stage1[static_cast<size_t>(cell)]}, gt);
        const Tensor cell_logits = layer_forward(Layer{transformed_->stage2}, h);
        out.insert(out.end(), cell_logits.data.begin(), cell_logits.data.end());
    }
    return out;
}

float DifullExplain::logit(const Tensor& x, int target) const {
    if (target < 0 || target >= num_logits_) throw std::runtime_error("target logit out of range");
    const int cell = target / classes_, cls = target % classes_;
    if (!transformed_) {
        const Tensor cell_logits = run_segment(
            model_, from_, static_cast<int>(model_.layers.size()), cell_slice(x, cell));
        return cell_logits.at(static_cast<size_t>(cls));
    }
    const std::vector<float> g = pooled_features(x);
    Tensor gt({static_cast<int>(g.size())});
    gt.data = g;
    const Tensor h = layer_forward(Layer{transformed_->stage1[static_cast<size_t>(cell)]}, gt);
    return layer_forward(Layer{transformed_->stage2}, h).at(static_cast<size_t>(cls));
}

Tensor DifullExplain::input_gradient(const Tensor& x, int target, ReluMode mode) const {
    if (target < 0 || target >= num_logits_) throw std::runtime_error("target logit out of range");
    const int target_cell = target / classes_, cls = target % classes_;
    Tensor grad(in_shape_); // zeros; disconnected cells stay exactly zero

    if (!transformed_) {
        const int end = static_cast<int>(model_.layers.size());
        const auto acts = trace_segment(model_, from_, end, cell_slice(x, target_cell));
        Tensor seed(acts.back().shape);
        seed.at(static_cast<size_t>(cls)) = 1.0f;
        const Tensor g = backward_segment(model_, from_, end, acts, seed, mode);
        add_cell_block(grad, g, target_cell);
        return grad;
    }

    // transformed head: the classifier reads every cell's pooled features
    const int ch = cell_in_shape_[0];
    std::vector<std::vector<Tensor>> traces;
    traces.reserve(static_cast<size_t>(cells()));
    std::vector<float> g;
    for (int cell = 0; cell < cells(); ++cell) {
        traces.push_back(trace_segment(model_, from_, backbone_end_, cell_slice(x, cell)));
        const Tensor pooled =
            layer_forward(model_.layers[static_cast<size_t>(backbone_end_)], traces.back().back());
        g.insert(g.end(), pooled.data.begin(), pooled.data.end());
    }
    Tensor gt({static_cast<int>(g.size())});
    gt.data = g;
    const Linear& s1 = transformed_->stage1[static_cast<size_t>(target_cell)];
    const Tensor h = layer_forward(Layer{s1}, gt);
    Tensor seed({classes_});
    seed.at(static_cast<size_t>(cls)) = 1.0f;
    const Tensor dh = layer_backward_data(Layer{transformed_->stage2}, h, seed, mode);
    const Tensor dg = layer_backward_data(Layer{s1}, gt, dh, mode);
    for (int cell = 0; cell < cells(); ++cell) {
        Tensor dpool({ch});
        for (int c = 0; c < ch; ++c)
            dpool.at(static_cast<size_t>(c)) = dg.at(static_cast<size_t>(cell * ch + c));
        const Tensor dfeat = layer_backward_data(model_.layers[static_cast<size_t>(backbone_end_)],
                                                 traces[static_cast<size_t>(cell)].back(), dpool, mode);
        const Tensor gcell =
            backward_segment(model_, from_, backbone_end_, traces[static_cast<size_t>(cell)], dfeat, mode);
        add_cell_block(grad, gcell, cell);
    }
    return grad;
}

// ---------------------------------------------------------------- DipartExplain

RfAffine rf_centre_map(const Model& model, int backbone_end) {
    RfAffine m;
    for (int li = backbone_end - 1; li >= 0; --li) {
        const Layer& layer = model.layers[static_cast<size_t>(li)];
        int k = 1, s = 1, p = 0;
        if (const auto* c = std::get_if<Conv2d>(&layer)) {
            k = c->weight.dim(2);
            s = c->stride;
            p = c->padding;
        } else if (const auto* mp = std::get_if<MaxPool2d>(&layer)) {
            k = mp->k;
            s = mp->stride;
        } else if (const auto* ap = std::get_if<AvgPool2d>(&layer)) {
            k = ap->k;
            s = ap->stride;
        } else if (std::holds_alternative<ReLU>(layer) ||
                   std::holds_alternative<BatchNorm2d>(layer)) {
            continue;
        } else {
            throw std::runtime_error(std::string("dipart: unsupported backbone layer ") +
                                     layer_kind(layer));
        }
        m.alpha *= s;
        m.beta_half = m.beta_half * s + (k - 1) - 2 * p;
    }
    return m;
}

int cell_of_centre(long long centre_half, int cell_px, int n) {
    const long long cell_half = 2LL * cell_px;
    long long q = centre_half >= 0 ? centre_half / cell_half : -1;
    if (centre_half > 0 && centre_half % cell_half == 0) q -= 1; // border goes to earlier cell
    if (q < 0) q = 0;
    if (q >= n) q = n - 1;
    return static_cast<int>(q);
}

DipartExplain::DipartExplain(const Model& model, int from_layer, const GridGeometry& geom)
    : model_(model), from_(from_layer), geom_(geom) {
    validate_grid_head(model);
    auto plan = model.shape_plan();
    classes_ = model.num_classes();
    num_logits_ = geom.n * geom.n * classes_;

    const auto feat_shape = plan[static_cast<size_t>(model.head_start)];
    const RfAffine m = rf_centre_map(model, model.head_start);
    row_cell_.resize(static_cast<size_t>(feat_shape[1]));
    col_cell_.resize(static_cast<size_t>(feat_shape[2]));
    for (int i = 0; i < feat_shape[1]; ++i)
        row_cell_[static_cast<size_t>(i)] =
            cell_of_centre(2 * m.alpha * i + m.beta_half, geom.cell_h, geom.n);
    for (int i = 0; i < feat_shape[2]; ++i)
        col_cell_[static_cast<size_t>(i)] =
            cell_of_centre(2 * m.alpha * i + m.beta_half, geom.cell_w, geom.n);
    region_count_.assign(static_cast<size_t>(geom.n) * geom.n, 0);
    for (int r : row_cell_)
        for (int c : col_cell_)
            region_count_[static_cast<size_t>(r * geom.n + c)] += 1;
}

std::vector<float> DipartExplain::logits(const Tensor& x) const {
    const Tensor feat = run_segment(model_, from_, model_.head_start, x);
    const Linear& head = std::get<Linear>(model_.layers[static_cast<size_t>(model_.head_start) + 1]);
    const int ch = feat.dim(0);
    const int cells = geom_.n * geom_.n;
    // per-cell regional average of features, then the linear head
    std::vector<float> out(static_cast<size_t>(num_logits_), 0.0f);
    for (int cell = 0; cell < cells; ++cell) {
        Tensor pooled({ch});
        const float inv = region_count_[static_cast<size_t>(cell)] > 0
                              ? 1.0f / static_cast<float>(region_count_[static_cast<size_t>(cell)])
                              : 0.0f;
        for (int c = 0; c < ch; ++c) {
            float acc = 0.0f;
            for (int y = 0; y < feat.dim(1); ++y) {
                if (row_cell_[static_cast<size_t>(y)] != cell / geom_.n) continue;
                for (int xx = 0; xx < feat.dim(2); ++xx) {
                    if (col_cell_[static_cast<size_t>(xx)] != cell % geom_.n) continue;
                    acc += feat.at3(c, y, xx);
                }
            }
            pooled.at(static_cast<size_t>(c)) = acc * inv;
        }
        const Tensor cell_logits = layer_forward(Layer{head}, pooled);
        for (int k = 0; k < classes_; ++k)
            out[static_cast<size_t>(cell * classes_ + k)] = cell_logits.at(static_cast<size_t>(k));
    }
    return out;
}

Tensor DipartExplain::input_gradient(const Tensor& x, int target, ReluMode mode) const {
    if (target < 0 || target >= num_logits_) throw std::runtime_error("target logit out of range");
    const int cell = target / classes_, cls = target % classes_;
    const auto acts = trace_segment(model_, from_, model_.head_start, x);
    const Tensor& feat = acts.back();
    const Linear& head = std::get<Linear>(model_.layers[static_cast<size_t>(model_.head_start) + 1]);

    Tensor dfeat(feat.shape);
    const int count = region_count_[static_cast<size_t>(cell)];
    if (count > 0) {
        const float inv = 1.0f / static_cast<float>(count);
        for (int c = 0; c < feat.dim(0); ++c) {
            const float w = head.weight.at2(cls, c) * inv;
            for (int y = 0; y < feat.dim(1); ++y) {
                if (row_cell_[static_cast<size_t>(y)] != cell / geom_.n) continue;
                for (int xx = 0; xx < feat.dim(2); ++xx) {
                    if (col_cell_[static_cast<size_t>(xx)] != cell % geom_.n) continue;
                    dfeat.at3(c, y, xx) = w;
                }
            }
        }
    }
    return backward_segment(model_, from_, model_.head_start, acts, dfeat, mode);
}

std::unique_ptr<ExplainFn> make_explain(const Model& model, Setting setting, int from_layer,
                                        const GridGeometry& geom, const ImplinvHead* transformed) {
    switch (setting) {
        case Setting::GridPG:
            if (transformed)
                throw std::runtime_error("transformed heads only apply to the difull setting");
            return std::make_unique<SequentialExplain>(model, from_layer);
        case Setting::DiFull:
            return std::make_unique<DifullExplain>(model, from_layer, geom, transformed);
        case Setting::DiPart:
            if (transformed)
                throw std::runtime_error("transformed heads only apply to the difull setting");
            return std::make_unique<DipartExplain>(model, from_layer, geom);
    }
    throw std::runtime_error("unknown setting");
}

} // namespace attreval
