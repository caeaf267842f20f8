#include "attreval/train.hpp"

#include <cmath>
#include <stdexcept>

#include "attreval/parallel.hpp"
#include "attreval/rng.hpp"

namespace attreval {

namespace {

struct BnBatchState {
    std::vector<float> mean;    // per channel, batch statistics
    std::vector<float> inv_std; // 1/sqrt(var+eps)
};

// training-mode BN forward over the whole batch; updates running stats
BnBatchState bn_forward_batch(BatchNorm2d& bn, const std::vector<Tensor>& in, std::vector<Tensor>& out,
                              float momentum) {
    const int ch = bn.gamma.dim(0);
    const int b = static_cast<int>(in.size());
    const size_t hw = static_cast<size_t>(in[0].dim(1)) * in[0].dim(2);
    const double count = static_cast<double>(b) * static_cast<double>(hw);

    BnBatchState st;
    st.mean.resize(static_cast<size_t>(ch));
    st.inv_std.resize(static_cast<size_t>(ch));
    for (int c = 0; c < ch; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int s = 0; s < b; ++s) {
            const float* plane = in[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) {
                sum += plane[i];
                sq += static_cast<double>(plane[i]) * plane[i];
            }
        }
        const double mean = sum / count;
        const double var = std::max(0.0, sq / count - mean * mean);
        st.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
        st.inv_std[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + bn.eps));
        // running stats use the unbiased variance estimate
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        float& rm = bn.running_mean.at(static_cast<size_t>(c));
        float& rv = bn.running_var.at(static_cast<size_t>(c));
        rm = (1.0f - momentum) * rm + momentum * static_cast<float>(mean);
        rv = (1.0f - momentum) * rv + momentum * static_cast<float>(unbiased);
    }
    for (int s = 0; s < b; ++s) {
        out[static_cast<size_t>(s)] = Tensor(in[static_cast<size_t>(s)].shape);
        for (int c = 0; c < ch; ++c) {
            const float g = bn.gamma.at(static_cast<size_t>(c));
            const float beta = bn.beta.at(static_cast<size_t>(c));
            const float mu = st.mean[static_cast<size_t>(c)];
            const float is = st.inv_std[static_cast<size_t>(c)];
            const float* src = in[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            float* dst = out[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mu) * is * g + beta;
        }
    }
    return st;
}

// training-mode BN backward over the batch; fills parameter grads and
// rewrites the deltas in place
void bn_backward_batch(const BatchNorm2d& bn, const BnBatchState& st, const std::vector<Tensor>& in,
                       std::vector<Tensor>& delta, Tensor& dgamma, Tensor& dbeta) {
    const int ch = bn.gamma.dim(0);
    const int b = static_cast<int>(in.size());
    const size_t hw = static_cast<size_t>(in[0].dim(1)) * in[0].dim(2);
    const double count = static_cast<double>(b) * static_cast<double>(hw);

    for (int c = 0; c < ch; ++c) {
        const float mu = st.mean[static_cast<size_t>(c)];
        const float is = st.inv_std[static_cast<size_t>(c)];
        const float g = bn.gamma.at(static_cast<size_t>(c));
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int s = 0; s < b; ++s) {
            const float* x = in[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            const float* dy = delta[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) {
                sum_dy += dy[i];
                sum_dy_xhat += static_cast<double>(dy[i]) * ((x[i] - mu) * is);
            }
        }
        dgamma.at(static_cast<size_t>(c)) += static_cast<float>(sum_dy_xhat);
        dbeta.at(static_cast<size_t>(c)) += static_cast<float>(sum_dy);
        const float mean_dy = static_cast<float>(sum_dy / count);
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / count);
        for (int s = 0; s < b; ++s) {
            const float* x = in[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            float* dy = delta[static_cast<size_t>(s)].ptr() + static_cast<size_t>(c) * hw;
            for (size_t i = 0; i < hw; ++i) {
                const float xhat = (x[i] - mu) * is;
                dy[i] = g * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
}

// maximal runs of non-BN layers; BN layers are their own segments because they
// couple the batch
struct Segment {
    int first = 0;
    int last = 0; // exclusive
    bool is_bn = false;
};

std::vector<Segment> plan_segments(const Model& model) {
    std::vector<Segment> segs;
    const int n = static_cast<int>(model.layers.size());
    int i = 0;
    while (i < n) {
        if (std::holds_alternative<BatchNorm2d>(model.layers[static_cast<size_t>(i)])) {
            segs.push_back({i, i + 1, true});
            ++i;
        } else {
            int j = i;
            while (j < n && !std::holds_alternative<BatchNorm2d>(model.layers[static_cast<size_t>(j)]))
                ++j;
            segs.push_back({i, j, false});
            i = j;
        }
    }
    return segs;
}

} // namespace

TrainResult train_sgd(const Model& model_in, const std::vector<LabeledImage>& dataset,
                      const TrainConfig& cfg) {
    if (dataset.empty()) throw std::runtime_error("train_sgd: dataset is empty");
    if (cfg.lr < 0.0f) throw std::runtime_error("train_sgd: negative learning rate");
    if (cfg.batch_size < 1) throw std::runtime_error("train_sgd: batch size must be >= 1");

    TrainResult result;
    result.model = model_in;
    Model& model = result.model;
    model.validate();

    const int n = static_cast<int>(dataset.size());
    const int num_layers = static_cast<int>(model.layers.size());
    const auto segments = plan_segments(model);
    ThreadPool pool(std::max(1, cfg.workers));

    std::vector<int> trainable; // layer indices with parameters
    for (int li = 0; li < num_layers; ++li)
        if (std::holds_alternative<Conv2d>(model.layers[static_cast<size_t>(li)]) ||
            std::holds_alternative<Linear>(model.layers[static_cast<size_t>(li)]) ||
            std::holds_alternative<BatchNorm2d>(model.layers[static_cast<size_t>(li)]))
            trainable.push_back(li);

    // momentum buffers per trainable layer
    std::vector<Tensor> vel_w(static_cast<size_t>(num_layers));
    std::vector<Tensor> vel_b(static_cast<size_t>(num_layers));
    for (int li : trainable) {
        const Layer& layer = model.layers[static_cast<size_t>(li)];
        if (const auto* c = std::get_if<Conv2d>(&layer)) {
            vel_w[static_cast<size_t>(li)] = Tensor(c->weight.shape);
            vel_b[static_cast<size_t>(li)] = Tensor(c->bias.shape);
        } else if (const auto* l = std::get_if<Linear>(&layer)) {
            vel_w[static_cast<size_t>(li)] = Tensor(l->weight.shape);
            vel_b[static_cast<size_t>(li)] = Tensor(l->bias.shape);
        } else if (const auto* b = std::get_if<BatchNorm2d>(&layer)) {
            vel_w[static_cast<size_t>(li)] = Tensor(b->gamma.shape);
            vel_b[static_cast<size_t>(li)] = Tensor(b->beta.shape);
        }
    }

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        float lr = cfg.lr;
        if (cfg.lr_decay) {
            if (epoch >= (cfg.epochs * 6) / 10) lr *= 0.2f;
            if (epoch >= (cfg.epochs * 17) / 20) lr *= 0.2f;
        }
        Rng shuffle_rng = Rng::derive(cfg.seed, 0x65700000ULL + static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            const int j = shuffle_rng.uniform_int(i + 1);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }

        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, n - start);

            std::vector<std::vector<Tensor>> acts(static_cast<size_t>(num_layers) + 1);
            for (auto& v : acts) v.resize(static_cast<size_t>(b));
            pool.run(b, [&](int s) {
                const int idx = order[static_cast<size_t>(start + s)];
                Tensor px = dataset[static_cast<size_t>(idx)].pixels;
                if (cfg.augment_flip) {
                    Rng flip_rng = Rng::derive(cfg.seed, 0xf11b000000ULL +
                                                             static_cast<uint64_t>(epoch) * 1000003ULL +
                                                             static_cast<uint64_t>(idx));
                    if (flip_rng.uniform() < 0.5f) {
                        Tensor flipped(px.shape);
                        for (int c = 0; c < px.dim(0); ++c)
                            for (int y = 0; y < px.dim(1); ++y)
                                for (int x = 0; x < px.dim(2); ++x)
                                    flipped.at3(c, y, x) = px.at3(c, y, px.dim(2) - 1 - x);
                        px = std::move(flipped);
                    }
                }
                acts[0][static_cast<size_t>(s)] = std::move(px);
            });

            std::vector<BnBatchState> bn_states(static_cast<size_t>(num_layers));
            for (const Segment& seg : segments) {
                if (seg.is_bn) {
                    auto* bn = std::get_if<BatchNorm2d>(&model.layers[static_cast<size_t>(seg.first)]);
                    bn_states[static_cast<size_t>(seg.first)] =
                        bn_forward_batch(*bn, acts[static_cast<size_t>(seg.first)],
                                         acts[static_cast<size_t>(seg.first) + 1], 0.1f);
                } else {
                    pool.run(b, [&](int s) {
                        for (int li = seg.first; li < seg.last; ++li)
                            acts[static_cast<size_t>(li) + 1][static_cast<size_t>(s)] = layer_forward(
                                model.layers[static_cast<size_t>(li)],
                                acts[static_cast<size_t>(li)][static_cast<size_t>(s)]);
                    });
                }
            }

            // loss and logit gradients (mean cross-entropy over the batch)
            std::vector<Tensor> delta(static_cast<size_t>(b));
            std::vector<double> losses(static_cast<size_t>(b));
            pool.run(b, [&](int s) {
                const int idx = order[static_cast<size_t>(start + s)];
                const Tensor& logits = acts[static_cast<size_t>(num_layers)][static_cast<size_t>(s)];
                std::vector<float> lv(logits.data.begin(), logits.data.end());
                const auto p = softmax(lv);
                const int label = dataset[static_cast<size_t>(idx)].label;
                losses[static_cast<size_t>(s)] =
                    -std::log(std::max(1e-12, static_cast<double>(p[static_cast<size_t>(label)])));
                Tensor d(logits.shape);
                for (size_t c = 0; c < p.size(); ++c)
                    d.at(c) =
                        (p[c] - (static_cast<int>(c) == label ? 1.0f : 0.0f)) / static_cast<float>(b);
                delta[static_cast<size_t>(s)] = std::move(d);
            });
            for (double l : losses) epoch_loss += l / n;
            if (!std::isfinite(epoch_loss))
                throw std::runtime_error("train_sgd: training diverged (non-finite loss) at epoch " +
                                         std::to_string(epoch));

            // backward per segment, accumulating per-sample parameter grads
            std::vector<std::vector<ParamGrads>> psg(static_cast<size_t>(num_layers));
            for (int li : trainable)
                if (!std::holds_alternative<BatchNorm2d>(model.layers[static_cast<size_t>(li)]))
                    psg[static_cast<size_t>(li)].resize(static_cast<size_t>(b));
            std::vector<Tensor> dgamma(static_cast<size_t>(num_layers));
            std::vector<Tensor> dbeta(static_cast<size_t>(num_layers));

            for (auto seg = segments.rbegin(); seg != segments.rend(); ++seg) {
                if (seg->is_bn) {
                    const int li = seg->first;
                    const auto* bn = std::get_if<BatchNorm2d>(&model.layers[static_cast<size_t>(li)]);
                    dgamma[static_cast<size_t>(li)] = Tensor(bn->gamma.shape);
                    dbeta[static_cast<size_t>(li)] = Tensor(bn->beta.shape);
                    bn_backward_batch(*bn, bn_states[static_cast<size_t>(li)],
                                      acts[static_cast<size_t>(li)], delta,
                                      dgamma[static_cast<size_t>(li)], dbeta[static_cast<size_t>(li)]);
                } else {
                    pool.run(b, [&](int s) {
                        for (int li = seg->last - 1; li >= seg->first; --li) {
                            const Layer& layer = model.layers[static_cast<size_t>(li)];
                            const Tensor& input = acts[static_cast<size_t>(li)][static_cast<size_t>(s)];
                            Tensor& d = delta[static_cast<size_t>(s)];
                            if (!psg[static_cast<size_t>(li)].empty())
                                psg[static_cast<size_t>(li)][static_cast<size_t>(s)] =
                                    layer_param_grads(layer, input, d);
                            d = layer_backward_data(layer, input, d);
                        }
                    });
                }
            }

            // ordered reductions + momentum SGD update
            for (int li : trainable) {
                Layer& layer = model.layers[static_cast<size_t>(li)];
                Tensor gw, gb;
                if (std::holds_alternative<BatchNorm2d>(layer)) {
                    gw = std::move(dgamma[static_cast<size_t>(li)]);
                    gb = std::move(dbeta[static_cast<size_t>(li)]);
                } else {
                    auto& slots = psg[static_cast<size_t>(li)];
                    gw = Tensor(slots[0].weight.shape);
                    gb = Tensor(slots[0].bias.shape);
                    for (int s = 0; s < b; ++s) { // fixed reduction order
                        for (size_t k = 0; k < gw.numel(); ++k)
                            gw.at(k) += slots[static_cast<size_t>(s)].weight.at(k);
                        for (size_t k = 0; k < gb.numel(); ++k)
                            gb.at(k) += slots[static_cast<size_t>(s)].bias.at(k);
                    }
                }
                Tensor& vw = vel_w[static_cast<size_t>(li)];
                Tensor& vb = vel_b[static_cast<size_t>(li)];
                for (size_t k = 0; k < vw.numel(); ++k)
                    vw.at(k) = cfg.momentum * vw.at(k) + gw.at(k);
                for (size_t k = 0; k < vb.numel(); ++k)
                    vb.at(k) = cfg.momentum * vb.at(k) + gb.at(k);

                if (auto* c = std::get_if<Conv2d>(&layer)) {
                    for (size_t k = 0; k < c->weight.numel(); ++k)
                        c->weight.at(k) -= lr * vw.at(k);
                    if (cfg.train_bias)
                        for (size_t k = 0; k < c->bias.numel(); ++k)
                            c->bias.at(k) -= lr * vb.at(k);
                } else if (auto* l = std::get_if<Linear>(&layer)) {
                    for (size_t k = 0; k < l->weight.numel(); ++k)
                        l->weight.at(k) -= lr * vw.at(k);
                    if (cfg.train_bias)
                        for (size_t k = 0; k < l->bias.numel(); ++k)
                            l->bias.at(k) -= lr * vb.at(k);
                } else if (auto* bn = std::get_if<BatchNorm2d>(&layer)) {
                    for (size_t k = 0; k < bn->gamma.numel(); ++k)
                        bn->gamma.at(k) -= lr * vw.at(k);
                    for (size_t k = 0; k < bn->beta.numel(); ++k)
                        bn->beta.at(k) -= lr * vb.at(k);
                }
            }
        }
        result.epoch_loss.push_back(epoch_loss);
    }

    result.train_accuracy = model_accuracy(model, dataset, cfg.workers);
    return result;
}

float model_accuracy(const Model& model, const std::vector<LabeledImage>& dataset, int workers) {
    if (dataset.empty()) return 0.0f;
    std::vector<uint8_t> hit(dataset.size(), 0);
    parallel_for(static_cast<int>(dataset.size()), workers, [&](int i) {
        const Tensor logits = forward(model, dataset[static_cast<size_t>(i)].pixels, false).logits();
        int argmax = 0;
        for (size_t c = 1; c < logits.numel(); ++c)
            if (logits.at(c) > logits.at(static_cast<size_t>(argmax))) argmax = static_cast<int>(c);
        hit[static_cast<size_t>(i)] = argmax == dataset[static_cast<size_t>(i)].label ? 1 : 0;
    });
    size_t good = 0;
    for (uint8_t h : hit) good += h;
    return static_cast<float>(good) / static_cast<float>(dataset.size());
}

} // namespace attreval
