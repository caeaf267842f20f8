#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attreval/data.hpp"
#include "attreval/model.hpp"
#include "attreval/train.hpp"
#include "oracles.hpp"

using namespace attreval;
using oracle::random_tensor;

namespace {

// two linearly separable blobs in 2-d, rendered as 1x1x2 "images"
std::vector<LabeledImage> separable_blobs(int count, uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledImage> out;
    for (int i = 0; i < count; ++i) {
        const int label = i % 2;
        LabeledImage img;
        img.label = label;
        img.id = i;
        img.pixels = Tensor({2, 1, 1});
        const float cx = label == 0 ? -1.0f : 1.0f;
        img.pixels.at3(0, 0, 0) = cx + rng.uniform(-0.3f, 0.3f);
        img.pixels.at3(1, 0, 0) = -cx + rng.uniform(-0.3f, 0.3f);
        out.push_back(std::move(img));
    }
    return out;
}

Model small_mlp(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {2, 1, 1};
    m.layers.push_back(Flatten{});
    Linear l1;
    l1.weight = random_tensor({8, 2}, rng, -0.5f, 0.5f);
    l1.bias = Tensor({8});
    m.layers.push_back(l1);
    m.layers.push_back(ReLU{});
    Linear l2;
    l2.weight = random_tensor({2, 8}, rng, -0.5f, 0.5f);
    l2.bias = Tensor({2});
    m.layers.push_back(l2);
    m.head_start = 1;
    m.validate();
    return m;
}

} // namespace

TEST_CASE("lr=0 leaves weights unchanged") {
    Model m = small_mlp(1);
    auto data = separable_blobs(16, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.0f;
    cfg.batch_size = 4;
    cfg.seed = 3;
    auto result = train_sgd(m, data, cfg);
    const Linear& before = std::get<Linear>(m.layers[1]);
    const Linear& after = std::get<Linear>(result.model.layers[1]);
    CHECK(before.weight.data == after.weight.data);
    CHECK(before.bias.data == after.bias.data);
}

TEST_CASE("separable two-class set reaches >=0.99 accuracy within 20 epochs") {
    Model m = small_mlp(4);
    auto data = separable_blobs(200, 5);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.lr = 0.1f;
    cfg.batch_size = 16;
    cfg.seed = 6;
    auto result = train_sgd(m, data, cfg);
    CHECK(result.train_accuracy >= 0.99f);
}

TEST_CASE("single gradient step matches the hand-computed update") {
    // model: x (scalar) -> linear(1->2), zero bias. Mean CE over a batch of one.
    // Hand derivation: p = softmax(Wx), dL/dW_c = (p_c - [c==y]) * x
    Model m;
    m.input_shape = {1};
    Linear l;
    l.weight = Tensor({2, 1});
    l.weight.at2(0, 0) = 0.7f;
    l.weight.at2(1, 0) = -0.4f;
    l.bias = Tensor({2});
    m.layers.push_back(l);
    m.head_start = 0;
    m.validate();

    LabeledImage img;
    img.pixels = Tensor({1});
    img.pixels.at(0) = 0.5f;
    img.label = 1;
    img.id = 0;

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.lr = 0.25f;
    cfg.batch_size = 1;
    cfg.seed = 0;
    cfg.train_bias = false;
    auto result = train_sgd(m, {img}, cfg);

    const double z0 = 0.7 * 0.5, z1 = -0.4 * 0.5;
    const double e0 = std::exp(z0), e1 = std::exp(z1);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    const double w0_expected = 0.7 - 0.25 * (p0 - 0.0) * 0.5;
    const double w1_expected = -0.4 - 0.25 * (p1 - 1.0) * 0.5;

    const Linear& trained = std::get<Linear>(result.model.layers[0]);
    CHECK(trained.weight.at2(0, 0) == doctest::Approx(w0_expected).epsilon(1e-5));
    CHECK(trained.weight.at2(1, 0) == doctest::Approx(w1_expected).epsilon(1e-5));
}

TEST_CASE("training is bit-deterministic across worker counts") {
    auto data = gen_synthetic(10, 32, 64, 9);
    Model m = make_preset("tinyvgg-bn", 10);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.lr = 0.05f;
    cfg.batch_size = 16;
    cfg.seed = 11;

    cfg.workers = 1;
    auto r1 = train_sgd(m, data, cfg);
    cfg.workers = 8;
    auto r8 = train_sgd(m, data, cfg);
    REQUIRE(r1.epoch_loss == r8.epoch_loss);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        if (const auto* c = std::get_if<Conv2d>(&r1.model.layers[i])) {
            const auto& c8 = std::get<Conv2d>(r8.model.layers[i]);
            REQUIRE(c->weight.data == c8.weight.data);
            REQUIRE(c->bias.data == c8.bias.data);
        }
        if (const auto* b = std::get_if<BatchNorm2d>(&r1.model.layers[i])) {
            const auto& b8 = std::get<BatchNorm2d>(r8.model.layers[i]);
            REQUIRE(b->gamma.data == b8.gamma.data);
            REQUIRE(b->running_mean.data == b8.running_mean.data);
            REQUIRE(b->running_var.data == b8.running_var.data);
        }
    }
}

TEST_CASE("bias-free training keeps biases at zero") {
    auto data = separable_blobs(32, 12);
    Model m = small_mlp(13);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.lr = 0.1f;
    cfg.batch_size = 8;
    cfg.seed = 14;
    cfg.train_bias = false;
    auto result = train_sgd(m, data, cfg);
    for (const auto& layer : result.model.layers) {
        if (const auto* l = std::get_if<Linear>(&layer))
            for (float b : l->bias.data) REQUIRE(b == 0.0f);
    }
}

TEST_CASE("empty dataset and negative lr are rejected") {
    Model m = small_mlp(15);
    TrainConfig cfg;
    CHECK_THROWS_AS(train_sgd(m, {}, cfg), std::runtime_error);
    cfg.lr = -0.1f;
    CHECK_THROWS_AS(train_sgd(m, separable_blobs(4, 1), cfg), std::runtime_error);
}
