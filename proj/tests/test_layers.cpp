#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "attreval/layers.hpp"
#include "oracles.hpp"

using namespace attreval;
using oracle::avoid_kinks;
using oracle::finite_diff;
using oracle::max_rel_error;
using oracle::random_tensor;

namespace {

// scalar objective: inner product of the double-precision reference forward
// with a fixed cotangent. Differencing through the f64 reference keeps FD
// noise far below the 1e-3 gate, so the comparison isolates the f32 backward.
double weighted_output(const Layer& layer, const Tensor& in, const Tensor& cotangent) {
    const oracle::DTensor out = oracle::dlayer_forward(layer, oracle::to_d(in));
    double acc = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * cotangent.at(i);
    return acc;
}

std::vector<double> analytic_input_grad(const Layer& layer, const Tensor& in, const Tensor& cotangent) {
    const Tensor g = layer_backward_data(layer, in, cotangent);
    return {g.data.begin(), g.data.end()};
}

void check_input_gradient(const Layer& layer, Tensor in, uint64_t seed, double tol = 1e-3) {
    Rng rng(seed);
    const Tensor out_shape_probe = layer_forward(layer, in);
    Tensor cot = random_tensor(out_shape_probe.shape, rng);
    const auto analytic = analytic_input_grad(layer, in, cot);
    const auto fd = finite_diff(in, [&] { return weighted_output(layer, in, cot); });
    CHECK(max_rel_error(analytic, fd) < tol);
}

} // namespace

TEST_CASE("conv2d forward matches index-loop reference") {
    Rng rng(11);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}, std::pair{2, 0}}) {
        Conv2d c;
        c.weight = random_tensor({4, 3, 3, 3}, rng);
        c.bias = random_tensor({4}, rng);
        c.stride = stride;
        c.padding = pad;
        const Tensor in = random_tensor({3, 9, 8}, rng);
        const Tensor got = layer_forward(Layer{c}, in);
        const Tensor want = oracle::ref_conv2d(in, c.weight, c.bias, stride, pad);
        REQUIRE(got.shape == want.shape);
        for (size_t i = 0; i < got.numel(); ++i)
            CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-5));
    }
}

TEST_CASE("1x1 identity conv reproduces its input") {
    Conv2d c;
    c.weight = Tensor({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) c.weight.at4(i, i, 0, 0) = 1.0f;
    c.bias = Tensor({3});
    Rng rng(3);
    const Tensor in = random_tensor({3, 5, 5}, rng);
    const Tensor out = layer_forward(Layer{c}, in);
    REQUIRE(out.shape == in.shape);
    for (size_t i = 0; i < in.numel(); ++i) CHECK(out.at(i) == in.at(i));
}

TEST_CASE("relu forward on the spec example") {
    Tensor in({3});
    in.at(0) = -1.0f;
    in.at(1) = 0.0f;
    in.at(2) = 2.0f;
    const Tensor out = layer_forward(Layer{ReLU{}}, in);
    CHECK(out.at(0) == 0.0f);
    CHECK(out.at(1) == 0.0f);
    CHECK(out.at(2) == 2.0f);
}

TEST_CASE("relu gradient is zero at negative preactivations") {
    Tensor in({2});
    in.at(0) = -0.5f;
    in.at(1) = 0.5f;
    Tensor got({2});
    got.at(0) = 1.0f;
    got.at(1) = 1.0f;
    const Tensor g = layer_backward_data(Layer{ReLU{}}, in, got);
    CHECK(g.at(0) == 0.0f);
    CHECK(g.at(1) == 1.0f);
}

TEST_CASE("guided relu passes gradient only where input>0 and grad>0") {
    Tensor in({4});
    Tensor got({4});
    // (input, grad): (+,+) pass, (+,-) block, (-,+) block, (-,-) block
    in.at(0) = 1.0f;
    got.at(0) = 2.0f;
    in.at(1) = 1.0f;
    got.at(1) = -2.0f;
    in.at(2) = -1.0f;
    got.at(2) = 2.0f;
    in.at(3) = -1.0f;
    got.at(3) = -2.0f;
    const Tensor g = layer_backward_data(Layer{ReLU{}}, in, got, ReluMode::Guided);
    CHECK(g.at(0) == 2.0f);
    CHECK(g.at(1) == 0.0f);
    CHECK(g.at(2) == 0.0f);
    CHECK(g.at(3) == 0.0f);
}

TEST_CASE("maxpool forward matches reference and ties go to first index") {
    Rng rng(17);
    Tensor in = random_tensor({2, 6, 6}, rng);
    const Tensor got = layer_forward(Layer{MaxPool2d{2, 2}}, in);
    const Tensor want = oracle::ref_maxpool(in, 2, 2);
    for (size_t i = 0; i < got.numel(); ++i) CHECK(got.at(i) == want.at(i));

    // tie: all equal values in a window route gradient to the first element
    Tensor flat({1, 2, 2}, 3.0f);
    Tensor cot({1, 1, 1}, 1.0f);
    const Tensor g = layer_backward_data(Layer{MaxPool2d{2, 2}}, flat, cot);
    CHECK(g.at3(0, 0, 0) == 1.0f);
    CHECK(g.at3(0, 0, 1) == 0.0f);
    CHECK(g.at3(0, 1, 0) == 0.0f);
    CHECK(g.at3(0, 1, 1) == 0.0f);
}

TEST_CASE("finite-difference gradient checks per layer kind") {
    Rng rng(99);

    SUBCASE("conv2d stride 1 pad 1") {
        Conv2d c;
        c.weight = random_tensor({4, 3, 3, 3}, rng);
        c.bias = random_tensor({4}, rng);
        c.stride = 1;
        c.padding = 1;
        check_input_gradient(Layer{c}, random_tensor({3, 6, 6}, rng), 1);
    }
    SUBCASE("conv2d stride 2 pad 0") {
        Conv2d c;
        c.weight = random_tensor({3, 2, 3, 3}, rng);
        c.bias = random_tensor({3}, rng);
        c.stride = 2;
        c.padding = 0;
        check_input_gradient(Layer{c}, random_tensor({2, 7, 7}, rng), 2);
    }
    SUBCASE("linear") {
        Linear l;
        l.weight = random_tensor({5, 8}, rng);
        l.bias = random_tensor({5}, rng);
        check_input_gradient(Layer{l}, random_tensor({8}, rng), 3);
    }
    SUBCASE("relu") {
        Tensor in = random_tensor({3, 4, 4}, rng);
        avoid_kinks(in);
        check_input_gradient(Layer{ReLU{}}, in, 4);
    }
    SUBCASE("maxpool") {
        Tensor in = random_tensor({2, 6, 6}, rng);
        avoid_kinks(in); // also keeps window maxima separated generically
        check_input_gradient(Layer{MaxPool2d{2, 2}}, in, 5);
    }
    SUBCASE("avgpool") { check_input_gradient(Layer{AvgPool2d{2, 2}}, random_tensor({2, 6, 6}, rng), 6); }
    SUBCASE("globalavgpool") {
        check_input_gradient(Layer{GlobalAvgPool{}}, random_tensor({3, 4, 4}, rng), 7);
    }
    SUBCASE("batchnorm inference") {
        BatchNorm2d b;
        b.gamma = random_tensor({3}, rng, 0.5f, 1.5f);
        b.beta = random_tensor({3}, rng);
        b.running_mean = random_tensor({3}, rng);
        b.running_var = random_tensor({3}, rng, 0.2f, 1.2f);
        check_input_gradient(Layer{b}, random_tensor({3, 4, 4}, rng), 8);
    }
    SUBCASE("flatten") { check_input_gradient(Layer{Flatten{}}, random_tensor({2, 3, 3}, rng), 9); }
}

TEST_CASE("finite-difference checks for conv and linear parameter gradients") {
    Rng rng(321);

    SUBCASE("conv weights and bias") {
        Conv2d c;
        c.weight = random_tensor({3, 2, 3, 3}, rng);
        c.bias = random_tensor({3}, rng);
        c.stride = 1;
        c.padding = 1;
        const Tensor in = random_tensor({2, 5, 5}, rng);
        Layer layer{c};
        Tensor probe = layer_forward(layer, in);
        const Tensor cot = random_tensor(probe.shape, rng);
        const ParamGrads g = layer_param_grads(layer, in, cot);

        Conv2d& mutable_conv = std::get<Conv2d>(layer);
        auto loss = [&] { return weighted_output(layer, in, cot); };
        const auto fd_w = finite_diff(mutable_conv.weight, loss);
        const auto fd_b = finite_diff(mutable_conv.bias, loss);
        CHECK(max_rel_error({g.weight.data.begin(), g.weight.data.end()}, fd_w) < 1e-3);
        CHECK(max_rel_error({g.bias.data.begin(), g.bias.data.end()}, fd_b) < 1e-3);
    }
    SUBCASE("linear weights and bias") {
        Linear l;
        l.weight = random_tensor({4, 6}, rng);
        l.bias = random_tensor({4}, rng);
        const Tensor in = random_tensor({6}, rng);
        Layer layer{l};
        const Tensor cot = random_tensor({4}, rng);
        const ParamGrads g = layer_param_grads(layer, in, cot);

        Linear& ml = std::get<Linear>(layer);
        auto loss = [&] { return weighted_output(layer, in, cot); };
        const auto fd_w = finite_diff(ml.weight, loss);
        const auto fd_b = finite_diff(ml.bias, loss);
        CHECK(max_rel_error({g.weight.data.begin(), g.weight.data.end()}, fd_w) < 1e-3);
        CHECK(max_rel_error({g.bias.data.begin(), g.bias.data.end()}, fd_b) < 1e-3);
    }
}

TEST_CASE("shape inference rejects mismatched inputs with the layer named") {
    Conv2d c;
    c.weight = Tensor({4, 3, 3, 3});
    c.bias = Tensor({4});
    try {
        layer_output_shape(Layer{c}, {2, 8, 8});
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("conv2d") != std::string::npos);
        CHECK(std::string(e.what()).find("channels") != std::string::npos);
    }
    Linear l;
    l.weight = Tensor({2, 10});
    l.bias = Tensor({2});
    CHECK_THROWS_AS(layer_output_shape(Layer{l}, {12}), std::runtime_error);
}
