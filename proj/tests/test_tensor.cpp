#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <stdexcept>

#include "attreval/rng.hpp"
#include "attreval/tensor.hpp"

using namespace attreval;

TEST_CASE("tensor shape and flat layout") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    t.at3(1, 2, 3) = 7.0f;
    CHECK(t.data[23] == 7.0f);
    t.at3(0, 0, 1) = 3.0f;
    CHECK(t.data[1] == 3.0f);

    Tensor m({3, 2});
    m.at2(2, 1) = 5.0f;
    CHECK(m.data[5] == 5.0f);
}

TEST_CASE("tensor rejects non-positive dims") {
    CHECK_THROWS_AS(Tensor({2, 0, 3}), std::runtime_error);
    CHECK_THROWS_AS(Tensor({-1}), std::runtime_error);
}

TEST_CASE("reshape checks element count") {
    Tensor t({2, 6});
    CHECK(t.reshaped({3, 4}).shape == std::vector<int>{3, 4});
    CHECK_THROWS_AS(t.reshaped({5}), std::runtime_error);
}

TEST_CASE("finite check flags nan and inf") {
    Tensor t({4});
    CHECK(t.all_finite());
    t.at(2) = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(check_finite(t, "unit"), std::runtime_error);
}

TEST_CASE("rng streams are deterministic and distinct") {
    Rng a = Rng::derive(42, 7);
    Rng b = Rng::derive(42, 7);
    Rng c = Rng::derive(42, 8);
    bool all_equal = true, any_equal_cross = false;
    for (int i = 0; i < 64; ++i) {
        const uint64_t va = a.next_u64(), vb = b.next_u64(), vc = c.next_u64();
        all_equal = all_equal && va == vb;
        any_equal_cross = any_equal_cross || va == vc;
    }
    CHECK(all_equal);
    CHECK_FALSE(any_equal_cross);
}

TEST_CASE("rng uniform stays in range with sane mean") {
    Rng r(123);
    double sum = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const float v = r.uniform();
        REQUIRE(v >= 0.0f);
        REQUIRE(v < 1.0f);
        sum += v;
    }
    CHECK(sum / 10000.0 == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("rng gaussian has roughly unit variance") {
    Rng r(5);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = r.gaussian();
        sum += v;
        sq += v * v;
    }
    CHECK(sum / n == doctest::Approx(0.0).epsilon(0.05));
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.08));
}
