#include "doctest.h"

#include <sstream>

#include "semsim/ops.hpp"
#include "support/gradcheck.hpp"

using namespace semsim;
using semsim::testing::gradcheck;
using semsim::testing::probe;
using semsim::testing::random_weights;

namespace {

void check_values(const Tensor& t, std::initializer_list<double> expected, double tol = 0.0) {
    REQUIRE(t.size() == static_cast<Index>(expected.size()));
    Index i = 0;
    for (double e : expected) {
        CHECK(std::abs(t[i] - e) <= tol);
        ++i;
    }
}

}  // namespace

TEST_CASE("matmul identity and orthogonal rows") {
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
    check_values(matmul(eye, m), {1, 2, 3, 4});
    check_values(matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {0, 5})), {0});
}

TEST_CASE("matmul rejects mismatched inner dimensions and names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string what = e.what();
        CHECK(what.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        auto a = Tensor::randn({3, 4}, rng, 1.0, true);
        auto b = Tensor::randn({4, 2}, rng, 1.0, true);
        auto r = gradcheck([&] { return sum(matmul(a, b)); }, {a}, 1e-5);
        CHECK(r.rel_error <= 1e-3);
    }
}

TEST_CASE("softmax basics") {
    check_values(softmax(Tensor::from({2}, {0, 0}), 0), {0.5, 0.5});
    auto big = softmax(Tensor::from({2}, {1000, 0}), 0);
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);
    CHECK(std::isfinite(big[1]));
    auto s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
    CHECK(std::abs(s.values().sum() - 1.0) <= 1e-12);
    CHECK_THROWS_AS(softmax(Tensor::from({2}, {std::nan(""), 0}), 0), NumericError);
}

TEST_CASE("softmax is shift invariant and a simplex along the chosen axis") {
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        auto x = Tensor::randn({3, 5, 2}, rng, 3.0);
        const double c = rng.uniform(-50, 50);
        auto y = softmax(x, 1);
        auto y2 = softmax(add_scalar(x, c), 1);
        CHECK(((y.values() - y2.values()).abs().maxCoeff()) <= 1e-12);
        auto sums = sum_axis(y, 1);
        CHECK((sums.values() - 1.0).abs().maxCoeff() <= 1e-12);
        CHECK(y.values().minCoeff() > 0.0);
    }
}

TEST_CASE("conv2d scalar kernel and impulse response") {
    auto ones = Tensor::ones({1, 3, 3});
    auto k = Tensor::full({1, 1, 1, 1}, 2.0);
    auto out = conv2d(ones, k);
    CHECK(out.shape() == Shape{1, 3, 3});
    CHECK((out.values() == 2.0).all());

    auto impulse = Tensor::zeros({1, 5, 5});
    impulse.mutable_values()[2 * 5 + 2] = 1.0;
    auto kernel = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto resp = conv2d(impulse, kernel, nullptr, 1, 1);
    // Cross-correlation: the response around the impulse is the kernel flipped in both axes.
    const double expected[9] = {9, 8, 7, 6, 5, 4, 3, 2, 1};
    for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) CHECK(resp[(1 + dy) * 5 + (1 + dx)] == expected[dy * 3 + dx]);
}

TEST_CASE("conv2d output size rules") {
    auto x = Tensor::zeros({2, 8, 8});
    CHECK(conv2d(Tensor::zeros({2, 9, 9}), Tensor::zeros({3, 2, 3, 3}), nullptr, 2, 1).shape() ==
          Shape{3, 5, 5});
    CHECK(conv2d(x, Tensor::zeros({3, 2, 3, 3}), nullptr, 1, 1).shape() == Shape{3, 8, 8});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 2, 3, 3}), nullptr, 2, 1), DimensionError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 2, 2, 2})), ParameterError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 4, 3, 3})), DimensionError);
}

TEST_CASE("conv2d gradients (batched, strided, biased)") {
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = Tensor::randn({2, 2, 5, 5}, rng, 1.0, true);
        auto k = Tensor::randn({3, 2, 3, 3}, rng, 0.5, true);
        auto b = Tensor::randn({3}, rng, 0.5, true);
        const Index stride = rep % 2 ? 2 : 1;
        auto w = random_weights(stride == 2 ? 2 * 3 * 3 * 3 : 2 * 3 * 5 * 5, rng);
        auto r = gradcheck([&] { return probe(conv2d(x, k, &b, stride, 1), w); }, {x, k, b});
        CHECK(r.rel_error <= 1e-3);
    }
}

TEST_CASE("bilinear interpolation") {
    auto c = Tensor::full({2, 3, 5}, 7.0);
    CHECK(((bilinear_interpolate(c, 9, 2).values() - 7.0).abs() <= 1e-15).all());
    CHECK(((bilinear_interpolate(c, 1, 1).values() - 7.0).abs() <= 1e-15).all());

    Rng rng(2);
    auto x = Tensor::randn({2, 4, 6}, rng);
    CHECK((bilinear_interpolate(x, 4, 6).values() == x.values()).all());

    // [[0,1],[2,3]] is the plane v = 2r + c; half-pixel sampling of a 4x4
    // grid reads rows/cols at 0.25 and 0.75 for the centre cells.
    auto m = Tensor::from({1, 2, 2}, {0, 1, 2, 3});
    auto up = bilinear_interpolate(m, 4, 4);
    CHECK(up[1 * 4 + 1] == doctest::Approx(0.75));
    CHECK(up[1 * 4 + 2] == doctest::Approx(1.25));
    CHECK(up[2 * 4 + 1] == doctest::Approx(1.75));
    CHECK(up[2 * 4 + 2] == doctest::Approx(2.25));
    // Edges clamp to the border samples.
    CHECK(up[0] == doctest::Approx(0.0));
    CHECK(up[15] == doctest::Approx(3.0));

    CHECK_THROWS_AS(bilinear_interpolate(m, 0, 3), DimensionError);
}

TEST_CASE("bilinear gradients, up and down") {
    Rng rng(8);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = Tensor::randn({2, 4, 4}, rng, 1.0, true);
        const Index h = rep % 2 ? 8 : 2, w = rep % 3 ? 3 : 7;
        auto wt = random_weights(2 * h * w, rng);
        CHECK(gradcheck([&] { return probe(bilinear_interpolate(x, h, w), wt); }, {x}).rel_error <= 1e-3);
    }
}

TEST_CASE("channel dropout") {
    Rng rng(1);
    auto x = Tensor::randn({4, 3, 3}, rng);
    CHECK(channel_dropout(x, 0.0, rng).values().isApprox(x.values()));
    CHECK((channel_dropout(x, 0.7, rng, false).values() == x.values()).all());
    CHECK_THROWS_AS(channel_dropout(x, 1.0, rng), ParameterError);

    auto many = Tensor::ones({10000, 1, 1});
    Rng stream(42);
    auto y = channel_dropout(many, 0.5, stream);
    const double dropped = static_cast<double>((y.values() == 0.0).count()) / 10000.0;
    CHECK(dropped >= 0.48);
    CHECK(dropped <= 0.52);
    CHECK(((y.values() == 0.0) || (y.values() == 2.0)).all());

    Rng a(9), b(9);
    CHECK((channel_dropout(x, 0.5, a).values() == channel_dropout(x, 0.5, b).values()).all());
}

TEST_CASE("backward on linear and quadratic functionals") {
    Rng rng(4);
    auto x = Tensor::randn({3, 4}, rng, 1.0, true);
    backward(sum(x));
    CHECK((x.grad() == 1.0).all());
    x.zero_grad();
    backward(sum(mul(x, x)));
    CHECK((x.grad() - 2.0 * x.values()).abs().maxCoeff() == 0.0);
    // A second call accumulates.
    backward(sum(mul(x, x)));
    CHECK((x.grad() - 4.0 * x.values()).abs().maxCoeff() <= 1e-15);
    CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("replay visits each operation once in reverse execution order") {
    Rng rng(6);
    auto x = Tensor::randn({2, 2}, rng, 1.0, true);
    auto y = relu(x);
    auto z = add(y, y);
    auto loss = sum(mul(z, x));
    auto rec = replay_order(loss);
    REQUIRE(rec.size() == 4);
    for (std::size_t i = 1; i < rec.size(); ++i) CHECK(rec[i - 1].seq > rec[i].seq);
    CHECK(rec.front().op == "sum");
    CHECK(rec.back().op == "relu");
}

TEST_CASE("no-grad guard records nothing") {
    auto x = Tensor::ones({2}, true);
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("elementwise, reduction and shape ops pass finite-difference checks") {
    Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        auto a = Tensor::randn({3, 4}, rng, 1.0, true);
        auto b = Tensor::uniform({3, 4}, rng, 0.5, 2.0, true);
        auto w = random_weights(12, rng);
        CHECK(gradcheck([&] { return probe(div(mul(a, b), b), w); }, {a, b}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(softmax(a, 1), w); }, {a}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(l2_normalize(a, 0), w); }, {a}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(normalize_sum(b, 1), w); }, {b}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(gelu(a), w); }, {a}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(log_clamped(b), w); }, {b}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(exp(a), w); }, {a}).rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(permute(reshape(a, {2, 3, 2}), {2, 0, 1}), w); }, {a})
                  .rel_error <= 1e-3);
        auto w8 = random_weights(8, rng);
        CHECK(gradcheck([&] { return probe(sum_axis(reshape(a, {2, 2, 3}), 2), w8.head(4)); }, {a})
                  .rel_error <= 1e-3);
        CHECK(gradcheck([&] { return probe(narrow(a, 1, 1, 2), w8.head(6)); }, {a}).rel_error <= 1e-3);
        auto w24 = random_weights(24, rng);
        CHECK(gradcheck([&] { return probe(concat({a, b}, 1), w24); }, {a, b}).rel_error <= 1e-3);
    }
}

TEST_CASE("normalization layers pass finite-difference checks") {
    Rng rng(31);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = Tensor::randn({2, 3, 4, 4}, rng, 1.0, true);
        auto g = Tensor::uniform({3}, rng, 0.5, 1.5, true);
        auto b = Tensor::randn({3}, rng, 0.3, true);
        auto w = random_weights(x.size(), rng);
        BatchNormStats stats(3);
        CHECK(gradcheck([&] { return probe(batch_norm(x, g, b, stats, true), w); }, {x, g, b}).rel_error <=
              1e-3);
        CHECK(gradcheck([&] { return probe(batch_norm(x, g, b, stats, false), w); }, {x, g, b})
                  .rel_error <= 1e-3);

        auto t = Tensor::randn({5, 6}, rng, 1.0, true);
        auto lg = Tensor::uniform({6}, rng, 0.5, 1.5, true);
        auto lb = Tensor::randn({6}, rng, 0.3, true);
        auto wt = random_weights(30, rng);
        CHECK(gradcheck([&] { return probe(layer_norm(t, lg, lb), wt); }, {t, lg, lb}).rel_error <= 1e-3);
    }
}

TEST_CASE("batch norm running statistics use momentum 0.1") {
    auto x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    BatchNormStats stats(1);
    auto y = batch_norm(x, Tensor::ones({1}), Tensor::zeros({1}), stats, true);
    CHECK(stats.running_mean[0] == doctest::Approx(0.25));
    // unbiased variance of {1,2,3,4} is 5/3
    CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
    CHECK(std::abs(y.values().sum()) <= 1e-12);
}

TEST_CASE("linear, bmm and maxpool gradients") {
    Rng rng(41);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = Tensor::randn({4, 3}, rng, 1.0, true);
        auto wt = Tensor::randn({5, 3}, rng, 1.0, true);
        auto bias = Tensor::randn({5}, rng, 1.0, true);
        auto w = random_weights(20, rng);
        CHECK(gradcheck([&] { return probe(linear(x, wt, bias), w); }, {x, wt, bias}).rel_error <= 1e-3);

        auto a = Tensor::randn({2, 3, 4}, rng, 1.0, true);
        auto b = Tensor::randn({2, 4, 2}, rng, 1.0, true);
        auto w2 = random_weights(12, rng);
        CHECK(gradcheck([&] { return probe(bmm(a, b), w2); }, {a, b}).rel_error <= 1e-3);

        auto img = Tensor::randn({2, 4, 4}, rng, 1.0, true);
        auto w3 = random_weights(8, rng);
        CHECK(gradcheck([&] { return probe(maxpool2d(img), w3); }, {img}).rel_error <= 1e-3);
    }
}

TEST_CASE("SST1 round trip and rejection") {
    Rng rng(7);
    auto t = Tensor::randn({2, 3, 4}, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "SST1");
    CHECK(static_cast<unsigned char>(bytes[4]) == 3);
    CHECK(bytes.size() == 4 + 4 + 3 * 4 + 24 * 8);
    auto back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    CHECK((back.values() == t.values()).all());

    std::stringstream bad("SST2\x01\x00\x00\x00");
    CHECK_THROWS_AS(read_tensor(bad), FormatError);
}

TEST_CASE("rng streams are deterministic and splits are independent of parent use") {
    Rng a(5), b(5);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(5);
    auto child1 = c.split("dropout");
    c.next_u64();
    auto child2 = c.split("dropout");
    CHECK(child1.next_u64() == child2.next_u64());
    CHECK(Rng(5).split(1).next_u64() != Rng(5).split(2).next_u64());
}
