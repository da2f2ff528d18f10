#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "semsim/segnet.hpp"
#include "support/gradcheck.hpp"

using namespace semsim;

namespace {

Tensor random_images(Index n, Index h, Index w, Rng& rng) { return Tensor::randn({n, 1, h, w}, rng); }

}  // namespace

TEST_CASE("encoder stage shapes follow the channel ladder") {
    Rng rng(1);
    UNet net(UNetConfig{}, rng);
    Rng data(2);
    auto out = net.encode(Tensor::randn({1, 32, 32}, data), Mode::eval());
    CHECK(out.stages[0].shape() == Shape{8, 32, 32});
    CHECK(out.stages[1].shape() == Shape{16, 16, 16});
    CHECK(out.stages[2].shape() == Shape{32, 8, 8});
    CHECK(out.stages[3].shape() == Shape{64, 4, 4});

    auto batched = net.encode(random_images(3, 16, 24, data), Mode::eval());
    CHECK(batched.stages[3].shape() == Shape{3, 64, 2, 3});
}

TEST_CASE("encoder rejects sizes not divisible by 8") {
    Rng rng(1);
    UNet net(UNetConfig{}, rng);
    CHECK_THROWS_AS(net.encode(Tensor::zeros({1, 20, 32}), Mode::eval()), DimensionError);
}

TEST_CASE("zero input gives zero stage-1 features") {
    Rng rng(3);
    UNet net(UNetConfig{}, rng);
    for (Mode mode : {Mode::eval(), Mode::weak()}) {
        auto out = net.encode(Tensor::zeros({2, 1, 32, 32}), mode);
        CHECK(out.stages[0].values().abs().maxCoeff() == 0.0);
    }
}

TEST_CASE("eval mode is deterministic and leaves running statistics alone") {
    Rng rng(4);
    UNet net(UNetConfig{}, rng);
    Rng data(5);
    auto x = random_images(2, 32, 32, data);
    ParamSet set;
    net.collect(set, "net");
    const TensorMap before = set.to_tensor_map();
    auto a = net.decode(net.encode(x, Mode::eval()), Mode::eval());
    auto b = net.decode(net.encode(x, Mode::eval()), Mode::eval());
    CHECK((a.values() == b.values()).all());
    const TensorMap after = set.to_tensor_map();
    for (const auto& [name, t] : before) CHECK((t.values() == after.at(name).values()).all());
}

TEST_CASE("decoder output is a probability field") {
    Rng rng(6);
    UNet net(UNetConfig{}, rng);
    Rng data(7);
    auto p = net.decode(net.encode(random_images(2, 32, 32, data), Mode::weak()), Mode::weak());
    REQUIRE(p.shape() == Shape{2, 4, 32, 32});
    CHECK(p.values().minCoeff() >= 0.0);
    const Index plane = 32 * 32;
    double worst = 0.0;
    for (Index n = 0; n < 2; ++n)
        for (Index k = 0; k < plane; ++k) {
            double s = 0.0;
            for (Index c = 0; c < 4; ++c) s += p[(n * 4 + c) * plane + k];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    CHECK(worst <= 1e-9);

    auto single = net.decode(net.encode(Tensor::randn({1, 32, 32}, data), Mode::eval()), Mode::eval());
    CHECK(single.shape() == Shape{4, 32, 32});
}

TEST_CASE("decoder rejects features with the wrong channel count") {
    Rng rng(8);
    UNet net(UNetConfig{}, rng);
    Rng data(9);
    auto f = net.encode(Tensor::randn({1, 32, 32}, data), Mode::eval());
    f.stages[2] = Tensor::zeros({16, 8, 8});
    CHECK_THROWS_AS(net.decode(f, Mode::eval()), DimensionError);
}

TEST_CASE("dice loss on the decoder output reaches stage-1 kernels") {
    Rng rng(10);
    UNet net(UNetConfig{}, rng);
    Rng data(11);
    Rng drop = data.split("dropout");
    auto p = net.decode(net.encode(random_images(2, 32, 32, data), Mode::train(), &drop), Mode::train());
    Array target = Array::Zero(p.size());
    for (Index i = 0; i < target.size(); i += 4) target[i] = 1.0;
    Tensor inter = sum(mul_const(p, target));
    Tensor loss = add_scalar(scale(div(inter, add_scalar(sum(p), target.sum())), -2.0), 1.0);
    backward(loss);
    ParamSet set;
    net.collect(set, "net");
    int checked = 0;
    for (const auto& ref : set.params) {
        if (ref.name.rfind("net.down1.0.weight", 0) == 0) {
            REQUIRE(ref.tensor.has_grad());
            CHECK(ref.tensor.grad().abs().maxCoeff() > 0.0);
            ++checked;
        }
    }
    CHECK(checked == 1);
}

TEST_CASE("training mode drops deepest-stage channels only") {
    Rng rng(12);
    UNet net(UNetConfig{}, rng);
    Rng data(13);
    auto x = random_images(1, 32, 32, data);
    Rng drop(99);
    auto train = net.encode(x, Mode::train(), &drop);
    auto weak = net.encode(x, Mode::weak());
    CHECK((train.stages[0].values() == weak.stages[0].values()).all());
    const auto& f4 = train.stages[3];
    int zeroed = 0;
    for (Index c = 0; c < 64; ++c) {
        bool all_zero = true, any_scaled = false;
        for (Index k = 0; k < 16; ++k) {
            const double v = f4[c * 16 + k], w = weak.stages[3][c * 16 + k];
            if (v != 0.0) all_zero = false;
            if (v != 0.0 && std::abs(v - 2.0 * w) > 1e-12) any_scaled = true;
        }
        CHECK_FALSE(any_scaled);
        zeroed += all_zero;
    }
    CHECK(zeroed > 0);
    CHECK(zeroed < 64);
    CHECK_THROWS_AS(net.encode(x, Mode::train()), ContractError);
}

TEST_CASE("parameter count of the default configuration") {
    Rng rng(14);
    UNet net(UNetConfig{}, rng);
    ParamSet set;
    net.collect(set, "net");
    CHECK(set.parameter_count() <= 300000);
    for (const auto& p : set.params) CHECK(p.tensor.requires_grad());
}

TEST_CASE("msa block with zeroed residual branches is the identity") {
    Rng rng(15);
    MsaParams params(16, 4, 4, rng);
    params.zero_residual_branches();
    auto tokens = Tensor::randn({7, 16}, rng);
    auto out = msa_block(tokens, params);
    CHECK((out.values() == tokens.values()).all());
}

TEST_CASE("msa attention weights") {
    Rng rng(16);
    MsaParams params(8, 4, 4, rng);
    Tensor attention;
    msa_block(Tensor::randn({1, 8}, rng), params, &attention);
    REQUIRE(attention.shape() == Shape{4, 1, 1});
    for (Index i = 0; i < 4; ++i) CHECK(attention[i] == 1.0);

    msa_block(Tensor::randn({3, 9, 8}, rng), params, &attention);
    REQUIRE(attention.shape() == Shape{12, 9, 9});
    double worst = 0.0;
    for (Index r = 0; r < 12 * 9; ++r) {
        double s = 0.0;
        for (Index k = 0; k < 9; ++k) s += attention[r * 9 + k];
        worst = std::max(worst, std::abs(s - 1.0));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("msa block is permutation equivariant") {
    Rng rng(17);
    MsaParams params(8, 4, 4, rng);
    const Index len = 6;
    auto tokens = Tensor::randn({len, 8}, rng);
    std::vector<Index> perm{3, 0, 5, 1, 4, 2};
    std::vector<Index> index;
    for (Index i : perm)
        for (Index d = 0; d < 8; ++d) index.push_back(i * 8 + d);
    auto permuted_in = gather(tokens, index, {len, 8});
    auto a = gather(msa_block(tokens, params), index, {len, 8});
    auto b = msa_block(permuted_in, params);
    CHECK((a.values() - b.values()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("msa block rejects dims not divisible by heads") {
    Rng rng(18);
    CHECK_THROWS_AS(MsaParams(10, 4, 4, rng), ParameterError);
    MsaParams params(8, 4, 4, rng);
    params.heads = 3;
    CHECK_THROWS_AS(msa_block(Tensor::zeros({2, 8}), params), ParameterError);
}

TEST_CASE("msa block gradients") {
    Rng rng(19);
    MsaParams params(8, 2, 2, rng);
    auto tokens = Tensor::randn({2, 3, 8}, rng, 1.0, true);
    auto w = semsim::testing::random_weights(tokens.size(), rng);
    ParamSet set;
    params.collect(set, "msa");
    std::vector<Tensor> leaves{tokens};
    for (const auto& p : set.params) leaves.push_back(p.tensor);
    auto r = semsim::testing::gradcheck([&] { return semsim::testing::probe(msa_block(tokens, params), w); },
                                       leaves);
    CHECK(r.rel_error <= 1e-3);
    CHECK(r.analytic_norm > 0.0);
}

TEST_CASE("checkpoint map round trip restores parameters and buffers") {
    Rng rng(20);
    UNet a(UNetConfig{}, rng);
    Rng data(21);
    Rng drop(1);
    a.encode(random_images(2, 32, 32, data), Mode::train(), &drop);  // moves running stats
    ParamSet sa;
    a.collect(sa, "net");
    Rng other(22);
    UNet b(UNetConfig{}, other);
    ParamSet sb;
    b.collect(sb, "net");
    sb.load(sa.to_tensor_map());
    auto x = random_images(1, 32, 32, data);
    auto pa = a.decode(a.encode(x, Mode::eval()), Mode::eval());
    auto pb = b.decode(b.encode(x, Mode::eval()), Mode::eval());
    CHECK((pa.values() == pb.values()).all());

    TensorMap broken = sa.to_tensor_map();
    broken.erase("net.head.bias");
    CHECK_THROWS_AS(sb.load(broken), FormatError);
}
