#include "doctest.h"

#include <cmath>

#include "semsim/sfm.hpp"
#include "support/gradcheck.hpp"

using namespace semsim;

namespace {

std::array<Tensor, 3> random_maps(Index b, Index d, Index h, Index w, Rng& rng) {
    return {Tensor::randn({b, d, h, w}, rng), Tensor::randn({b, d, h / 2, w / 2}, rng),
            Tensor::randn({b, d, h / 4, w / 4}, rng)};
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && (a.values() == b.values()).all();
}

}  // namespace

TEST_CASE("patch matching window counts") {
    Rng rng(1);
    auto maps = random_maps(1, 5, 8, 8, rng);
    auto seq = patch_match(maps, 2);
    CHECK(seq.tokens.shape() == Shape{4, 21, 5});
    CHECK(seq.layout.counts == std::array<Index, 3>{16, 4, 1});

    auto whole = patch_match(maps, 1);
    CHECK(whole.tokens.shape() == Shape{1, 64 + 16 + 4, 5});
}

TEST_CASE("window tokens come from the same image region at every scale") {
    // Tag every position with its coordinates so the contents can be checked.
    const Index h = 8, w = 8, s = 2;
    std::array<Tensor, 3> maps;
    for (int k = 0; k < 3; ++k) {
        const Index hk = h >> k, wk = w >> k;
        Array v(2 * hk * wk);
        for (Index y = 0; y < hk; ++y)
            for (Index x = 0; x < wk; ++x) {
                v[y * wk + x] = (y + 0.5) * (1 << k);
                v[hk * wk + y * wk + x] = (x + 0.5) * (1 << k);
            }
        maps[k] = Tensor({2, hk, wk}, v);
    }
    auto seq = patch_match(maps, s);
    const Index len = seq.layout.length();
    for (Index g = 0; g < s * s; ++g) {
        const double y0 = (g / s) * (h / s), x0 = (g % s) * (w / s);
        for (Index t = 0; t < len; ++t) {
            const double y = seq.tokens[(g * len + t) * 2], x = seq.tokens[(g * len + t) * 2 + 1];
            CHECK(y > y0);
            CHECK(y < y0 + h / s);
            CHECK(x > x0);
            CHECK(x < x0 + w / s);
        }
    }
}

TEST_CASE("split after match is bit-exact") {
    Rng rng(2);
    for (Index s : {1, 2, 4}) {
        auto maps = random_maps(3, 4, 16, 16, rng);
        auto back = scale_split(patch_match(maps, s));
        for (int k = 0; k < 3; ++k) CHECK(bit_equal(back[k], maps[k]));
    }
    std::array<Tensor, 3> single{Tensor::randn({3, 8, 8}, rng), Tensor::randn({3, 4, 4}, rng),
                                 Tensor::randn({3, 2, 2}, rng)};
    auto back = scale_split(patch_match(single, 2));
    for (int k = 0; k < 3; ++k) CHECK(bit_equal(back[k], single[k]));
}

TEST_CASE("sequence length law") {
    struct Case {
        Index h, w;
        int i;
        Index s;
    };
    for (Case c : {Case{32, 32, 1, 1}, Case{32, 32, 1, 2}, Case{64, 64, 2, 2}}) {
        Rng rng(3);
        const Index f = Index{1} << c.i;
        auto seq = patch_match(random_maps(1, 2, c.h / f, c.w / f, rng), c.s);
        double expected = 0.0;
        for (int k = 0; k < 3; ++k) expected += double(c.h * c.w) / std::pow(4.0, c.i + k);
        expected /= double(c.s * c.s);
        CHECK(double(seq.tokens.dim(1)) == expected);
        CHECK(seq.tokens.dim(0) == c.s * c.s);
        CHECK(attention_cost(c.h, c.w, c.i, c.s).length == seq.tokens.dim(1));
    }
}

TEST_CASE("patch matching rejects maps that do not nest") {
    Rng rng(4);
    std::array<Tensor, 3> bad{Tensor::randn({2, 8, 8}, rng), Tensor::randn({2, 4, 4}, rng),
                              Tensor::randn({2, 3, 3}, rng)};
    try {
        patch_match(bad, 1);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("scale 2") != std::string::npos);
    }
    std::array<Tensor, 3> odd{Tensor::randn({2, 12, 12}, rng), Tensor::randn({2, 6, 6}, rng),
                              Tensor::randn({2, 3, 3}, rng)};
    CHECK_THROWS_AS(patch_match(odd, 2), DimensionError);
}

TEST_CASE("corrupted split points are rejected") {
    Rng rng(5);
    auto seq = patch_match(random_maps(1, 2, 8, 8, rng), 2);
    seq.layout.counts = {15, 5, 1};
    CHECK_THROWS_AS(scale_split(seq), ContractError);
    auto other = patch_match(random_maps(1, 2, 8, 8, rng), 2);
    other.tokens = narrow(other.tokens, 1, 0, 20);
    CHECK_THROWS_AS(scale_split(other), ContractError);
}

TEST_CASE("zero-residual interaction is the identity and keeps token count") {
    Rng rng(6);
    MsaParams block(8, 4, 4, rng);
    block.zero_residual_branches();
    auto maps = random_maps(2, 8, 8, 8, rng);
    auto seq = patch_match(maps, 2);
    auto out = scale_interact(seq, block);
    CHECK(bit_equal(out.tokens, seq.tokens));
    auto back = scale_split(out);
    Index total = 0;
    for (int k = 0; k < 3; ++k) {
        CHECK(bit_equal(back[k], maps[k]));
        total += back[k].size();
    }
    CHECK(total == seq.tokens.size());
}

TEST_CASE("windows do not exchange information") {
    Rng rng(7);
    MsaParams block(8, 4, 4, rng);
    auto maps = random_maps(2, 8, 8, 8, rng);
    auto seq = patch_match(maps, 2);
    auto base = scale_interact(seq, block).tokens;
    const Index g = seq.tokens.dim(0), len = seq.tokens.dim(1), d = seq.tokens.dim(2);
    for (Index j = 0; j < g; ++j) {
        WindowSequence poked = seq;
        poked.tokens = seq.tokens.clone();
        poked.tokens.mutable_values()[(j * len + 3) * d + 1] += 1.0;
        auto out = scale_interact(poked, block).tokens;
        for (Index o = 0; o < g; ++o) {
            const auto a = base.values().segment(o * len * d, len * d);
            const auto b = out.values().segment(o * len * d, len * d);
            if (o == j)
                CHECK((a != b).any());
            else
                CHECK((a == b).all());
        }
    }
}

TEST_CASE("attended pairs match the closed-form accounting") {
    Rng rng(8);
    MsaParams block(8, 4, 4, rng);
    for (Index s : {1, 2, 4}) {
        // Input 32x32, first fused scale exponent i = 1 -> 16x16, 8x8, 4x4.
        const int i = 1;
        const Index h = 32, w = 32;
        auto seq = patch_match(random_maps(1, 8, h >> i, w >> i, rng), s);
        Tensor attention;
        msa_block(seq.tokens, block, &attention);
        const Index counted = attention.dim(0) / block.heads * attention.dim(1) * attention.dim(2);
        const auto cost = attention_cost(h, w, i, s);
        CHECK(counted == cost.pairs);
        // H^2 W^2 / (16^i S^2), times the squared three-scale factor (21/16)^2.
        const double closed = double(h * h * w * w) / (std::pow(16.0, i) * double(s * s)) * (21.0 / 16) * (21.0 / 16);
        CHECK(double(counted) == closed);
        const auto full = attention_cost(h, w, i, s, false);
        CHECK(full.pairs == cost.pairs * s * s);
    }
}

TEST_CASE("fusion output lives at the middle stage resolution") {
    Rng rng(9);
    UNet net(UNetConfig{}, rng);
    Sfm sfm(SfmConfig{}, UNetConfig{}, rng);
    auto f = net.encode(Tensor::randn({2, 1, 32, 32}, rng), Mode::weak());
    auto out = sfm(f, Mode::weak());
    CHECK(out.shape() == Shape{2, 32, 8, 8});

    SfmConfig shallow;
    shallow.stages = {1, 2, 3};
    Sfm sfm1(shallow, UNetConfig{}, rng);
    CHECK(sfm1(f, Mode::weak()).shape() == Shape{2, 32, 16, 16});

    SfmConfig bad;
    bad.stages = {2, 3, 5};
    CHECK_THROWS_AS(Sfm(bad, UNetConfig{}, rng), ConfigError);
}

TEST_CASE("fusion of constant maps with centered delta kernels is constant") {
    Rng rng(10);
    const Index d = 3;
    ConvBnRelu conv(3 * d, d, 3, rng);
    Array k = Array::Zero(conv.weight.size());
    for (Index o = 0; o < d; ++o)
        for (int scale = 0; scale < 3; ++scale) k[((o * 3 * d + scale * d + o) * 3 + 1) * 3 + 1] = 1.0;
    conv.weight.mutable_values() = k;
    std::array<Tensor, 3> maps{Tensor::full({d, 16, 16}, 0.5), Tensor::full({d, 8, 8}, 0.25),
                               Tensor::full({d, 4, 4}, 2.0)};
    auto out = fuse(maps, conv, Mode::eval());
    REQUIRE(out.shape() == Shape{d, 8, 8});
    const double expected = 2.75 / std::sqrt(1.0 + conv.stats.eps);
    CHECK((out.values() - expected).abs().maxCoeff() <= 1e-12);

    std::array<Tensor, 3> wrong{Tensor::full({d, 16, 16}, 0.5), Tensor::full({d, 8, 8}, 0.25),
                                Tensor::full({d, 2, 2}, 2.0)};
    CHECK_THROWS_AS(fuse(wrong, conv, Mode::eval()), DimensionError);
}

TEST_CASE("gradient reaches all three scales through fusion") {
    Rng rng(11);
    MsaParams block(4, 2, 2, rng);
    ConvBnRelu conv(12, 4, 3, rng);
    std::array<Tensor, 3> maps{Tensor::randn({2, 4, 8, 8}, rng, 1.0, true), Tensor::randn({2, 4, 4, 4}, rng, 1.0, true),
                               Tensor::randn({2, 4, 2, 2}, rng, 1.0, true)};
    auto w = semsim::testing::random_weights(2 * 4 * 4 * 4, rng);
    auto loss_fn = [&] {
        return semsim::testing::probe(fuse(scale_split(scale_interact(patch_match(maps, 2), block)), conv, Mode::weak()),
                                      w);
    };
    backward(loss_fn());
    for (auto& m : maps) {
        REQUIRE(m.has_grad());
        CHECK(m.grad().abs().maxCoeff() > 0.0);
    }
    auto r = semsim::testing::gradcheck(loss_fn, {maps[0], maps[1], maps[2], conv.weight, block.qkv_weight});
    CHECK(r.rel_error <= 1e-3);
}

TEST_CASE("sfm parameters stay small") {
    Rng rng(12);
    Sfm sfm(SfmConfig{}, UNetConfig{}, rng);
    UNet net(UNetConfig{}, rng);
    ParamSet set;
    sfm.collect(set, "sfm");
    net.collect(set, "net");
    MESSAGE("parameters: " << set.parameter_count());
    CHECK(set.parameter_count() <= 300000);
}
