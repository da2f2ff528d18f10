#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "semsim/metrics.hpp"
#include "semsim/rng.hpp"
#include "support/oracles.hpp"

using namespace semsim;
using namespace semsim::testing;

namespace {

LabelField square(Index size, Index y0, Index x0, Index side) {
    LabelField m = LabelField::Zero(size, size);
    m.block(y0, x0, side, side).setConstant(1);
    return m;
}

}  // namespace

TEST_CASE("dsc hand cases") {
    LabelField a = square(8, 1, 1, 3);
    CHECK(dsc(a, a, 1) == 1.0);
    CHECK(dsc(a, square(8, 5, 5, 3), 1) == 0.0);
    LabelField p = LabelField::Zero(4, 4), g = LabelField::Zero(4, 4);
    p.row(0).setConstant(1);                                  // 4 pixels
    g(0, 0) = g(0, 1) = g(1, 0) = g(1, 1) = 1;                // 4 pixels, overlap 2
    CHECK(dsc(p, g, 1) == 0.5);
    CHECK(dsc(LabelField::Zero(4, 4), LabelField::Zero(4, 4), 2) == 1.0);
    CHECK(dsc(p, LabelField::Zero(4, 4), 1) == 0.0);
    CHECK_THROWS_AS(dsc(p, LabelField::Zero(4, 5), 1), DimensionError);
}

TEST_CASE("surface distances on identical, single-pixel and translated masks") {
    LabelField a = square(10, 2, 2, 4);
    CHECK(*hd95(a, a, 1) == 0.0);
    CHECK(*assd(a, a, 1) == 0.0);

    LabelField p = LabelField::Zero(8, 8), g = LabelField::Zero(8, 8);
    p(1, 1) = 1;
    g(1, 4) = 1;
    CHECK(*hd95(p, g, 1) == 3.0);
    CHECK(*assd(p, g, 1) == 3.0);

    LabelField shifted = square(10, 2, 3, 4);
    CHECK(*hd95(a, shifted, 1) == 1.0);
    CHECK(*hd95(a, shifted, 1) == *brute_distances(a, shifted, 1).hd95);
}

TEST_CASE("empty structures are reported as undefined and excluded from means") {
    LabelField a = square(8, 1, 1, 3), z = LabelField::Zero(8, 8);
    CHECK_FALSE(hd95(a, z, 1).has_value());
    CHECK_FALSE(assd(z, a, 1).has_value());
    auto s1 = score_sample("a", a, a, 2), s2 = score_sample("b", z, a, 2);
    auto report = summarize({s1, s2});
    REQUIRE(report.per_class.size() == 1);
    CHECK(report.per_class[0].empty == 1);
    CHECK(report.per_class[0].dsc == 0.5);
    CHECK(report.per_class[0].hd95 == 0.0);
}

TEST_CASE("distance transform matches exhaustive search") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Index h = 3 + rng.below(12), w = 3 + rng.below(12);
        BinaryField sites = BinaryField::Constant(h, w, false);
        for (int k = 0; k < 1 + static_cast<int>(rng.below(6)); ++k) sites(rng.below(h), rng.below(w)) = true;
        auto dt = distance_transform(sites);
        for (Index y = 0; y < h; ++y)
            for (Index x = 0; x < w; ++x) {
                Index best = std::numeric_limits<Index>::max();
                for (Index v = 0; v < h; ++v)
                    for (Index u = 0; u < w; ++u)
                        if (sites(v, u)) best = std::min(best, (y - v) * (y - v) + (x - u) * (x - u));
                CHECK(dt(y, x) == std::sqrt(static_cast<Scalar>(best)));
            }
    }
    CHECK(std::isinf(distance_transform(BinaryField::Constant(3, 3, false))(1, 1)));
}

TEST_CASE("20 random 16x16 pairs match the all-pairs oracle exactly") {
    Rng rng(2024);
    int compared = 0;
    for (int pair = 0; pair < 20; ++pair) {
        LabelField a = random_mask(rng, 16), b = random_mask(rng, 16);
        for (int c = 1; c < 4; ++c) {
            CHECK(dsc(a, b, c) == brute_dsc(a, b, c));
            const BruteDistances ref = brute_distances(a, b, c);
            const auto h = hd95(a, b, c), s = assd(a, b, c);
            REQUIRE(h.has_value() == ref.hd95.has_value());
            if (!h) continue;
            ++compared;
            CHECK(*h == *ref.hd95);
            CHECK(*s == *ref.assd);
            CHECK(*hd95(b, a, c) == *h);
            CHECK(*assd(b, a, c) == doctest::Approx(*s).epsilon(1e-15));
            CHECK(*h <= *ref.max_pair);
            CHECK(*s <= *ref.max_pair);
        }
    }
    CHECK(compared >= 40);
}

TEST_CASE("assd can exceed hd95 when distances are concentrated in a few boundary pixels") {
    // 2x20 bar versus the same bar with one far pixel: most distances are 0,
    // a handful are large, so the 95th percentile is 0 but the mean is not.
    LabelField a = LabelField::Zero(40, 40);
    a.block(0, 0, 2, 30).setConstant(1);
    LabelField b = a;
    b(39, 39) = 1;
    const BruteDistances ref = brute_distances(a, b, 1);
    CHECK(*hd95(a, b, 1) == *ref.hd95);
    CHECK(*assd(a, b, 1) == *ref.assd);
    CHECK(*hd95(a, b, 1) == 0.0);
    CHECK(*assd(a, b, 1) > 0.0);
}

TEST_CASE("metrics are translation invariant on unclipped shapes") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        LabelField a = LabelField::Zero(24, 24), b = LabelField::Zero(24, 24);
        a.block(4, 4, 6, 8) = random_mask(rng, 16).block(0, 0, 6, 8);
        b.block(4, 4, 6, 8) = random_mask(rng, 16).block(0, 0, 6, 8);
        LabelField a2 = LabelField::Zero(24, 24), b2 = LabelField::Zero(24, 24);
        a2.block(9, 7, 6, 8) = a.block(4, 4, 6, 8);
        b2.block(9, 7, 6, 8) = b.block(4, 4, 6, 8);
        for (int c = 1; c < 4; ++c) {
            CHECK(dsc(a, b, c) == dsc(a2, b2, c));
            CHECK(hd95(a, b, c) == hd95(a2, b2, c));
            CHECK(assd(a, b, c) == assd(a2, b2, c));
        }
    }
}

TEST_CASE("metrics csv layout") {
    LabelField a = square(8, 1, 1, 3), z = LabelField::Zero(8, 8);
    auto report = summarize({score_sample("s1", a, a, 3), score_sample("s2", z, a, 3)});
    auto path = std::filesystem::temp_directory_path() / "semsim_metrics_test.csv";
    write_metrics_csv(path, report);
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text ==
          "sample_id,class,dsc,hd95,assd\n"
          "s1,1,1,0,0\n"
          "s1,2,1,empty,empty\n"
          "s2,1,0,empty,empty\n"
          "s2,2,1,empty,empty\n"
          "mean,1,0.5,0,0\n"
          "mean,2,1,nan,nan\n"
          "mean,fg,0.75,nan,nan\n");
}
