#include "doctest.h"

#include <cmath>

#include "semsim/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace semsim;
using semsim::testing::gradcheck;

namespace {

// Scalar re-computation of the dice formula for one image, [C][P] layout.
double dice_oracle(const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& t) {
    double acc = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
        double inter = 0, sp = 0, st = 0;
        for (std::size_t k = 0; k < p[c].size(); ++k) {
            inter += p[c][k] * t[c][k];
            sp += p[c][k];
            st += t[c][k];
        }
        acc += (2 * inter + 1e-5) / (sp + st + 1e-5);
    }
    return 1.0 - acc / static_cast<double>(p.size());
}

Tensor random_field(Index b, Index c, Index h, Index w, Rng& rng, double spread = 2.0, bool grad = false) {
    auto p = softmax(Tensor::randn({b, c, h, w}, rng, spread), 1).detach();
    p.set_requires_grad(grad);
    return p;
}

std::vector<int> random_target(Index n, int classes, Rng& rng) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = static_cast<int>(rng.below(classes));
    return t;
}

Array one_hot_of(const std::vector<int>& t, Index b, Index c, Index positions) {
    Array out = Array::Zero(b * c * positions);
    for (Index i = 0; i < b; ++i)
        for (Index k = 0; k < positions; ++k) out[(i * c + t[i * positions + k]) * positions + k] = 1.0;
    return out;
}

}  // namespace

TEST_CASE("dice loss cases") {
    auto t = Tensor::from({1, 2, 4}, {1, 0, 1, 0, 0, 1, 0, 1});
    CHECK(dice_loss(t, t.values()).item() <= 1e-6);

    auto disjoint = Tensor::from({1, 2, 4}, {0, 1, 0, 1, 1, 0, 1, 0});
    CHECK(dice_loss(disjoint, t.values()).item() == doctest::Approx(1.0).epsilon(1e-5));

    auto p = Tensor::from({1, 2, 4}, {0.7, 0.2, 0.9, 0.4, 0.3, 0.8, 0.1, 0.6});
    const double expect = dice_oracle({{0.7, 0.2, 0.9, 0.4}, {0.3, 0.8, 0.1, 0.6}}, {{1, 0, 1, 0}, {0, 1, 0, 1}});
    CHECK(std::abs(dice_loss(p, t.values()).item() - expect) <= 1e-9);

    CHECK_THROWS_AS(dice_loss(p, Array::Zero(3)), DimensionError);
}

TEST_CASE("cross-entropy cases") {
    auto t = std::vector<int>{0, 1, 1};
    auto perfect = Tensor::from({1, 2, 3}, {1, 0, 0, 0, 1, 1});
    CHECK(ce_loss(perfect, t).item() == 0.0);

    auto uniform = Tensor::full({2, 4, 3}, 0.25);
    CHECK(ce_loss(uniform, {0, 1, 2, 3, 0, 1}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

    auto p = Tensor::from({1, 2, 3}, {0.6, 0.3, 0.0, 0.4, 0.7, 1.0});
    const double expect = -(std::log(0.6) + std::log(0.7) + std::log(1.0)) / 3;
    CHECK(std::abs(ce_loss(p, t).item() - expect) <= 1e-9);
    // p = 0 at the target is clamped to 1e-12.
    CHECK(ce_loss(p, {0, 1, 0}).item() == doctest::Approx(-(std::log(0.6) + std::log(0.7) + std::log(1e-12)) / 3));

    CHECK_THROWS_AS(ce_loss(p, {0, 2, 1}), ContractError);
    CHECK_THROWS_AS(ce_loss(p, {0, -1, 1}), ContractError);
}

TEST_CASE("supervised loss composition") {
    Rng rng(1);
    auto perfect = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
    CHECK(supervised_loss(perfect, {0, 1}).item() <= 1e-6);

    auto p = random_field(3, 4, 4, 4, rng);
    auto t = random_target(3 * 16, 4, rng);
    const double ce = ce_loss(p, t).item(), dice = dice_loss(p, one_hot_of(t, 3, 4, 16)).item();
    CHECK(std::abs(supervised_loss(p, t).item() - 0.5 * (ce + dice)) <= 1e-12);

    double per_image = 0.0;
    for (Index b = 0; b < 3; ++b) {
        auto pb = narrow(p, 0, b, 1);
        std::vector<int> tb(t.begin() + b * 16, t.begin() + (b + 1) * 16);
        per_image += supervised_loss(pb, tb).item();
    }
    CHECK(std::abs(supervised_loss(p, t).item() - per_image / 3) <= 1e-12);
}

TEST_CASE("masked loss with nothing above threshold") {
    Rng rng(2);
    auto weak = random_field(2, 3, 4, 4, rng);
    auto strong = random_field(2, 3, 4, 4, rng, 2.0, true);
    for (auto kind : {ConsistencyKind::Dice, ConsistencyKind::CrossEntropy}) {
        auto r = masked_weak_to_strong(weak, strong, 1.0, kind);
        CHECK(r.loss.item() == 0.0);
        CHECK(r.masked_fraction == 1.0);
        CHECK_FALSE(r.loss.requires_grad());
    }
    CHECK_THROWS_AS(masked_weak_to_strong(weak, strong, 1.5, ConsistencyKind::Dice), ParameterError);
    CHECK_THROWS_AS(masked_weak_to_strong(weak, strong, -0.1, ConsistencyKind::Dice), ParameterError);
}

TEST_CASE("masked dice on agreeing hard fields is zero") {
    auto hard = Tensor::from({1, 2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    auto r = masked_weak_to_strong(hard, hard, 0.5, ConsistencyKind::Dice);
    CHECK(r.loss.item() <= 1e-6);
    CHECK(r.masked_fraction == 0.0);
}

TEST_CASE("masked dice against a scalar oracle") {
    // Image 0: positions 0,1 confident; image 1: nothing confident.
    auto weak = Tensor::from({2, 2, 3}, {0.99, 0.02, 0.6, 0.01, 0.98, 0.4,  //
                                         0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    auto strong = Tensor::from({2, 2, 3}, {0.8, 0.3, 0.5, 0.2, 0.7, 0.5,  //
                                           0.1, 0.2, 0.3, 0.9, 0.8, 0.7});
    auto r = masked_weak_to_strong(weak, strong, 0.95, ConsistencyKind::Dice);
    const double expect = dice_oracle({{0.8, 0.3, 0.0}, {0.2, 0.7, 0.0}}, {{1, 0, 0}, {0, 1, 0}});
    CHECK(std::abs(r.loss.item() - expect) <= 1e-12);
    CHECK(r.masked_fraction == doctest::Approx(4.0 / 6));
}

TEST_CASE("masked dice pools the batch into one set per class") {
    // Image 0 keeps position 0 (class 0); image 1 keeps positions 1 (class 1) and 2 (class 0).
    auto weak = Tensor::from({2, 2, 3}, {0.97, 0.5, 0.3, 0.03, 0.5, 0.7,  //
                                         0.4, 0.01, 0.96, 0.6, 0.99, 0.04});
    auto strong = Tensor::from({2, 2, 3}, {0.6, 0.9, 0.2, 0.4, 0.1, 0.8,  //
                                           0.3, 0.25, 0.7, 0.7, 0.75, 0.3});
    auto r = masked_weak_to_strong(weak, strong, 0.95, ConsistencyKind::Dice);
    // Per class, the six positions of both images in order, masked ones zeroed.
    const double expect = dice_oracle({{0.6, 0.0, 0.0, 0.0, 0.25, 0.7}, {0.4, 0.0, 0.0, 0.0, 0.75, 0.3}},
                                      {{1, 0, 0, 0, 0, 1}, {0, 0, 0, 0, 1, 0}});
    CHECK(std::abs(r.loss.item() - expect) <= 1e-12);
    CHECK(r.masked_fraction == doctest::Approx(3.0 / 6));
}

TEST_CASE("masked cross-entropy weights") {
    Rng rng(3);
    auto weak = random_field(2, 3, 4, 4, rng, 4.0);
    auto strong = random_field(2, 3, 4, 4, rng, 2.0);
    const double tau = 0.7;
    auto plain = masked_weak_to_strong(weak, strong, tau, ConsistencyKind::CrossEntropy);
    Array ones = Array::Ones(32);
    auto unit = masked_weak_to_strong(weak, strong, tau, ConsistencyKind::CrossEntropy, &ones);
    CHECK(std::abs(plain.loss.item() - unit.loss.item()) <= 1e-12);

    Array u(32);
    for (Index i = 0; i < 32; ++i) u[i] = rng.uniform(0.01, 1.0);
    auto weighted = masked_weak_to_strong(weak, strong, tau, ConsistencyKind::CrossEntropy, &u);
    double num = 0.0;
    int kept = 0;
    for (Index b = 0; b < 2; ++b)
        for (Index k = 0; k < 16; ++k) {
            int best = 0;
            for (int c = 1; c < 3; ++c)
                if (weak[(b * 3 + c) * 16 + k] > weak[(b * 3 + best) * 16 + k]) best = c;
            if (weak[(b * 3 + best) * 16 + k] < tau) continue;
            ++kept;
            num += -std::log(strong[(b * 3 + best) * 16 + k]) * u[b * 16 + k];
        }
    REQUIRE(kept > 0);
    CHECK(std::abs(weighted.loss.item() - num / kept) <= 1e-12);
    CHECK(weighted.masked_fraction == doctest::Approx(1.0 - kept / 32.0));
}

TEST_CASE("weak branch receives no gradient; empty masks give exact zero gradients") {
    Rng rng(4);
    auto logits = Tensor::randn({2, 3, 4, 4}, rng, 2.0, true);
    auto weak = softmax(logits, 1);
    auto strong_logits = Tensor::randn({2, 3, 4, 4}, rng, 2.0, true);
    auto strong = softmax(strong_logits, 1);
    for (auto kind : {ConsistencyKind::Dice, ConsistencyKind::CrossEntropy}) {
        logits.zero_grad();
        strong_logits.zero_grad();
        auto r = masked_weak_to_strong(weak, strong, 0.5, kind);
        backward(add(r.loss, scale(sum(strong), 0.0)));
        CHECK_FALSE(logits.has_grad());
        CHECK(strong_logits.grad().abs().maxCoeff() > 0.0);

        strong_logits.zero_grad();
        auto empty = masked_weak_to_strong(weak, strong, 1.0, kind);
        backward(add(empty.loss, scale(sum(strong), 0.0)));
        CHECK((strong_logits.grad() == 0.0).all());
    }
}

TEST_CASE("loss composition identities") {
    LossWeights w;
    LossTerms zero;
    zero.supervised = Tensor::scalar(0.0);
    CHECK(total_loss(zero, w).total == 0.0);

    LossTerms t;
    t.supervised = Tensor::scalar(1.0);
    t.unsup.loss = Tensor::scalar(1.0);
    t.intra.loss = Tensor::scalar(0.0);
    t.cross.loss = Tensor::scalar(0.0);
    CHECK(total_loss(t, w).total == 0.75);

    Rng rng(5);
    for (int rep = 0; rep < 100; ++rep) {
        LossTerms r;
        r.supervised = Tensor::scalar(rng.uniform(0, 3));
        r.unsup.loss = Tensor::scalar(rng.uniform(0, 3));
        r.intra.loss = Tensor::scalar(rng.uniform(0, 3));
        r.cross.loss = Tensor::scalar(rng.uniform(0, 3));
        LossWeights lw{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), 0.95};
        auto rep_ = total_loss(r, lw);
        CHECK(std::abs(rep_.unsup_total - (lw.lambda * rep_.unsup + lw.lambda_intra * rep_.intra +
                                           lw.lambda_cross * rep_.cross)) <= 1e-12);
        CHECK(std::abs(rep_.total - 0.5 * (rep_.supervised + rep_.unsup_total)) <= 1e-12);
    }

    LossTerms bad = t;
    bad.intra.loss = Tensor::scalar(std::nan(""));
    try {
        total_loss(bad, w);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("L_intra") != std::string::npos);
    }
}

TEST_CASE("zero intra and cross weights reproduce the FixMatch objective") {
    Rng rng(6);
    auto logits = Tensor::randn({2, 3, 4, 4}, rng, 2.0, true);
    auto labeled_logits = Tensor::randn({2, 3, 4, 4}, rng, 2.0, true);
    auto weak = softmax(Tensor::randn({2, 3, 4, 4}, rng, 4.0), 1);
    auto target = random_target(32, 3, rng);
    auto build = [&](bool full) {
        auto strong = softmax(logits, 1);
        auto labeled = softmax(labeled_logits, 1);
        LossTerms t;
        t.supervised = supervised_loss(labeled, target);
        t.unsup = masked_weak_to_strong(weak, strong, 0.6, ConsistencyKind::Dice);
        if (full) {
            t.intra = masked_weak_to_strong(weak, strong, 0.6, ConsistencyKind::Dice);
            t.cross = masked_weak_to_strong(weak, strong, 0.6, ConsistencyKind::CrossEntropy);
        }
        return t;
    };
    LossWeights fix{0.5, 0.0, 0.0, 0.6};
    auto a = total_loss(build(true), fix);
    backward(a.objective);
    const Array ga = logits.grad(), gla = labeled_logits.grad();
    logits.zero_grad();
    labeled_logits.zero_grad();
    // Plain FixMatch: (L_s + L_u) / 2 with lambda = 1 on the unsupervised side scaled by 0.5.
    auto t = build(false);
    auto plain = add(scale(t.supervised, 0.5), scale(t.unsup.loss, 0.25));
    backward(plain);
    CHECK(a.total == doctest::Approx(plain.item()).epsilon(1e-15));
    CHECK((ga - logits.grad()).abs().maxCoeff() <= 1e-15);
    CHECK((gla - labeled_logits.grad()).abs().maxCoeff() <= 1e-15);
}

TEST_CASE("losses stay finite on fuzzed fields") {
    Rng rng(7);
    for (int rep = 0; rep < 1000; ++rep) {
        const double spread = rng.uniform(0.0, 60.0);
        auto p = softmax(Tensor::randn({1, 3, 2, 3}, rng, spread), 1);
        auto weak = softmax(Tensor::randn({1, 3, 2, 3}, rng, spread), 1);
        auto t = random_target(6, 3, rng);
        CHECK(std::isfinite(supervised_loss(p, t).item()));
        CHECK(std::isfinite(masked_weak_to_strong(weak, p, 0.5, ConsistencyKind::Dice).loss.item()));
        CHECK(std::isfinite(masked_weak_to_strong(weak, p, 0.5, ConsistencyKind::CrossEntropy).loss.item()));
    }
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(8);
    auto logits = Tensor::randn({2, 3, 2, 3}, rng, 1.0, true);
    auto weak = softmax(Tensor::randn({2, 3, 2, 3}, rng, 3.0), 1);
    auto target = random_target(12, 3, rng);
    Array u(12);
    for (Index i = 0; i < 12; ++i) u[i] = rng.uniform(0.1, 1.0);
    CHECK(gradcheck([&] { return supervised_loss(softmax(logits, 1), target); }, {logits}).rel_error <= 1e-3);
    CHECK(gradcheck([&] { return masked_weak_to_strong(weak, softmax(logits, 1), 0.5, ConsistencyKind::Dice).loss; },
                    {logits})
              .rel_error <= 1e-3);
    CHECK(gradcheck([&] {
              return masked_weak_to_strong(weak, softmax(logits, 1), 0.5, ConsistencyKind::CrossEntropy, &u).loss;
          },
                    {logits})
              .rel_error <= 1e-3);
}

TEST_CASE("loss report csv row") {
    LossTerms t;
    t.supervised = Tensor::scalar(0.5);
    t.unsup.masked_fraction = 0.25;
    auto r = total_loss(t, LossWeights{});
    CHECK(LossReport::csv_header() == "step,L_s,L_u,L_intra,L_cross,L_total,masked_u,masked_intra,masked_cross");
    CHECK(r.csv_row(7) == "7,0.5,0,0,0,0.25,0.25,0,0");
}
