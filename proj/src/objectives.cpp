#include "semsim/objectives.hpp"

#include <cmath>
#include <cstdio>

namespace semsim {

namespace {

struct Layout {
    Index batch, classes, positions;
};

Layout layout_of(const Tensor& p) {
    if (p.rank() < 2) throw DimensionError("probability field must be [B,C,...], got " + to_string(p.shape()));
    const Index b = p.dim(0), c = p.dim(1);
    return {b, c, p.size() / (b * c)};
}

Tensor dice_from(const Tensor& p3, const Array& t, const Layout& l) {
    Array t_sum(l.batch * l.classes);
    for (Index i = 0; i < l.batch * l.classes; ++i) t_sum[i] = t.segment(i * l.positions, l.positions).sum();
    Tensor inter = sum_axis(mul_const(p3, t), 2);  // [B,C]
    Tensor denom = add(sum_axis(p3, 2), Tensor({l.batch, l.classes}, t_sum + kDiceSmooth));
    Tensor ratio = div(add_scalar(scale(inter, 2.0), kDiceSmooth), denom);
    // Per-image dice loss [B] = 1 - mean_c ratio.
    return add_scalar(scale(sum_axis(ratio, 1), -1.0 / static_cast<Scalar>(l.classes)), 1.0);
}

}  // namespace

Tensor dice_loss(const Tensor& probs, const Array& one_hot) {
    const Layout l = layout_of(probs);
    if (one_hot.size() != probs.size()) {
        throw DimensionError("dice_loss: target size " + std::to_string(one_hot.size()) + " differs from " +
                             to_string(probs.shape()));
    }
    return mean(dice_from(reshape(probs, {l.batch, l.classes, l.positions}), one_hot, l));
}

Tensor ce_loss(const Tensor& probs, const std::vector<int>& target) {
    const Layout l = layout_of(probs);
    if (static_cast<Index>(target.size()) != l.batch * l.positions) {
        throw DimensionError("ce_loss: target count does not match " + to_string(probs.shape()));
    }
    std::vector<Index> index(target.size());
    for (Index b = 0; b < l.batch; ++b)
        for (Index k = 0; k < l.positions; ++k) {
            const int c = target[static_cast<std::size_t>(b * l.positions + k)];
            if (c < 0 || c >= l.classes) {
                throw ContractError("ce_loss: target class " + std::to_string(c) + " outside [0," +
                                    std::to_string(l.classes) + ")");
            }
            index[static_cast<std::size_t>(b * l.positions + k)] = (b * l.classes + c) * l.positions + k;
        }
    Tensor picked = gather(probs, std::move(index), {l.batch * l.positions});
    return scale(sum(log_clamped(picked, 1e-12)), -1.0 / static_cast<Scalar>(l.batch * l.positions));
}

Tensor supervised_loss(const Tensor& probs, const std::vector<int>& target) {
    const Layout l = layout_of(probs);
    Array t = Array::Zero(probs.size());
    for (Index b = 0; b < l.batch; ++b)
        for (Index k = 0; k < l.positions; ++k) {
            const int c = target.at(static_cast<std::size_t>(b * l.positions + k));
            if (c >= 0 && c < l.classes) t[(b * l.classes + c) * l.positions + k] = 1.0;
        }
    return scale(add(ce_loss(probs, target), dice_loss(probs, t)), 0.5);
}

MaskedLoss masked_weak_to_strong(const Tensor& weak, const Tensor& strong, Scalar tau, ConsistencyKind kind,
                                 const Array* weight) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("masked loss: tau must lie in [0,1]");
    if (weak.shape() != strong.shape()) {
        throw DimensionError("masked loss: weak " + to_string(weak.shape()) + " vs strong " +
                             to_string(strong.shape()));
    }
    const Layout l = layout_of(strong);
    const Index n = l.batch * l.positions;
    if (weight && weight->size() != n) throw DimensionError("masked loss: weight does not match the field");

    const Array& w = weak.values();
    std::vector<int> label(static_cast<std::size_t>(n));
    Array keep = Array::Zero(n);
    Index kept = 0;
    for (Index b = 0; b < l.batch; ++b)
        for (Index k = 0; k < l.positions; ++k) {
            int best = 0;
            Scalar top = w[(b * l.classes) * l.positions + k];
            for (Index c = 1; c < l.classes; ++c) {
                const Scalar v = w[(b * l.classes + c) * l.positions + k];
                if (v > top) {
                    top = v;
                    best = static_cast<int>(c);
                }
            }
            label[static_cast<std::size_t>(b * l.positions + k)] = best;
            if (top >= tau) {
                keep[b * l.positions + k] = 1.0;
                ++kept;
            }
        }
    MaskedLoss out;
    out.masked_fraction = 1.0 - static_cast<Scalar>(kept) / static_cast<Scalar>(n);
    if (kept == 0) {
        out.loss = Tensor::scalar(0.0);
        return out;
    }

    if (kind == ConsistencyKind::Dice) {
        // Masked positions are zeroed in both fields; the dice is then taken
        // over the whole batch as one set per class.
        Array t = Array::Zero(strong.size()), field_mask(strong.size());
        for (Index c = 0; c < l.classes; ++c)
            for (Index b = 0; b < l.batch; ++b)
                for (Index k = 0; k < l.positions; ++k) {
                    const Index at = b * l.positions + k;
                    const Scalar m = keep[at];
                    field_mask[(b * l.classes + c) * l.positions + k] = m;
                    if (label[static_cast<std::size_t>(at)] == c) t[(c * l.batch + b) * l.positions + k] = m;
                }
        Tensor masked = mul_const(reshape(strong, {l.batch, l.classes, l.positions}), field_mask);
        const Layout pooled{1, l.classes, l.batch * l.positions};
        out.loss = dice_from(reshape(permute(masked, {1, 0, 2}), {1, l.classes, n}), t, pooled);
        return out;
    }

    std::vector<Index> index(static_cast<std::size_t>(n));
    for (Index b = 0; b < l.batch; ++b)
        for (Index k = 0; k < l.positions; ++k)
            index[static_cast<std::size_t>(b * l.positions + k)] =
                (b * l.classes + label[static_cast<std::size_t>(b * l.positions + k)]) * l.positions + k;
    Array coef = weight ? Array(keep * *weight) : keep;
    Tensor picked = gather(strong, std::move(index), {n});
    out.loss = scale(sum(mul_const(log_clamped(picked, 1e-12), coef)), -1.0 / static_cast<Scalar>(kept));
    return out;
}

std::string LossReport::csv_header() {
    return "step,L_s,L_u,L_intra,L_cross,L_total,masked_u,masked_intra,masked_cross";
}

std::string LossReport::csv_row(long step) const {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, supervised, unsup,
                  intra, cross, total, masked_unsup, masked_intra, masked_cross);
    return buf;
}

LossReport total_loss(const LossTerms& terms, const LossWeights& weights) {
    const Tensor zero = Tensor::scalar(0.0);
    auto pick = [&](const Tensor& t) { return t.size() == 0 ? zero : t; };
    const Tensor ls = pick(terms.supervised), lu = pick(terms.unsup.loss), li = pick(terms.intra.loss),
                 lc = pick(terms.cross.loss);
    const char* names[] = {"L_s", "L_u", "L_intra", "L_cross"};
    const Tensor* all[] = {&ls, &lu, &li, &lc};
    for (int i = 0; i < 4; ++i) {
        if (all[i]->size() != 1) throw DimensionError(std::string("total_loss: ") + names[i] + " is not a scalar");
        if (!std::isfinite(all[i]->item())) throw NumericError(std::string("total_loss: ") + names[i] + " is not finite");
    }
    LossReport r;
    r.supervised = ls.item();
    r.unsup = lu.item();
    r.intra = li.item();
    r.cross = lc.item();
    r.unsup_total = weights.lambda * r.unsup + weights.lambda_intra * r.intra + weights.lambda_cross * r.cross;
    r.masked_unsup = terms.unsup.masked_fraction;
    r.masked_intra = terms.intra.masked_fraction;
    r.masked_cross = terms.cross.masked_fraction;
    r.objective = weighted_sum({ls, lu, li, lc}, {0.5, 0.5 * weights.lambda, 0.5 * weights.lambda_intra,
                                                  0.5 * weights.lambda_cross});
    r.total = r.objective.item();
    return r;
}

}  // namespace semsim
