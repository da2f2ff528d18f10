#pragma once

#include <string>

#include "semsim/ops.hpp"

namespace semsim {

// Probability fields are laid out [B, C, ...]: batch, classes, then any
// number of position axes. Targets are constant arrays in the same layout
// (one-hot) or per-position class indices of layout [B, ...].

constexpr Scalar kDiceSmooth = 1e-5;

/// Mean over images of 1 - (1/C) sum_c (2 sum p t + eps) / (sum p + sum t + eps).
Tensor dice_loss(const Tensor& probs, const Array& one_hot);

/// Mean over all positions of -log(max(p_target, 1e-12)).
Tensor ce_loss(const Tensor& probs, const std::vector<int>& target);

/// Mean over images of (ce + dice) / 2.
Tensor supervised_loss(const Tensor& probs, const std::vector<int>& target);

enum class ConsistencyKind { Dice, CrossEntropy };

struct MaskedLoss {
    Tensor loss;
    Scalar masked_fraction = 0.0;  // share of positions filtered out by the threshold
};

/// Weak-to-strong consistency. Pseudo-labels are the argmax of `weak`
/// (used as constants); positions whose weak confidence is below `tau` are
/// dropped. Dice: both fields are masked position-wise and the whole batch
/// counts as one set per class. Cross-entropy: optionally
/// weighted per position by `weight` ([B, ...] layout), summed and divided by
/// the number of kept positions. An empty mask gives a constant 0.
MaskedLoss masked_weak_to_strong(const Tensor& weak, const Tensor& strong, Scalar tau, ConsistencyKind kind,
                                 const Array* weight = nullptr);

struct LossWeights {
    Scalar lambda = 0.5;
    Scalar lambda_intra = 0.25;
    Scalar lambda_cross = 0.25;
    Scalar tau = 0.95;
};

struct LossTerms {
    Tensor supervised;
    MaskedLoss unsup, intra, cross;
};

struct LossReport {
    Scalar supervised = 0, unsup = 0, intra = 0, cross = 0;
    Scalar unsup_total = 0;  // lambda L_u + lambda_intra L_intra + lambda_cross L_cross
    Scalar total = 0;
    Scalar masked_unsup = 0, masked_intra = 0, masked_cross = 0;
    Tensor objective;  // differentiable total

    static std::string csv_header();
    std::string csv_row(long step) const;
};

/// L_total = (L_s + lambda L_u + lambda_intra L_intra + lambda_cross L_cross) / 2.
/// Terms that are undefined tensors count as constant zero.
LossReport total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace semsim
