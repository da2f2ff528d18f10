#pragma once

#include <vector>

#include "semsim/tensor.hpp"

namespace semsim {

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Scalar s);
Tensor scale(const Tensor& a, Scalar s);
/// Elementwise product with a constant array of the same size.
Tensor mul_const(const Tensor& a, const Array& w);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
/// log(max(x, floor)); the adjoint is zero where the floor is active.
Tensor log_clamped(const Tensor& x, Scalar floor = 1e-12);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, Scalar s) { return scale(a, s); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }

// ---- reductions ----

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum along `axis`; the axis is removed unless `keepdim`.
Tensor sum_axis(const Tensor& x, Index axis, bool keepdim = false);
/// Weighted sum of scalars: sum_i w_i * xs_i.
Tensor weighted_sum(const std::vector<Tensor>& xs, const std::vector<Scalar>& w);

// ---- normalization along an axis ----

/// Max-subtracted softmax along `axis`. Throws NumericError on non-finite input.
Tensor softmax(const Tensor& x, Index axis);
/// x / max(||x||_2, eps) along `axis`.
Tensor l2_normalize(const Tensor& x, Index axis, Scalar eps = 1e-8);
/// x / sum(x) along `axis`.
Tensor normalize_sum(const Tensor& x, Index axis);

// ---- shape ----

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x);  // 2-D
Tensor permute(const Tensor& x, const std::vector<Index>& axes);
Tensor concat(const std::vector<Tensor>& xs, Index axis);
Tensor narrow(const Tensor& x, Index axis, Index start, Index length);
/// out[i] = x[index[i]] (flat), or 0 where index[i] < 0. Adjoint scatter-adds.
Tensor gather(const Tensor& x, std::vector<Index> index, const Shape& out_shape);

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product of [B,m,k] and [B,k,n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// x [L,Din] times weight [Dout,Din] transposed, plus bias [Dout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- neural-network primitives (inputs [C,H,W] or [N,C,H,W]) ----

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias = nullptr,
              Index stride = 1, Index padding = 0);
Tensor maxpool2d(const Tensor& input, Index window = 2);
/// Resizes the last two axes with the half-pixel (align_corners=false) rule.
Tensor bilinear_interpolate(const Tensor& x, Index height, Index width);
/// Zeroes whole channels with probability p and rescales survivors by
/// 1/(1-p). Identity when `training` is false or p == 0.
Tensor channel_dropout(const Tensor& x, Scalar p, Rng& rng, bool training = true);
/// Normalizes over the last axis then applies gamma/beta of that size.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

struct BatchNormStats {
    Array running_mean;
    Array running_var;
    Scalar momentum = 0.1;
    Scalar eps = 1e-5;

    explicit BatchNormStats(Index channels = 0)
        : running_mean(Array::Zero(channels)), running_var(Array::Ones(channels)) {}
};

/// Per-channel normalization of [C,H,W] / [N,C,H,W]. With `use_batch_stats`
/// the batch moments are used (and folded into `stats` when
/// `update_running`); otherwise the running moments are.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool use_batch_stats, bool update_running = true);

}  // namespace semsim
