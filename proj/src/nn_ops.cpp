#include <algorithm>
#include <cmath>

#include "semsim/ops.hpp"

namespace semsim {

namespace {

using detail::accumulate;
using detail::Node;

/// Views [C,H,W] as [1,C,H,W].
struct Image4 {
    Index n, c, h, w;
};

Image4 as_image4(const Tensor& x, const char* op) {
    if (x.rank() == 3) return {1, x.shape()[0], x.shape()[1], x.shape()[2]};
    if (x.rank() == 4) return {x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]};
    throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
}

Shape image_shape(const Tensor& like, Index n, Index c, Index h, Index w) {
    if (like.rank() == 3) return {c, h, w};
    return {n, c, h, w};
}

// Column matrix rows are (ch, ky, kx) with row stride ld.
void im2col(const Scalar* img, Index c, Index h, Index w, Index k, Index stride, Index pad, Index ho,
            Index wo, Scalar* cols, Index ld) {
    for (Index ch = 0; ch < c; ++ch)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                Scalar* row = cols + ((ch * k + ky) * k + kx) * ld;
                for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride - pad + ky;
                    Scalar* dst = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, 0.0);
                        continue;
                    }
                    const Scalar* src = img + (ch * h + iy) * w;
                    if (stride == 1) {
                        const Index lo = std::clamp<Index>(pad - kx, 0, wo);
                        const Index hi = std::clamp<Index>(w + pad - kx, lo, wo);
                        std::fill(dst, dst + lo, 0.0);
                        std::copy(src + lo - pad + kx, src + hi - pad + kx, dst + lo);
                        std::fill(dst + hi, dst + wo, 0.0);
                        continue;
                    }
                    for (Index ox = 0; ox < wo; ++ox) {
                        const Index ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const Scalar* cols, Index c, Index h, Index w, Index k, Index stride, Index pad, Index ho,
            Index wo, Scalar* img, Index ld) {
    for (Index ch = 0; ch < c; ++ch)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                const Scalar* row = cols + ((ch * k + ky) * k + kx) * ld;
                for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const Scalar* src = row + oy * wo;
                    Scalar* dst = img + (ch * h + iy) * w;
                    if (stride == 1) {
                        const Index lo = std::clamp<Index>(pad - kx, 0, wo);
                        const Index hi = std::clamp<Index>(w + pad - kx, lo, wo);
                        for (Index ox = lo; ox < hi; ++ox) dst[ox - pad + kx] += src[ox];
                        continue;
                    }
                    for (Index ox = 0; ox < wo; ++ox) {
                        const Index ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
}

struct Resample1D {
    std::vector<Index> lo, hi;
    std::vector<Scalar> frac;
};

Resample1D half_pixel_axis(Index in, Index out) {
    Resample1D r;
    const Scalar ratio = static_cast<Scalar>(in) / static_cast<Scalar>(out);
    for (Index d = 0; d < out; ++d) {
        Scalar src = ratio * (static_cast<Scalar>(d) + 0.5) - 0.5;
        if (src < 0.0) src = 0.0;
        Index i0 = static_cast<Index>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const Index i1 = i0 < in - 1 ? i0 + 1 : i0;
        r.lo.push_back(i0);
        r.hi.push_back(i1);
        r.frac.push_back(src - static_cast<Scalar>(i0));
    }
    return r;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, Index stride, Index padding) {
    const Image4 in = as_image4(input, "conv2d");
    if (kernel.rank() != 4 || kernel.shape()[2] != kernel.shape()[3]) {
        throw DimensionError("conv2d: kernel must be [Cout,Cin,k,k], got " + to_string(kernel.shape()));
    }
    const Index cout = kernel.shape()[0], k = kernel.shape()[2];
    if (kernel.shape()[1] != in.c) {
        throw DimensionError("conv2d: input " + to_string(input.shape()) + " does not match kernel " +
                             to_string(kernel.shape()));
    }
    if (k % 2 == 0) throw ParameterError("conv2d: kernel size must be odd");
    if (stride < 1 || padding < 0) throw ParameterError("conv2d: stride must be >= 1 and padding >= 0");
    const Index span_h = in.h + 2 * padding - k, span_w = in.w + 2 * padding - k;
    if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
        throw DimensionError("conv2d: non-integral output size for input " + to_string(input.shape()));
    }
    const Index ho = span_h / stride + 1, wo = span_w / stride + 1;
    const Index kk = in.c * k * k, hw = ho * wo;
    if (bias && bias->size() != cout) throw DimensionError("conv2d: bias size mismatch");

    auto cols = std::make_shared<Array>(in.n * kk * hw);
    Array out(in.n * cout * hw);
    ConstMatrixMap kmat(kernel.values().data(), cout, kk);
    for (Index b = 0; b < in.n; ++b) {
        Scalar* col = cols->data() + b * kk * hw;
        im2col(input.values().data() + b * in.c * in.h * in.w, in.c, in.h, in.w, k, stride, padding, ho,
               wo, col, hw);
        MatrixMap o(out.data() + b * cout * hw, cout, hw);
        o.noalias() = kmat * ConstMatrixMap(col, kk, hw);
        if (bias) o.colwise() += bias->values().matrix();
    }
    std::vector<Tensor> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    const Image4 geom = in;
    return make_result(
        image_shape(input, in.n, cout, ho, wo), std::move(out), std::move(inputs), "conv2d",
        [geom, cols, cout, k, stride, padding, ho, wo, kk, hw](Node& self) {
            Node& px = *self.parents[0];
            Node& pk = *self.parents[1];
            Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
            Array gk, gb, gx;
            if (pk.requires_grad) gk = Array::Zero(cout * kk);
            if (pb && pb->requires_grad) gb = Array::Zero(cout);
            if (px.requires_grad) gx = Array::Zero(px.value.size());
            // "Same" convolutions send the gradient back through a convolution
            // with the flipped, transposed kernel instead of col2im.
            const bool same = stride == 1 && 2 * padding == k - 1;
            RowMatrix flipped;
            Array gcol;
            if (px.requires_grad && same) {
                flipped.resize(geom.c, cout * k * k);
                for (Index co = 0; co < cout; ++co)
                    for (Index ci = 0; ci < geom.c; ++ci)
                        for (Index t = 0; t < k * k; ++t)
                            flipped(ci, co * k * k + (k * k - 1 - t)) = pk.value[(co * geom.c + ci) * k * k + t];
                gcol.resize(cout * k * k * hw);
            } else if (px.requires_grad) {
                gcol.resize(kk * hw);
            }
            for (Index b = 0; b < geom.n; ++b) {
                ConstMatrixMap g(self.grad.data() + b * cout * hw, cout, hw);
                if (pk.requires_grad)
                    MatrixMap(gk.data(), cout, kk).noalias() +=
                        g * ConstMatrixMap(cols->data() + b * kk * hw, kk, hw).transpose();
                if (pb && pb->requires_grad) gb += g.rowwise().sum().array();
                if (px.requires_grad && same) {
                    im2col(g.data(), cout, ho, wo, k, 1, padding, geom.h, geom.w, gcol.data(), hw);
                    MatrixMap(gx.data() + b * geom.c * hw, geom.c, hw).noalias() =
                        flipped * ConstMatrixMap(gcol.data(), cout * k * k, hw);
                } else if (px.requires_grad) {
                    MatrixMap(gcol.data(), kk, hw).noalias() =
                        ConstMatrixMap(pk.value.data(), cout, kk).transpose() * g;
                    col2im(gcol.data(), geom.c, geom.h, geom.w, k, stride, padding, ho, wo,
                           gx.data() + b * geom.c * geom.h * geom.w, hw);
                }
            }
            if (pk.requires_grad) accumulate(pk, gk);
            if (pb && pb->requires_grad) accumulate(*pb, gb);
            if (px.requires_grad) accumulate(px, gx);
        });
}

Tensor maxpool2d(const Tensor& input, Index window) {
    const Image4 in = as_image4(input, "maxpool2d");
    if (window < 1 || in.h % window != 0 || in.w % window != 0) {
        throw DimensionError("maxpool2d: " + to_string(input.shape()) + " not divisible by window " +
                             std::to_string(window));
    }
    const Index ho = in.h / window, wo = in.w / window;
    const Index planes = in.n * in.c;
    const Array& v = input.values();
    std::vector<Index> arg(static_cast<std::size_t>(planes * ho * wo));
    for (Index p = 0; p < planes; ++p)
        for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox) {
                Index best = (p * in.h + oy * window) * in.w + ox * window;
                for (Index dy = 0; dy < window; ++dy)
                    for (Index dx = 0; dx < window; ++dx) {
                        const Index idx = (p * in.h + oy * window + dy) * in.w + ox * window + dx;
                        if (v[idx] > v[best]) best = idx;
                    }
                arg[(p * ho + oy) * wo + ox] = best;
            }
    return gather(input, std::move(arg), image_shape(input, in.n, in.c, ho, wo));
}

Tensor bilinear_interpolate(const Tensor& x, Index height, Index width) {
    if (height < 1 || width < 1) throw DimensionError("bilinear_interpolate: target dims must be >= 1");
    if (x.rank() < 2) throw DimensionError("bilinear_interpolate: need at least 2 axes");
    const Index h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
    const Index planes = x.size() / (h * w);
    Shape shape = x.shape();
    shape[shape.size() - 2] = height;
    shape[shape.size() - 1] = width;
    if (h == height && w == width) return reshape(x, shape);

    auto ry = std::make_shared<Resample1D>(half_pixel_axis(h, height));
    auto rx = std::make_shared<Resample1D>(half_pixel_axis(w, width));
    const Array& v = x.values();
    Array out(planes * height * width);
    for (Index p = 0; p < planes; ++p) {
        const Scalar* src = v.data() + p * h * w;
        Scalar* dst = out.data() + p * height * width;
        for (Index oy = 0; oy < height; ++oy) {
            const Scalar fy = ry->frac[oy];
            const Scalar* r0 = src + ry->lo[oy] * w;
            const Scalar* r1 = src + ry->hi[oy] * w;
            for (Index ox = 0; ox < width; ++ox) {
                const Scalar fx = rx->frac[ox];
                const Index x0 = rx->lo[ox], x1 = rx->hi[ox];
                dst[oy * width + ox] = (1.0 - fy) * ((1.0 - fx) * r0[x0] + fx * r0[x1]) +
                                       fy * ((1.0 - fx) * r1[x0] + fx * r1[x1]);
            }
        }
    }
    return make_result(std::move(shape), std::move(out), {x}, "bilinear_interpolate",
                       [ry, rx, planes, h, w, height, width](Node& self) {
                           Array g = Array::Zero(planes * h * w);
                           for (Index p = 0; p < planes; ++p) {
                               Scalar* dst = g.data() + p * h * w;
                               const Scalar* go = self.grad.data() + p * height * width;
                               for (Index oy = 0; oy < height; ++oy) {
                                   const Scalar fy = ry->frac[oy];
                                   Scalar* r0 = dst + ry->lo[oy] * w;
                                   Scalar* r1 = dst + ry->hi[oy] * w;
                                   for (Index ox = 0; ox < width; ++ox) {
                                       const Scalar fx = rx->frac[ox];
                                       const Scalar gv = go[oy * width + ox];
                                       r0[rx->lo[ox]] += (1.0 - fy) * (1.0 - fx) * gv;
                                       r0[rx->hi[ox]] += (1.0 - fy) * fx * gv;
                                       r1[rx->lo[ox]] += fy * (1.0 - fx) * gv;
                                       r1[rx->hi[ox]] += fy * fx * gv;
                                   }
                               }
                           }
                           accumulate(*self.parents[0], g);
                       });
}

Tensor channel_dropout(const Tensor& x, Scalar p, Rng& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("channel_dropout: p must lie in [0, 1)");
    if (!training || p == 0.0) return x;
    const Image4 in = as_image4(x, "channel_dropout");
    const Index plane = in.h * in.w;
    Array mask(x.size());
    const Scalar keep = 1.0 / (1.0 - p);
    for (Index ch = 0; ch < in.n * in.c; ++ch) {
        mask.segment(ch * plane, plane).setConstant(rng.bernoulli(p) ? 0.0 : keep);
    }
    return mul_const(x, mask);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
    const Index d = x.shape().back();
    if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: affine size mismatch");
    const Index rows = x.size() / d;
    ConstMatrixMap xv(x.values().data(), rows, d);
    auto xhat = std::make_shared<Array>(x.size());
    auto inv_std = std::make_shared<Array>(rows);
    MatrixMap xh(xhat->data(), rows, d);
    for (Index r = 0; r < rows; ++r) {
        const Scalar mu = xv.row(r).mean();
        const Scalar var = (xv.row(r).array() - mu).square().mean();
        (*inv_std)[r] = 1.0 / std::sqrt(var + eps);
        xh.row(r) = (xv.row(r).array() - mu) * (*inv_std)[r];
    }
    Array out(x.size());
    MatrixMap(out.data(), rows, d) =
        (xh.array().rowwise() * gamma.values().transpose()).rowwise() + beta.values().transpose();
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                       [xhat, inv_std, rows, d](Node& self) {
                           Node& px = *self.parents[0];
                           Node& pg = *self.parents[1];
                           Node& pb = *self.parents[2];
                           ConstMatrixMap g(self.grad.data(), rows, d);
                           ConstMatrixMap xh(xhat->data(), rows, d);
                           if (pg.requires_grad)
                               accumulate(pg, (g.array() * xh.array()).colwise().sum().transpose());
                           if (pb.requires_grad) accumulate(pb, g.array().colwise().sum().transpose());
                           if (px.requires_grad) {
                               Array gx(rows * d);
                               MatrixMap gxm(gx.data(), rows, d);
                               for (Index r = 0; r < rows; ++r) {
                                   const auto gh = (g.row(r).array() * pg.value.transpose()).eval();
                                   const Scalar m1 = gh.mean();
                                   const Scalar m2 = (gh * xh.row(r).array()).mean();
                                   gxm.row(r) = (gh - m1 - xh.row(r).array() * m2) * (*inv_std)[r];
                               }
                               accumulate(px, gx);
                           }
                       });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool use_batch_stats, bool update_running) {
    const Image4 in = as_image4(x, "batch_norm");
    if (gamma.size() != in.c || beta.size() != in.c) throw DimensionError("batch_norm: affine size mismatch");
    if (stats.running_mean.size() != in.c) throw DimensionError("batch_norm: statistics size mismatch");
    const Index plane = in.h * in.w;
    const Index count = in.n * plane;
    const Array& v = x.values();

    Array mu = Array::Zero(in.c), var = Array::Zero(in.c);
    if (use_batch_stats) {
        for (Index b = 0; b < in.n; ++b)
            for (Index c = 0; c < in.c; ++c) mu[c] += v.segment((b * in.c + c) * plane, plane).sum();
        mu /= static_cast<Scalar>(count);
        for (Index b = 0; b < in.n; ++b)
            for (Index c = 0; c < in.c; ++c)
                var[c] += (v.segment((b * in.c + c) * plane, plane) - mu[c]).square().sum();
        var /= static_cast<Scalar>(count);
        if (update_running) {
            const Scalar unbias = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : 1.0;
            stats.running_mean = (1.0 - stats.momentum) * stats.running_mean + stats.momentum * mu;
            stats.running_var = (1.0 - stats.momentum) * stats.running_var + stats.momentum * var * unbias;
        }
    } else {
        mu = stats.running_mean;
        var = stats.running_var;
    }
    const Array inv_std = (var + stats.eps).rsqrt();
    auto xhat = std::make_shared<Array>(v.size());
    Array out(v.size());
    for (Index b = 0; b < in.n; ++b)
        for (Index c = 0; c < in.c; ++c) {
            const Index off = (b * in.c + c) * plane;
            xhat->segment(off, plane) = (v.segment(off, plane) - mu[c]) * inv_std[c];
            out.segment(off, plane) = xhat->segment(off, plane) * gamma.values()[c] + beta.values()[c];
        }
    return make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
        [xhat, inv_std, in, plane, count, use_batch_stats](Node& self) {
            Node& px = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pb = *self.parents[2];
            Array sum_g = Array::Zero(in.c), sum_gx = Array::Zero(in.c);
            for (Index b = 0; b < in.n; ++b)
                for (Index c = 0; c < in.c; ++c) {
                    const Index off = (b * in.c + c) * plane;
                    sum_g[c] += self.grad.segment(off, plane).sum();
                    sum_gx[c] += (self.grad.segment(off, plane) * xhat->segment(off, plane)).sum();
                }
            if (pg.requires_grad) accumulate(pg, sum_gx);
            if (pb.requires_grad) accumulate(pb, sum_g);
            if (!px.requires_grad) return;
            Array gx(px.value.size());
            const Scalar n = static_cast<Scalar>(count);
            for (Index b = 0; b < in.n; ++b)
                for (Index c = 0; c < in.c; ++c) {
                    const Index off = (b * in.c + c) * plane;
                    const Scalar scale = pg.value[c] * inv_std[c];
                    if (use_batch_stats) {
                        gx.segment(off, plane) = scale * (self.grad.segment(off, plane) - sum_g[c] / n -
                                                          xhat->segment(off, plane) * (sum_gx[c] / n));
                    } else {
                        gx.segment(off, plane) = scale * self.grad.segment(off, plane);
                    }
                }
            accumulate(px, gx);
        });
}

}  // namespace semsim
