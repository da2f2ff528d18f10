#include "semsim/ops.hpp"

#include <cmath>
#include <numeric>

namespace semsim {

namespace {

using detail::accumulate;
using detail::Node;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
}

Index normalize_axis(Index axis, Index rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("axis out of range");
    return axis;
}

/// (outer, extent, inner) factorization of `shape` around `axis`.
struct AxisSplit {
    Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
    AxisSplit s;
    for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    return make_result(a.shape(), a.values() + b.values(), {a, b}, "add", [](Node& self) {
        accumulate(*self.parents[0], self.grad);
        accumulate(*self.parents[1], self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    return make_result(a.shape(), a.values() - b.values(), {a, b}, "sub", [](Node& self) {
        accumulate(*self.parents[0], self.grad);
        accumulate(*self.parents[1], -self.grad);
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    return make_result(a.shape(), a.values() * b.values(), {a, b}, "mul", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) accumulate(pa, self.grad * pb.value);
        if (pb.requires_grad) accumulate(pb, self.grad * pa.value);
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    return make_result(a.shape(), a.values() / b.values(), {a, b}, "div", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) accumulate(pa, self.grad / pb.value);
        if (pb.requires_grad) accumulate(pb, -self.grad * pa.value / pb.value.square());
    });
}

Tensor add_scalar(const Tensor& a, Scalar s) {
    return make_result(a.shape(), a.values() + s, {a}, "add_scalar",
                       [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor scale(const Tensor& a, Scalar s) {
    return make_result(a.shape(), a.values() * s, {a}, "scale",
                       [s](Node& self) { accumulate(*self.parents[0], self.grad * s); });
}

Tensor mul_const(const Tensor& a, const Array& w) {
    if (w.size() != a.size()) throw DimensionError("mul_const: weight size mismatch");
    return make_result(a.shape(), a.values() * w, {a}, "mul_const",
                       [w](Node& self) { accumulate(*self.parents[0], self.grad * w); });
}

Tensor relu(const Tensor& x) {
    return make_result(x.shape(), x.values().max(0.0), {x}, "relu", [](Node& self) {
        Node& p = *self.parents[0];
        accumulate(p, (p.value > 0.0).select(self.grad, 0.0));
    });
}


// tanh form, x * sigmoid(2u) with u = sqrt(2/pi) (x + 0.044715 x^3).
Tensor gelu(const Tensor& x) {
    constexpr Scalar c = 0.7978845608028654, a = 0.044715;
    const Array& v = x.values();
    Array sig = 1.0 / (1.0 + (-2.0 * c * (v + a * v.cube())).exp());
    Array out = v * sig;
    return make_result(x.shape(), std::move(out), {x}, "gelu", [sig](Node& self) {
        const Array& v = self.parents[0]->value;
        const Array du = 2.0 * c * (1.0 + 3.0 * a * v.square());
        accumulate(*self.parents[0], self.grad * (sig + v * sig * (1.0 - sig) * du));
    });
}

Tensor exp(const Tensor& x) {
    Array out = x.values().exp();
    return make_result(x.shape(), out, {x}, "exp",
                       [](Node& self) { accumulate(*self.parents[0], self.grad * self.value); });
}

Tensor log_clamped(const Tensor& x, Scalar floor) {
    Array out = x.values().max(floor).log();
    return make_result(x.shape(), std::move(out), {x}, "log", [floor](Node& self) {
        Node& p = *self.parents[0];
        accumulate(p, (p.value > floor).select(self.grad / p.value, 0.0));
    });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    return make_result({1}, Array::Constant(1, x.values().sum()), {x}, "sum", [](Node& self) {
        Node& p = *self.parents[0];
        accumulate(p, Array::Constant(p.value.size(), self.grad[0]));
    });
}

Tensor mean(const Tensor& x) {
    const Scalar n = static_cast<Scalar>(x.size());
    return make_result({1}, Array::Constant(1, x.values().sum() / n), {x}, "mean",
                       [n](Node& self) {
                           Node& p = *self.parents[0];
                           accumulate(p, Array::Constant(p.value.size(), self.grad[0] / n));
                       });
}

Tensor sum_axis(const Tensor& x, Index axis, bool keepdim) {
    axis = normalize_axis(axis, x.rank());
    const AxisSplit s = split_axis(x.shape(), axis);
    Array out = Array::Zero(s.outer * s.inner);
    const Array& v = x.values();
    for (Index o = 0; o < s.outer; ++o)
        for (Index e = 0; e < s.extent; ++e)
            out.segment(o * s.inner, s.inner) += v.segment((o * s.extent + e) * s.inner, s.inner);
    Shape shape = x.shape();
    if (keepdim) {
        shape[axis] = 1;
    } else {
        shape.erase(shape.begin() + axis);
        if (shape.empty()) shape = {1};
    }
    return make_result(std::move(shape), std::move(out), {x}, "sum_axis", [s](Node& self) {
        Array g(s.outer * s.extent * s.inner);
        for (Index o = 0; o < s.outer; ++o)
            for (Index e = 0; e < s.extent; ++e)
                g.segment((o * s.extent + e) * s.inner, s.inner) =
                    self.grad.segment(o * s.inner, s.inner);
        accumulate(*self.parents[0], g);
    });
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const std::vector<Scalar>& w) {
    if (xs.size() != w.size()) throw DimensionError("weighted_sum: count mismatch");
    Scalar total = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != 1) throw DimensionError("weighted_sum expects scalars");
        total += w[i] * xs[i].item();
    }
    return make_result({1}, Array::Constant(1, total), xs, "weighted_sum", [w](Node& self) {
        for (std::size_t i = 0; i < w.size(); ++i)
            accumulate(*self.parents[i], Array::Constant(1, w[i] * self.grad[0]));
    });
}

// ---- normalization along an axis ----

Tensor softmax(const Tensor& x, Index axis) {
    axis = normalize_axis(axis, x.rank());
    if (!x.values().allFinite()) throw NumericError("softmax: non-finite input");
    const AxisSplit s = split_axis(x.shape(), axis);
    using Block = Eigen::Map<const Eigen::MatrixXd>;  // [inner, extent], column e is one slice
    using OutBlock = Eigen::Map<Eigen::MatrixXd>;
    const Index span = s.extent * s.inner;
    Array out(x.size());
    for (Index o = 0; o < s.outer; ++o) {
        const Block v(x.values().data() + o * span, s.inner, s.extent);
        OutBlock y(out.data() + o * span, s.inner, s.extent);
        if (s.inner == 1) {
            y = (v.array() - v.maxCoeff()).exp().matrix();
            y /= y.sum();
        } else {
            y = (v.colwise() - v.rowwise().maxCoeff()).array().exp().matrix();
            y.array().colwise() /= y.rowwise().sum().array();
        }
    }
    return make_result(x.shape(), std::move(out), {x}, "softmax", [s, span](Node& self) {
        Array gx(self.value.size());
        for (Index o = 0; o < s.outer; ++o) {
            const Block y(self.value.data() + o * span, s.inner, s.extent);
            const Block g(self.grad.data() + o * span, s.inner, s.extent);
            OutBlock d(gx.data() + o * span, s.inner, s.extent);
            if (s.inner == 1) {
                d = (y.array() * (g.array() - g.cwiseProduct(y).sum())).matrix();
            } else {
                const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
                d = y.cwiseProduct(g.colwise() - dot);
            }
        }
        accumulate(*self.parents[0], gx);
    });
}

Tensor l2_normalize(const Tensor& x, Index axis, Scalar eps) {
    axis = normalize_axis(axis, x.rank());
    if (!x.values().allFinite()) throw NumericError("l2_normalize: non-finite input");
    const AxisSplit s = split_axis(x.shape(), axis);
    const Array& v = x.values();
    Array norms(s.outer * s.inner);
    Array out(v.size());
    for (Index o = 0; o < s.outer; ++o) {
        for (Index i = 0; i < s.inner; ++i) {
            const Index base = o * s.extent * s.inner + i;
            Scalar sq = 0.0;
            for (Index e = 0; e < s.extent; ++e) sq += v[base + e * s.inner] * v[base + e * s.inner];
            const Scalar n = std::sqrt(sq);
            norms[o * s.inner + i] = n;
            for (Index e = 0; e < s.extent; ++e) out[base + e * s.inner] = v[base + e * s.inner] / std::max(n, eps);
        }
    }
    return make_result(x.shape(), std::move(out), {x}, "l2_normalize", [s, eps, norms](Node& self) {
        const Array& v = self.parents[0]->value;
        const Array& g = self.grad;
        Array gx(v.size());
        for (Index o = 0; o < s.outer; ++o) {
            for (Index i = 0; i < s.inner; ++i) {
                const Index base = o * s.extent * s.inner + i;
                const Scalar n = norms[o * s.inner + i];
                const Scalar d = std::max(n, eps);
                Scalar gv = 0.0;
                for (Index e = 0; e < s.extent; ++e) gv += g[base + e * s.inner] * v[base + e * s.inner];
                const Scalar c = n > eps ? gv / (n * n * n) : 0.0;
                for (Index e = 0; e < s.extent; ++e) {
                    const Index k = base + e * s.inner;
                    gx[k] = g[k] / d - v[k] * c;
                }
            }
        }
        accumulate(*self.parents[0], gx);
    });
}

Tensor normalize_sum(const Tensor& x, Index axis) {
    axis = normalize_axis(axis, x.rank());
    const AxisSplit s = split_axis(x.shape(), axis);
    const Array& v = x.values();
    Array sums = Array::Zero(s.outer * s.inner);
    for (Index o = 0; o < s.outer; ++o)
        for (Index e = 0; e < s.extent; ++e)
            sums.segment(o * s.inner, s.inner) += v.segment((o * s.extent + e) * s.inner, s.inner);
    if ((sums == 0.0).any()) throw NumericError("normalize_sum: zero total along axis");
    Array out(v.size());
    for (Index o = 0; o < s.outer; ++o)
        for (Index e = 0; e < s.extent; ++e)
            out.segment((o * s.extent + e) * s.inner, s.inner) =
                v.segment((o * s.extent + e) * s.inner, s.inner) / sums.segment(o * s.inner, s.inner);
    return make_result(x.shape(), std::move(out), {x}, "normalize_sum", [s, sums](Node& self) {
        const Array& y = self.value;
        const Array& g = self.grad;
        Array dot = Array::Zero(s.outer * s.inner);
        for (Index o = 0; o < s.outer; ++o)
            for (Index e = 0; e < s.extent; ++e) {
                const Index k = (o * s.extent + e) * s.inner;
                dot.segment(o * s.inner, s.inner) += g.segment(k, s.inner) * y.segment(k, s.inner);
            }
        Array gx(y.size());
        for (Index o = 0; o < s.outer; ++o)
            for (Index e = 0; e < s.extent; ++e) {
                const Index k = (o * s.extent + e) * s.inner;
                gx.segment(k, s.inner) = (g.segment(k, s.inner) - dot.segment(o * s.inner, s.inner)) /
                                         sums.segment(o * s.inner, s.inner);
            }
        accumulate(*self.parents[0], gx);
    });
}

// ---- shape ----

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
    }
    return make_result(shape, x.values(), {x}, "reshape",
                       [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + to_string(x.shape()));
    return permute(x, {1, 0});
}

Tensor gather(const Tensor& x, std::vector<Index> index, const Shape& out_shape) {
    if (numel(out_shape) != static_cast<Index>(index.size())) {
        throw DimensionError("gather: index count does not match " + to_string(out_shape));
    }
    const Array& v = x.values();
    Array out(static_cast<Index>(index.size()));
    for (std::size_t i = 0; i < index.size(); ++i) {
        const Index k = index[i];
        if (k >= v.size()) throw DimensionError("gather: index out of range");
        out[static_cast<Index>(i)] = k >= 0 ? v[k] : 0.0;
    }
    return make_result(out_shape, std::move(out), {x}, "gather",
                       [index = std::move(index)](Node& self) {
                           Node& p = *self.parents[0];
                           Array g = Array::Zero(p.value.size());
                           for (std::size_t i = 0; i < index.size(); ++i)
                               if (index[i] >= 0) g[index[i]] += self.grad[static_cast<Index>(i)];
                           accumulate(p, g);
                       });
}

Tensor permute(const Tensor& x, const std::vector<Index>& axes) {
    const Index r = x.rank();
    if (static_cast<Index>(axes.size()) != r) throw DimensionError("permute: axis count mismatch");
    const Shape& in = x.shape();
    std::vector<Index> in_stride(r, 1);
    for (Index i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
    Shape out_shape(r);
    std::vector<Index> stride(r);
    std::vector<bool> used(r, false);
    for (Index i = 0; i < r; ++i) {
        const Index a = normalize_axis(axes[i], r);
        if (used[a]) throw DimensionError("permute: repeated axis");
        used[a] = true;
        out_shape[i] = in[a];
        stride[i] = in_stride[a];
    }
    std::vector<Index> index(static_cast<std::size_t>(x.size()));
    std::vector<Index> counter(r, 0);
    Index src = 0;
    for (Index flat = 0; flat < x.size(); ++flat) {
        index[flat] = src;
        for (Index d = r - 1; d >= 0; --d) {
            ++counter[d];
            src += stride[d];
            if (counter[d] < out_shape[d]) break;
            src -= stride[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    return gather(x, std::move(index), out_shape);
}

Tensor narrow(const Tensor& x, Index axis, Index start, Index length) {
    axis = normalize_axis(axis, x.rank());
    const AxisSplit s = split_axis(x.shape(), axis);
    if (start < 0 || length <= 0 || start + length > s.extent) {
        throw DimensionError("narrow: range out of bounds for " + to_string(x.shape()));
    }
    std::vector<Index> index;
    index.reserve(static_cast<std::size_t>(s.outer * length * s.inner));
    for (Index o = 0; o < s.outer; ++o)
        for (Index e = start; e < start + length; ++e)
            for (Index i = 0; i < s.inner; ++i) index.push_back((o * s.extent + e) * s.inner + i);
    Shape shape = x.shape();
    shape[axis] = length;
    return gather(x, std::move(index), shape);
}

Tensor concat(const std::vector<Tensor>& xs, Index axis) {
    if (xs.empty()) throw DimensionError("concat of nothing");
    const Index r = xs[0].rank();
    axis = normalize_axis(axis, r);
    Shape shape = xs[0].shape();
    std::vector<Index> extents;
    Index total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw DimensionError("concat: rank mismatch");
        for (Index d = 0; d < r; ++d) {
            if (d != axis && t.shape()[d] != shape[d]) {
                throw DimensionError("concat: shape mismatch " + to_string(xs[0].shape()) + " vs " +
                                     to_string(t.shape()));
            }
        }
        extents.push_back(t.shape()[axis]);
        total += t.shape()[axis];
    }
    shape[axis] = total;
    const AxisSplit s = split_axis(shape, axis);
    Array out(s.outer * total * s.inner);
    Index offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Index len = extents[k] * s.inner;
        for (Index o = 0; o < s.outer; ++o)
            out.segment(o * total * s.inner + offset, len) = xs[k].values().segment(o * len, len);
        offset += len;
    }
    return make_result(std::move(shape), std::move(out), xs, "concat", [s, total, extents](Node& self) {
        Index offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
            const Index len = extents[k] * s.inner;
            Node& p = *self.parents[k];
            if (p.requires_grad) {
                Array g(s.outer * len);
                for (Index o = 0; o < s.outer; ++o)
                    g.segment(o * len, len) = self.grad.segment(o * total * s.inner + offset, len);
                accumulate(p, g);
            }
            offset += len;
        }
    });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Array out(m * n);
    MatrixMap(out.data(), m, n).noalias() =
        ConstMatrixMap(a.values().data(), m, k) * ConstMatrixMap(b.values().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        ConstMatrixMap g(self.grad.data(), m, n);
        if (pa.requires_grad) {
            Array ga(m * k);
            MatrixMap(ga.data(), m, k).noalias() = g * ConstMatrixMap(pb.value.data(), k, n).transpose();
            accumulate(pa, ga);
        }
        if (pb.requires_grad) {
            Array gb(k * n);
            MatrixMap(gb.data(), k, n).noalias() = ConstMatrixMap(pa.value.data(), m, k).transpose() * g;
            accumulate(pb, gb);
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]) {
        throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const Index batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    Array out(batch * m * n);
    for (Index i = 0; i < batch; ++i) {
        MatrixMap(out.data() + i * m * n, m, n).noalias() =
            ConstMatrixMap(a.values().data() + i * m * k, m, k) *
            ConstMatrixMap(b.values().data() + i * k * n, k, n);
    }
    return make_result({batch, m, n}, std::move(out), {a, b}, "bmm", [batch, m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        Array ga, gb;
        if (pa.requires_grad) ga.resize(batch * m * k);
        if (pb.requires_grad) gb.resize(batch * k * n);
        for (Index i = 0; i < batch; ++i) {
            ConstMatrixMap g(self.grad.data() + i * m * n, m, n);
            if (pa.requires_grad)
                MatrixMap(ga.data() + i * m * k, m, k).noalias() =
                    g * ConstMatrixMap(pb.value.data() + i * k * n, k, n).transpose();
            if (pb.requires_grad)
                MatrixMap(gb.data() + i * k * n, k, n).noalias() =
                    ConstMatrixMap(pa.value.data() + i * m * k, m, k).transpose() * g;
        }
        if (pa.requires_grad) accumulate(pa, ga);
        if (pb.requires_grad) accumulate(pb, gb);
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[1] ||
        bias.size() != weight.shape()[0]) {
        throw DimensionError("linear: incompatible shapes " + to_string(x.shape()) + ", " +
                             to_string(weight.shape()) + ", " + to_string(bias.shape()));
    }
    const Index l = x.shape()[0], din = x.shape()[1], dout = weight.shape()[0];
    Array out(l * dout);
    MatrixMap y(out.data(), l, dout);
    y.noalias() = ConstMatrixMap(x.values().data(), l, din) *
                  ConstMatrixMap(weight.values().data(), dout, din).transpose();
    y.rowwise() += bias.values().matrix().transpose();
    return make_result({l, dout}, std::move(out), {x, weight, bias}, "linear",
                       [l, din, dout](Node& self) {
                           Node& px = *self.parents[0];
                           Node& pw = *self.parents[1];
                           Node& pb = *self.parents[2];
                           ConstMatrixMap g(self.grad.data(), l, dout);
                           if (px.requires_grad) {
                               Array gx(l * din);
                               MatrixMap(gx.data(), l, din).noalias() =
                                   g * ConstMatrixMap(pw.value.data(), dout, din);
                               accumulate(px, gx);
                           }
                           if (pw.requires_grad) {
                               Array gw(dout * din);
                               MatrixMap(gw.data(), dout, din).noalias() =
                                   g.transpose() * ConstMatrixMap(px.value.data(), l, din);
                               accumulate(pw, gw);
                           }
                           if (pb.requires_grad) {
                               Array gb = g.colwise().sum().transpose().array();
                               accumulate(pb, gb);
                           }
                       });
}

}  // namespace semsim
