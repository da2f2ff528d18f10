#include "semsim/predictors.hpp"

#include <cfloat>
#include <cmath>
#include <limits>

namespace semsim {

namespace {

/// [B,D,H,W] -> [B*H*W, D] rows of per-position feature vectors.
Tensor positions(const Tensor& f) {
    const Index b = f.dim(0), d = f.dim(1), hw = f.dim(2) * f.dim(3);
    return reshape(permute(reshape(f, {b, d, hw}), {0, 2, 1}), {b * hw, d});
}

Tensor batched(const Tensor& x, Index rank) {
    if (x.rank() == rank) return x;
    if (x.rank() == rank - 1) {
        Shape s = x.shape();
        s.insert(s.begin(), 1);
        return reshape(x, s);
    }
    throw DimensionError("expected rank " + std::to_string(rank - 1) + " or " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
}

}  // namespace

Tensor compute_affinity(const Tensor& features) {
    const Tensor f = batched(features, 4);
    const Index b = f.dim(0), hw = f.dim(2) * f.dim(3);
    Tensor x = reshape(l2_normalize(positions(f), 1), {b, hw, f.dim(1)});
    Tensor m = softmax(bmm(x, permute(x, {0, 2, 1})), 2);
    return features.rank() == 3 ? reshape(m, {hw, hw}) : m;
}

Tensor refine_prediction(const Tensor& probs, const Tensor& affinity, Index height, Index width) {
    const Tensor p = batched(probs, 4);
    const Tensor m = batched(affinity, 3);
    const Index b = p.dim(0), c = p.dim(1), hw = height * width;
    if (m.dim(0) != b || m.dim(1) != hw || m.dim(2) != hw) {
        throw DimensionError("refine_prediction: affinity " + to_string(affinity.shape()) +
                             " does not match a " + std::to_string(height) + "x" + std::to_string(width) +
                             " feature grid");
    }
    Tensor down = reshape(bilinear_interpolate(p, height, width), {b, c, hw});
    Tensor spread = bmm(down, permute(m, {0, 2, 1}));
    Tensor out = scale(add(down, spread), 0.5);
    return probs.rank() == 3 ? reshape(out, {c, hw}) : out;
}

RegionGrid::RegionGrid(Index regions, Index height, Index width) {
    if (regions <= 0) throw ParameterError("sub-region count must be positive");
    rows = 1;
    for (Index g = 1; g * g <= regions; ++g)
        if (regions % g == 0) rows = g;
    cols = regions / rows;
    if (height % rows != 0 || width % cols != 0) {
        throw ParameterError("N = " + std::to_string(regions) + " (" + std::to_string(rows) + "x" +
                             std::to_string(cols) + " grid) does not tile a " + std::to_string(height) + "x" +
                             std::to_string(width) + " feature map");
    }
    cell_height = height / rows;
    cell_width = width / cols;
}

PrototypeSet compute_prototypes(const Tensor& features, const std::vector<LabelField>& labels, Index classes,
                                Index regions) {
    if (features.rank() != 4) throw DimensionError("compute_prototypes: features must be [B,D,H,W]");
    const Index b = features.dim(0), d = features.dim(1), h = features.dim(2), w = features.dim(3);
    const Index hw = h * w;
    if (static_cast<Index>(labels.size()) != b) throw DimensionError("compute_prototypes: label count differs");
    PrototypeSet set;
    set.images = b;
    set.classes = classes;
    set.dim = d;
    set.grid = RegionGrid(regions, h, w);
    set.regions = set.grid.count();
    const Index n_regions = set.regions;

    // Averaging weights: one row per (image, region, class) then per (image, class).
    const Index local_rows = b * n_regions * classes, rows = local_rows + b * classes;
    std::vector<Index> count(static_cast<std::size_t>(rows), 0);
    for (Index i = 0; i < b; ++i) {
        const LabelField& y = labels[static_cast<std::size_t>(i)];
        if (y.rows() != h || y.cols() != w) {
            throw DimensionError("compute_prototypes: labels must be at feature resolution " + std::to_string(h) +
                                 "x" + std::to_string(w));
        }
        for (Index py = 0; py < h; ++py)
            for (Index px = 0; px < w; ++px) {
                const int c = y(py, px);
                if (c < 0 || c >= classes) throw ContractError("compute_prototypes: label outside class range");
                ++count[static_cast<std::size_t>((i * n_regions + set.grid.region(py, px)) * classes + c)];
                ++count[static_cast<std::size_t>(local_rows + i * classes + c)];
            }
    }
    // Member pixels of each row, summed in pixel order and then scaled, so
    // equal feature maps give bitwise equal prototypes.
    std::vector<std::vector<Index>> members(static_cast<std::size_t>(rows));
    for (Index i = 0; i < b; ++i) {
        const LabelField& y = labels[static_cast<std::size_t>(i)];
        for (Index py = 0; py < h; ++py)
            for (Index px = 0; px < w; ++px) {
                const int c = y(py, px);
                const Index pos = i * hw + py * w + px;
                members[static_cast<std::size_t>((i * n_regions + set.grid.region(py, px)) * classes + c)].push_back(pos);
                members[static_cast<std::size_t>(local_rows + i * classes + c)].push_back(pos);
            }
    }
    Index widest = 1;
    for (const auto& m : members) widest = std::max(widest, static_cast<Index>(m.size()));
    std::vector<Index> index(static_cast<std::size_t>(rows * widest * d), -1);
    Array inv(rows * d);
    for (Index r = 0; r < rows; ++r) {
        const auto& m = members[static_cast<std::size_t>(r)];
        for (std::size_t k = 0; k < m.size(); ++k)
            for (Index e = 0; e < d; ++e)
                index[static_cast<std::size_t>((r * widest + static_cast<Index>(k)) * d + e)] = m[k] * d + e;
        inv.segment(r * d, d).setConstant(m.empty() ? 0.0 : 1.0 / static_cast<Scalar>(m.size()));
    }
    const Tensor sums = sum_axis(gather(positions(features), std::move(index), {rows, widest, d}), 1);
    const Tensor centroids = mul_const(sums, inv);  // [rows, D]
    set.local = reshape(narrow(centroids, 0, 0, local_rows), {b, n_regions, classes, d});
    set.global = reshape(narrow(centroids, 0, local_rows, b * classes), {b, classes, d});
    set.local_present.resize(static_cast<std::size_t>(local_rows));
    set.global_present.resize(static_cast<std::size_t>(b * classes));
    for (Index r = 0; r < local_rows; ++r) set.local_present[static_cast<std::size_t>(r)] = count[r] > 0;
    for (Index r = 0; r < b * classes; ++r)
        set.global_present[static_cast<std::size_t>(r)] = count[static_cast<std::size_t>(local_rows + r)] > 0;
    return set;
}

CrossPrediction cross_prediction(const Tensor& query, const PrototypeSet& protos, Scalar temperature) {
    if (temperature <= 0.0) throw ParameterError("cross_prediction: temperature must be positive");
    const Tensor q = batched(query, 4);
    const Index u = q.dim(0), d = q.dim(1), h = q.dim(2), w = q.dim(3), hw = h * w;
    const Index b = protos.images, c = protos.classes, n = protos.regions;
    if (d != protos.dim) throw DimensionError("cross_prediction: query and prototype dims differ");
    if (h != protos.grid.rows * protos.grid.cell_height || w != protos.grid.cols * protos.grid.cell_width) {
        throw DimensionError("cross_prediction: query grid differs from the prototype grid");
    }
    for (Index k = 0; k < c; ++k) {
        bool any = false;
        for (Index j = 0; j < b; ++j) any = any || protos.present(j, k);
        if (!any) {
            throw ConfigError("cross_prediction: class " + std::to_string(k) +
                              " is absent from every labeled image in the batch");
        }
    }

    const Index local_rows = b * n * c;
    Tensor table = concat({reshape(protos.local, {local_rows, d}), reshape(protos.global, {b * c, d})}, 0);
    const Tensor qn = l2_normalize(positions(q), 1);  // [U*HW, D]
    const Tensor tn = l2_normalize(table, 1);         // [R, D]

    CrossPrediction out;
    out.queries = u;
    out.images = b;
    out.classes = c;
    out.height = h;
    out.width = w;
    const Index total = u * b * c * hw;
    // Each similarity is its own dot product, so equal prototypes give
    // bitwise equal values wherever they sit in the table.
    std::vector<Index> qi_index(static_cast<std::size_t>(total * d)), proto_index(qi_index.size());
    out.valid.assign(static_cast<std::size_t>(total), 0);
    for (Index qi = 0; qi < u; ++qi)
        for (Index j = 0; j < b; ++j)
            for (Index k = 0; k < c; ++k)
                for (Index y = 0; y < h; ++y)
                    for (Index x = 0; x < w; ++x) {
                        const Index region = protos.grid.region(y, x);
                        Index col = -1;
                        if (protos.present(j, region, k))
                            col = (j * n + region) * c + k;
                        else if (protos.present(j, k))
                            col = local_rows + j * c + k;
                        const Index pixel = y * w + x;
                        const Index o = ((qi * b + j) * c + k) * hw + pixel;
                        out.valid[static_cast<std::size_t>(o)] = col >= 0;
                        for (Index e = 0; e < d; ++e) {
                            qi_index[static_cast<std::size_t>(o * d + e)] = col < 0 ? -1 : (qi * hw + pixel) * d + e;
                            proto_index[static_cast<std::size_t>(o * d + e)] = col < 0 ? -1 : col * d + e;
                        }
                    }
    const Tensor products =
        mul(gather(qn, std::move(qi_index), {total, d}), gather(tn, std::move(proto_index), {total, d}));
    out.similarity = reshape(sum_axis(products, 1), {u, b, c, h, w});
    Array mask(total);
    for (Index i = 0; i < total; ++i) mask[i] = out.valid[static_cast<std::size_t>(i)];
    Tensor e = mul_const(exp(scale(out.similarity, 1.0 / temperature)), mask);
    out.probs = normalize_sum(sum_axis(e, 1), 1);
    if (query.rank() == 3) out.probs = reshape(out.probs, {c, h, w});
    return out;
}

Tensor uncertainty(const CrossPrediction& cross, Scalar r) {
    if (!(r > 0.0)) throw ParameterError("uncertainty: r must be positive");
    const Index u = cross.queries, b = cross.images, c = cross.classes, hw = cross.height * cross.width;
    const Array& m = cross.similarity.values();
    Array out(u * hw);
    std::vector<double> prob(static_cast<std::size_t>(b * c)), mean(static_cast<std::size_t>(c));
    for (Index qi = 0; qi < u; ++qi)
        for (Index pixel = 0; pixel < hw; ++pixel) {
            auto at = [&](Index j, Index k) { return ((qi * b + j) * c + k) * hw + pixel; };
            // Per-image profile: softmax over the classes that image can answer.
            for (Index j = 0; j < b; ++j) {
                double top = -std::numeric_limits<double>::infinity();
                for (Index k = 0; k < c; ++k)
                    if (cross.valid[static_cast<std::size_t>(at(j, k))]) top = std::max(top, m[at(j, k)]);
                double z = 0.0;
                for (Index k = 0; k < c; ++k) {
                    const bool ok = cross.valid[static_cast<std::size_t>(at(j, k))];
                    const double e = ok ? std::exp(m[at(j, k)] - top) : 0.0;
                    prob[static_cast<std::size_t>(j * c + k)] = e;
                    z += e;
                }
                for (Index k = 0; k < c; ++k) prob[static_cast<std::size_t>(j * c + k)] /= z;
            }
            bool identical = true;
            for (Index j = 1; j < b && identical; ++j)
                for (Index k = 0; k < c; ++k)
                    if (prob[static_cast<std::size_t>(j * c + k)] != prob[static_cast<std::size_t>(k)]) {
                        identical = false;
                        break;
                    }
            if (identical) {
                out[qi * hw + pixel] = 1.0;
                continue;
            }
            for (Index k = 0; k < c; ++k) {
                double s = 0.0;
                for (Index j = 0; j < b; ++j) s += prob[static_cast<std::size_t>(j * c + k)];
                mean[static_cast<std::size_t>(k)] = s / static_cast<double>(b);
            }
            double acc = 0.0;
            for (Index j = 0; j < b; ++j) {
                double kl = 0.0;
                for (Index k = 0; k < c; ++k) {
                    const double pj = prob[static_cast<std::size_t>(j * c + k)];
                    if (pj > 0.0) kl += pj * std::log(pj / mean[static_cast<std::size_t>(k)]);
                }
                acc += std::exp(-r * std::max(kl, 0.0));
            }
            out[qi * hw + pixel] = std::max(acc / static_cast<double>(b), DBL_MIN);
        }
    return Tensor({u, cross.height, cross.width}, std::move(out));
}

}  // namespace semsim
