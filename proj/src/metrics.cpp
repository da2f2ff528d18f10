#include "semsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace semsim {

namespace {

void check_shapes(const LabelField& a, const LabelField& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError("metrics: prediction is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             ", ground truth is " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

// Squared 1-D distance transform of f (lower envelope of parabolas).
void edt_1d(const std::vector<Scalar>& f, std::vector<Scalar>& d, std::vector<Index>& v, std::vector<Scalar>& z) {
    const Index n = static_cast<Index>(f.size());
    const Scalar inf = std::numeric_limits<Scalar>::infinity();
    Index k = -1;
    for (Index q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        for (;;) {
            if (k < 0) {
                v[0] = q;
                z[0] = -inf;
                z[1] = inf;
                k = 0;
                break;
            }
            const Index p = v[k];
            const Scalar s = ((f[q] + static_cast<Scalar>(q * q)) - (f[p] + static_cast<Scalar>(p * p))) /
                             static_cast<Scalar>(2 * (q - p));
            if (s <= z[k]) {
                --k;
                continue;
            }
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = inf;
            break;
        }
    }
    if (k < 0) {
        std::fill(d.begin(), d.end(), inf);
        return;
    }
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
        while (z[j + 1] < static_cast<Scalar>(q)) ++j;
        const Scalar dq = static_cast<Scalar>(q - v[j]);
        d[q] = dq * dq + f[v[j]];
    }
}

std::vector<Scalar> directed(const BinaryField& from, const Field<Scalar>& to_distance) {
    std::vector<Scalar> out;
    for (Index y = 0; y < from.rows(); ++y)
        for (Index x = 0; x < from.cols(); ++x)
            if (from(y, x)) out.push_back(to_distance(y, x));
    return out;
}

struct Surfaces {
    std::vector<Scalar> pred_to_gt, gt_to_pred;
};

std::optional<Surfaces> surfaces(const LabelField& pred, const LabelField& gt, int c) {
    check_shapes(pred, gt);
    const BinaryField a = boundary(class_view(pred, c)), b = boundary(class_view(gt, c));
    if (!a.any() || !b.any()) return std::nullopt;
    return Surfaces{directed(a, distance_transform(b)), directed(b, distance_transform(a))};
}

Scalar mean_of(const std::vector<Scalar>& v) {
    Scalar s = 0.0;
    for (Scalar x : v) s += x;
    return s / static_cast<Scalar>(v.size());
}

std::string number(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

BinaryField class_view(const LabelField& labels, int c) { return labels == c; }

BinaryField boundary(const BinaryField& mask) {
    const Index h = mask.rows(), w = mask.cols();
    BinaryField out = BinaryField::Constant(h, w, false);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            if (!mask(y, x)) continue;
            const bool interior = y > 0 && y + 1 < h && x > 0 && x + 1 < w && mask(y - 1, x) && mask(y + 1, x) &&
                                  mask(y, x - 1) && mask(y, x + 1);
            out(y, x) = !interior;
        }
    return out;
}

Field<Scalar> distance_transform(const BinaryField& sites) {
    const Index h = sites.rows(), w = sites.cols();
    const Scalar inf = std::numeric_limits<Scalar>::infinity();
    Field<Scalar> sq(h, w);
    const Index n = std::max(h, w);
    std::vector<Scalar> f, d;
    std::vector<Index> v(static_cast<std::size_t>(n));
    std::vector<Scalar> z(static_cast<std::size_t>(n + 1));
    f.resize(static_cast<std::size_t>(h));
    d.resize(static_cast<std::size_t>(h));
    for (Index x = 0; x < w; ++x) {
        for (Index y = 0; y < h; ++y) f[y] = sites(y, x) ? 0.0 : inf;
        edt_1d(f, d, v, z);
        for (Index y = 0; y < h; ++y) sq(y, x) = d[y];
    }
    f.resize(static_cast<std::size_t>(w));
    d.resize(static_cast<std::size_t>(w));
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) f[x] = sq(y, x);
        edt_1d(f, d, v, z);
        for (Index x = 0; x < w; ++x) sq(y, x) = d[x];
    }
    return sq.unaryExpr([](Scalar v) { return std::sqrt(v); });
}

Scalar dsc(const LabelField& pred, const LabelField& gt, int c) {
    check_shapes(pred, gt);
    const BinaryField a = class_view(pred, c), b = class_view(gt, c);
    const Index na = a.count(), nb = b.count();
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<Scalar>((a && b).count()) / static_cast<Scalar>(na + nb);
}

std::optional<Scalar> hd95(const LabelField& pred, const LabelField& gt, int c) {
    auto s = surfaces(pred, gt, c);
    if (!s) return std::nullopt;
    std::vector<Scalar> pooled = s->pred_to_gt;
    pooled.insert(pooled.end(), s->gt_to_pred.begin(), s->gt_to_pred.end());
    std::sort(pooled.begin(), pooled.end());
    const std::size_t rank = (95 * pooled.size() + 99) / 100;  // nearest rank, integer arithmetic
    return pooled[std::max<std::size_t>(rank, 1) - 1];
}

std::optional<Scalar> assd(const LabelField& pred, const LabelField& gt, int c) {
    auto s = surfaces(pred, gt, c);
    if (!s) return std::nullopt;
    return 0.5 * (mean_of(s->pred_to_gt) + mean_of(s->gt_to_pred));
}

SampleScore score_sample(const std::string& id, const LabelField& pred, const LabelField& gt, Index classes) {
    SampleScore out{id, {}};
    for (int c = 1; c < classes; ++c) out.classes.push_back({c, dsc(pred, gt, c), hd95(pred, gt, c), assd(pred, gt, c)});
    return out;
}

MetricsReport summarize(std::vector<SampleScore> samples) {
    MetricsReport r;
    r.samples = std::move(samples);
    if (r.samples.empty()) return r;
    const std::size_t k = r.samples.front().classes.size();
    for (std::size_t c = 0; c < k; ++c) {
        ClassSummary s;
        s.label = r.samples.front().classes[c].label;
        Index defined = 0;
        for (const auto& sample : r.samples) {
            const ClassScore& cs = sample.classes.at(c);
            s.dsc += cs.dsc;
            if (cs.hd95 && cs.assd) {
                s.hd95 += *cs.hd95;
                s.assd += *cs.assd;
                ++defined;
            } else {
                ++s.empty;
            }
        }
        s.dsc /= static_cast<Scalar>(r.samples.size());
        s.hd95 = defined ? s.hd95 / static_cast<Scalar>(defined) : std::numeric_limits<Scalar>::quiet_NaN();
        s.assd = defined ? s.assd / static_cast<Scalar>(defined) : std::numeric_limits<Scalar>::quiet_NaN();
        r.per_class.push_back(s);
    }
    for (const auto& s : r.per_class) {
        r.mean_dsc += s.dsc / static_cast<Scalar>(k);
        r.mean_hd95 += s.hd95 / static_cast<Scalar>(k);
        r.mean_assd += s.assd / static_cast<Scalar>(k);
    }
    return r;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    auto opt = [](const std::optional<Scalar>& v) { return v ? number(*v) : std::string("empty"); };
    out << "sample_id,class,dsc,hd95,assd\n";
    for (const auto& s : report.samples)
        for (const auto& c : s.classes)
            out << s.id << ',' << c.label << ',' << number(c.dsc) << ',' << opt(c.hd95) << ',' << opt(c.assd) << '\n';
    for (const auto& c : report.per_class)
        out << "mean," << c.label << ',' << number(c.dsc) << ',' << number(c.hd95) << ',' << number(c.assd) << '\n';
    out << "mean,fg," << number(report.mean_dsc) << ',' << number(report.mean_hd95) << ',' << number(report.mean_assd)
        << '\n';
}

}  // namespace semsim
