#include "semsim/sfm.hpp"

#include <string>

namespace semsim {

namespace {

std::string dims(Index h, Index w) { return std::to_string(h) + "x" + std::to_string(w); }

void check_layout(const WindowLayout& l) {
    const Index s = l.windows;
    if (s <= 0 || l.batch <= 0 || l.dim <= 0) throw ContractError("window layout: non-positive geometry");
    for (int k = 0; k < 3; ++k) {
        if (l.heights[k] % s != 0 || l.widths[k] % s != 0 ||
            l.counts[k] != (l.heights[k] / s) * (l.widths[k] / s)) {
            throw ContractError("window layout: split point " + std::to_string(k) +
                                " does not match the recorded geometry");
        }
    }
}

}  // namespace

WindowSequence patch_match(const std::array<Tensor, 3>& maps, Index windows) {
    if (windows <= 0) throw ParameterError("patch_match: windows per side must be positive");
    const bool batched = maps[0].rank() == 4;
    WindowLayout l;
    l.batched = batched;
    l.windows = windows;
    l.batch = batched ? maps[0].dim(0) : 1;
    l.dim = maps[0].dim(-3);
    for (int k = 0; k < 3; ++k) {
        const Tensor& m = maps[k];
        if (m.rank() != (batched ? 4 : 3)) throw DimensionError("patch_match: scale " + std::to_string(k) +
                                                                " has rank " + std::to_string(m.rank()));
        if ((batched && m.dim(0) != l.batch) || m.dim(-3) != l.dim) {
            throw DimensionError("patch_match: scale " + std::to_string(k) + " has shape " +
                                 to_string(m.shape()) + ", batch or channels differ from scale 0");
        }
        l.heights[k] = m.dim(-2);
        l.widths[k] = m.dim(-1);
        if (k > 0 && (2 * l.heights[k] != l.heights[k - 1] || 2 * l.widths[k] != l.widths[k - 1])) {
            throw DimensionError("patch_match: scale " + std::to_string(k) + " is " +
                                 dims(l.heights[k], l.widths[k]) + ", expected half of " +
                                 dims(l.heights[k - 1], l.widths[k - 1]));
        }
        if (l.heights[k] % windows != 0 || l.widths[k] % windows != 0) {
            throw DimensionError("patch_match: scale " + std::to_string(k) + " (" +
                                 dims(l.heights[k], l.widths[k]) + ") is not divisible into " +
                                 std::to_string(windows) + "x" + std::to_string(windows) + " windows");
        }
        l.counts[k] = (l.heights[k] / windows) * (l.widths[k] / windows);
    }

    // Flatten every map per image and gather tokens out of the concatenation.
    std::array<Index, 3> offset{};
    Index per_image = 0;
    for (int k = 0; k < 3; ++k) {
        offset[k] = per_image;
        per_image += l.dim * l.heights[k] * l.widths[k];
    }
    std::vector<Tensor> flat;
    for (int k = 0; k < 3; ++k) flat.push_back(reshape(maps[k], {l.batch, l.dim * l.heights[k] * l.widths[k]}));
    Tensor all = concat(flat, 1);

    const Index len = l.length();
    std::vector<Index> index;
    index.reserve(static_cast<std::size_t>(l.groups() * len * l.dim));
    for (Index b = 0; b < l.batch; ++b)
        for (Index wy = 0; wy < windows; ++wy)
            for (Index wx = 0; wx < windows; ++wx)
                for (int k = 0; k < 3; ++k) {
                    const Index h = l.heights[k], w = l.widths[k];
                    const Index wh = h / windows, ww = w / windows;
                    for (Index y = wy * wh; y < (wy + 1) * wh; ++y)
                        for (Index x = wx * ww; x < (wx + 1) * ww; ++x)
                            for (Index d = 0; d < l.dim; ++d)
                                index.push_back(b * per_image + offset[k] + (d * h + y) * w + x);
                }
    return {gather(all, std::move(index), {l.groups(), len, l.dim}), l};
}

WindowSequence scale_interact(const WindowSequence& seq, const MsaParams& params) {
    return {msa_block(seq.tokens, params), seq.layout};
}

std::array<Tensor, 3> scale_split(const WindowSequence& seq) {
    const WindowLayout& l = seq.layout;
    check_layout(l);
    const Index len = l.length();
    if (seq.tokens.shape() != Shape{l.groups(), len, l.dim}) {
        throw ContractError("scale_split: tokens " + to_string(seq.tokens.shape()) +
                            " disagree with the recorded split points");
    }
    const Index s = l.windows;
    std::array<Tensor, 3> out;
    Index start = 0;
    for (int k = 0; k < 3; ++k) {
        const Index h = l.heights[k], w = l.widths[k];
        const Index wh = h / s, ww = w / s;
        std::vector<Index> index;
        index.reserve(static_cast<std::size_t>(l.batch * l.dim * h * w));
        for (Index b = 0; b < l.batch; ++b)
            for (Index d = 0; d < l.dim; ++d)
                for (Index y = 0; y < h; ++y)
                    for (Index x = 0; x < w; ++x) {
                        const Index g = (b * s + y / wh) * s + x / ww;
                        const Index pos = start + (y % wh) * ww + x % ww;
                        index.push_back((g * len + pos) * l.dim + d);
                    }
        Shape shape = l.batched ? Shape{l.batch, l.dim, h, w} : Shape{l.dim, h, w};
        out[k] = gather(seq.tokens, std::move(index), shape);
        start += l.counts[k];
    }
    return out;
}

Tensor fuse(const std::array<Tensor, 3>& maps, ConvBnRelu& conv, const Mode& mode) {
    const Index h = maps[1].dim(-2), w = maps[1].dim(-1);
    if (maps[0].dim(-2) != 2 * h || maps[0].dim(-1) != 2 * w || 2 * maps[2].dim(-2) != h ||
        2 * maps[2].dim(-1) != w) {
        throw DimensionError("fuse: resolutions " + to_string(maps[0].shape()) + ", " + to_string(maps[1].shape()) +
                             ", " + to_string(maps[2].shape()) + " are not nested by factors of 2");
    }
    Tensor lo = bilinear_interpolate(maps[0], h, w);
    Tensor hi = bilinear_interpolate(maps[2], h, w);
    const Index channel_axis = maps[1].rank() == 4 ? 1 : 0;
    return conv(concat({lo, maps[1], hi}, channel_axis), mode);
}

AttentionCost attention_cost(Index height, Index width, int scale_exponent, Index windows, bool windowed) {
    Index tokens = 0;
    for (int k = 0; k < 3; ++k) {
        const Index f = Index{1} << (scale_exponent + k);
        tokens += (height / f) * (width / f);
    }
    AttentionCost c;
    c.sequences = windowed ? windows * windows : 1;
    c.length = tokens / c.sequences;
    c.pairs = c.sequences * c.length * c.length;
    return c;
}

Sfm::Sfm(const SfmConfig& config, const UNetConfig& net, Rng& rng) : config_(config) {
    for (int k = 0; k < 3; ++k) {
        const int stage = config.stages[k];
        if (stage < 1 || stage > 4 || (k > 0 && stage != config.stages[k - 1] + 1)) {
            throw ConfigError("sfm: stages must be three consecutive encoder stages in 1..4");
        }
        const Index in = net.channels[static_cast<std::size_t>(stage - 1)];
        proj_weight_[k] = kaiming_uniform({config.dim, in, 1, 1}, in, rng);
        proj_bias_[k] = Tensor::zeros({config.dim}, true);
    }
    block_ = MsaParams(config.dim, config.heads, config.mlp_ratio, rng);
    fuse_ = ConvBnRelu(3 * config.dim, config.dim, 3, rng);
}

Tensor Sfm::operator()(const EncoderOutput& features, const Mode& mode, Tensor* attention) {
    std::array<Tensor, 3> projected;
    for (int k = 0; k < 3; ++k) {
        const Tensor& f = features.stages[static_cast<std::size_t>(config_.stages[k] - 1)];
        projected[k] = conv2d(f, proj_weight_[k], &proj_bias_[k], 1, 0);
    }
    WindowSequence seq = patch_match(projected, config_.windows);
    seq.tokens = msa_block(seq.tokens, block_, attention);
    return fuse(scale_split(seq), fuse_, mode);
}

void Sfm::collect(ParamSet& set, const std::string& prefix) {
    for (int k = 0; k < 3; ++k) {
        set.params.push_back({prefix + ".proj" + std::to_string(k) + ".weight", proj_weight_[k]});
        set.params.push_back({prefix + ".proj" + std::to_string(k) + ".bias", proj_bias_[k]});
    }
    block_.collect(set, prefix + ".block");
    fuse_.collect(set, prefix + ".fuse");
}

}  // namespace semsim
