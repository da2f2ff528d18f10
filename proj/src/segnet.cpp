#include "semsim/segnet.hpp"

#include <cmath>

namespace semsim {

Index ParamSet::parameter_count() const {
    Index n = 0;
    for (const auto& p : params) n += p.tensor.size();
    return n;
}

void ParamSet::zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
}

TensorMap ParamSet::to_tensor_map() const {
    TensorMap map;
    for (const auto& p : params) map.emplace(p.name, p.tensor.detach());
    for (const auto& b : buffers) {
        const Index c = b.stats->running_mean.size();
        map.emplace(b.name + ".running_mean", Tensor({c}, b.stats->running_mean));
        map.emplace(b.name + ".running_var", Tensor({c}, b.stats->running_var));
    }
    return map;
}

void ParamSet::load(const TensorMap& map) {
    auto fetch = [&](const std::string& name, Index size) -> const Tensor& {
        auto it = map.find(name);
        if (it == map.end()) throw FormatError("checkpoint lacks tensor " + name, 0);
        if (it->second.size() != size) throw FormatError("checkpoint tensor " + name + " has wrong size", 0);
        return it->second;
    };
    for (auto& p : params) p.tensor.mutable_values() = fetch(p.name, p.tensor.size()).values();
    for (auto& b : buffers) {
        const Index c = b.stats->running_mean.size();
        b.stats->running_mean = fetch(b.name + ".running_mean", c).values();
        b.stats->running_var = fetch(b.name + ".running_var", c).values();
    }
}

Tensor kaiming_uniform(const Shape& shape, Index fan_in, Rng& rng) {
    const Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(fan_in));
    return Tensor::uniform(shape, rng, -bound, bound, true);
}

ConvBnRelu::ConvBnRelu(Index in, Index out, Index kernel, Rng& rng)
    : weight(kaiming_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng)),
      gamma(Tensor::ones({out}, true)),
      beta(Tensor::zeros({out}, true)),
      stats(out) {}

Tensor ConvBnRelu::operator()(const Tensor& x, const Mode& mode) {
    const Index pad = weight.shape()[2] / 2;
    return relu(batch_norm(conv2d(x, weight, nullptr, 1, pad), gamma, beta, stats, mode.batch_stats,
                           mode.update_stats));
}

void ConvBnRelu::collect(ParamSet& set, const std::string& prefix) {
    set.params.push_back({prefix + ".weight", weight});
    set.params.push_back({prefix + ".bn.gamma", gamma});
    set.params.push_back({prefix + ".bn.beta", beta});
    set.buffers.push_back({prefix + ".bn", &stats});
}

// ---- transformer block ----

MsaParams::MsaParams(Index dim_, Index heads_, Index mlp_ratio, Rng& rng) : dim(dim_), heads(heads_) {
    if (heads <= 0 || dim % heads != 0) {
        throw ParameterError("msa: dim " + std::to_string(dim) + " not divisible by heads " +
                             std::to_string(heads));
    }
    const Index hidden = dim * mlp_ratio;
    ln1_gamma = Tensor::ones({dim}, true);
    ln1_beta = Tensor::zeros({dim}, true);
    qkv_weight = kaiming_uniform({3 * dim, dim}, dim, rng);
    qkv_bias = Tensor::zeros({3 * dim}, true);
    proj_weight = kaiming_uniform({dim, dim}, dim, rng);
    proj_bias = Tensor::zeros({dim}, true);
    ln2_gamma = Tensor::ones({dim}, true);
    ln2_beta = Tensor::zeros({dim}, true);
    fc1_weight = kaiming_uniform({hidden, dim}, dim, rng);
    fc1_bias = Tensor::zeros({hidden}, true);
    fc2_weight = kaiming_uniform({dim, hidden}, hidden, rng);
    fc2_bias = Tensor::zeros({dim}, true);
}

void MsaParams::zero_residual_branches() {
    proj_weight.mutable_values().setZero();
    proj_bias.mutable_values().setZero();
    fc2_weight.mutable_values().setZero();
    fc2_bias.mutable_values().setZero();
}

void MsaParams::collect(ParamSet& set, const std::string& prefix) {
    set.params.push_back({prefix + ".ln1.gamma", ln1_gamma});
    set.params.push_back({prefix + ".ln1.beta", ln1_beta});
    set.params.push_back({prefix + ".qkv.weight", qkv_weight});
    set.params.push_back({prefix + ".qkv.bias", qkv_bias});
    set.params.push_back({prefix + ".proj.weight", proj_weight});
    set.params.push_back({prefix + ".proj.bias", proj_bias});
    set.params.push_back({prefix + ".ln2.gamma", ln2_gamma});
    set.params.push_back({prefix + ".ln2.beta", ln2_beta});
    set.params.push_back({prefix + ".fc1.weight", fc1_weight});
    set.params.push_back({prefix + ".fc1.bias", fc1_bias});
    set.params.push_back({prefix + ".fc2.weight", fc2_weight});
    set.params.push_back({prefix + ".fc2.bias", fc2_bias});
}

Tensor msa_block(const Tensor& tokens, const MsaParams& params, Tensor* attention) {
    Index groups = 1, length = 0, dim = 0;
    if (tokens.rank() == 2) {
        length = tokens.shape()[0];
        dim = tokens.shape()[1];
    } else if (tokens.rank() == 3) {
        groups = tokens.shape()[0];
        length = tokens.shape()[1];
        dim = tokens.shape()[2];
    } else {
        throw DimensionError("msa_block: tokens must be [L,D] or [G,L,D], got " + to_string(tokens.shape()));
    }
    const Index heads = params.heads;
    if (heads <= 0 || dim % heads != 0) {
        throw ParameterError("msa_block: token dim " + std::to_string(dim) + " not divisible by heads " +
                             std::to_string(heads));
    }
    if (dim != params.dim) throw DimensionError("msa_block: token dim does not match parameters");
    const Index head_dim = dim / heads;
    const Index rows = groups * length;

    Tensor x = reshape(tokens, {rows, dim});
    Tensor qkv = linear(layer_norm(x, params.ln1_gamma, params.ln1_beta), params.qkv_weight, params.qkv_bias);
    // [G, L, 3, heads, hd] -> [3, G, heads, L, hd]
    qkv = permute(reshape(qkv, {groups, length, 3, heads, head_dim}), {2, 0, 3, 1, 4});
    auto part = [&](Index k) {
        return reshape(narrow(qkv, 0, k, 1), {groups * heads, length, head_dim});
    };
    Tensor q = scale(part(0), 1.0 / std::sqrt(static_cast<Scalar>(head_dim))), k = part(1), v = part(2);
    Tensor scores = bmm(q, permute(k, {0, 2, 1}));
    Tensor weights = softmax(scores, 2);
    if (attention) *attention = weights;
    Tensor mixed = bmm(weights, v);  // [G*heads, L, hd]
    mixed = reshape(permute(reshape(mixed, {groups, heads, length, head_dim}), {0, 2, 1, 3}), {rows, dim});
    Tensor hidden = add(x, linear(mixed, params.proj_weight, params.proj_bias));
    Tensor mlp = linear(gelu(linear(layer_norm(hidden, params.ln2_gamma, params.ln2_beta), params.fc1_weight,
                                    params.fc1_bias)),
                        params.fc2_weight, params.fc2_bias);
    return reshape(add(hidden, mlp), tokens.shape());
}

// ---- UNet ----

UNet::UNet(const UNetConfig& config, Rng& rng) : config_(config) {
    const auto& ch = config.channels;
    Index in = config.in_channels;
    for (std::size_t s = 0; s < 4; ++s) {
        down_[s][0] = ConvBnRelu(in, ch[s], 3, rng);
        down_[s][1] = ConvBnRelu(ch[s], ch[s], 3, rng);
        in = ch[s];
    }
    // up_[s] produces stage-s resolution from stage s+1 and the stage-s skip.
    for (std::size_t s = 0; s < 3; ++s) {
        up_[s][0] = ConvBnRelu(ch[s + 1] + ch[s], ch[s], 3, rng);
        up_[s][1] = ConvBnRelu(ch[s], ch[s], 3, rng);
    }
    head_weight_ = kaiming_uniform({config.classes, ch[0], 1, 1}, ch[0], rng);
    head_bias_ = Tensor::zeros({config.classes}, true);
}

EncoderOutput UNet::encode(const Tensor& images, const Mode& mode, Rng* dropout_rng) {
    const Index h = images.dim(-2), w = images.dim(-1);
    if (h % 8 != 0 || w % 8 != 0) {
        throw DimensionError("encode: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                             " must be divisible by 8");
    }
    if (images.dim(-3) != config_.in_channels) throw DimensionError("encode: channel count mismatch");
    EncoderOutput out;
    Tensor x = images;
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) x = maxpool2d(x, 2);
        x = down_[s][1](down_[s][0](x, mode), mode);
        out.stages[s] = x;
    }
    if (mode.dropout && config_.dropout > 0.0) {
        if (!dropout_rng) throw ContractError("encode: training-mode dropout needs an rng stream");
        out.stages[3] = channel_dropout(out.stages[3], config_.dropout, *dropout_rng, true);
    }
    return out;
}

Tensor UNet::decode(const EncoderOutput& features, const Mode& mode) {
    const auto& ch = config_.channels;
    const Index channel_axis = features.stages[0].rank() == 4 ? 1 : 0;
    for (std::size_t s = 0; s < 4; ++s) {
        if (features.stages[s].dim(channel_axis) != ch[s]) {
            throw DimensionError("decode: stage " + std::to_string(s + 1) + " has " +
                                 std::to_string(features.stages[s].dim(channel_axis)) +
                                 " channels, skip connection expects " + std::to_string(ch[s]));
        }
    }
    Tensor x = features.stages[3];
    for (int s = 2; s >= 0; --s) {
        const Tensor& skip = features.stages[s];
        Tensor up = bilinear_interpolate(x, skip.dim(-2), skip.dim(-1));
        x = up_[s][1](up_[s][0](concat({up, skip}, channel_axis), mode), mode);
    }
    Tensor logits = conv2d(x, head_weight_, &head_bias_, 1, 0);
    return softmax(logits, channel_axis);
}

void UNet::collect(ParamSet& set, const std::string& prefix) {
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t k = 0; k < 2; ++k)
            down_[s][k].collect(set, prefix + ".down" + std::to_string(s + 1) + "." + std::to_string(k));
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t k = 0; k < 2; ++k)
            up_[s][k].collect(set, prefix + ".up" + std::to_string(s + 1) + "." + std::to_string(k));
    set.params.push_back({prefix + ".head.weight", head_weight_});
    set.params.push_back({prefix + ".head.bias", head_bias_});
}

}  // namespace semsim
