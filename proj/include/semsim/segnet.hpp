#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "semsim/ops.hpp"
#include "semsim/tensor.hpp"

namespace semsim {

/// How a forward pass treats the stochastic and batch-dependent layers.
struct Mode {
    bool batch_stats = false;   // batch norm uses batch moments
    bool update_stats = false;  // ... and folds them into the running moments
    bool dropout = false;       // channel dropout on the deepest stage

    static Mode train() { return {true, true, true}; }
    /// Training-time pass that must stay deterministic (weak branch).
    static Mode weak() { return {true, false, false}; }
    static Mode eval() { return {false, false, false}; }
};

/// Flat registry of trainable tensors and batch-norm buffers.
struct ParamRef {
    std::string name;
    Tensor tensor;
};
struct BufferRef {
    std::string name;
    BatchNormStats* stats;
};

struct ParamSet {
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;

    Index parameter_count() const;
    void zero_grad();
    /// Parameters plus "<name>.running_mean/var" buffers, by name.
    TensorMap to_tensor_map() const;
    /// Copies values from `map`; every registered name must be present
    /// with a matching shape.
    void load(const TensorMap& map);
};

/// Kaiming-uniform (fan-in) initialized tensor.
Tensor kaiming_uniform(const Shape& shape, Index fan_in, Rng& rng);

/// 3x3 convolution (no bias) + batch norm + ReLU.
struct ConvBnRelu {
    Tensor weight, gamma, beta;
    BatchNormStats stats;

    ConvBnRelu() = default;
    ConvBnRelu(Index in, Index out, Index kernel, Rng& rng);
    Tensor operator()(const Tensor& x, const Mode& mode);
    void collect(ParamSet& set, const std::string& prefix);
};

struct UNetConfig {
    Index in_channels = 1;
    Index classes = 4;
    std::array<Index, 4> channels{8, 16, 32, 64};
    Scalar dropout = 0.5;
};

/// Stage features f1..f4; stage i has spatial size H / 2^(i-1).
struct EncoderOutput {
    std::array<Tensor, 4> stages;
};

/// Transformer block parameters: pre-norm attention and MLP, both residual.
struct MsaParams {
    Index dim = 0;
    Index heads = 4;
    Tensor ln1_gamma, ln1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias;
    Tensor ln2_gamma, ln2_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias;

    MsaParams() = default;
    MsaParams(Index dim, Index heads, Index mlp_ratio, Rng& rng);
    /// Zeroes the attention output projection and the second MLP layer,
    /// which turns the block into the identity.
    void zero_residual_branches();
    void collect(ParamSet& set, const std::string& prefix);
};

/// tokens: [L, D] (one sequence) or [G, L, D] (G independent sequences).
/// Computes T' = MSA(LN(T)) + T, then MLP(LN(T')) + T'.
/// When `attention` is given it receives the weights, shaped [G*heads, L, L].
Tensor msa_block(const Tensor& tokens, const MsaParams& params, Tensor* attention = nullptr);

/// 4-stage UNet: double 3x3 conv blocks, 2x2 max pooling, bilinear up-path.
class UNet {
public:
    UNet() = default;
    UNet(const UNetConfig& config, Rng& rng);

    /// images: [1,H,W] or [N,1,H,W] with H, W divisible by 8.
    EncoderOutput encode(const Tensor& images, const Mode& mode, Rng* dropout_rng = nullptr);
    /// Class-probability map [N,C,H,W] (or [C,H,W] for unbatched input).
    Tensor decode(const EncoderOutput& features, const Mode& mode);

    const UNetConfig& config() const { return config_; }
    void collect(ParamSet& set, const std::string& prefix);

private:
    UNetConfig config_;
    std::array<std::array<ConvBnRelu, 2>, 4> down_;
    std::array<std::array<ConvBnRelu, 2>, 3> up_;
    Tensor head_weight_, head_bias_;
};

}  // namespace semsim
