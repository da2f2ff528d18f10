#pragma once

#include <array>

#include "semsim/segnet.hpp"

namespace semsim {

struct SfmConfig {
    std::array<int, 3> stages{2, 3, 4};  // 1-based consecutive encoder stages
    Index windows = 2;                   // S: windows per side
    Index dim = 32;                      // D
    Index heads = 4;
    Index mlp_ratio = 4;
};

/// Geometry needed to undo patch matching.
struct WindowLayout {
    Index batch = 0;
    Index windows = 0;  // S
    Index dim = 0;
    std::array<Index, 3> heights{}, widths{};  // full map sizes per scale
    std::array<Index, 3> counts{};             // tokens per window per scale (split points)
    bool batched = true;

    Index length() const { return counts[0] + counts[1] + counts[2]; }
    Index groups() const { return batch * windows * windows; }
};

/// Tokens of all windows, [B*S*S, L, D], window-major within each image.
struct WindowSequence {
    Tensor tokens;
    WindowLayout layout;
};

/// maps: three [D,H,W] / [B,D,H,W] maps at nested resolutions (each half the
/// previous), all divisible into S x S windows. Window j holds the flattened
/// tokens of scale 0, then scale 1, then scale 2.
WindowSequence patch_match(const std::array<Tensor, 3>& maps, Index windows);

/// One transformer block per window; windows never exchange tokens.
WindowSequence scale_interact(const WindowSequence& seq, const MsaParams& params);

/// Inverse of patch_match.
std::array<Tensor, 3> scale_split(const WindowSequence& seq);

/// Resamples the outer maps to the middle resolution, concatenates channels
/// and applies conv3x3 + BN + ReLU.
Tensor fuse(const std::array<Tensor, 3>& maps, ConvBnRelu& conv, const Mode& mode);

/// Attention bookkeeping per image for maps of an HxW input whose first
/// fused scale is H/2^i. `windowed = false` describes one sequence holding
/// every token of all three scales.
struct AttentionCost {
    Index sequences = 0;
    Index length = 0;
    Index pairs = 0;  // sequences * length^2
};
AttentionCost attention_cost(Index height, Index width, int scale_exponent, Index windows, bool windowed = true);

class Sfm {
public:
    Sfm() = default;
    Sfm(const SfmConfig& config, const UNetConfig& net, Rng& rng);

    /// Enhanced feature map [B,D,H',W'] at the middle fused stage's resolution.
    Tensor operator()(const EncoderOutput& features, const Mode& mode, Tensor* attention = nullptr);

    const SfmConfig& config() const { return config_; }
    MsaParams& block() { return block_; }
    void collect(ParamSet& set, const std::string& prefix);

private:
    SfmConfig config_;
    std::array<Tensor, 3> proj_weight_, proj_bias_;
    MsaParams block_;
    ConvBnRelu fuse_;
};

}  // namespace semsim
