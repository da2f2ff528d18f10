#pragma once

#include <vector>

#include "semsim/tensor.hpp"

namespace semsim {

/// Row-major 2-D fields: images in [0,1] and class-index masks.
template <typename T>
using Field = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageField = Field<Scalar>;
using LabelField = Field<int>;

/// Nearest-neighbour resampling (half-pixel centres).
LabelField downsample_nearest(const LabelField& labels, Index height, Index width);

/// Stacks images into an [N,1,H,W] tensor.
Tensor stack_images(const std::vector<ImageField>& images);

/// One-hot [N,C,H,W] (as a flat value array) for a batch of masks.
Array one_hot(const std::vector<LabelField>& labels, Index classes);

}  // namespace semsim
