#pragma once

#include <cstdint>
#include <vector>

#include "semsim/fields.hpp"
#include "semsim/ops.hpp"

namespace semsim {

/// Row-softmax of pairwise cosine similarity between feature positions.
/// f: [D,H,W] -> [HW,HW], or [B,D,H,W] -> [B,HW,HW].
Tensor compute_affinity(const Tensor& features);

/// (p + p.M^T) / 2 at feature resolution, so every position stays a class
/// distribution. p: [C,H,W] / [B,C,H,W] at any resolution; it is resized
/// bilinearly to height x width first. Returns [C,HW] / [B,C,HW].
Tensor refine_prediction(const Tensor& probs, const Tensor& affinity, Index height, Index width);

/// Splits N sub-regions into a gy x gx grid with gy the largest divisor of
/// N not above sqrt(N) (N = 4 -> 2x2, N = 2 -> 1x2, N = 8 -> 2x4).
struct RegionGrid {
    Index rows = 1, cols = 1;
    Index cell_height = 0, cell_width = 0;

    RegionGrid() = default;
    RegionGrid(Index regions, Index height, Index width);
    Index count() const { return rows * cols; }
    Index region(Index y, Index x) const { return (y / cell_height) * cols + x / cell_width; }
};

/// Class centroids of a labeled batch, per sub-region and per whole image.
struct PrototypeSet {
    Index images = 0, regions = 0, classes = 0, dim = 0;
    RegionGrid grid;
    Tensor local;   // [B,N,C,D]; absent entries are zero
    Tensor global;  // [B,C,D]
    std::vector<std::uint8_t> local_present;   // B*N*C
    std::vector<std::uint8_t> global_present;  // B*C

    bool present(Index b, Index n, Index c) const { return local_present[(b * regions + n) * classes + c] != 0; }
    bool present(Index b, Index c) const { return global_present[b * classes + c] != 0; }
};

/// features: [B,D,H,W]; labels: B masks already at feature resolution.
PrototypeSet compute_prototypes(const Tensor& features, const std::vector<LabelField>& labels, Index classes,
                                Index regions);

/// Cross-image prediction for a batch of query maps.
struct CrossPrediction {
    Tensor probs;       // [U,C,H,W]
    Tensor similarity;  // [U,B,C,H,W] cosine values, 0 where `valid` is false
    std::vector<std::uint8_t> valid;  // same layout as similarity
    Index queries = 0, images = 0, classes = 0, height = 0, width = 0;
};

/// query: [U,D,H,W] with H, W equal to the prototype grid's feature size.
/// Each pixel is compared with the prototypes of its own sub-region, falling
/// back to the image-level prototype, and skipping images lacking the class.
/// `temperature` divides the similarities inside the exponent (1 = plain).
CrossPrediction cross_prediction(const Tensor& query, const PrototypeSet& protos, Scalar temperature = 1.0);

/// Per-pixel reliability in (0,1], shaped [U,H,W]; carries no gradient.
Tensor uncertainty(const CrossPrediction& cross, Scalar r);

}  // namespace semsim
