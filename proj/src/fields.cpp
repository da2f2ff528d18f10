#include "semsim/fields.hpp"

namespace semsim {

LabelField downsample_nearest(const LabelField& labels, Index height, Index width) {
    if (height <= 0 || width <= 0) throw DimensionError("downsample_nearest: zero target dimension");
    LabelField out(height, width);
    for (Index y = 0; y < height; ++y) {
        const Index sy = std::min<Index>(labels.rows() - 1, (2 * y + 1) * labels.rows() / (2 * height));
        for (Index x = 0; x < width; ++x) {
            const Index sx = std::min<Index>(labels.cols() - 1, (2 * x + 1) * labels.cols() / (2 * width));
            out(y, x) = labels(sy, sx);
        }
    }
    return out;
}

Tensor stack_images(const std::vector<ImageField>& images) {
    if (images.empty()) throw DimensionError("stack_images: empty batch");
    const Index h = images[0].rows(), w = images[0].cols();
    Array v(static_cast<Index>(images.size()) * h * w);
    Index o = 0;
    for (const auto& img : images) {
        if (img.rows() != h || img.cols() != w) throw DimensionError("stack_images: images differ in size");
        v.segment(o, h * w) = img.reshaped<Eigen::RowMajor>();
        o += h * w;
    }
    return Tensor({static_cast<Index>(images.size()), 1, h, w}, std::move(v));
}

Array one_hot(const std::vector<LabelField>& labels, Index classes) {
    if (labels.empty()) return Array();
    const Index plane = labels[0].size();
    Array out = Array::Zero(static_cast<Index>(labels.size()) * classes * plane);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const auto flat = labels[n].reshaped<Eigen::RowMajor>();
        if (labels[n].size() != plane) throw DimensionError("one_hot: masks differ in size");
        for (Index k = 0; k < plane; ++k) {
            const int c = flat[k];
            if (c < 0 || c >= classes) {
                throw ContractError("one_hot: class index " + std::to_string(c) + " outside [0," +
                                    std::to_string(classes) + ")");
            }
            out[(static_cast<Index>(n) * classes + c) * plane + k] = 1.0;
        }
    }
    return out;
}

}  // namespace semsim
