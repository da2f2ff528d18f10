#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semsim/fields.hpp"

namespace semsim {

struct SegSample {
    std::string id;
    ImageField image;  // values in [0,1]
    LabelField mask;   // class indices in [0,C)
};

/// Knobs of the synthetic generator. Structure k (1..C-1) is an
/// ellipse-like blob whose size and elongation follow a per-class prior.
struct GeneratorConfig {
    Index height = 32, width = 32, classes = 4;
    Scalar noise = 0.05;             // Gaussian pixel noise
    Scalar background = 0.3;         // mean background intensity
    Scalar band_spacing = 0.12;      // distance between consecutive class intensity bands
    Scalar band_jitter = 0.06;       // per-sample shift of each band, uniform +-
    Scalar shading = 0.15;           // amplitude of a smooth per-sample background ramp
    Scalar contrast_jitter = 0.3;    // per-sample gain about 0.5, uniform in 1 +- this
    Scalar brightness_jitter = 0.1;  // per-sample offset, uniform +-
    Scalar boundary_wobble = 0.15;   // relative radial perturbation of blob outlines
    int max_retries = 100;
};

SegSample generate_sample(const GeneratorConfig& cfg, Index index, Rng rng);
/// Sample i is drawn from Rng(seed).split(i), so samples are independent of count.
std::vector<SegSample> generate_dataset(Index count, const GeneratorConfig& cfg, std::uint64_t seed);

// ---- augmentation ----

struct Box {
    Index y0 = 0, x0 = 0, height = 0, width = 0;
    Scalar area_fraction(Index h, Index w) const {
        return static_cast<Scalar>(height * width) / static_cast<Scalar>(h * w);
    }
    bool contains(Index y, Index x) const { return y >= y0 && y < y0 + height && x >= x0 && x < x0 + width; }
};

struct Flip {
    bool horizontal = false, vertical = false;
};

Flip sample_flip(Rng& rng);

template <typename T>
Field<T> apply_flip(const Field<T>& f, const Flip& flip) {
    Field<T> out = f;
    if (flip.horizontal) out = out.rowwise().reverse().eval();
    if (flip.vertical) out = out.colwise().reverse().eval();
    return out;
}

/// Random horizontal / vertical flips (p = 0.5 each); the mask, when given,
/// is flipped identically.
ImageField weak_augment(const ImageField& image, Rng& rng, LabelField* mask = nullptr);

struct StrongParams {
    Scalar brightness = 0.0;  // additive
    Scalar contrast = 1.0;    // scale about the image mean
    Scalar gamma = 1.0;
    std::optional<Box> cutmix;
};

/// Brightness U(-0.2,0.2), contrast U(0.8,1.25), gamma U(0.8,1.25); CutMix
/// with probability 0.5, box area fraction U(0.1,0.4), aspect U(0.5,2).
StrongParams sample_strong(Index height, Index width, Rng& rng);

/// Colour transform in order brightness, contrast, gamma (input clamped to
/// [0,1] before the power), final clamp; then the CutMix paste from `partner`.
ImageField apply_strong(const ImageField& image, const ImageField* partner, const StrongParams& params);

struct StrongView {
    ImageField image;
    std::optional<Box> box;
};

StrongView strong_augment(const ImageField& image, const ImageField* partner, Rng& rng);

/// dst with the box region replaced by src.
template <typename T>
Field<T> paste_box(const Field<T>& dst, const Field<T>& src, const Box& box) {
    Field<T> out = dst;
    out.block(box.y0, box.x0, box.height, box.width) = src.block(box.y0, box.x0, box.height, box.width);
    return out;
}

// ---- splits and files ----

struct SplitManifest {
    std::vector<std::string> labeled, unlabeled, validation, test;
    Scalar label_ratio = 0.0;  // labeled / (labeled + unlabeled)
};

/// Shuffles ids with `seed`, reserves validation and test fractions, and
/// labels `label_ratio` of the rest (at least one). Labeled images are
/// chosen so that together they contain every class.
SplitManifest make_split(const std::vector<SegSample>& samples, Index classes, Scalar label_ratio,
                         Scalar validation_fraction, Scalar test_fraction, std::uint64_t seed);

void write_pgm(const std::filesystem::path& path, const Field<std::uint8_t>& pixels);
Field<std::uint8_t> read_pgm(const std::filesystem::path& path);

Field<std::uint8_t> quantize(const ImageField& image);
ImageField dequantize(const Field<std::uint8_t>& pixels);

struct Dataset {
    std::vector<SegSample> samples;  // sorted by id
    SplitManifest split;

    const SegSample& at(const std::string& id) const;
    std::vector<const SegSample*> subset(const std::vector<std::string>& ids) const;
};

/// DIR/images/<id>.pgm, DIR/masks/<id>.pgm, DIR/manifest.csv.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir, Index classes);

}  // namespace semsim
