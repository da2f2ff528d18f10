#include "semsim/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace semsim {

namespace {

struct BlobPrior {
    Scalar major_lo, major_hi;    // semi-axis ranges at 32x32
    Scalar ratio_lo, ratio_hi;    // minor / major
};

// Large oval, small round blob, thin elongated bar; repeated for more classes.
constexpr std::array<BlobPrior, 3> kPriors{{{6.0, 8.0, 0.6, 0.75}, {3.0, 4.2, 0.85, 1.0}, {6.0, 8.0, 0.25, 0.35}}};

bool rasterize_blob(LabelField& mask, int label, const BlobPrior& prior, Scalar scale, Scalar wobble, Rng& rng) {
    const Index h = mask.rows(), w = mask.cols();
    const Scalar a = rng.uniform(prior.major_lo, prior.major_hi) * scale;
    const Scalar b = a * rng.uniform(prior.ratio_lo, prior.ratio_hi);
    const Scalar theta = rng.uniform(0.0, std::numbers::pi);
    const Scalar phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const int lobes = 2 + static_cast<int>(rng.below(2));
    const Scalar reach = a * (1.0 + wobble) + 1.0;
    if (2.0 * reach >= static_cast<Scalar>(std::min(h, w))) return false;
    const Scalar cy = rng.uniform(reach, static_cast<Scalar>(h) - reach);
    const Scalar cx = rng.uniform(reach, static_cast<Scalar>(w) - reach);
    const Scalar ct = std::cos(theta), st = std::sin(theta);

    std::vector<std::pair<Index, Index>> pixels;
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            const Scalar dy = static_cast<Scalar>(y) + 0.5 - cy, dx = static_cast<Scalar>(x) + 0.5 - cx;
            const Scalar u = (ct * dx + st * dy) / a, v = (-st * dx + ct * dy) / b;
            const Scalar rho = std::sqrt(u * u + v * v);
            const Scalar limit = 1.0 + wobble * std::sin(lobes * std::atan2(v, u) + phase);
            if (rho <= limit) pixels.emplace_back(y, x);
        }
    if (pixels.size() < 4) return false;
    // Reject overlap with, or 4-adjacency to, existing structures.
    for (auto [y, x] : pixels) {
        if (mask(y, x) != 0) return false;
        if (y > 0 && mask(y - 1, x) != 0) return false;
        if (y + 1 < h && mask(y + 1, x) != 0) return false;
        if (x > 0 && mask(y, x - 1) != 0) return false;
        if (x + 1 < w && mask(y, x + 1) != 0) return false;
    }
    for (auto [y, x] : pixels) mask(y, x) = label;
    return true;
}

ImageField blur121(const ImageField& f) {
    const Index h = f.rows(), w = f.cols();
    ImageField tmp(h, w), out(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
            tmp(y, x) = 0.25 * f(y, std::max<Index>(x - 1, 0)) + 0.5 * f(y, x) + 0.25 * f(y, std::min(x + 1, w - 1));
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
            out(y, x) =
                0.25 * tmp(std::max<Index>(y - 1, 0), x) + 0.5 * tmp(y, x) + 0.25 * tmp(std::min(y + 1, h - 1), x);
    return out;
}

std::string sample_id(Index index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05lld", static_cast<long long>(index));
    return buf;
}

}  // namespace

SegSample generate_sample(const GeneratorConfig& cfg, Index index, Rng rng) {
    if (cfg.classes < 2) throw ParameterError("generator: need at least 2 classes");
    const Index h = cfg.height, w = cfg.width;
    const Scalar scale = static_cast<Scalar>(std::min(h, w)) / 32.0;
    Rng shapes = rng.split("shapes");
    LabelField mask;
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        mask = LabelField::Zero(h, w);
        placed = true;
        for (Index k = 1; k < cfg.classes && placed; ++k) {
            const BlobPrior& prior = kPriors[static_cast<std::size_t>((k - 1) % 3)];
            bool ok = false;
            for (int tries = 0; tries < 20 && !ok; ++tries)
                ok = rasterize_blob(mask, static_cast<int>(k), prior, scale, cfg.boundary_wobble, shapes);
            placed = ok;
        }
    }
    if (!placed) {
        throw GenerationError("generator: could not place " + std::to_string(cfg.classes - 1) +
                              " non-overlapping structures in a " + std::to_string(h) + "x" + std::to_string(w) +
                              " image after " + std::to_string(cfg.max_retries) + " attempts");
    }

    Rng tone = rng.split("intensity");
    std::vector<Scalar> level(static_cast<std::size_t>(cfg.classes));
    for (Index k = 0; k < cfg.classes; ++k)
        level[static_cast<std::size_t>(k)] = cfg.background + static_cast<Scalar>(k) * cfg.band_spacing +
                                             tone.uniform(-cfg.band_jitter, cfg.band_jitter);
    const Scalar ramp_angle = tone.uniform(0.0, 2.0 * std::numbers::pi);
    const Scalar ramp = tone.uniform(0.0, cfg.shading);
    const Scalar gain = 1.0 + tone.uniform(-cfg.contrast_jitter, cfg.contrast_jitter);
    const Scalar offset = tone.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
    ImageField clean(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            const Scalar ry = (static_cast<Scalar>(y) + 0.5) / static_cast<Scalar>(h) - 0.5;
            const Scalar rx = (static_cast<Scalar>(x) + 0.5) / static_cast<Scalar>(w) - 0.5;
            const Scalar v = level[static_cast<std::size_t>(mask(y, x))] +
                             ramp * (std::cos(ramp_angle) * rx + std::sin(ramp_angle) * ry);
            clean(y, x) = (v - 0.5) * gain + 0.5 + offset;
        }
    ImageField image = blur121(clean);
    Rng noise = rng.split("noise");
    for (Index i = 0; i < image.size(); ++i) image.data()[i] += cfg.noise * noise.normal();
    return {sample_id(index), image.cwiseMax(0.0).cwiseMin(1.0), mask};
}

std::vector<SegSample> generate_dataset(Index count, const GeneratorConfig& cfg, std::uint64_t seed) {
    const Rng root(seed);
    std::vector<SegSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) out.push_back(generate_sample(cfg, i, root.split(static_cast<std::uint64_t>(i))));
    return out;
}

// ---- augmentation ----

Flip sample_flip(Rng& rng) {
    Flip f;
    f.horizontal = rng.bernoulli(0.5);
    f.vertical = rng.bernoulli(0.5);
    return f;
}

ImageField weak_augment(const ImageField& image, Rng& rng, LabelField* mask) {
    const Flip flip = sample_flip(rng);
    if (mask) *mask = apply_flip(*mask, flip);
    return apply_flip(image, flip);
}

StrongParams sample_strong(Index height, Index width, Rng& rng) {
    StrongParams p;
    p.brightness = rng.uniform(-0.2, 0.2);
    p.contrast = rng.uniform(0.8, 1.25);
    p.gamma = rng.uniform(0.8, 1.25);
    if (rng.bernoulli(0.5)) {
        // Rounding to whole pixels can leave the target range; redraw until the
        // realised box fraction lies in [0.1, 0.4].
        for (;;) {
            const Scalar area = rng.uniform(0.1, 0.4) * static_cast<Scalar>(height * width);
            const Scalar aspect = rng.uniform(0.5, 2.0);
            Box b;
            b.height = std::clamp<Index>(std::lround(std::sqrt(area * aspect)), 1, height);
            b.width = std::clamp<Index>(std::lround(std::sqrt(area / aspect)), 1, width);
            const Scalar frac = b.area_fraction(height, width);
            if (frac < 0.1 || frac > 0.4) continue;
            b.y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(height - b.height + 1)));
            b.x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(width - b.width + 1)));
            p.cutmix = b;
            break;
        }
    }
    return p;
}

ImageField apply_strong(const ImageField& image, const ImageField* partner, const StrongParams& params) {
    ImageField x = image;
    if (params.brightness != 0.0) x += params.brightness;
    if (params.contrast != 1.0) {
        const Scalar m = x.mean();
        x = (x - m) * params.contrast + m;
    }
    if (params.gamma != 1.0) x = x.cwiseMax(0.0).cwiseMin(1.0).pow(params.gamma);
    x = x.cwiseMax(0.0).cwiseMin(1.0);
    if (params.cutmix) {
        if (!partner) throw ContractError("strong_augment: CutMix was sampled but no partner image was given");
        if (partner->rows() != x.rows() || partner->cols() != x.cols())
            throw DimensionError("strong_augment: partner size differs");
        x = paste_box(x, *partner, *params.cutmix);
    }
    return x;
}

StrongView strong_augment(const ImageField& image, const ImageField* partner, Rng& rng) {
    const StrongParams p = sample_strong(image.rows(), image.cols(), rng);
    return {apply_strong(image, partner, p), p.cutmix};
}

// ---- splits ----

SplitManifest make_split(const std::vector<SegSample>& samples, Index classes, Scalar label_ratio,
                         Scalar validation_fraction, Scalar test_fraction, std::uint64_t seed) {
    if (!(label_ratio > 0.0 && label_ratio <= 1.0)) throw ParameterError("split: label ratio must lie in (0,1]");
    if (validation_fraction < 0.0 || test_fraction < 0.0 || validation_fraction + test_fraction >= 1.0)
        throw ParameterError("split: validation and test fractions must leave training data");
    const Index n = static_cast<Index>(samples.size());
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = Rng(seed).split("split");
    for (Index i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);

    const Index n_test = std::llround(test_fraction * static_cast<Scalar>(n));
    const Index n_val = std::llround(validation_fraction * static_cast<Scalar>(n));
    const Index n_train = n - n_test - n_val;
    const Index n_labeled = std::clamp<Index>(std::llround(label_ratio * static_cast<Scalar>(n_train)), 1, n_train);
    std::vector<Index> train(order.begin() + n_test + n_val, order.end());

    // Labeled set: first n_labeled training samples, then swap in unlabeled
    // samples until every class is present somewhere.
    auto classes_of = [&](Index i) {
        std::set<int> s;
        const auto& m = samples[static_cast<std::size_t>(i)].mask;
        for (Index k = 0; k < m.size(); ++k) s.insert(m.data()[k]);
        return s;
    };
    std::set<int> covered;
    for (Index i = 0; i < n_labeled; ++i) {
        auto s = classes_of(train[static_cast<std::size_t>(i)]);
        covered.insert(s.begin(), s.end());
    }
    for (Index j = n_labeled; j < n_train && static_cast<Index>(covered.size()) < classes; ++j) {
        auto s = classes_of(train[static_cast<std::size_t>(j)]);
        bool adds = false;
        for (int c : s) adds = adds || !covered.count(c);
        if (!adds) continue;
        // Replace the labeled sample whose classes are all covered by others least.
        std::swap(train[static_cast<std::size_t>(n_labeled - 1)], train[static_cast<std::size_t>(j)]);
        covered.clear();
        for (Index i = 0; i < n_labeled; ++i) {
            auto t = classes_of(train[static_cast<std::size_t>(i)]);
            covered.insert(t.begin(), t.end());
        }
    }
    if (static_cast<Index>(covered.size()) < classes)
        throw ConfigError("split: labeled set cannot cover all " + std::to_string(classes) + " classes");

    SplitManifest m;
    auto id = [&](Index i) { return samples[static_cast<std::size_t>(i)].id; };
    for (Index i = 0; i < n_test; ++i) m.test.push_back(id(order[static_cast<std::size_t>(i)]));
    for (Index i = n_test; i < n_test + n_val; ++i) m.validation.push_back(id(order[static_cast<std::size_t>(i)]));
    for (Index i = 0; i < n_train; ++i)
        (i < n_labeled ? m.labeled : m.unlabeled).push_back(id(train[static_cast<std::size_t>(i)]));
    for (auto* v : {&m.labeled, &m.unlabeled, &m.validation, &m.test}) std::sort(v->begin(), v->end());
    m.label_ratio = static_cast<Scalar>(n_labeled) / static_cast<Scalar>(n_train);
    return m;
}

// ---- files ----

void write_pgm(const std::filesystem::path& path, const Field<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P5\n" << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Field<std::uint8_t> read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
        throw FormatError(path.string() + ": bad magic, expected P5", 0);
    pos = 2;
    auto skip_space = [&] {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            return;
        }
    };
    auto number = [&](const char* what) {
        if (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#' &&
            pos == 2)
            throw FormatError(path.string() + ": bad magic, expected P5", 0);
        skip_space();
        const std::size_t start = pos;
        long long v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1'000'000) throw FormatError(path.string() + ": " + what + " too large", static_cast<long long>(start));
            ++pos;
        }
        if (pos == start) throw FormatError(path.string() + ": expected " + what, static_cast<long long>(start));
        return std::pair{v, start};
    };
    const auto [width, wpos] = number("width");
    const auto [height, hpos] = number("height");
    const auto [maxval, mpos] = number("maxval");
    if (width <= 0) throw FormatError(path.string() + ": zero width", static_cast<long long>(wpos));
    if (height <= 0) throw FormatError(path.string() + ": zero height", static_cast<long long>(hpos));
    if (maxval != 255) throw FormatError(path.string() + ": maxval must be 255", static_cast<long long>(mpos));
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError(path.string() + ": missing separator before pixel data", static_cast<long long>(pos));
    ++pos;
    const std::size_t need = static_cast<std::size_t>(width * height);
    if (bytes.size() - pos < need)
        throw FormatError(path.string() + ": truncated pixel data", static_cast<long long>(bytes.size()));
    Field<std::uint8_t> out(height, width);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), need, out.data());
    return out;
}

Field<std::uint8_t> quantize(const ImageField& image) {
    return (image.cwiseMax(0.0).cwiseMin(1.0) * 255.0).round().cast<std::uint8_t>();
}

ImageField dequantize(const Field<std::uint8_t>& pixels) { return pixels.cast<Scalar>() / 255.0; }

const SegSample& Dataset::at(const std::string& id) const {
    auto it = std::lower_bound(samples.begin(), samples.end(), id,
                               [](const SegSample& s, const std::string& key) { return s.id < key; });
    if (it == samples.end() || it->id != id) throw ConfigError("dataset has no sample '" + id + "'");
    return *it;
}

std::vector<const SegSample*> Dataset::subset(const std::vector<std::string>& ids) const {
    std::vector<const SegSample*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(&at(id));
    return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::map<std::string, std::string> split_of;
    for (const auto& id : data.split.labeled) split_of[id] = "labeled";
    for (const auto& id : data.split.unlabeled) split_of[id] = "unlabeled";
    for (const auto& id : data.split.validation) split_of[id] = "val";
    for (const auto& id : data.split.test) split_of[id] = "test";
    std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
    if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
    manifest << "id,split,image_path,mask_path\n";
    for (const auto& s : data.samples) {
        const std::string image = "images/" + s.id + ".pgm", mask = "masks/" + s.id + ".pgm";
        write_pgm(dir / image, quantize(s.image));
        write_pgm(dir / mask, s.mask.cast<std::uint8_t>());
        auto it = split_of.find(s.id);
        manifest << s.id << ',' << (it == split_of.end() ? "unused" : it->second) << ',' << image << ',' << mask
                 << '\n';
    }
}

Dataset load_dataset(const std::filesystem::path& dir, Index classes) {
    const auto path = dir / "manifest.csv";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    long long offset = 0;
    std::getline(in, line);
    if (line != "id,split,image_path,mask_path") throw FormatError(path.string() + ": unexpected header", 0);
    offset += static_cast<long long>(line.size()) + 1;
    Dataset data;
    Index labeled = 0, unlabeled = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            offset += 1;
            continue;
        }
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        if (cols.size() != 4) throw FormatError(path.string() + ": expected 4 columns", offset);
        SegSample s;
        s.id = cols[0];
        s.image = dequantize(read_pgm(dir / cols[2]));
        const auto mask = read_pgm(dir / cols[3]);
        for (Index k = 0; k < mask.size(); ++k)
            if (mask.data()[k] >= classes)
                throw FormatError((dir / cols[3]).string() + ": class index " + std::to_string(mask.data()[k]) +
                                      " outside [0," + std::to_string(classes) + ")",
                                  0);
        s.mask = mask.cast<int>();
        if (s.mask.rows() != s.image.rows() || s.mask.cols() != s.image.cols())
            throw FormatError((dir / cols[3]).string() + ": mask size differs from image", 0);
        const std::string& split = cols[1];
        if (split == "labeled") {
            data.split.labeled.push_back(s.id);
            ++labeled;
        } else if (split == "unlabeled") {
            data.split.unlabeled.push_back(s.id);
            ++unlabeled;
        } else if (split == "val") {
            data.split.validation.push_back(s.id);
        } else if (split == "test") {
            data.split.test.push_back(s.id);
        } else if (split != "unused") {
            throw FormatError(path.string() + ": unknown split '" + split + "'", offset);
        }
        data.samples.push_back(std::move(s));
        offset += static_cast<long long>(line.size()) + 1;
    }
    std::sort(data.samples.begin(), data.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (auto* v : {&data.split.labeled, &data.split.unlabeled, &data.split.validation, &data.split.test})
        std::sort(v->begin(), v->end());
    data.split.label_ratio =
        labeled + unlabeled > 0 ? static_cast<Scalar>(labeled) / static_cast<Scalar>(labeled + unlabeled) : 0.0;
    return data;
}

}  // namespace semsim
