#include "semsim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace semsim {

// ---- views ----

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, sep);) out.push_back(trim(part));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

int parse_view(const std::string& text, bool allow_off, const std::string& whole) {
    if (allow_off && (text == "x" || text == "-")) return 0;
    if (text.size() == 2 && (text[0] == 'S' || text[0] == 's') && text[1] >= '1' && text[1] <= '3') return text[1] - '0';
    throw ConfigError("views: cannot read '" + text + "' in '" + whole + "' (expected S1, S2, S3" +
                      (allow_off ? " or x)" : ")"));
}

}  // namespace

ViewAssignment ViewAssignment::parse(const std::string& text) {
    const auto parts = split_on(text, ',');
    if (parts.size() != 3) throw ConfigError("views: expected three comma-separated entries, got '" + text + "'");
    ViewAssignment v;
    v.intra = parse_view(parts[0], true, text);
    v.cross = parse_view(parts[1], true, text);
    v.strong.clear();
    for (const auto& s : split_on(parts[2], '/')) {
        const int id = parse_view(s, false, text);
        if (std::find(v.strong.begin(), v.strong.end(), id) != v.strong.end())
            throw ConfigError("views: strong view repeated in '" + text + "'");
        v.strong.push_back(id);
    }
    return v;
}

std::string ViewAssignment::str() const {
    auto name = [](int v) { return v == 0 ? std::string("x") : "S" + std::to_string(v); };
    std::string out = name(intra) + "," + name(cross) + ",";
    for (std::size_t i = 0; i < strong.size(); ++i) out += (i ? "/" : "") + name(strong[i]);
    return out;
}

int ViewAssignment::views() const {
    int n = std::max(intra, cross);
    for (int s : strong) n = std::max(n, s);
    return n;
}

// ---- config ----

namespace {

struct Field_ {
    const char* key;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

std::string fmt(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Index to_index(const std::string& s) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError("expected an integer, got '" + s + "'");
    return v;
}

Scalar to_scalar(const std::string& s) {
    char* end = nullptr;
    const Scalar v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
        throw ConfigError("expected a number, got '" + s + "'");
    return v;
}

#define SEMSIM_INDEX(name) \
    Field_{#name, [](TrainConfig& c, const std::string& v) { c.name = to_index(v); }, \
           [](const TrainConfig& c) { return std::to_string(c.name); }}
#define SEMSIM_SCALAR(name) \
    Field_{#name, [](TrainConfig& c, const std::string& v) { c.name = to_scalar(v); }, \
           [](const TrainConfig& c) { return fmt(c.name); }}

const std::vector<Field_>& fields() {
    static const std::vector<Field_> table = {
        SEMSIM_INDEX(epochs),
        SEMSIM_INDEX(batch_size),
        SEMSIM_INDEX(steps_per_epoch),
        SEMSIM_SCALAR(lr),
        SEMSIM_SCALAR(lr_power),
        SEMSIM_SCALAR(momentum),
        SEMSIM_SCALAR(weight_decay),
        SEMSIM_SCALAR(tau),
        SEMSIM_SCALAR(r),
        SEMSIM_INDEX(N),
        SEMSIM_INDEX(D),
        SEMSIM_INDEX(S),
        SEMSIM_SCALAR(lambda),
        SEMSIM_SCALAR(lambda_intra),
        SEMSIM_SCALAR(lambda_cross),
        SEMSIM_SCALAR(cross_temperature),
        SEMSIM_SCALAR(dropout),
        SEMSIM_INDEX(classes),
        Field_{"seed",
               [](TrainConfig& c, const std::string& v) {
                   const Index s = to_index(v);
                   if (s < 0) throw ConfigError("seed must be non-negative");
                   c.seed = static_cast<std::uint64_t>(s);
               },
               [](const TrainConfig& c) { return std::to_string(c.seed); }},
        Field_{"views", [](TrainConfig& c, const std::string& v) { c.views = ViewAssignment::parse(v); },
               [](const TrainConfig& c) { return c.views.str(); }},
    };
    return table;
}

#undef SEMSIM_INDEX
#undef SEMSIM_SCALAR

void validate(const TrainConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (c.epochs < 0) fail("epochs must be >= 0");
    if (c.batch_size < 2 || c.batch_size % 2 != 0) fail("batch_size must be an even number >= 2");
    if (c.steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
    if (!(c.lr >= 0.0)) fail("lr must be >= 0");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum must lie in [0,1)");
    if (c.weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (!(c.tau >= 0.0 && c.tau <= 1.0)) fail("tau must lie in [0,1]");
    if (!(c.r > 0.0)) fail("r must be > 0");
    if (c.N < 1) fail("N must be >= 1");
    if (c.D < 4 || c.D % 4 != 0) fail("D must be a positive multiple of 4 (attention heads)");
    if (c.S < 1) fail("S must be >= 1");
    if (c.lambda < 0.0 || c.lambda_intra < 0.0 || c.lambda_cross < 0.0) fail("loss weights must be >= 0");
    if (!(c.cross_temperature > 0.0)) fail("cross_temperature must be > 0");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) fail("dropout must lie in [0,1)");
    if (c.classes < 2 || c.classes > 255) fail("classes must lie in [2,255]");
}

}  // namespace

TrainConfig parse_config(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    int number = 0;
    std::map<std::string, int> seen;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto& table = fields();
        auto it = std::find_if(table.begin(), table.end(), [&](const Field_& f) { return key == f.key; });
        if (it == table.end()) throw ConfigError("config line " + std::to_string(number) + ": unknown key '" + key + "'");
        if (seen.count(key))
            throw ConfigError("config line " + std::to_string(number) + ": key '" + key + "' already set on line " +
                              std::to_string(seen[key]));
        seen[key] = number;
        try {
            it->set(base, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(number) + " (" + key + "): " + e.what());
        }
    }
    validate(base);
    return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), base);
}

std::string format_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    return out;
}

// ---- optimisation ----

Scalar lr_schedule(Index step, Index total, Scalar lr0, Scalar power) {
    if (total <= 0 || step >= total) return 0.0;
    if (step <= 0) return lr0;
    return lr0 * std::pow(1.0 - static_cast<Scalar>(step) / static_cast<Scalar>(total), power);
}

void Sgd::step(const std::vector<ParamRef>& params, Scalar lr) {
    if (velocity_.empty())
        for (const auto& p : params) velocity_.push_back(Array::Zero(p.tensor.size()));
    if (velocity_.size() != params.size()) throw ContractError("sgd: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        Array g = t.grad();
        if (weight_decay_ != 0.0) g += weight_decay_ * t.values();
        velocity_[i] = momentum_ * velocity_[i] + g;
        t.mutable_values() -= lr * velocity_[i];
    }
}

// ---- model ----

namespace {

UNetConfig unet_config(const TrainConfig& cfg) {
    UNetConfig u;
    u.classes = cfg.classes;
    u.dropout = cfg.dropout;
    return u;
}

SfmConfig sfm_config(const TrainConfig& cfg) {
    SfmConfig s;
    s.windows = cfg.S;
    s.dim = cfg.D;
    return s;
}

Rng init_stream(const TrainConfig& cfg, const char* part) { return Rng(cfg.seed).split("init").split(part); }

UNet make_unet(const TrainConfig& cfg) {
    Rng rng = init_stream(cfg, "net");
    return UNet(unet_config(cfg), rng);
}

Sfm make_sfm(const TrainConfig& cfg) {
    Rng rng = init_stream(cfg, "sfm");
    return Sfm(sfm_config(cfg), unet_config(cfg), rng);
}

}  // namespace

SemSimModel::SemSimModel(const TrainConfig& cfg) : net(make_unet(cfg)), sfm(make_sfm(cfg)) {
    net.collect(params, "net");
    sfm.collect(params, "sfm");
}

Tensor SemSimModel::predict(const Tensor& images) {
    NoGradGuard guard;
    return net.decode(net.encode(images, Mode::eval()), Mode::eval());
}

std::vector<LabelField> SemSimModel::segment(const std::vector<const SegSample*>& samples, Index batch) {
    std::vector<LabelField> out;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch));
        std::vector<ImageField> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(samples[i]->image);
        const Tensor probs = predict(stack_images(images));
        const Index c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
        const Array& p = probs.values();
        for (std::size_t i = 0; i < end - start; ++i) {
            LabelField m(h, w);
            for (Index y = 0; y < h; ++y)
                for (Index x = 0; x < w; ++x) {
                    int best = 0;
                    for (Index k = 1; k < c; ++k)
                        if (p[((static_cast<Index>(i) * c + k) * h + y) * w + x] >
                            p[((static_cast<Index>(i) * c + best) * h + y) * w + x])
                            best = static_cast<int>(k);
                    m(y, x) = best;
                }
            out.push_back(std::move(m));
        }
    }
    return out;
}

// ---- one step ----

StepBatch prepare_batch(const std::vector<const SegSample*>& labeled, const std::vector<const SegSample*>& unlabeled,
                        const TrainConfig& cfg, Rng rng) {
    StepBatch b;
    const Rng lrng = rng.split("labeled");
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        Rng r = lrng.split(i);
        LabelField m = labeled[i]->mask;
        b.labeled_images.push_back(weak_augment(labeled[i]->image, r, &m));
        b.labeled_masks.push_back(std::move(m));
    }
    if (!cfg.semi_supervised()) return b;

    const Index u = static_cast<Index>(unlabeled.size());
    const Rng wrng = rng.split("weak");
    for (Index i = 0; i < u; ++i) {
        Rng r = wrng.split(static_cast<std::uint64_t>(i));
        b.weak.push_back(weak_augment(unlabeled[static_cast<std::size_t>(i)]->image, r));
        b.partner.push_back(u > 1 ? (i + 1) % u : i);
    }
    const Rng srng = rng.split("strong");
    const int views = cfg.views.views();
    b.strong.resize(static_cast<std::size_t>(views));
    b.boxes.resize(static_cast<std::size_t>(views));
    for (int v = 0; v < views; ++v) {
        const Rng vrng = srng.split(static_cast<std::uint64_t>(v));
        for (Index i = 0; i < u; ++i) {
            Rng r = vrng.split(static_cast<std::uint64_t>(i));
            StrongView view = strong_augment(b.weak[static_cast<std::size_t>(i)],
                                             &b.weak[static_cast<std::size_t>(b.partner[static_cast<std::size_t>(i)])], r);
            b.strong[static_cast<std::size_t>(v)].push_back(std::move(view.image));
            b.boxes[static_cast<std::size_t>(v)].push_back(view.box);
        }
    }
    return b;
}

namespace {

// Weak-branch field [B, C, h*w] (any trailing layout of h x w positions)
// with each CutMix box filled from the partner image. Box membership at a
// coarse resolution follows the nearest source pixel.
Tensor mix_weak(const Tensor& weak, const StepBatch& batch, int view, Index image_h, Index image_w, Index h, Index w) {
    const auto& boxes = batch.boxes[static_cast<std::size_t>(view - 1)];
    const Index b = weak.dim(0), c = weak.dim(1), plane = h * w;
    Array out = weak.values();
    const Array& in = weak.values();
    for (Index i = 0; i < b; ++i) {
        const auto& box = boxes[static_cast<std::size_t>(i)];
        if (!box) continue;
        const Index j = batch.partner[static_cast<std::size_t>(i)];
        for (Index y = 0; y < h; ++y) {
            const Index sy = (2 * y + 1) * image_h / (2 * h);
            for (Index x = 0; x < w; ++x) {
                const Index sx = (2 * x + 1) * image_w / (2 * w);
                if (!box->contains(sy, sx)) continue;
                for (Index k = 0; k < c; ++k) out[(i * c + k) * plane + y * w + x] = in[(j * c + k) * plane + y * w + x];
            }
        }
    }
    return Tensor(weak.shape(), std::move(out));
}

MaskedLoss skipped() {
    MaskedLoss m;
    m.loss = Tensor::scalar(0.0);
    m.masked_fraction = 1.0;
    return m;
}

}  // namespace

LossReport compute_losses(SemSimModel& model, const TrainConfig& cfg, const StepBatch& batch, Rng dropout_rng) {
    LossTerms terms;
    terms.unsup = terms.intra = terms.cross = skipped();
    const Mode labeled_mode{true, true, false};

    const Tensor xl = stack_images(batch.labeled_images);
    const EncoderOutput enc_l = model.net.encode(xl, labeled_mode);
    const Tensor pl = model.net.decode(enc_l, labeled_mode);
    std::vector<int> target;
    for (const auto& m : batch.labeled_masks) target.insert(target.end(), m.data(), m.data() + m.size());
    terms.supervised = supervised_loss(pl, target);
    if (!cfg.semi_supervised()) return total_loss(terms, cfg.weights());

    const bool unsup = cfg.unsup_active(), intra = cfg.intra_active(), cross = cfg.cross_active();
    const Index image_h = batch.weak.front().rows(), image_w = batch.weak.front().cols();

    Tensor pw, fw;
    {
        NoGradGuard guard;
        const EncoderOutput enc_w = model.net.encode(stack_images(batch.weak), Mode::weak());
        pw = model.net.decode(enc_w, Mode::weak());
        if (intra || cross) fw = model.sfm(enc_w, Mode::weak());
    }

    const int views = cfg.views.views();
    std::vector<Tensor> ps(static_cast<std::size_t>(views) + 1), fs(static_cast<std::size_t>(views) + 1);
    for (int v = 1; v <= views; ++v) {
        const bool in_strong =
            unsup && std::find(cfg.views.strong.begin(), cfg.views.strong.end(), v) != cfg.views.strong.end();
        const bool need_decoder = in_strong || (intra && cfg.views.intra == v);
        const bool need_features = (intra && cfg.views.intra == v) || (cross && cfg.views.cross == v);
        if (!need_decoder && !need_features) continue;
        Rng drop = dropout_rng.split(static_cast<std::uint64_t>(v));
        const Mode strong_mode = Mode::train();
        const EncoderOutput enc = model.net.encode(stack_images(batch.strong[static_cast<std::size_t>(v - 1)]),
                                                   strong_mode, &drop);
        if (need_decoder) ps[static_cast<std::size_t>(v)] = model.net.decode(enc, strong_mode);
        if (need_features) fs[static_cast<std::size_t>(v)] = model.sfm(enc, strong_mode);
    }

    if (unsup) {
        std::vector<Tensor> losses;
        std::vector<Scalar> weights;
        Scalar masked = 0.0;
        for (int v : cfg.views.strong) {
            const Tensor target_w = mix_weak(pw, batch, v, image_h, image_w, image_h, image_w);
            MaskedLoss m = masked_weak_to_strong(target_w, ps[static_cast<std::size_t>(v)], cfg.tau,
                                                 ConsistencyKind::Dice);
            losses.push_back(m.loss);
            masked += m.masked_fraction;
        }
        const Scalar k = static_cast<Scalar>(losses.size());
        weights.assign(losses.size(), 1.0 / k);
        terms.unsup.loss = weighted_sum(losses, weights);
        terms.unsup.masked_fraction = masked / k;
    }

    if (intra) {
        const int v = cfg.views.intra;
        const Index h = fw.dim(2), w = fw.dim(3);
        Tensor pw1;
        {
            NoGradGuard guard;
            pw1 = refine_prediction(pw, compute_affinity(fw), h, w);
        }
        pw1 = mix_weak(pw1, batch, v, image_h, image_w, h, w);
        const Tensor& fv = fs[static_cast<std::size_t>(v)];
        const Tensor pin = refine_prediction(ps[static_cast<std::size_t>(v)], compute_affinity(fv), h, w);
        terms.intra = masked_weak_to_strong(pw1, pin, cfg.tau, ConsistencyKind::Dice);
    }

    if (cross) {
        const int v = cfg.views.cross;
        const Index h = fw.dim(2), w = fw.dim(3);
        const Tensor fl = model.sfm(enc_l, labeled_mode);
        std::vector<LabelField> small;
        for (const auto& m : batch.labeled_masks) small.push_back(downsample_nearest(m, h, w));
        const PrototypeSet protos = compute_prototypes(fl, small, cfg.classes, cfg.N);
        Tensor pw2;
        {
            NoGradGuard guard;
            pw2 = cross_prediction(fw, protos, cfg.cross_temperature).probs;
        }
        pw2 = mix_weak(pw2, batch, v, image_h, image_w, h, w);
        const CrossPrediction cr = cross_prediction(fs[static_cast<std::size_t>(v)], protos, cfg.cross_temperature);
        const Tensor ubar = uncertainty(cr, cfg.r);
        terms.cross = masked_weak_to_strong(pw2, cr.probs, cfg.tau, ConsistencyKind::CrossEntropy, &ubar.values());
    }
    return total_loss(terms, cfg.weights());
}

std::vector<const SegSample*> sample_labeled_batch(const Dataset& data, Index count, Index classes, Rng& rng) {
    const auto& ids = data.split.labeled;
    if (ids.empty()) throw ConfigError("training needs at least one labeled sample");
    const Index n = static_cast<Index>(ids.size());
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<Index> order(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        std::vector<const SegSample*> out;
        std::vector<bool> seen(static_cast<std::size_t>(classes), false);
        for (Index k = 0; k < count; ++k) {
            // Without replacement while ids last, then start a fresh pass.
            const Index pos = k % n;
            if (pos == 0 && k > 0) {
                for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
            }
            const Index pick = pos + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - pos)));
            std::swap(order[static_cast<std::size_t>(pos)], order[static_cast<std::size_t>(pick)]);
            const SegSample& s = data.at(ids[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])]);
            for (Index j = 0; j < s.mask.size(); ++j) {
                const int c = s.mask.data()[j];
                if (c >= 0 && c < classes) seen[static_cast<std::size_t>(c)] = true;
            }
            out.push_back(&s);
        }
        if (std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) return out;
    }
    throw ConfigError("could not draw a labeled batch containing all " + std::to_string(classes) +
                      " classes in 100 attempts");
}

// ---- evaluation and runs ----

namespace {

int worker_count() {
    if (const char* env = std::getenv("SEMSIM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return std::min(n, 64);
    }
    return 1;
}

std::vector<const SegSample*> draw_unlabeled(const std::vector<const SegSample*>& pool, Index count, Rng& rng) {
    std::vector<const SegSample*> out;
    std::vector<Index> order(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) order[i] = static_cast<Index>(i);
    const Index n = static_cast<Index>(pool.size());
    for (Index k = 0; k < count; ++k) {
        const Index pos = k % n;
        const Index pick = pos + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - pos)));
        std::swap(order[static_cast<std::size_t>(pos)], order[static_cast<std::size_t>(pick)]);
        out.push_back(pool[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])]);
    }
    return out;
}

}  // namespace

MetricsReport evaluate(SemSimModel& model, const Dataset& data, const std::vector<std::string>& ids) {
    const auto samples = data.subset(ids);
    const auto preds = model.segment(samples);
    std::vector<SampleScore> scores(samples.size());
    const Index classes = model.net.config().classes;
    const int workers = std::min<int>(worker_count(), std::max<int>(1, static_cast<int>(samples.size())));
    auto work = [&](int w) {
        for (std::size_t i = static_cast<std::size_t>(w); i < samples.size(); i += static_cast<std::size_t>(workers))
            scores[i] = score_sample(samples[i]->id, preds[i], samples[i]->mask, classes);
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    return summarize(std::move(scores));
}

std::string val_csv_header(Index classes) {
    std::string h = "epoch,lr,mean_dsc";
    for (Index c = 1; c < classes; ++c) h += ",dsc_" + std::to_string(c);
    return h + ",mean_hd95,mean_assd";
}

std::string val_csv_row(const EpochRecord& e) {
    std::string row = std::to_string(e.epoch) + "," + fmt(e.lr) + "," + fmt(e.validation.mean_dsc);
    for (const auto& c : e.validation.per_class) row += "," + fmt(c.dsc);
    return row + "," + fmt(e.validation.mean_hd95) + "," + fmt(e.validation.mean_assd);
}

void save_model(const std::filesystem::path& path, SemSimModel& model, const TrainConfig& cfg) {
    save_checkpoint(path.string(), model.params.to_tensor_map());
    std::ofstream out(path.string() + ".cfg", std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string() + ".cfg");
    out << format_config(cfg);
}

std::unique_ptr<SemSimModel> load_model(const std::filesystem::path& path, TrainConfig* cfg_out) {
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path.string());
    const TrainConfig cfg = load_config(path.string() + ".cfg");
    auto model = std::make_unique<SemSimModel>(cfg);
    model->params.load(load_checkpoint(path.string()));
    if (cfg_out) *cfg_out = cfg;
    return model;
}

RunLog train(const Dataset& data, const TrainConfig& cfg, const std::filesystem::path* out_dir,
             const ProgressFn& progress) {
    validate(cfg);
    const Index half = cfg.batch_size / 2;
    const auto unlabeled = data.subset(data.split.unlabeled);
    if (cfg.semi_supervised() && unlabeled.empty()) throw ConfigError("semi-supervised training needs unlabeled samples");
    if (data.split.labeled.empty()) throw ConfigError("training needs at least one labeled sample");
    const Index steps_per_epoch =
        cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch
                                : (static_cast<Index>(data.split.labeled.size()) + half - 1) / half;
    const Index total = cfg.epochs * steps_per_epoch;

    SemSimModel model(cfg);
    Sgd opt(cfg.momentum, cfg.weight_decay);
    RunLog log;
    const Rng root = Rng(cfg.seed).split("train");

    std::ofstream losses, val;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        losses.open(*out_dir / "losses.csv", std::ios::binary);
        val.open(*out_dir / "val.csv", std::ios::binary);
        if (!losses || !val) throw IoError("cannot write run files in " + out_dir->string());
        losses << LossReport::csv_header() << '\n';
        val << val_csv_header(cfg.classes) << '\n';
        std::ofstream(*out_dir / "config.txt", std::ios::binary) << format_config(cfg);
    }
    auto record_epoch = [&](Index epoch, Scalar lr) {
        log.epochs.push_back({epoch, lr, evaluate(model, data, data.split.validation)});
        if (out_dir) val << val_csv_row(log.epochs.back()) << '\n' << std::flush;
        if (progress) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "epoch %lld/%lld  lr %.5f  val mean DSC %.4f", static_cast<long long>(epoch),
                          static_cast<long long>(cfg.epochs), lr, log.epochs.back().validation.mean_dsc);
            progress(buf);
        }
    };
    record_epoch(0, lr_schedule(0, total, cfg.lr, cfg.lr_power));

    for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Scalar lr = 0.0;
        for (Index s = 0; s < steps_per_epoch; ++s) {
            const Index step = (epoch - 1) * steps_per_epoch + s;
            const Rng srng = root.split(static_cast<std::uint64_t>(step));
            Rng lrng = srng.split("labeled batch"), urng = srng.split("unlabeled batch");
            const auto lb = sample_labeled_batch(data, half, cfg.classes, lrng);
            const auto ub = cfg.semi_supervised() ? draw_unlabeled(unlabeled, half, urng)
                                                  : std::vector<const SegSample*>{};
            lr = lr_schedule(step, total, cfg.lr, cfg.lr_power);
            const StepBatch batch = prepare_batch(lb, ub, cfg, srng.split("augment"));
            model.params.zero_grad();
            LossReport report = compute_losses(model, cfg, batch, srng.split("dropout"));
            backward(report.objective);
            opt.step(model.params.params, lr);
            report.objective = Tensor();
            if (out_dir) losses << report.csv_row(step) << '\n';
            log.steps.push_back(std::move(report));
        }
        record_epoch(epoch, lr);
    }
    if (out_dir) {
        write_metrics_csv(*out_dir / "metrics.csv", log.epochs.back().validation);
        save_model(*out_dir / "model.sst", model, cfg);
    }
    return log;
}

// ---- ablations ----

std::vector<AblationRun> ablation_plan(const std::string& axis, const TrainConfig& base) {
    std::vector<AblationRun> runs;
    auto active = [](const TrainConfig& c) {
        std::string s = "L_s";
        if (c.unsup_active()) s += "+L_u";
        if (c.intra_active()) s += "+L_intra";
        if (c.cross_active()) s += "+L_cross";
        return s;
    };
    auto add = [&](const std::string& name, TrainConfig c) { runs.push_back({name, active(c), c}); };
    if (axis == "table5") {
        struct Row {
            const char* name;
            bool u, in, cr;
        };
        const Row rows[] = {{"supervised", false, false, false}, {"#1", true, false, false}, {"#2", false, true, false},
                            {"#3", false, false, true},          {"#4", false, true, true},  {"#5", true, true, false},
                            {"#6", true, false, true},           {"#7", true, true, true}};
        for (const auto& row : rows) {
            TrainConfig c = base;
            c.lambda = row.u ? base.lambda : 0.0;
            c.lambda_intra = row.in ? base.lambda_intra : 0.0;
            c.lambda_cross = row.cr ? base.lambda_cross : 0.0;
            add(row.name, c);
        }
    } else if (axis == "table4") {
        for (Index n : {1, 2, 4, 8}) {
            TrainConfig c = base;
            c.N = n;
            add("N=" + std::to_string(n), c);
        }
    } else if (axis == "table6") {
        for (const char* v : {"S1,S1,S1", "S1,S1,S2", "S1,S2,S1", "S1,S2,S2", "S1,S2,S3", "x,x,S1/S2", "x,x,S1/S2/S3"}) {
            TrainConfig c = base;
            c.views = ViewAssignment::parse(v);
            add(v, c);
        }
    } else if (axis == "lambda") {
        for (Scalar w : {0.1, 0.25, 0.5, 0.75, 1.0}) {
            TrainConfig c = base;
            c.lambda = w;
            add("lambda=" + fmt(w), c);
        }
        for (Scalar w : {0.1, 0.25, 0.5, 0.75, 1.0}) {
            TrainConfig c = base;
            c.lambda_intra = w;
            add("lambda_intra=" + fmt(w), c);
        }
        for (Scalar w : {0.1, 0.25, 0.5, 0.75, 1.0}) {
            TrainConfig c = base;
            c.lambda_cross = w;
            add("lambda_cross=" + fmt(w), c);
        }
    } else if (axis == "tau") {
        for (Scalar t : {0.8, 0.9, 0.95, 1.0}) {
            TrainConfig c = base;
            c.tau = t;
            add("tau=" + fmt(t), c);
        }
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "' (expected table5, table4, table6, lambda or tau)");
    }
    return runs;
}

std::vector<AblationRun> select_runs(const std::vector<AblationRun>& plan, const std::vector<std::string>& names) {
    for (const auto& n : names) {
        if (std::none_of(plan.begin(), plan.end(), [&](const AblationRun& r) { return r.name == n; }))
            throw ConfigError("no ablation run named '" + n + "'");
    }
    std::vector<AblationRun> out;
    for (const auto& r : plan)
        if (std::find(names.begin(), names.end(), r.name) != names.end()) out.push_back(r);
    return out;
}

}  // namespace semsim
