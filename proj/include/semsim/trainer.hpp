#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "semsim/data.hpp"
#include "semsim/metrics.hpp"
#include "semsim/objectives.hpp"
#include "semsim/predictors.hpp"
#include "semsim/sfm.hpp"

namespace semsim {

/// Which strong view (1-based, 0 = term disabled) feeds p^in, p^cr and p^s.
/// Text form "S1,S2,S1"; decoder-only variants "x,x,S1/S2".
struct ViewAssignment {
    int intra = 1;
    int cross = 2;
    std::vector<int> strong{1};

    static ViewAssignment parse(const std::string& text);
    std::string str() const;
    int views() const;  // number of distinct strong views to draw
};

struct TrainConfig {
    Index epochs = 60;
    Index batch_size = 16;  // half labeled, half unlabeled
    Index steps_per_epoch = 0;  // 0: one pass over the labeled set
    Scalar lr = 0.01;
    Scalar lr_power = 0.9;
    Scalar momentum = 0.9;
    Scalar weight_decay = 1e-4;
    Scalar tau = 0.95;
    Scalar r = 1000.0;
    Index N = 4;
    Index D = 32;
    Index S = 2;
    Scalar lambda = 0.5;
    Scalar lambda_intra = 0.25;
    Scalar lambda_cross = 0.25;
    Scalar cross_temperature = 1.0;
    Scalar dropout = 0.5;
    Index classes = 4;
    std::uint64_t seed = 0;
    ViewAssignment views;

    LossWeights weights() const { return {lambda, lambda_intra, lambda_cross, tau}; }
    bool intra_active() const { return lambda_intra != 0.0 && views.intra != 0; }
    bool cross_active() const { return lambda_cross != 0.0 && views.cross != 0; }
    bool unsup_active() const { return lambda != 0.0 && !views.strong.empty(); }
    bool semi_supervised() const { return intra_active() || cross_active() || unsup_active(); }
};

/// `key = value` lines; '#' starts a comment. Unknown keys, duplicate keys
/// and malformed values raise ConfigError naming the line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
/// Every key in canonical order; parse_config(format_config(c)) == c.
std::string format_config(const TrainConfig& cfg);

/// lr0 * (1 - step/total)^power, 0 once step >= total.
Scalar lr_schedule(Index step, Index total, Scalar lr0, Scalar power = 0.9);

/// SGD with momentum; weight decay is added to the gradient first:
/// g += wd * theta, v = mu * v + g, theta -= lr * v.
class Sgd {
public:
    Sgd(Scalar momentum, Scalar weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
    void step(const std::vector<ParamRef>& params, Scalar lr);

private:
    Scalar momentum_, weight_decay_;
    std::vector<Array> velocity_;
};

/// Segmentation network plus the feature-fusion head used by the predictors.
class SemSimModel {
public:
    explicit SemSimModel(const TrainConfig& cfg);
    SemSimModel(const SemSimModel&) = delete;
    SemSimModel& operator=(const SemSimModel&) = delete;

    UNet net;
    Sfm sfm;
    ParamSet params;

    /// Decoder probabilities [N,C,H,W] in evaluation mode, no gradient.
    Tensor predict(const Tensor& images);
    /// Per-pixel argmax of predict() for each sample.
    std::vector<LabelField> segment(const std::vector<const SegSample*>& samples, Index batch = 25);
};

/// Augmented inputs of one step.
struct StepBatch {
    std::vector<ImageField> labeled_images;
    std::vector<LabelField> labeled_masks;
    std::vector<ImageField> weak;                  // x^w
    std::vector<std::vector<ImageField>> strong;   // strong[v][i]: view v+1 of image i
    std::vector<std::vector<std::optional<Box>>> boxes;
    std::vector<Index> partner;                    // CutMix partner of image i
};

/// Weak flips for the labeled batch; x^w and independent strong views for
/// the unlabeled batch. Views are drawn from x^w; CutMix partners are the
/// next image of the batch.
StepBatch prepare_batch(const std::vector<const SegSample*>& labeled, const std::vector<const SegSample*>& unlabeled,
                        const TrainConfig& cfg, Rng rng);

/// Forward passes and every loss term of one step; the returned objective
/// is ready for backward(). Batch-norm running moments are updated.
LossReport compute_losses(SemSimModel& model, const TrainConfig& cfg, const StepBatch& batch, Rng dropout_rng);

/// Draws `count` labeled ids whose masks jointly contain every class,
/// resampling up to 100 times.
std::vector<const SegSample*> sample_labeled_batch(const Dataset& data, Index count, Index classes, Rng& rng);

struct EpochRecord {
    Index epoch = 0;
    Scalar lr = 0.0;
    MetricsReport validation;
};

struct RunLog {
    std::vector<LossReport> steps;
    std::vector<EpochRecord> epochs;  // epoch 0 is the untrained network
    Scalar final_dsc() const { return epochs.empty() ? 0.0 : epochs.back().validation.mean_dsc; }
};

MetricsReport evaluate(SemSimModel& model, const Dataset& data, const std::vector<std::string>& ids);

using ProgressFn = std::function<void(const std::string&)>;

/// Runs the whole schedule. With `out_dir`, writes losses.csv, val.csv,
/// metrics.csv (final validation), model.sst (+ .manifest, .cfg) and
/// config.txt.
RunLog train(const Dataset& data, const TrainConfig& cfg, const std::filesystem::path* out_dir = nullptr,
             const ProgressFn& progress = {});

void save_model(const std::filesystem::path& path, SemSimModel& model, const TrainConfig& cfg);
/// Rebuilds the model from "<path>.cfg" and loads the weights.
std::unique_ptr<SemSimModel> load_model(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);

std::string val_csv_header(Index classes);
std::string val_csv_row(const EpochRecord& e);

struct AblationRun {
    std::string name;
    std::string active;  // loss terms in play, e.g. "L_s+L_u+L_intra"
    TrainConfig cfg;
};

/// Expands an ablation axis (table5, table4, table6, lambda, tau) around `base`.
std::vector<AblationRun> ablation_plan(const std::string& axis, const TrainConfig& base);
/// Keeps the runs named in `names`, in plan order; unknown names raise ConfigError.
std::vector<AblationRun> select_runs(const std::vector<AblationRun>& plan, const std::vector<std::string>& names);

}  // namespace semsim
