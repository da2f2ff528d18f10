#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semsim/fields.hpp"

namespace semsim {

using BinaryField = Field<bool>;

BinaryField class_view(const LabelField& labels, int c);

/// Pixels of `mask` with a 4-neighbour outside it (the image border counts as
/// outside), i.e. mask minus its 4-connectivity erosion.
BinaryField boundary(const BinaryField& mask);

/// Exact Euclidean distance from every pixel to the nearest set pixel of
/// `sites`; +inf everywhere when `sites` is empty.
Field<Scalar> distance_transform(const BinaryField& sites);

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
Scalar dsc(const LabelField& pred, const LabelField& gt, int c);
/// 95th percentile (nearest rank) of the pooled directed boundary distances.
/// nullopt when either structure is empty.
std::optional<Scalar> hd95(const LabelField& pred, const LabelField& gt, int c);
/// Mean of the two directed mean boundary distances; nullopt when either is empty.
std::optional<Scalar> assd(const LabelField& pred, const LabelField& gt, int c);

struct ClassScore {
    int label = 0;
    Scalar dsc = 0.0;
    std::optional<Scalar> hd95, assd;
};

struct SampleScore {
    std::string id;
    std::vector<ClassScore> classes;  // foreground classes 1..C-1
};

SampleScore score_sample(const std::string& id, const LabelField& pred, const LabelField& gt, Index classes);

struct ClassSummary {
    int label = 0;
    Scalar dsc = 0.0, hd95 = 0.0, assd = 0.0;
    Index empty = 0;  // samples excluded from hd95 / assd
};

struct MetricsReport {
    std::vector<SampleScore> samples;
    std::vector<ClassSummary> per_class;
    Scalar mean_dsc = 0.0, mean_hd95 = 0.0, mean_assd = 0.0;  // over foreground classes
};

MetricsReport summarize(std::vector<SampleScore> samples);
/// sample_id,class,dsc,hd95,assd; empty structures print as "empty"; summary
/// rows use sample_id "mean" and class "fg" for the foreground average.
void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace semsim
