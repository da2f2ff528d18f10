#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "semsim/tensor.hpp"

namespace semsim {

struct Series {
    std::string name;
    std::vector<std::pair<Scalar, Scalar>> points;
};

struct Chart {
    std::string title, x_label, y_label;
    std::vector<Series> series;
};

/// Charts stacked vertically in one SVG document.
std::string render_svg(const std::vector<Chart>& charts, int width = 640, int chart_height = 280);

/// Loss components (per-epoch means of losses.csv) and validation DSC
/// (val.csv) of a run directory.
std::vector<Chart> run_charts(const std::filesystem::path& run_dir);

}  // namespace semsim
