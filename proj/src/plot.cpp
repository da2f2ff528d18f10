#include "semsim/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "semsim/errors.hpp"

namespace semsim {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

Table read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file", 0);
    std::stringstream hs(line);
    for (std::string col; std::getline(hs, col, ',');) t.header.push_back(col);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) row.push_back(std::strtod(cell.c_str(), nullptr));
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::size_t column(const Table& t, const std::string& name, const std::filesystem::path& path) {
    auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) throw FormatError(path.string() + ": missing column " + name, 0);
    return static_cast<std::size_t>(it - t.header.begin());
}

}  // namespace

std::string render_svg(const std::vector<Chart>& charts, int width, int chart_height) {
    const double left = 70, right = 150, top = 36, bottom = 44;
    std::ostringstream svg;
    const int height = chart_height * static_cast<int>(charts.size());
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t k = 0; k < charts.size(); ++k) {
        const Chart& chart = charts[k];
        const double y0 = static_cast<double>(k) * chart_height;
        const double pw = width - left - right, ph = chart_height - top - bottom;
        double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
        for (const auto& s : chart.series)
            for (auto [x, y] : s.points) {
                if (!std::isfinite(x) || !std::isfinite(y)) continue;
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
        if (xmax == xmin) xmax = xmin + 1;
        if (ymax == ymin) ymax = ymin + 1;
        const double pad = 0.05 * (ymax - ymin);
        ymin -= pad;
        ymax += pad;
        auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
        auto py = [&](double y) { return y0 + top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

        svg << "<text x=\"" << num(left) << "\" y=\"" << num(y0 + 20) << "\" font-size=\"14\" font-weight=\"bold\">"
            << escape(chart.title) << "</text>\n";
        svg << "<rect x=\"" << num(left) << "\" y=\"" << num(y0 + top) << "\" width=\"" << num(pw) << "\" height=\""
            << num(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double yv = ymin + (ymax - ymin) * i / 4.0, xv = xmin + (xmax - xmin) * i / 4.0;
            svg << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + pw) << "\" y1=\"" << num(py(yv)) << "\" y2=\""
                << num(py(yv)) << "\" stroke=\"#ddd\"/>\n";
            svg << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
                << tick(yv) << "</text>\n";
            svg << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(y0 + top + ph + 16)
                << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
        }
        svg << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(y0 + top + ph + 34)
            << "\" text-anchor=\"middle\">" << escape(chart.x_label) << "</text>\n";
        svg << "<text transform=\"translate(" << num(16) << "," << num(y0 + top + ph / 2)
            << ") rotate(-90)\" text-anchor=\"middle\">" << escape(chart.y_label) << "</text>\n";
        for (std::size_t s = 0; s < chart.series.size(); ++s) {
            const auto& series = chart.series[s];
            const char* color = kColors[s % std::size(kColors)];
            svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            bool first = true;
            for (auto [x, y] : series.points) {
                if (!std::isfinite(x) || !std::isfinite(y)) continue;
                svg << (first ? "" : " ") << num(px(x)) << ',' << num(py(y));
                first = false;
            }
            svg << "\"/>\n";
            const double ly = y0 + top + 14 + 18.0 * static_cast<double>(s);
            svg << "<line x1=\"" << num(left + pw + 12) << "\" x2=\"" << num(left + pw + 32) << "\" y1=\"" << num(ly - 4)
                << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
            svg << "<text x=\"" << num(left + pw + 38) << "\" y=\"" << num(ly) << "\">" << escape(series.name)
                << "</text>\n";
        }
    }
    svg << "</svg>\n";
    return svg.str();
}

std::vector<Chart> run_charts(const std::filesystem::path& run_dir) {
    const auto loss_path = run_dir / "losses.csv", val_path = run_dir / "val.csv";
    const Table losses = read_csv(loss_path), val = read_csv(val_path);

    // Steps map onto epochs through the number of steps per epoch.
    const std::size_t epochs = val.rows.size() > 0 ? val.rows.size() - 1 : 0;
    const std::size_t per_epoch = epochs > 0 ? std::max<std::size_t>(1, losses.rows.size() / epochs) : 1;
    Chart loss_chart{"Training losses", "epoch", "loss (epoch mean)", {}};
    for (const char* name : {"L_total", "L_s", "L_u", "L_intra", "L_cross"}) {
        const std::size_t col = column(losses, name, loss_path);
        Series s{name, {}};
        for (std::size_t e = 0; e * per_epoch < losses.rows.size(); ++e) {
            double sum = 0;
            std::size_t n = 0;
            for (std::size_t i = e * per_epoch; i < std::min(losses.rows.size(), (e + 1) * per_epoch); ++i, ++n)
                sum += losses.rows[i][col];
            s.points.emplace_back(static_cast<double>(e + 1), sum / static_cast<double>(n));
        }
        loss_chart.series.push_back(std::move(s));
    }

    Chart dsc_chart{"Validation DSC", "epoch", "DSC", {}};
    const std::size_t epoch_col = column(val, "epoch", val_path);
    for (std::size_t c = 0; c < val.header.size(); ++c) {
        const std::string& name = val.header[c];
        if (name != "mean_dsc" && name.rfind("dsc_", 0) != 0) continue;
        Series s{name == "mean_dsc" ? "mean" : "class " + name.substr(4), {}};
        for (const auto& row : val.rows) s.points.emplace_back(row[epoch_col], row[c]);
        dsc_chart.series.push_back(std::move(s));
    }
    return {loss_chart, dsc_chart};
}

}  // namespace semsim
