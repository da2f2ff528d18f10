#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "semsim/data.hpp"
#include "semsim/plot.hpp"
#include "semsim/trainer.hpp"

using namespace semsim;
namespace fs = std::filesystem;

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int cmd_generate(const fs::path& out, Index count, Index size, std::uint64_t seed, Index classes, Scalar label_ratio,
                 Scalar val_frac, Scalar test_frac) {
    GeneratorConfig g;
    g.height = g.width = size;
    g.classes = classes;
    Dataset data;
    data.samples = generate_dataset(count, g, seed);
    data.split = make_split(data.samples, classes, label_ratio, val_frac, test_frac, seed);
    save_dataset(out, data);
    std::printf("wrote %lld samples to %s (labeled %zu, unlabeled %zu, val %zu, test %zu)\n",
                static_cast<long long>(count), out.string().c_str(), data.split.labeled.size(),
                data.split.unlabeled.size(), data.split.validation.size(), data.split.test.size());
    return 0;
}

int cmd_train(const fs::path& data_dir, const std::string& config, const fs::path& out) {
    TrainConfig cfg = config.empty() ? TrainConfig{} : load_config(config);
    const Dataset data = load_dataset(data_dir, cfg.classes);
    const auto start = std::chrono::steady_clock::now();
    const RunLog log = train(data, cfg, &out, log_line);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("final validation mean DSC %.4f after %zu steps (%.1f s); run files in %s\n", log.final_dsc(),
                log.steps.size(), secs, out.string().c_str());
    return 0;
}

std::vector<std::string> split_ids(const Dataset& data, const std::string& split) {
    if (split == "test") return data.split.test;
    if (split == "val" || split == "validation") return data.split.validation;
    if (split == "labeled") return data.split.labeled;
    if (split == "unlabeled") return data.split.unlabeled;
    throw ConfigError("unknown split '" + split + "' (expected test, val, labeled or unlabeled)");
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split, const std::string& out) {
    TrainConfig cfg;
    auto model = load_model(checkpoint, &cfg);
    const Dataset data = load_dataset(data_dir, cfg.classes);
    const MetricsReport report = evaluate(*model, data, split_ids(data, split));
    std::printf("split %s: %zu samples (distances in pixels)\n", split.c_str(), report.samples.size());
    std::printf("class      DSC      95HD      ASSD  excluded\n");
    for (const auto& c : report.per_class)
        std::printf("%5d  %7.4f  %8.3f  %8.3f  %8lld\n", c.label, c.dsc, c.hd95, c.assd, static_cast<long long>(c.empty));
    std::printf(" mean  %7.4f  %8.3f  %8.3f\n", report.mean_dsc, report.mean_hd95, report.mean_assd);
    if (!out.empty()) write_metrics_csv(out, report);
    return 0;
}

int cmd_ablate(const std::string& axis, const fs::path& data_dir, const std::string& config, const fs::path& out,
               int seeds, const std::vector<std::string>& rows) {
    const TrainConfig base = config.empty() ? TrainConfig{} : load_config(config);
    auto plan = ablation_plan(axis, base);
    if (!rows.empty()) plan = select_runs(plan, rows);
    const Dataset data = load_dataset(data_dir, base.classes);
    fs::create_directories(out);
    std::ofstream summary(out / "summary.csv", std::ios::binary);
    if (!summary) throw IoError("cannot write " + (out / "summary.csv").string());
    summary << "run,active,seed,final_mean_dsc,final_mean_hd95,final_mean_assd\n";
    std::printf("%-16s %-28s %s\n", "run", "active losses", "mean DSC over seeds");
    for (std::size_t k = 0; k < plan.size(); ++k) {
        Scalar total = 0.0;
        for (int s = 0; s < seeds; ++s) {
            TrainConfig cfg = plan[k].cfg;
            cfg.seed = base.seed + static_cast<std::uint64_t>(s);
            const fs::path dir = out / ("run" + std::to_string(k) + "_seed" + std::to_string(cfg.seed));
            const RunLog log = train(data, cfg, &dir);
            const auto& v = log.epochs.back().validation;
            char buf[200];
            std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.17g,%.17g,%.17g\n", plan[k].name.c_str(),
                          plan[k].active.c_str(), static_cast<unsigned long long>(cfg.seed), v.mean_dsc, v.mean_hd95,
                          v.mean_assd);
            summary << buf << std::flush;
            total += v.mean_dsc;
        }
        std::printf("%-16s %-28s %.4f\n", plan[k].name.c_str(), plan[k].active.c_str(), total / seeds);
        std::fflush(stdout);
    }
    return 0;
}

int cmd_plot(const fs::path& run, const fs::path& out) {
    std::ofstream svg(out, std::ios::binary);
    if (!svg) throw IoError("cannot write " + out.string());
    svg << render_svg(run_charts(run));
    std::printf("wrote %s\n", out.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised segmentation with semantic-similarity consistency"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
    std::string gen_out;
    Index count = 500, size = 32, classes = 4;
    std::uint64_t seed = 0;
    Scalar label_ratio = 0.1, val_frac = 0.1, test_frac = 0.1;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--count", count, "Number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--size", size, "Image side length (multiple of 8)")->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "Generator and split seed");
    gen->add_option("--classes", classes, "Classes including background")->check(CLI::Range(2, 255));
    gen->add_option("--label-ratio", label_ratio, "Labeled share of the training pool")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--val", val_frac, "Validation share")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--test", test_frac, "Test share")->check(CLI::Range(0.0, 1.0));

    auto* tr = app.add_subcommand("train", "Train one configuration");
    std::string tr_data, tr_config, tr_out;
    tr->add_option("--data", tr_data, "Dataset directory")->required();
    tr->add_option("--config", tr_config, "key = value config file");
    tr->add_option("--out", tr_out, "Run directory")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file (model.sst)")->required();
    ev->add_option("--data", ev_data, "Dataset directory")->required();
    ev->add_option("--split", ev_split, "test, val, labeled or unlabeled");
    ev->add_option("--out", ev_out, "Optional metrics CSV");

    auto* ab = app.add_subcommand("ablate", "Run an ablation axis");
    std::string ab_axis, ab_data, ab_config, ab_out;
    int ab_seeds = 1;
    std::vector<std::string> ab_rows;
    ab->add_option("--axis", ab_axis, "table5, table4, table6, lambda or tau")->required();
    ab->add_option("--data", ab_data, "Dataset directory")->required();
    ab->add_option("--config", ab_config, "Base config file");
    ab->add_option("--out", ab_out, "Output directory (default ablate_<axis>)");
    ab->add_option("--seeds", ab_seeds, "Seeds per configuration")->check(CLI::PositiveNumber);
    ab->add_option("--rows", ab_rows, "Only these runs, e.g. supervised,#1,#7")->delimiter(',');

    auto* pl = app.add_subcommand("plot", "Plot a run's curves as SVG");
    std::string pl_run, pl_out = "curves.svg";
    pl->add_option("--run", pl_run, "Run directory")->required();
    pl->add_option("--out", pl_out, "SVG file");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_generate(gen_out, count, size, seed, classes, label_ratio, val_frac, test_frac);
        if (*tr) return cmd_train(tr_data, tr_config, tr_out);
        if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_out);
        if (*ab) return cmd_ablate(ab_axis, ab_data, ab_config, ab_out.empty() ? "ablate_" + ab_axis : ab_out, ab_seeds, ab_rows);
        if (*pl) return cmd_plot(pl_run, pl_out);
    } catch (const ConfigError& e) {
        std::cerr << "semsim: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "semsim: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
