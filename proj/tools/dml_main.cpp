// dml: command-line front end for the metric-learning pipeline.
//
//   dml synth --preset paper-shaped --scale 0.25 --seed 1 --out data/
//   dml train --config exp.json --out runs/
//   dml sweep --config exp.json --axis margin --values 0.1,0.5,1,2 --out sweeps/
//   dml report --out runs/

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dml/experiment.hpp"

namespace fs = std::filesystem;
using namespace dml;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 0;
};

Shape3 parse_shape(const std::string& s) {
    Shape3 shape{};
    char x1 = 0, x2 = 0;
    std::istringstream in(s);
    if (!(in >> shape.h >> x1 >> shape.w >> x2 >> shape.d) || x1 != 'x' || x2 != 'x' || !in.eof()) {
        throw std::invalid_argument("--shape expects HxWxD, got '" + s + "'");
    }
    return shape;
}

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw std::invalid_argument("--values: bad number '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("--values is empty");
    return out;
}

ExperimentConfig load_config(const Globals& g) {
    if (g.config.empty()) throw std::invalid_argument("--config is required for this command");
    ExperimentConfig cfg = ExperimentConfig::load(g.config);
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
}

fs::path out_root(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

TableRow row_for(const std::string& run, const EvalReport& r) {
    // Run names are "Pretrain-Augment-Loss".
    const auto a = run.find('-'), b = run.rfind('-');
    if (a == std::string::npos || a == b) return {"-", "-", run, r};
    const std::string pre = run.substr(0, a), aug = run.substr(a + 1, b - a - 1);
    return {pre == "None" ? "-" : pre, aug == "Aug" ? "Yes" : "-", run.substr(b + 1), r};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep metric learning on volumetric data: synthesis, pretraining, training, evaluation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    app.add_option("--seed", g.seed, "Override the config seed");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
    std::string preset, difficulty = "easy", shape_text = "32x32x8";
    double scale = 0.25;
    std::size_t classes = 0, per_class = 0;
    synth->add_option("--preset", preset, "paper-shaped");
    synth->add_option("--scale", scale, "Preset scale factor");
    synth->add_option("--classes", classes, "Balanced dataset: number of classes");
    synth->add_option("--per-class", per_class, "Balanced dataset: samples per class");
    synth->add_option("--shape", shape_text, "Volume shape HxWxD");
    synth->add_option("--difficulty", difficulty, "easy or hard");

    auto* pretrain = app.add_subcommand("pretrain", "Run the pipeline through contrastive pretraining");
    auto* train = app.add_subcommand("train", "Run the pipeline through supervised training");

    auto* eval = app.add_subcommand("eval", "Evaluate a config's pipeline, or a checkpoint on a dataset");
    std::string checkpoint, dataset_path;
    std::size_t k = kDefaultKnnK;
    eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate (with --dataset)");
    eval->add_option("--dataset", dataset_path, "Dataset directory (with --checkpoint)");
    eval->add_option("--k", k, "Neighbours for the KNN vote")->check(CLI::PositiveNumber);

    auto* sweep = app.add_subcommand("sweep", "Run one pipeline per axis value and write sweep.csv");
    std::string axis, values_text;
    sweep->add_option("--axis", axis, "margin, embed_dim or pretrain_epochs")->required();
    sweep->add_option("--values", values_text, "Comma-separated values")->required();

    auto* report = app.add_subcommand("report", "Tabulate every */report.json under --out");

    for (auto* sub : {synth, pretrain, train, eval, sweep, report}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (g.threads > 0) set_thread_count(g.threads);
        PipelineOptions opts{&std::cerr, "eval"};

        if (synth->parsed()) {
            SyntheticSpec spec;
            const Shape3 shape = parse_shape(shape_text);
            const std::uint64_t seed = g.seed.value_or(1);
            if (!preset.empty()) {
                if (preset != "paper-shaped") throw std::invalid_argument("unknown --preset '" + preset + "'");
                if (classes || per_class) throw std::invalid_argument("--preset excludes --classes/--per-class");
                spec = SyntheticSpec::paper_shaped(scale, shape, seed);
            } else if (classes && per_class) {
                spec = SyntheticSpec::balanced(classes, per_class, shape, seed);
            } else {
                throw std::invalid_argument("synth needs --preset or both --classes and --per-class");
            }
            spec.difficulty = Difficulty::named(difficulty);
            spec.validate();
            const Dataset ds = generate_synthetic(spec);
            const fs::path out = out_root(g, "data");
            save_dataset(ds, out);
            const auto rare = identify_rare(ds, ds.rare_threshold);
            std::cout << "wrote " << ds.samples.size() << " samples, " << ds.class_count << " classes to " << out.string()
                      << "\ncontent hash " << digest_hex(ds.content_hash()) << "\nrare classes (" << rare.size() << "):";
            for (ClassId c : rare) std::cout << " " << c;
            std::cout << "\n";
        } else if (pretrain->parsed() || train->parsed()) {
            ExperimentConfig cfg = load_config(g);
            opts.until = pretrain->parsed() ? "pretrain" : "train";
            if (pretrain->parsed() && cfg.pretrain.loss == PretrainLoss::none) {
                throw std::invalid_argument("pretrain: config has pretrain.loss = none");
            }
            const ExperimentResult r = run_experiment(cfg, out_root(g, "runs"), opts);
            std::cout << r.dir.string() << "\n";
        } else if (eval->parsed()) {
            if (!checkpoint.empty() || !dataset_path.empty()) {
                if (checkpoint.empty() || dataset_path.empty()) {
                    throw std::invalid_argument("eval needs both --checkpoint and --dataset");
                }
                const EncoderParams params = load_checkpoint(checkpoint);
                const Dataset ds = load_dataset(dataset_path);
                EvalReport r = evaluate_model(params, ds, k, identify_rare(ds, ds.rare_threshold));
                const std::string js = report_to_json(r);
                if (!g.out.empty()) {
                    fs::create_directories(g.out);
                    write_file(fs::path(g.out) / "report.json", js);
                    write_file(fs::path(g.out) / "report.txt", format_table({{"-", "-", "-", r}}));
                }
                std::cout << js;
            } else {
                const ExperimentResult r = run_experiment(load_config(g), out_root(g, "runs"), opts);
                std::cout << read_file(r.dir / "report.txt");
            }
        } else if (sweep->parsed()) {
            const ExperimentConfig cfg = load_config(g);
            std::cout << run_sweep(cfg, sweep_axis_from_string(axis), parse_values(values_text), out_root(g, "sweeps"),
                                   opts);
        } else if (report->parsed()) {
            const fs::path root = out_root(g, "runs");
            if (!fs::is_directory(root)) throw std::invalid_argument("report: no directory " + root.string());
            std::vector<fs::path> dirs;
            for (const auto& e : fs::directory_iterator(root)) {
                if (fs::exists(e.path() / "report.json")) dirs.push_back(e.path());
            }
            std::sort(dirs.begin(), dirs.end());
            std::vector<TableRow> rows;
            for (const auto& d : dirs) {
                const EvalReport r = report_from_json(read_file(d / "report.json"));
                rows.push_back(row_for(r.run_name.empty() ? d.filename().string() : r.run_name, r));
            }
            if (rows.empty()) throw std::runtime_error("report: no */report.json under " + root.string());
            std::cout << format_table(rows);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
