#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "dml/experiment.hpp"
#include "dml/losses.hpp"

namespace dml {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kPretrainStream = 0x9e7a;
constexpr std::uint64_t kTrainStream = 0x7a11;
constexpr std::uint64_t kPoolSeedStream = 0x9001;

std::ostream& log_to(const PipelineOptions& opts) {
    static std::ostream null_stream(nullptr);
    return opts.log ? *opts.log : null_stream;
}

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void check_finite(double loss, const char* stage, int epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        throw std::runtime_error(std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch));
    }
}

// The pretraining network shares the training architecture but always ends
// in a unit-normalized head.
EncoderConfig pretrain_encoder_config(const ExperimentConfig& cfg, const Dataset& ds) {
    if (ds.samples.empty()) throw std::invalid_argument("pretrain: empty dataset");
    EncoderConfig e = cfg.encoder_config(ds.samples.front().volume.shape(), ds.class_count);
    e.head_mode = HeadMode::l2_normalized;
    return e;
}

std::vector<Sample> pretrain_pool(const ExperimentConfig& cfg, const Dataset& ds) {
    std::vector<Sample> pool;
    if (cfg.pretrain.pool_size > 0) {
        if (!ds.generator_json) {
            throw std::invalid_argument("pretrain: dataset carries no generator spec, so no unlabelled pool can be "
                                        "drawn; set pretrain.pool_size = 0 and include_train_split = true");
        }
        const SyntheticSpec spec = synthetic_spec_from_json_string(*ds.generator_json);
        pool = generate_unlabelled_pool(spec, cfg.pretrain.pool_size,
                                        RngStream(cfg.seed, kPoolSeedStream).next_u64());
    }
    if (cfg.pretrain.include_train_split) {
        for (const Sample& s : ds.samples) {
            if (s.split != Split::train) continue;
            Sample u = s;
            u.label = -1;
            pool.push_back(std::move(u));
        }
    }
    if (pool.size() < 2) throw std::invalid_argument("pretrain: pool holds fewer than 2 images");
    return pool;
}

// Digest of a JSON document plus the digest of the stage it builds on.
std::uint64_t stage_digest(std::uint64_t parent, const json& j) {
    return fnv1a64(digest_hex(parent) + j.dump());
}

bool stage_done(const fs::path& dir, std::uint64_t digest) {
    const fs::path marker = dir / "stage.json";
    if (!fs::exists(marker)) return false;
    try {
        const json j = json::parse(read_text(marker));
        return j.at("digest").get<std::string>() == digest_hex(digest);
    } catch (const std::exception&) {
        return false;
    }
}

void mark_stage(const fs::path& dir, std::uint64_t digest) {
    write_text(dir / "stage.json", json{{"digest", digest_hex(digest)}}.dump(2) + "\n");
}

class DirLock {
public:
    explicit DirLock(fs::path path) : path_(std::move(path)) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw std::runtime_error("experiment directory is locked (" + path_.string() +
                                     "); remove the file if no other run is active");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Dataset materialize_dataset(const ExperimentConfig& cfg) {
    cfg.validate();
    if (!cfg.dataset.path.empty()) return load_dataset(cfg.dataset.path);
    return generate_synthetic(cfg.dataset.synthetic->resolve(cfg.seed));
}

fs::path experiment_dir(const ExperimentConfig& cfg, const fs::path& root) { return root / cfg.run_name(); }

std::vector<ClassId> pseudo_class_labels(std::size_t sources) {
    std::vector<ClassId> out;
    for (std::size_t i = 0; i < sources; ++i) out.insert(out.end(), 2, static_cast<ClassId>(i));
    return out;
}

EncoderParams pretrain_encoder(const ExperimentConfig& cfg, const Dataset& ds,
                               const std::function<void(int, double, const EncoderParams&)>& on_epoch) {
    const EncoderConfig ecfg = pretrain_encoder_config(cfg, ds);
    EncoderParams params = init_params(ecfg, RngStream(cfg.seed, kInitStream).derive("pretrain"));
    const auto& p = cfg.pretrain;
    if (p.loss == PretrainLoss::none || p.epochs == 0) return params;

    const std::vector<Sample> pool = pretrain_pool(cfg, ds);
    const RngStream base(cfg.seed, kPretrainStream);
    SgdState opt;
    for (int epoch = 1; epoch <= p.epochs; ++epoch) {
        const RngStream epoch_rng = base.derive(static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        RngStream shuffle_rng = epoch_rng.derive("order");
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 2 <= order.size(); start += p.batch_size) {
            const std::size_t b = std::min(p.batch_size, order.size() - start);
            // Views laid out [a0, b0, a1, b1, ...]; each source is a pseudo-class.
            std::vector<Volume> views(2 * b);
            parallel_for(b, [&](std::size_t i) {
                const Sample& s = pool[order[start + i]];
                ViewPair v = make_views(s, cfg.augment.spec, epoch_rng.derive(s.id), p.gamma);
                views[2 * i] = std::move(v.view_a);
                views[2 * i + 1] = std::move(v.view_b);
            });
            const ForwardResult fwd = forward(params, views);
            LossResult loss;
            if (p.loss == PretrainLoss::ntxent) {
                loss = nt_xent({fwd.output, interleaved_pairs(b), p.temperature});
            } else {
                LabeledBatch lb{fwd.output, pseudo_class_labels(b)};
                TripletOptions opts;
                opts.margin = p.margin;
                loss = p.loss == PretrainLoss::batch_hard ? batch_hard_triplet(lb, opts) : batch_all_triplet(lb, opts);
            }
            check_finite(loss.value, "pretrain", epoch, batches);
            sgd_step(params, backward(params, fwd.cache, loss.grad), p.lr, p.momentum, opt);
            loss_sum += loss.value;
            ++batches;
        }
        if (on_epoch) on_epoch(epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, params);
    }
    return params;
}

Dataset prepare_training_data(const ExperimentConfig& cfg, const Dataset& ds) {
    if (!cfg.augment.enabled) return ds;
    return expand_rare(ds, identify_rare(ds, ds.rare_threshold), cfg.augment.n, cfg.augment.spec, cfg.seed);
}

TrainOutcome train_encoder(const ExperimentConfig& cfg, const Dataset& ds, const EncoderParams* init) {
    if (ds.samples.empty()) throw std::invalid_argument("train: empty dataset");
    const auto& t = cfg.train;
    const EncoderConfig ecfg = cfg.encoder_config(ds.samples.front().volume.shape(), ds.class_count);
    EncoderParams params = init_params(ecfg, RngStream(cfg.seed, kInitStream).derive("train"));
    if (init) transfer_params(*init, params);

    std::vector<std::size_t> idx;
    std::vector<ClassId> labels;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (ds.samples[i].split != Split::train) continue;
        idx.push_back(i);
        labels.push_back(ds.samples[i].label);
    }
    const std::size_t classes = ds.class_totals(Split::train).size();
    StratifiedBatchSampler sampler(idx, labels, std::min(t.classes_per_batch, classes), t.samples_per_class,
                                   RngStream(cfg.seed, kTrainStream));

    TrainOutcome out{params, 0, -1.0, {}};
    if (t.epochs == 0) {
        out.best_val_recall_macro = validation_recall_macro(params, ds, cfg.eval.k);
        return out;
    }
    TripletOptions topts;
    topts.margin = t.margin;
    SgdState opt;
    for (int epoch = 1; epoch <= t.epochs; ++epoch) {
        double loss_sum = 0.0;
        const auto batches = sampler.epoch();
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            std::vector<const Volume*> vols;
            LabeledBatch lb;
            for (std::size_t i : batches[bi]) {
                vols.push_back(&ds.samples[i].volume);
                lb.labels.push_back(ds.samples[i].label);
            }
            const ForwardResult fwd = forward(params, VolumeBatch(vols));
            LossResult loss;
            if (t.loss == TrainLoss::cross_entropy) {
                loss = cross_entropy(fwd.output, lb.labels);
            } else {
                lb.embeddings = fwd.output;
                loss = t.loss == TrainLoss::batch_hard ? batch_hard_triplet(lb, topts) : batch_all_triplet(lb, topts);
            }
            check_finite(loss.value, "train", epoch, bi);
            sgd_step(params, backward(params, fwd.cache, loss.grad), t.lr, t.momentum, opt);
            loss_sum += loss.value;
        }
        double val = std::nan("");
        if (epoch % t.val_every == 0 || epoch == t.epochs) {
            val = validation_recall_macro(params, ds, cfg.eval.k);
            if (val > out.best_val_recall_macro) {
                out.best = params;
                out.best_epoch = epoch;
                out.best_val_recall_macro = val;
            }
        }
        out.curve.emplace_back(epoch, loss_sum / static_cast<double>(batches.size()), val);
    }
    return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& root, const PipelineOptions& opts) {
    cfg.validate();
    if (opts.until != "pretrain" && opts.until != "train" && opts.until != "eval") {
        throw std::invalid_argument("unknown stage '" + opts.until + "' (expected pretrain, train or eval)");
    }
    std::ostream& log = log_to(opts);
    ExperimentResult res;
    res.dir = experiment_dir(cfg, root);
    fs::create_directories(res.dir);
    DirLock lock(res.dir / "lock");
    write_text(res.dir / "config.json", cfg.to_json().dump(2) + "\n");

    json timings = json::object();
    auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = materialize_dataset(cfg);
    timings["dataset"] = seconds_since(t0);
    log << "[" << cfg.run_name() << "] dataset: " << ds.samples.size() << " samples, " << ds.class_count
        << " classes\n";

    const json cj = cfg.to_json();
    const std::uint64_t data_digest = ds.content_hash();
    const std::uint64_t pre_digest =
        stage_digest(data_digest, json{{"pretrain", cj["pretrain"]}, {"model", cj["model"]}, {"seed", cfg.seed},
                                       {"views", cj["augment"]}, {"embed", cfg.train.embed_dim ? json(*cfg.train.embed_dim) : json(nullptr)},
                                       {"head", to_string(cfg.train.loss)}});

    auto fail = [&](const std::exception& e, const char* stage) {
        write_text(res.dir / "diagnostic.json",
                   json{{"stage", stage}, {"error", e.what()}, {"config_digest", digest_hex(cfg.digest())}}.dump(2) +
                       "\n");
    };

    std::optional<EncoderParams> pretrained;
    if (cfg.pretrain.loss != PretrainLoss::none) {
        const fs::path dir = res.dir / "pretrain";
        fs::create_directories(dir);
        if (stage_done(dir, pre_digest) && fs::exists(dir / "final.bin")) {
            pretrained = load_checkpoint(dir / "final.bin", pretrain_encoder_config(cfg, ds));
            res.pretrain_reused = true;
            log << "[" << cfg.run_name() << "] pretrain: reused\n";
        } else {
            fs::remove(dir / "stage.json");
            t0 = std::chrono::steady_clock::now();
            std::string curve = "epoch,loss\n";
            try {
                pretrained = pretrain_encoder(cfg, ds, [&](int epoch, double loss, const EncoderParams& p) {
                    char name[32];
                    std::snprintf(name, sizeof name, "epoch_%03d.bin", epoch);
                    save_checkpoint(dir / name, p);
                    curve += std::to_string(epoch) + "," + fmt(loss) + "\n";
                    log << "[" << cfg.run_name() << "] pretrain epoch " << epoch << " loss " << fmt(loss) << "\n";
                });
            } catch (const std::exception& e) {
                fail(e, "pretrain");
                throw;
            }
            save_checkpoint(dir / "final.bin", *pretrained);
            write_text(dir / "curve.csv", curve);
            mark_stage(dir, pre_digest);
            timings["pretrain"] = seconds_since(t0);
        }
    }
    if (opts.until == "pretrain") return res;

    const Dataset train_ds = prepare_training_data(cfg, ds);
    const std::uint64_t train_digest = stage_digest(
        pretrained ? pre_digest : data_digest, json{{"augment", cj["augment"]}, {"train", cj["train"]},
                                                    {"model", cj["model"]}, {"val_k", cfg.eval.k}, {"seed", cfg.seed}});
    const EncoderConfig ecfg = cfg.encoder_config(ds.samples.front().volume.shape(), ds.class_count);
    std::optional<EncoderParams> trained;
    {
        const fs::path dir = res.dir / "train";
        fs::create_directories(dir);
        if (stage_done(dir, train_digest) && fs::exists(dir / "best.bin")) {
            trained = load_checkpoint(dir / "best.bin", ecfg);
            res.train_reused = true;
            log << "[" << cfg.run_name() << "] train: reused\n";
        } else {
            fs::remove(dir / "stage.json");
            t0 = std::chrono::steady_clock::now();
            TrainOutcome outcome{EncoderParams(ecfg), 0, -1.0, {}};
            try {
                outcome = train_encoder(cfg, train_ds, pretrained ? &*pretrained : nullptr);
            } catch (const std::exception& e) {
                fail(e, "train");
                throw;
            }
            std::string curve = "epoch,train_loss,val_recall_macro\n";
            for (const auto& [epoch, loss, val] : outcome.curve) {
                curve += std::to_string(epoch) + "," + fmt(loss) + "," + (std::isnan(val) ? "" : fmt(val)) + "\n";
            }
            write_text(dir / "curves.csv", curve);
            save_checkpoint(dir / "best.bin", outcome.best);
            write_text(dir / "selection.json", json{{"best_epoch", outcome.best_epoch},
                                                    {"val_recall_macro", outcome.best_val_recall_macro}}
                                                       .dump(2) + "\n");
            log << "[" << cfg.run_name() << "] train: best epoch " << outcome.best_epoch << ", val Recall_M "
                << fmt(outcome.best_val_recall_macro) << "\n";
            trained = std::move(outcome.best);
            mark_stage(dir, train_digest);
            timings["train"] = seconds_since(t0);
        }
    }
    if (opts.until == "train") return res;

    const std::uint64_t eval_digest = stage_digest(train_digest, cj["eval"]);
    const fs::path eval_dir = res.dir / "eval";
    fs::create_directories(eval_dir);
    if (stage_done(eval_dir, eval_digest) && fs::exists(res.dir / "report.json")) {
        res.report_json = read_text(res.dir / "report.json");
        res.report = report_from_json(res.report_json);
        res.eval_reused = true;
    } else {
        fs::remove(eval_dir / "stage.json");
        t0 = std::chrono::steady_clock::now();
        EvalReport r = evaluate_model(*trained, train_ds, cfg.eval.k, identify_rare(ds, ds.rare_threshold),
                                      cfg.eval.rank_ks);
        r.seeds = {cfg.seed};
        r.run_name = cfg.run_name();
        r.config_digest = digest_hex(cfg.digest());
        res.report_json = report_to_json(r);
        write_text(res.dir / "report.json", res.report_json);
        const std::string pre = cfg.pretrain.loss == PretrainLoss::none ? "-" : cfg.run_name().substr(0, cfg.run_name().find('-'));
        const std::string loss = cfg.run_name().substr(cfg.run_name().rfind('-') + 1);
        write_text(res.dir / "report.txt", format_table({{pre, cfg.augment.enabled ? "Yes" : "-", loss, r}}));
        res.report = std::move(r);
        mark_stage(eval_dir, eval_digest);
        timings["eval"] = seconds_since(t0);
    }
    log << "[" << cfg.run_name() << "] Recall_mu " << fmt(res.report->recall_micro) << ", Recall_M "
        << fmt(res.report->recall_macro) << "\n";
    write_text(res.dir / "timings.json", timings.dump(2) + "\n");
    return res;
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "margin") return SweepAxis::margin;
    if (s == "embed_dim") return SweepAxis::embed_dim;
    if (s == "pretrain_epochs") return SweepAxis::pretrain_epochs;
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected margin, embed_dim or pretrain_epochs)");
}

std::string run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                      const fs::path& root, const PipelineOptions& opts) {
    if (values.empty()) throw std::invalid_argument("sweep: no values");
    const char* axis_name = axis == SweepAxis::margin      ? "margin"
                            : axis == SweepAxis::embed_dim ? "embed_dim"
                                                           : "pretrain_epochs";
    std::string csv = "value,recall_mu,recall_M,recall_star_M,rank5,status\n";
    for (double v : values) {
        char label[64];
        std::snprintf(label, sizeof label, "%g", v);
        std::string row = std::string(label) + ",";
        try {
            ExperimentConfig cfg = base;
            auto as_count = [&](double x) {
                if (!(x >= 0.0) || x != std::floor(x)) {
                    throw std::invalid_argument(std::string(axis_name) + " needs a non-negative integer, got " + label);
                }
                return static_cast<std::size_t>(x);
            };
            switch (axis) {
                case SweepAxis::margin: cfg.train.margin = v; break;
                case SweepAxis::embed_dim: cfg.train.embed_dim = as_count(v); break;
                case SweepAxis::pretrain_epochs: cfg.pretrain.epochs = static_cast<int>(as_count(v)); break;
            }
            const ExperimentResult r =
                run_experiment(cfg, root / (std::string(axis_name) + "=" + label), PipelineOptions{opts.log, "eval"});
            const EvalReport& rep = *r.report;
            const auto rank5 = rep.rank_k.find(5);
            row += fmt(rep.recall_micro) + "," + fmt(rep.recall_macro) + "," +
                   (rep.recall_macro_rare ? fmt(*rep.recall_macro_rare) : "") + "," +
                   (rank5 != rep.rank_k.end() ? fmt(rank5->second) : "") + ",ok";
        } catch (const std::exception& e) {
            std::string msg = e.what();
            for (char& c : msg) {
                if (c == ',' || c == '\n' || c == '"') c = ' ';
            }
            row += ",,,,error: " + msg;
            log_to(opts) << "sweep " << axis_name << "=" << label << " failed: " << e.what() << "\n";
        }
        csv += row + "\n";
    }
    fs::create_directories(root);
    write_text(root / "sweep.csv", csv);
    return csv;
}

}  // namespace dml
