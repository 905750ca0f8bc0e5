#pragma once

// Experiment configuration and the staged pipeline:
// dataset -> contrastive pretraining -> rare expansion -> supervised
// training -> KNN evaluation. Each stage records a digest of everything it
// depends on; a stage whose digest matches its recorded one is reused.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dml/augment.hpp"
#include "dml/data.hpp"
#include "dml/eval.hpp"
#include "dml/model.hpp"
#include "dml/serialization.hpp"

namespace dml {

enum class PretrainLoss { none, ntxent, batch_all, batch_hard };
enum class TrainLoss { cross_entropy, batch_hard, batch_all };

std::string to_string(PretrainLoss l);
std::string to_string(TrainLoss l);
PretrainLoss pretrain_loss_from_string(const std::string& s);
TrainLoss train_loss_from_string(const std::string& s);

struct SyntheticSection {
    /// "" or "paper-shaped".
    std::string preset;
    double scale = 0.25;
    std::vector<std::size_t> class_sizes;
    Shape3 shape{32, 32, 8};
    Difficulty difficulty = Difficulty::easy();
    /// Defaults to the experiment seed.
    std::optional<std::uint64_t> seed;
    double rare_threshold = 0.01;

    SyntheticSpec resolve(std::uint64_t experiment_seed) const;
};

struct DatasetSection {
    std::string path;
    std::optional<SyntheticSection> synthetic;
};

struct ModelSection {
    std::vector<ConvBlock> conv_blocks = EncoderConfig{}.conv_blocks;
    std::size_t hidden_dim = 128;
    /// Optional; must agree with the training loss when given.
    std::optional<HeadMode> head_mode;
};

struct PretrainSection {
    PretrainLoss loss = PretrainLoss::none;
    int epochs = 10;
    std::size_t batch_size = 15;
    double temperature = 0.5;
    double gamma = kDefaultLocalizationGamma;
    double margin = 1.0;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t pool_size = 300;
    /// Also feed the labelled training split (labels ignored).
    bool include_train_split = false;
};

struct AugmentSection {
    bool enabled = false;
    int n = 5;
    AugmentSpec spec;
};

struct TrainSection {
    TrainLoss loss = TrainLoss::batch_hard;
    int epochs = 50;
    std::size_t classes_per_batch = 10;
    std::size_t samples_per_class = 3;
    double margin = 1.0;
    /// Defaults to 6 for triplet losses and the class count for cross-entropy.
    std::optional<std::size_t> embed_dim;
    double lr = 0.01;
    double momentum = 0.9;
    int val_every = 5;
};

struct EvalSection {
    std::size_t k = kDefaultKnnK;
    std::vector<std::size_t> rank_ks{1, 5};
};

struct ExperimentConfig {
    DatasetSection dataset;
    ModelSection model;
    PretrainSection pretrain;
    AugmentSection augment;
    TrainSection train;
    EvalSection eval;
    std::uint64_t seed = 1;

    void validate() const;
    /// Canonical form with every default filled in.
    json to_json() const;
    static ExperimentConfig from_json(const json& j);
    static ExperimentConfig load(const std::filesystem::path& path);

    /// FNV-1a of the canonical JSON.
    std::uint64_t digest() const;
    /// "Pretrain-Augment-Loss", e.g. "BHTriplet-Aug-BHTriplet".
    std::string run_name() const;

    HeadMode head_mode() const;
    EncoderConfig encoder_config(Shape3 input, int class_count) const;
};

std::string digest_hex(std::uint64_t d);

// ---------------------------------------------------------------------------

struct PipelineOptions {
    std::ostream* log = nullptr;
    /// Stop after this stage: "pretrain", "train" or "eval".
    std::string until = "eval";
};

struct ExperimentResult {
    std::filesystem::path dir;
    std::optional<EvalReport> report;
    std::string report_json;
    bool pretrain_reused = false;
    bool train_reused = false;
    bool eval_reused = false;
};

/// Generates or loads the labelled dataset named by the config.
Dataset materialize_dataset(const ExperimentConfig& cfg);

std::filesystem::path experiment_dir(const ExperimentConfig& cfg, const std::filesystem::path& root);

/// Runs (or resumes) every stage up to opts.until inside
/// experiment_dir(cfg, root). Holds a lock file for the duration.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& root,
                                const PipelineOptions& opts = {});

/// Pretraining on its own, for callers that manage artifacts themselves.
/// epochs = 0 returns the initialization. on_epoch receives (epoch, mean loss, params).
EncoderParams pretrain_encoder(const ExperimentConfig& cfg, const Dataset& ds,
                               const std::function<void(int, double, const EncoderParams&)>& on_epoch = {});

/// Labels for 2b interleaved views [a0, b0, a1, b1, ...]: every source
/// image is its own class with two members.
std::vector<ClassId> pseudo_class_labels(std::size_t sources);

struct TrainOutcome {
    EncoderParams best;
    int best_epoch = 0;
    double best_val_recall_macro = -1.0;
    /// (epoch, mean batch loss, validation Recall_M or NaN)
    std::vector<std::tuple<int, double, double>> curve;
};

/// Supervised stage on an already expanded dataset.
TrainOutcome train_encoder(const ExperimentConfig& cfg, const Dataset& ds, const EncoderParams* init);

/// Applies expand_rare when enabled; returns the dataset unchanged otherwise.
Dataset prepare_training_data(const ExperimentConfig& cfg, const Dataset& ds);

enum class SweepAxis { margin, embed_dim, pretrain_epochs };
SweepAxis sweep_axis_from_string(const std::string& s);

/// One pipeline run per value; failures are recorded in the CSV and the
/// sweep continues. Returns the CSV text (also written to sweep.csv).
std::string run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                      const std::filesystem::path& root, const PipelineOptions& opts = {});

}  // namespace dml
