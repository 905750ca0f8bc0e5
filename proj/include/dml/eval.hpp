#pragma once

// K-nearest-neighbour classification over embeddings and the recall /
// rank-k metrics reported for every experiment.

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dml/data.hpp"
#include "dml/model.hpp"

namespace dml {

struct ReferenceSet {
    Matrix embeddings;
    std::vector<ClassId> labels;
    /// Splits combined into the reference, e.g. {"train", "val"}.
    std::vector<std::string> provenance;
};

struct KnnResult {
    ClassId label = -1;
    /// Reference rows ordered by (distance, index).
    std::vector<std::size_t> neighbors;
    std::vector<double> distances;
};

/// Majority vote over the k nearest rows. Vote ties go to the class with
/// the smaller summed neighbour distance, then to the lower class id.
KnnResult knn_predict(std::span<const double> query, const ReferenceSet& ref, std::size_t k);

/// True iff `truth` is among the first k neighbour labels.
bool rank_k_hit(ClassId truth, std::span<const ClassId> neighbor_labels, std::size_t k);

inline constexpr std::size_t kDefaultKnnK = 7;

struct EvalReport {
    double recall_micro = 0.0;
    double recall_macro = 0.0;
    /// Absent when no rare class occurs among the truths.
    std::optional<double> recall_macro_rare;
    std::map<std::size_t, double> rank_k;
    std::map<ClassId, double> per_class_recall;
    std::map<ClassId, std::size_t> per_class_support;
    /// confusion[truth][prediction]
    std::vector<std::vector<std::size_t>> confusion;
    /// Only for models with an explicit classification head.
    std::optional<double> acc_clf;

    std::size_t knn_k = kDefaultKnnK;
    std::set<ClassId> rare;
    std::vector<std::uint64_t> seeds;
    std::size_t query_count = 0;
    std::size_t reference_count = 0;
    std::string run_name;
    std::string config_digest;
};

/// Metrics from aligned predictions and truths. neighbor_labels may be empty
/// (then rank_k is left empty); otherwise it must align as well.
EvalReport compute_metrics(std::span<const ClassId> predictions, std::span<const ClassId> truths,
                           const std::vector<std::vector<ClassId>>& neighbor_labels,
                           const std::set<ClassId>& rare, std::size_t class_count,
                           std::span<const std::size_t> rank_ks = std::span<const std::size_t>());

/// Embeds samples in fixed-size chunks. Logit-head models return the
/// pre-softmax layer output.
Matrix embed_samples(const EncoderParams& params, const std::vector<const Sample*>& samples);

/// Reference = train + val, queries = test.
EvalReport evaluate_model(const EncoderParams& params, const Dataset& ds, std::size_t k,
                          const std::set<ClassId>& rare,
                          std::span<const std::size_t> rank_ks = std::span<const std::size_t>());

/// Recall_M over val queries against a train-only reference (model selection).
double validation_recall_macro(const EncoderParams& params, const Dataset& ds, std::size_t k);

// ---------------------------------------------------------------------------
// Reports

/// Stable key order; metrics printed with six decimals.
std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);

struct TableRow {
    std::string contrastive_loss;  // "-" when absent
    std::string augment;           // "Yes" or "-"
    std::string training_loss;
    EvalReport report;
};

/// Aligned text table with the columns of the results table.
std::string format_table(const std::vector<TableRow>& rows);

}  // namespace dml
