#pragma once

#include <cstddef>
#include <vector>

#include "dml/numcore.hpp"

namespace dml {

using ClassId = int;

struct LabeledBatch {
    Matrix embeddings;  // n x L
    std::vector<ClassId> labels;
};

struct LossResult {
    double value = 0.0;
    Matrix grad;  // same shape as the input matrix
    std::size_t active_terms = 0;
    /// Anchors dropped because their class had a single member in the batch.
    std::size_t skipped_anchors = 0;
};

struct ContrastivePairBatch {
    Matrix projections;             // 2N x P
    std::vector<std::size_t> pair_of;  // involution without fixed points
    double temperature = 0.5;
};

enum class SingletonPolicy {
    skip,    // count and exclude anchors with no positive
    reject,  // throw naming the class
};

enum class BatchAllForm {
    standard,  // hinge(d_ap - d_an + margin) over all valid triplets
    printed,   // sum of (d_an + margin) over (anchor, negative) with differing in-class slots
};

struct TripletOptions {
    double margin = 1.0;
    bool clamp = true;
    SingletonPolicy singletons = SingletonPolicy::skip;
    BatchAllForm form = BatchAllForm::standard;
};

/// Sum over anchors of [max_pos d - min_neg d + margin]_+. Ties in the
/// hardest-positive / hardest-negative search go to the lowest row index.
LossResult batch_hard_triplet(const LabeledBatch& batch, const TripletOptions& opts = {});

/// Sum over all (anchor, positive, negative) triples of [d_ap - d_an + margin]_+.
LossResult batch_all_triplet(const LabeledBatch& batch, const TripletOptions& opts = {});

/// Mean over the 2N rows of -log softmax over cosine similarities / tau.
LossResult nt_xent(const ContrastivePairBatch& batch);

/// Mean negative log-likelihood of stable softmax; gradient (p - y) / n.
LossResult cross_entropy(const Matrix& logits, const std::vector<ClassId>& labels);

/// Checks the structural preconditions shared by the triplet losses.
void validate_triplet_batch(const LabeledBatch& batch, SingletonPolicy policy);

/// Builds the pair_of vector for rows laid out as [a0, b0, a1, b1, ...].
std::vector<std::size_t> interleaved_pairs(std::size_t pairs);

}  // namespace dml
