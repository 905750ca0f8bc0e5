#include "dml/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dml {

KnnResult knn_predict(std::span<const double> query, const ReferenceSet& ref, std::size_t k) {
    const std::size_t m = ref.embeddings.rows();
    if (m == 0) throw std::invalid_argument("knn: empty reference set");
    if (ref.labels.size() != m) throw std::invalid_argument("knn: reference label count mismatch");
    if (query.size() != ref.embeddings.cols()) {
        throw std::invalid_argument("knn: query has " + std::to_string(query.size()) + " dims, reference has " +
                                    std::to_string(ref.embeddings.cols()));
    }
    if (k < 1 || k > m) {
        throw std::invalid_argument("knn: K = " + std::to_string(k) + " outside [1, " + std::to_string(m) + "]");
    }
    std::vector<double> dist(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = ref.embeddings.row(i);
        double s = 0.0;
        for (std::size_t d = 0; d < query.size(); ++d) {
            const double diff = query[d] - row[d];
            s += diff * diff;
        }
        dist[i] = std::sqrt(s);
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    auto closer = [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), closer);

    KnnResult out;
    out.neighbors.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::map<ClassId, std::pair<std::size_t, double>> votes;  // class -> (count, summed distance)
    for (std::size_t i : out.neighbors) {
        out.distances.push_back(dist[i]);
        auto& v = votes[ref.labels[i]];
        ++v.first;
        v.second += dist[i];
    }
    // Map iteration is by ascending class id, so strict comparisons keep the
    // lower id on a full tie.
    const std::pair<std::size_t, double>* best = nullptr;
    for (const auto& [cls, v] : votes) {
        if (!best || v.first > best->first || (v.first == best->first && v.second < best->second)) {
            best = &v;
            out.label = cls;
        }
    }
    return out;
}

bool rank_k_hit(ClassId truth, std::span<const ClassId> neighbor_labels, std::size_t k) {
    const std::size_t n = std::min(k, neighbor_labels.size());
    return std::find(neighbor_labels.begin(), neighbor_labels.begin() + static_cast<std::ptrdiff_t>(n), truth) !=
           neighbor_labels.begin() + static_cast<std::ptrdiff_t>(n);
}

EvalReport compute_metrics(std::span<const ClassId> predictions, std::span<const ClassId> truths,
                           const std::vector<std::vector<ClassId>>& neighbor_labels,
                           const std::set<ClassId>& rare, std::size_t class_count,
                           std::span<const std::size_t> rank_ks) {
    if (predictions.size() != truths.size()) {
        throw std::invalid_argument("metrics: " + std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(truths.size()) + " truths");
    }
    if (truths.empty()) throw std::invalid_argument("metrics: no queries");
    if (!neighbor_labels.empty() && neighbor_labels.size() != truths.size()) {
        throw std::invalid_argument("metrics: neighbour lists do not align with truths");
    }
    for (std::span<const ClassId> v : {predictions, truths}) {
        for (ClassId c : v) {
            if (c < 0 || static_cast<std::size_t>(c) >= class_count) {
                throw std::invalid_argument("metrics: class " + std::to_string(c) + " outside [0, " +
                                            std::to_string(class_count) + ")");
            }
        }
    }

    EvalReport r;
    r.rare = rare;
    r.query_count = truths.size();
    r.confusion.assign(class_count, std::vector<std::size_t>(class_count, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        ++r.confusion[static_cast<std::size_t>(truths[i])][static_cast<std::size_t>(predictions[i])];
        correct += predictions[i] == truths[i];
    }
    r.recall_micro = static_cast<double>(correct) / static_cast<double>(truths.size());

    double macro = 0.0, rare_sum = 0.0;
    std::size_t present = 0, rare_present = 0;
    for (std::size_t c = 0; c < class_count; ++c) {
        const auto& row = r.confusion[c];
        const std::size_t support = std::accumulate(row.begin(), row.end(), std::size_t{0});
        if (support == 0) continue;
        const double recall = static_cast<double>(row[c]) / static_cast<double>(support);
        const auto cls = static_cast<ClassId>(c);
        r.per_class_recall[cls] = recall;
        r.per_class_support[cls] = support;
        macro += recall;
        ++present;
        if (rare.contains(cls)) {
            rare_sum += recall;
            ++rare_present;
        }
    }
    r.recall_macro = macro / static_cast<double>(present);
    if (rare_present > 0) r.recall_macro_rare = rare_sum / static_cast<double>(rare_present);

    if (!neighbor_labels.empty()) {
        static const std::size_t kDefaultRanks[] = {1, 5};
        if (rank_ks.empty()) rank_ks = kDefaultRanks;
        for (std::size_t k : rank_ks) {
            std::size_t hits = 0;
            bool available = true;
            for (std::size_t i = 0; i < truths.size(); ++i) {
                if (neighbor_labels[i].size() < k) {
                    available = false;
                    break;
                }
                hits += rank_k_hit(truths[i], neighbor_labels[i], k);
            }
            if (available) r.rank_k[k] = static_cast<double>(hits) / static_cast<double>(truths.size());
        }
    }
    return r;
}

namespace {

constexpr std::size_t kEmbedChunk = 64;

Matrix embed_chunks(const EncoderParams& params, const std::vector<const Sample*>& samples, bool pre_head) {
    const std::size_t dim = params.config().embed_dim;
    Matrix out(samples.size(), dim);
    std::vector<const Volume*> vols;
    for (std::size_t start = 0; start < samples.size(); start += kEmbedChunk) {
        const std::size_t end = std::min(samples.size(), start + kEmbedChunk);
        vols.clear();
        for (std::size_t i = start; i < end; ++i) vols.push_back(&samples[i]->volume);
        const Matrix e = pre_head ? embed_pre_head(params, vols) : embed(params, vols);
        std::copy(e.data().begin(), e.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * dim));
    }
    return out;
}

std::vector<const Sample*> pick(const Dataset& ds, std::initializer_list<Split> splits) {
    std::vector<const Sample*> out;
    for (const Sample& s : ds.samples) {
        if (std::find(splits.begin(), splits.end(), s.split) != splits.end()) out.push_back(&s);
    }
    return out;
}

std::vector<ClassId> labels_of(const std::vector<const Sample*>& samples) {
    std::vector<ClassId> out;
    for (const Sample* s : samples) out.push_back(s->label);
    return out;
}

struct KnnPass {
    std::vector<ClassId> predictions;
    std::vector<std::vector<ClassId>> neighbor_labels;
};

KnnPass run_knn(const Matrix& queries, const ReferenceSet& ref, std::size_t k) {
    KnnPass out;
    out.predictions.resize(queries.rows());
    out.neighbor_labels.resize(queries.rows());
    parallel_for(queries.rows(), [&](std::size_t i) {
        const KnnResult r = knn_predict(queries.row(i), ref, k);
        out.predictions[i] = r.label;
        for (std::size_t n : r.neighbors) out.neighbor_labels[i].push_back(ref.labels[n]);
    });
    return out;
}

}  // namespace

Matrix embed_samples(const EncoderParams& params, const std::vector<const Sample*>& samples) {
    return embed_chunks(params, samples, params.config().head_mode == HeadMode::logits);
}

EvalReport evaluate_model(const EncoderParams& params, const Dataset& ds, std::size_t k,
                          const std::set<ClassId>& rare, std::span<const std::size_t> rank_ks) {
    const auto ref_samples = pick(ds, {Split::train, Split::val});
    const auto test_samples = pick(ds, {Split::test});
    if (test_samples.empty()) throw std::invalid_argument("evaluate: dataset has no test samples");

    ReferenceSet ref{embed_samples(params, ref_samples), labels_of(ref_samples), {"train", "val"}};
    const Matrix queries = embed_samples(params, test_samples);
    const std::vector<ClassId> truths = labels_of(test_samples);
    const KnnPass pass = run_knn(queries, ref, k);

    EvalReport r = compute_metrics(pass.predictions, truths, pass.neighbor_labels, rare,
                                   static_cast<std::size_t>(ds.class_count), rank_ks);
    r.knn_k = k;
    r.reference_count = ref_samples.size();
    if (ds.seed) r.seeds.push_back(*ds.seed);

    if (params.config().head_mode == HeadMode::logits) {
        if (params.config().embed_dim != static_cast<std::size_t>(ds.class_count)) {
            throw std::invalid_argument("evaluate: logit head has " + std::to_string(params.config().embed_dim) +
                                        " outputs for " + std::to_string(ds.class_count) + " classes");
        }
        std::size_t correct = 0;
        for (std::size_t i = 0; i < queries.rows(); ++i) {
            const auto row = queries.row(i);
            const auto arg = static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += arg == truths[i];
        }
        r.acc_clf = static_cast<double>(correct) / static_cast<double>(queries.rows());
    }
    return r;
}

double validation_recall_macro(const EncoderParams& params, const Dataset& ds, std::size_t k) {
    const auto ref_samples = pick(ds, {Split::train});
    const auto val_samples = pick(ds, {Split::val});
    if (val_samples.empty()) throw std::invalid_argument("validation: dataset has no val samples");
    ReferenceSet ref{embed_samples(params, ref_samples), labels_of(ref_samples), {"train"}};
    const KnnPass pass = run_knn(embed_samples(params, val_samples), ref, std::min(k, ref_samples.size()));
    return compute_metrics(pass.predictions, labels_of(val_samples), {}, {},
                           static_cast<std::size_t>(ds.class_count))
        .recall_macro;
}

}  // namespace dml
