#include "dml/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace dml {

namespace {

// Adds coef * d(dist(i, j)) / d(E) into grad. The subgradient at dist == 0 is
// taken as zero.
void add_distance_grad(const Matrix& e, const Matrix& dist, std::size_t i, std::size_t j,
                       double coef, Matrix& grad) {
    const double d = dist(i, j);
    if (d <= 0.0 || coef == 0.0) return;
    const double s = coef / d;
    auto ri = e.row(i);
    auto rj = e.row(j);
    auto gi = grad.row(i);
    auto gj = grad.row(j);
    for (std::size_t k = 0; k < e.cols(); ++k) {
        const double g = s * (ri[k] - rj[k]);
        gi[k] += g;
        gj[k] -= g;
    }
}

std::map<ClassId, std::size_t> class_counts(const std::vector<ClassId>& labels) {
    std::map<ClassId, std::size_t> counts;
    for (ClassId c : labels) ++counts[c];
    return counts;
}

}  // namespace

void validate_triplet_batch(const LabeledBatch& batch, SingletonPolicy policy) {
    const std::size_t n = batch.embeddings.rows();
    if (batch.labels.size() != n) {
        throw std::invalid_argument("triplet batch: " + std::to_string(batch.labels.size()) +
                                    " labels for " + std::to_string(n) + " embeddings");
    }
    if (n < 4) {
        throw std::invalid_argument("triplet batch: need at least 4 rows, got " +
                                    std::to_string(n));
    }
    if (batch.embeddings.cols() == 0) throw std::invalid_argument("triplet batch: zero-width embeddings");
    if (!batch.embeddings.all_finite()) {
        throw std::invalid_argument("triplet batch: non-finite embedding values");
    }
    const auto counts = class_counts(batch.labels);
    if (counts.size() < 2) {
        throw std::invalid_argument("triplet batch: need at least 2 distinct classes, only class " +
                                    std::to_string(counts.begin()->first) + " present");
    }
    bool any_positive = false;
    for (const auto& [cls, count] : counts) {
        if (count >= 2) {
            any_positive = true;
        } else if (policy == SingletonPolicy::reject) {
            throw std::invalid_argument("triplet batch: class " + std::to_string(cls) +
                                        " has a single member, so its anchor has no positive");
        }
    }
    if (!any_positive) {
        throw std::invalid_argument("triplet batch: every class has a single member (first class " +
                                    std::to_string(counts.begin()->first) + ")");
    }
}

LossResult batch_hard_triplet(const LabeledBatch& batch, const TripletOptions& opts) {
    if (!(opts.margin >= 0.0)) throw std::invalid_argument("batch_hard_triplet: margin must be >= 0");
    validate_triplet_batch(batch, opts.singletons);

    const Matrix& e = batch.embeddings;
    const auto& y = batch.labels;
    const std::size_t n = e.rows();
    const Matrix dist = pairwise_euclidean(e);

    LossResult out;
    out.grad = Matrix(n, e.cols());
    for (std::size_t a = 0; a < n; ++a) {
        std::size_t hard_pos = n;
        std::size_t hard_neg = n;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            if (y[j] == y[a]) {
                if (hard_pos == n || dist(a, j) > dist(a, hard_pos)) hard_pos = j;
            } else {
                if (hard_neg == n || dist(a, j) < dist(a, hard_neg)) hard_neg = j;
            }
        }
        if (hard_pos == n) {
            ++out.skipped_anchors;
            continue;
        }
        const double term = dist(a, hard_pos) - dist(a, hard_neg) + opts.margin;
        if (opts.clamp && term <= 0.0) continue;
        out.value += term;
        if (term > 0.0) ++out.active_terms;
        add_distance_grad(e, dist, a, hard_pos, 1.0, out.grad);
        add_distance_grad(e, dist, a, hard_neg, -1.0, out.grad);
    }
    return out;
}

LossResult batch_all_triplet(const LabeledBatch& batch, const TripletOptions& opts) {
    if (!(opts.margin >= 0.0)) throw std::invalid_argument("batch_all_triplet: margin must be >= 0");
    validate_triplet_batch(batch, opts.singletons);

    const Matrix& e = batch.embeddings;
    const auto& y = batch.labels;
    const std::size_t n = e.rows();
    const Matrix dist = pairwise_euclidean(e);

    LossResult out;
    out.grad = Matrix(n, e.cols());

    if (opts.form == BatchAllForm::printed) {
        // Slot index of each row within its class, in batch order.
        std::vector<std::size_t> slot(n);
        std::map<ClassId, std::size_t> seen;
        for (std::size_t i = 0; i < n; ++i) slot[i] = seen[y[i]]++;
        const auto counts = class_counts(y);
        for (std::size_t a = 0; a < n; ++a) {
            if (counts.at(y[a]) < 2) {
                ++out.skipped_anchors;
                continue;
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (y[j] == y[a] || slot[j] == slot[a]) continue;
                const double term = dist(a, j) + opts.margin;
                if (opts.clamp && term <= 0.0) continue;
                out.value += term;
                if (term > 0.0) ++out.active_terms;
                add_distance_grad(e, dist, a, j, 1.0, out.grad);
            }
        }
        return out;
    }

    // Per-pair coefficients accumulate first so each distance gradient is
    // applied once.
    Matrix coef(n, n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
        bool has_positive = false;
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || y[p] != y[a]) continue;
            has_positive = true;
            for (std::size_t q = 0; q < n; ++q) {
                if (y[q] == y[a]) continue;
                const double term = dist(a, p) - dist(a, q) + opts.margin;
                if (opts.clamp && term <= 0.0) continue;
                out.value += term;
                if (term > 0.0) ++out.active_terms;
                coef(a, p) += 1.0;
                coef(a, q) -= 1.0;
            }
        }
        if (!has_positive) ++out.skipped_anchors;
    }
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t j = 0; j < n; ++j) {
            if (coef(a, j) != 0.0) add_distance_grad(e, dist, a, j, coef(a, j), out.grad);
        }
    }
    return out;
}

std::vector<std::size_t> interleaved_pairs(std::size_t pairs) {
    std::vector<std::size_t> pair_of(2 * pairs);
    for (std::size_t i = 0; i < pairs; ++i) {
        pair_of[2 * i] = 2 * i + 1;
        pair_of[2 * i + 1] = 2 * i;
    }
    return pair_of;
}

LossResult nt_xent(const ContrastivePairBatch& batch) {
    const Matrix& z = batch.projections;
    const std::size_t n = z.rows();
    const double tau = batch.temperature;
    if (!(tau > 0.0)) throw std::invalid_argument("nt_xent: temperature must be positive");
    if (n < 4 || n % 2 != 0) {
        throw std::invalid_argument("nt_xent: need an even number of rows >= 4, got " +
                                    std::to_string(n));
    }
    if (batch.pair_of.size() != n) throw std::invalid_argument("nt_xent: pair_of length mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t p = batch.pair_of[i];
        if (p >= n || p == i || batch.pair_of[p] != i) {
            throw std::invalid_argument("nt_xent: pair_of is not a fixed-point-free involution at row " +
                                        std::to_string(i));
        }
    }
    if (!z.all_finite()) throw std::invalid_argument("nt_xent: non-finite projections");

    const std::size_t dim = z.cols();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (double v : z.row(i)) sq += v * v;
        norms[i] = std::sqrt(sq);
    }
    const Matrix u = l2_normalize_rows(z);

    Matrix sim(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += u(i, k) * u(j, k);
            sim(i, j) = s;
            sim(j, i) = s;
        }
    }

    // dL/dsim accumulated as an n x n matrix, then pushed through the
    // normalization.
    Matrix dsim(n, n, 0.0);
    LossResult out;
    const double inv_rows = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) mx = std::max(mx, sim(i, k) / tau);
        }
        double denom = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) denom += std::exp(sim(i, k) / tau - mx);
        }
        const std::size_t p = batch.pair_of[i];
        const double loss_i = -(sim(i, p) / tau - mx) + std::log(denom);
        out.value += loss_i * inv_rows;
        if (loss_i > 0.0) ++out.active_terms;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            const double soft = std::exp(sim(i, k) / tau - mx) / denom;
            dsim(i, k) += inv_rows * (soft - (k == p ? 1.0 : 0.0)) / tau;
        }
    }

    out.grad = Matrix(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] < kNormalizeEps) continue;
        std::vector<double> du(dim, 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            const double c = dsim(i, k) + dsim(k, i);
            if (c == 0.0) continue;
            for (std::size_t d = 0; d < dim; ++d) du[d] += c * u(k, d);
        }
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += du[d] * u(i, d);
        for (std::size_t d = 0; d < dim; ++d) {
            out.grad(i, d) = (du[d] - dot * u(i, d)) / norms[i];
        }
    }
    return out;
}

LossResult cross_entropy(const Matrix& logits, const std::vector<ClassId>& labels) {
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");
    if (n == 0 || c == 0) throw std::invalid_argument("cross_entropy: empty logits");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) +
                                        " at row " + std::to_string(i) + " outside [0, " +
                                        std::to_string(c) + ")");
        }
    }
    LossResult out;
    out.grad = softmax_rows(logits);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        const auto y = static_cast<std::size_t>(labels[i]);
        const double nll = std::log(sum) - (row[y] - mx);
        out.value += nll * inv_n;
        if (nll > 0.0) ++out.active_terms;
        auto g = out.grad.row(i);
        g[y] -= 1.0;
        for (double& v : g) v *= inv_n;
    }
    return out;
}

}  // namespace dml
