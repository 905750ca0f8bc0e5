#include "dml/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dml {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    throw std::logic_error("unknown split");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == s) out.push_back(i);
    }
    return out;
}

std::map<ClassId, std::size_t> Dataset::class_totals() const {
    std::map<ClassId, std::size_t> out;
    for (const Sample& s : samples) ++out[s.label];
    return out;
}

std::map<ClassId, std::size_t> Dataset::class_totals(Split split) const {
    std::map<ClassId, std::size_t> out;
    for (const Sample& s : samples) {
        if (s.split == split) ++out[s.label];
    }
    return out;
}

void Dataset::validate(bool require_full_splits) const {
    if (class_count < 1) throw std::invalid_argument("dataset: class_count must be >= 1");
    if (!(rare_threshold >= 0.0 && rare_threshold <= 1.0)) {
        throw std::invalid_argument("dataset: rare_threshold must lie in [0, 1]");
    }
    if (samples.empty()) throw std::invalid_argument("dataset: no samples");
    std::unordered_set<std::string> ids;
    for (const Sample& s : samples) {
        const std::string where = "dataset sample '" + s.id + "': ";
        if (s.id.empty()) throw std::invalid_argument("dataset: sample with empty id");
        if (!ids.insert(s.id).second) throw std::invalid_argument(where + "duplicate id");
        if (s.label < 0 || s.label >= class_count) {
            throw std::invalid_argument(where + "label " + std::to_string(s.label) + " outside [0, " +
                                        std::to_string(class_count) + ")");
        }
        if (s.volume.size() == 0) throw std::invalid_argument(where + "empty volume");
        if (!s.volume.within_unit_range()) {
            throw std::invalid_argument(where + "intensities outside [0, 1]");
        }
        if (s.mask) {
            if (!(s.mask->shape() == s.volume.shape())) {
                throw std::invalid_argument(where + "mask shape " + s.mask->shape().str() +
                                            " differs from volume shape " + s.volume.shape().str());
            }
            if (!s.mask->is_binary()) throw std::invalid_argument(where + "mask is not binary");
        }
    }
    if (require_full_splits) {
        for (Split split : {Split::train, Split::val, Split::test}) {
            const auto counts = class_totals(split);
            for (ClassId c = 0; c < class_count; ++c) {
                if (!counts.contains(c)) {
                    throw std::invalid_argument("dataset: class " + std::to_string(c) +
                                                " has no samples in split " + to_string(split));
                }
            }
        }
    }
}

namespace {

template <class T>
std::uint64_t hash_value(const T& v, std::uint64_t h) {
    return fnv1a64(std::as_bytes(std::span<const T>(&v, 1)), h);
}

std::uint64_t hash_volume(const Volume& v, std::uint64_t h) {
    const auto& s = v.shape();
    for (std::uint64_t dim : {std::uint64_t{s.h}, std::uint64_t{s.w}, std::uint64_t{s.d}}) h = hash_value(dim, h);
    return fnv1a64(std::as_bytes(v.values()), h);
}

}  // namespace

std::uint64_t Dataset::content_hash() const {
    std::uint64_t h = fnv1a64("dml-dataset");
    h = hash_value(static_cast<std::int64_t>(class_count), h);
    for (const Sample& s : samples) {
        h = fnv1a64(std::as_bytes(std::span<const char>(s.id.data(), s.id.size())), h);
        h = hash_value(static_cast<std::int64_t>(s.label), h);
        h = hash_value(static_cast<std::int64_t>(s.split), h);
        h = hash_volume(s.volume, h);
        const std::uint8_t has_mask = s.mask ? 1 : 0;
        h = hash_value(has_mask, h);
        if (s.mask) h = hash_volume(*s.mask, h);
    }
    return h;
}

// ---------------------------------------------------------------------------

std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
    const std::array<double, 3> frac{f.train, f.val, f.test};
    double sum = 0.0;
    for (double x : frac) {
        if (!(x > 0.0)) throw std::invalid_argument("split fractions must be positive");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
    if (n < 3) {
        throw std::invalid_argument("stratified split: class with " + std::to_string(n) +
                                    " samples; at least 3 are needed to fill every split");
    }
    std::array<std::size_t, 3> out{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = frac[k] * static_cast<double>(n);
        out[k] = static_cast<std::size_t>(std::floor(exact));
        rem[k] = exact - static_cast<double>(out[k]);
        assigned += out[k];
    }
    // Largest remainder first; ties resolve in train, val, test order.
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++out[order[i % 3]];
    // Minimum of one per split, taken from the currently largest split.
    for (int k = 0; k < 3; ++k) {
        if (out[k] > 0) continue;
        auto largest = std::max_element(out.begin(), out.end());
        --*largest;
        out[k] = 1;
    }
    return out;
}

std::vector<Split> stratified_split(const std::vector<ClassId>& labels, RngStream& rng,
                                    const SplitFractions& f) {
    std::map<ClassId, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    std::vector<Split> out(labels.size(), Split::train);
    for (auto& [cls, idx] : members) {
        std::array<std::size_t, 3> counts;
        try {
            counts = split_counts(idx.size(), f);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("class " + std::to_string(cls) + ": " + e.what());
        }
        rng.shuffle(idx);
        std::size_t pos = 0;
        for (int k = 0; k < 3; ++k) {
            for (std::size_t c = 0; c < counts[k]; ++c) out[idx[pos++]] = static_cast<Split>(k);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::set<ClassId> identify_rare(const std::map<ClassId, std::size_t>& counts, double threshold) {
    std::size_t total = 0;
    for (const auto& [c, n] : counts) total += n;
    std::set<ClassId> out;
    for (const auto& [c, n] : counts) {
        if (n > 0 && static_cast<double>(n) <= threshold * static_cast<double>(total)) out.insert(c);
    }
    return out;
}

std::set<ClassId> identify_rare(const Dataset& ds, double threshold) {
    if (ds.samples.empty()) throw std::invalid_argument("identify_rare: empty dataset");
    return identify_rare(ds.class_totals(), threshold);
}

// ---------------------------------------------------------------------------

StratifiedBatchSampler::StratifiedBatchSampler(std::vector<std::size_t> indices, std::vector<ClassId> labels,
                                               std::size_t classes_per_batch, std::size_t samples_per_class,
                                               RngStream rng)
    : classes_per_batch_(classes_per_batch), samples_per_class_(samples_per_class), rng_(rng) {
    if (indices.size() != labels.size()) throw std::invalid_argument("batch sampler: index/label count mismatch");
    if (classes_per_batch < 2) throw std::invalid_argument("batch sampler: classes_per_batch must be >= 2");
    if (samples_per_class < 2) throw std::invalid_argument("batch sampler: samples_per_class must be >= 2");
    for (std::size_t i = 0; i < indices.size(); ++i) by_class_[labels[i]].push_back(indices[i]);
    for (const auto& [c, members] : by_class_) classes_.push_back(c);
    total_ = indices.size();
    if (classes_.size() < classes_per_batch) {
        throw std::invalid_argument("batch sampler: " + std::to_string(classes_per_batch) +
                                    " classes per batch requested but only " + std::to_string(classes_.size()) +
                                    " classes available");
    }
}

std::size_t StratifiedBatchSampler::batches_per_epoch() const {
    return (total_ + batch_size() - 1) / batch_size();
}

std::vector<std::size_t> StratifiedBatchSampler::next_batch() {
    // Partial Fisher-Yates picks the classes without replacement.
    std::vector<ClassId> pool = classes_;
    for (std::size_t i = 0; i < classes_per_batch_; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng_.uniform_index(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> batch;
    batch.reserve(batch_size());
    for (std::size_t i = 0; i < classes_per_batch_; ++i) {
        std::vector<std::size_t> members = by_class_.at(pool[i]);
        const std::size_t take = std::min(members.size(), samples_per_class_);
        for (std::size_t k = 0; k < take; ++k) {
            const std::size_t j = k + static_cast<std::size_t>(rng_.uniform_index(members.size() - k));
            std::swap(members[k], members[j]);
            batch.push_back(members[k]);
        }
        for (std::size_t k = take; k < samples_per_class_; ++k) {
            batch.push_back(members[rng_.uniform_index(members.size())]);
        }
    }
    return batch;
}

std::vector<std::vector<std::size_t>> StratifiedBatchSampler::epoch() {
    std::vector<std::vector<std::size_t>> out;
    const std::size_t n = batches_per_epoch();
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next_batch());
    return out;
}

}  // namespace dml
