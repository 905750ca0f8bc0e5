#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dml/losses.hpp"
#include "dml/numcore.hpp"
#include "dml/volume.hpp"

namespace dml {

enum class Split { train = 0, val = 1, test = 2 };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
    std::string id;
    Volume volume;
    std::optional<Volume> mask;
    ClassId label = 0;
    Split split = Split::train;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct SyntheticSpec;

struct Dataset {
    int class_count = 0;
    double rare_threshold = 0.01;
    std::optional<std::uint64_t> seed;
    std::vector<Sample> samples;
    /// Generator parameters when the dataset is synthetic; lets callers draw
    /// further unlabelled samples from the same distribution.
    std::optional<std::string> generator_json;

    std::vector<std::size_t> indices(Split s) const;
    /// Per-class totals across every split.
    std::map<ClassId, std::size_t> class_totals() const;
    std::map<ClassId, std::size_t> class_totals(Split s) const;

    /// Structural checks: label range, shapes, mask binarity, intensity range,
    /// unique ids, and (when requested) every class present in every split.
    void validate(bool require_full_splits = true) const;

    /// FNV-1a over ids, labels, splits, shapes and voxel bytes.
    std::uint64_t content_hash() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

/// Largest-remainder apportionment of n items with every split given at
/// least one item. Requires n >= 3.
std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f = {});

/// Per-class stratified assignment; returns one split per input label.
std::vector<Split> stratified_split(const std::vector<ClassId>& labels, RngStream& rng,
                                    const SplitFractions& f = {});

// ---------------------------------------------------------------------------
// Rare classes

/// Class c is rare iff count_c <= threshold * total (inclusive).
std::set<ClassId> identify_rare(const std::map<ClassId, std::size_t>& counts, double threshold);
std::set<ClassId> identify_rare(const Dataset& ds, double threshold);

// ---------------------------------------------------------------------------
// Synthetic generation

/// Class-level spread of the generated lesions. Larger values blur classes.
struct Difficulty {
    double jitter = 1.0;
    double background_noise = 0.03;

    static Difficulty easy() { return {1.0, 0.03}; }
    static Difficulty hard() { return {3.0, 0.06}; }
    static Difficulty named(const std::string& name);
};

struct SyntheticSpec {
    std::vector<std::size_t> class_sizes;
    /// Optional fixed (train, val, test) counts per class; when empty the
    /// split is drawn with stratified_split.
    std::vector<std::array<std::size_t, 3>> split_sizes;
    Shape3 shape{32, 32, 8};
    std::uint64_t seed = 1;
    Difficulty difficulty = Difficulty::easy();
    double rare_threshold = 0.01;

    void validate() const;

    /// Uniform class sizes.
    static SyntheticSpec balanced(std::size_t classes, std::size_t per_class, Shape3 shape, std::uint64_t seed);
    /// 27 classes following the labelled-set profile, scaled; the starred
    /// (rare) classes are capped so that exactly those 13 fall under 1%.
    static SyntheticSpec paper_shaped(double scale, Shape3 shape, std::uint64_t seed);
};

/// Full-scale per-class (train, val, test) counts of the reference dataset.
const std::array<std::array<std::size_t, 3>, 27>& reference_split_counts();
/// Classes marked rare in the reference dataset.
const std::set<ClassId>& reference_rare_classes();

Dataset generate_synthetic(const SyntheticSpec& spec);

/// Draws `count` further samples from the generator with labels stripped
/// (label = -1) and the lesion support as a pseudo-mask. Class mix follows
/// the spec's class sizes. Independent of the labelled set for distinct seeds.
std::vector<Sample> generate_unlabelled_pool(const SyntheticSpec& spec, std::size_t count,
                                             std::uint64_t seed);

std::string to_json_string(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json_string(const std::string& text);

// ---------------------------------------------------------------------------
// Batch sampling

/// T x K ("PK") sampler over a fixed index set. Each batch holds exactly
/// classes_per_batch distinct classes (drawn uniformly without replacement)
/// and samples_per_class members of each. Classes with fewer than K members
/// contribute every member once and fill the rest with replacement.
class StratifiedBatchSampler {
public:
    StratifiedBatchSampler(std::vector<std::size_t> indices, std::vector<ClassId> labels,
                           std::size_t classes_per_batch, std::size_t samples_per_class, RngStream rng);

    std::size_t batch_size() const { return classes_per_batch_ * samples_per_class_; }
    std::size_t batches_per_epoch() const;

    /// Dataset indices grouped class by class.
    std::vector<std::size_t> next_batch();
    std::vector<std::vector<std::size_t>> epoch();

private:
    std::map<ClassId, std::vector<std::size_t>> by_class_;
    std::vector<ClassId> classes_;
    std::size_t total_ = 0;
    std::size_t classes_per_batch_;
    std::size_t samples_per_class_;
    RngStream rng_;
};

// ---------------------------------------------------------------------------
// Storage

inline constexpr int kManifestFormatVersion = 1;

/// Writes manifest.json plus one raw little-endian float64 file per volume
/// and mask under `dir`.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Accepts the manifest path or its directory.
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace dml
