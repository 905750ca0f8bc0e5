#pragma once

// Random rotation, flips, crop-resize and Gaussian noise. The geometric
// steps are composed and resampled once; noise is added to the result.
// Geometry acts in-plane (per depth slice) and identically on the volume
// and its mask.

#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include "dml/data.hpp"

namespace dml {

struct AugmentSpec {
    double rotation_max_degrees = 15.0;
    /// Per in-plane axis.
    double flip_prob = 0.5;
    /// sigma ~ U(0, max]; max = 0 disables noise.
    double noise_sigma_max = 0.05;
    /// Side scale ~ U(low, 1].
    double crop_scale_low = 0.8;

    void validate() const;
    friend bool operator==(const AugmentSpec&, const AugmentSpec&) = default;
};

/// One concrete draw of the sequence's random choices.
struct AugmentDraw {
    double angle_degrees = 0.0;
    bool flip_y = false;
    bool flip_x = false;
    double noise_sigma = 0.0;
    std::uint64_t noise_key = 0;
    double crop_scale = 1.0;
    /// Crop origin as a fraction of the free range, in [0, 1].
    double crop_offset_y = 0.0;
    double crop_offset_x = 0.0;
};

AugmentDraw draw_augment(const AugmentSpec& spec, RngStream& rng);

struct Augmented {
    Volume volume;
    std::optional<Volume> mask;
};

Augmented apply_augment(const Volume& volume, const std::optional<Volume>& mask, const AugmentDraw& draw);

Augmented augment_once(const Volume& volume, const std::optional<Volume>& mask, const AugmentSpec& spec,
                       RngStream& rng);

/// Appends n augmented copies of every rare-class training sample, ids
/// "{source}#aug{k}" for k = 1..n. Each copy draws from a stream keyed by
/// its id, so the result does not depend on iteration order.
Dataset expand_rare(const Dataset& ds, const std::set<ClassId>& rare, int n, const AugmentSpec& spec,
                    std::uint64_t seed);

/// volume * (mask + gamma * (1 - mask)).
Volume localize(const Volume& volume, const Volume& mask, double gamma);

struct ViewPair {
    Volume view_a;
    Volume view_b;
    std::string source_id;
    std::uint64_t stream_a = 0;
    std::uint64_t stream_b = 0;
};

inline constexpr double kDefaultLocalizationGamma = 0.1;

ViewPair make_views(const Sample& sample, const AugmentSpec& spec, const RngStream& rng,
                    double gamma = kDefaultLocalizationGamma);

}  // namespace dml
