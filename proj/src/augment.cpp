#include "dml/augment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <stdexcept>

namespace dml {

namespace {

constexpr std::uint64_t kExpandStream = 0x657870616e64ULL;

// Bilinear sample of slice z at fractional (y, x). Outside the grid the
// value is `outside`; with clamp_edges the coordinate is clamped instead.
double bilinear(const Volume& v, std::size_t z, double y, double x, bool clamp_edges, double outside) {
    const auto& s = v.shape();
    const double hmax = static_cast<double>(s.h) - 1.0;
    const double wmax = static_cast<double>(s.w) - 1.0;
    if (clamp_edges) {
        y = std::clamp(y, 0.0, hmax);
        x = std::clamp(x, 0.0, wmax);
    } else if (y < -1.0 || x < -1.0 || y > hmax + 1.0 || x > wmax + 1.0) {
        return outside;
    }
    const double fy = std::floor(y), fx = std::floor(x);
    const double ty = y - fy, tx = x - fx;
    const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
    auto get = [&](long yy, long xx) {
        if (yy < 0 || xx < 0 || yy >= static_cast<long>(s.h) || xx >= static_cast<long>(s.w)) return outside;
        return v.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), z);
    };
    return (1 - ty) * ((1 - tx) * get(y0, x0) + tx * get(y0, x0 + 1)) +
           ty * ((1 - tx) * get(y0 + 1, x0) + tx * get(y0 + 1, x0 + 1));
}

// Nearest-voxel sample for masks; empty beyond half a voxel outside the grid.
double nearest(const Volume& v, std::size_t z, double y, double x) {
    const auto& s = v.shape();
    const double hmax = static_cast<double>(s.h) - 1.0;
    const double wmax = static_cast<double>(s.w) - 1.0;
    if (y < -0.5 || x < -0.5 || y > hmax + 0.5 || x > wmax + 0.5) return 0.0;
    const long yy = std::clamp(std::lround(y), 0L, static_cast<long>(s.h) - 1);
    const long xx = std::clamp(std::lround(x), 0L, static_cast<long>(s.w) - 1);
    return v.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), z);
}

// Rotation, flips and crop compose into one inverse map from an output
// voxel to source coordinates, so each augmented volume is interpolated
// exactly once. Forward order is rotate, flip, crop.
struct GeometryMap {
    double h, w, cy, cx, cos_a, sin_a;
    const AugmentDraw& d;

    GeometryMap(const Shape3& s, const AugmentDraw& draw)
        : h(static_cast<double>(s.h)), w(static_cast<double>(s.w)), cy((h - 1.0) / 2.0), cx((w - 1.0) / 2.0),
          cos_a(std::cos(draw.angle_degrees * std::numbers::pi / 180.0)),
          sin_a(std::sin(draw.angle_degrees * std::numbers::pi / 180.0)), d(draw) {}

    bool identity() const { return d.angle_degrees == 0.0 && !d.flip_y && !d.flip_x && d.crop_scale >= 1.0; }

    std::pair<double, double> operator()(double y, double x) const {
        if (d.crop_scale < 1.0) {
            const double ch = d.crop_scale * h, cw = d.crop_scale * w;
            // Pixel-centre mapping of the output grid onto the crop window.
            y = d.crop_offset_y * (h - ch) + (y + 0.5) * ch / h - 0.5;
            x = d.crop_offset_x * (w - cw) + (x + 0.5) * cw / w - 0.5;
        }
        if (d.flip_y) y = h - 1.0 - y;
        if (d.flip_x) x = w - 1.0 - x;
        if (d.angle_degrees == 0.0) return {y, x};
        const double dy = y - cy, dx = x - cx;
        return {cy + cos_a * dy - sin_a * dx, cx + sin_a * dy + cos_a * dx};
    }
};

// Intensities repeat the nearest edge where the map leaves the grid (a
// constant fill would mark every augmented copy); masks stay empty there.
Volume resample(const Volume& in, const GeometryMap& map, bool is_mask) {
    const auto& s = in.shape();
    Volume out(s);
    for (std::size_t z = 0; z < s.d; ++z) {
        for (std::size_t y = 0; y < s.h; ++y) {
            for (std::size_t x = 0; x < s.w; ++x) {
                const auto [sy, sx] = map(static_cast<double>(y), static_cast<double>(x));
                out.at(y, x, z) = is_mask ? nearest(in, z, sy, sx) : bilinear(in, z, sy, sx, true, 0.0);
            }
        }
    }
    return out;
}

}  // namespace

void AugmentSpec::validate() const {
    if (!(rotation_max_degrees >= 0.0 && rotation_max_degrees <= 180.0)) {
        throw std::invalid_argument("augment: rotation_max_degrees must lie in [0, 180]");
    }
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("augment: flip_prob must lie in [0, 1]");
    if (!(noise_sigma_max >= 0.0 && noise_sigma_max <= 1.0)) {
        throw std::invalid_argument("augment: noise_sigma_max must lie in [0, 1]");
    }
    if (!(crop_scale_low > 0.0 && crop_scale_low <= 1.0)) {
        throw std::invalid_argument("augment: crop_scale_low must lie in (0, 1]");
    }
}

AugmentDraw draw_augment(const AugmentSpec& spec, RngStream& rng) {
    spec.validate();
    AugmentDraw d;
    d.angle_degrees = rng.uniform(-spec.rotation_max_degrees, spec.rotation_max_degrees);
    d.flip_y = rng.bernoulli(spec.flip_prob);
    d.flip_x = rng.bernoulli(spec.flip_prob);
    d.noise_sigma = spec.noise_sigma_max * (1.0 - rng.uniform());
    d.noise_key = rng.next_u64();
    d.crop_scale = spec.crop_scale_low + (1.0 - spec.crop_scale_low) * (1.0 - rng.uniform());
    d.crop_offset_y = rng.uniform();
    d.crop_offset_x = rng.uniform();
    return d;
}

Augmented apply_augment(const Volume& volume, const std::optional<Volume>& mask, const AugmentDraw& d) {
    if (mask && !(mask->shape() == volume.shape())) {
        throw std::invalid_argument("augment: mask shape " + mask->shape().str() + " differs from volume shape " +
                                    volume.shape().str());
    }
    if (volume.size() == 0) throw std::invalid_argument("augment: empty volume");
    const GeometryMap map(volume.shape(), d);
    Augmented out;
    out.volume = map.identity() ? volume : resample(volume, map, false);
    if (mask) out.mask = map.identity() ? *mask : resample(*mask, map, true);
    // Noise goes on last so it stays independent per output voxel.
    if (d.noise_sigma > 0.0) {
        RngStream noise(d.noise_key, 0);
        for (double& v : out.volume.values()) v = std::clamp(v + noise.normal(0.0, d.noise_sigma), 0.0, 1.0);
    }
    return out;
}

Augmented augment_once(const Volume& volume, const std::optional<Volume>& mask, const AugmentSpec& spec,
                       RngStream& rng) {
    return apply_augment(volume, mask, draw_augment(spec, rng));
}

Dataset expand_rare(const Dataset& ds, const std::set<ClassId>& rare, int n, const AugmentSpec& spec,
                    std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("expand_rare: N must be >= 1");
    spec.validate();
    Dataset out = ds;
    if (rare.empty()) {
        std::clog << "warning: expand_rare called with an empty rare set; dataset unchanged\n";
        return out;
    }
    std::vector<std::size_t> sources;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        if (s.split == Split::train && rare.contains(s.label)) sources.push_back(i);
    }
    const std::size_t base = out.samples.size();
    out.samples.resize(base + sources.size() * static_cast<std::size_t>(n));
    const RngStream root(seed, kExpandStream);
    parallel_for(sources.size() * static_cast<std::size_t>(n), [&](std::size_t job) {
        const Sample& src = ds.samples[sources[job / static_cast<std::size_t>(n)]];
        const int k = static_cast<int>(job % static_cast<std::size_t>(n)) + 1;
        Sample aug;
        aug.id = src.id + "#aug" + std::to_string(k);
        RngStream rng = root.derive(aug.id);
        Augmented a = augment_once(src.volume, src.mask, spec, rng);
        aug.volume = std::move(a.volume);
        aug.mask = std::move(a.mask);
        aug.label = src.label;
        aug.split = Split::train;
        out.samples[base + job] = std::move(aug);
    });
    return out;
}

Volume localize(const Volume& volume, const Volume& mask, double gamma) {
    if (!(mask.shape() == volume.shape())) throw std::invalid_argument("localize: mask shape differs from volume");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("localize: gamma must lie in [0, 1]");
    Volume out = volume;
    auto v = out.values();
    auto m = mask.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= m[i] + gamma * (1.0 - m[i]);
    return out;
}

ViewPair make_views(const Sample& sample, const AugmentSpec& spec, const RngStream& rng, double gamma) {
    const Volume base = sample.mask ? localize(sample.volume, *sample.mask, gamma) : sample.volume;
    RngStream ra = rng.derive("view-a");
    RngStream rb = rng.derive("view-b");
    ViewPair out;
    out.source_id = sample.id;
    out.stream_a = ra.stream_id();
    out.stream_b = rb.stream_id();
    out.view_a = augment_once(base, std::nullopt, spec, ra).volume;
    out.view_b = augment_once(base, std::nullopt, spec, rb).volume;
    return out;
}

}  // namespace dml
