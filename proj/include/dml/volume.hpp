#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dml {

struct Shape3 {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t d = 0;

    std::size_t voxels() const { return h * w * d; }
    std::string str() const;
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Intensity grid stored W-fastest, then H, then D.
class Volume {
public:
    Volume() = default;
    explicit Volume(Shape3 shape, double fill = 0.0) : shape_(shape), v_(shape.voxels(), fill) {}
    Volume(Shape3 shape, std::vector<double> values);

    const Shape3& shape() const { return shape_; }
    std::size_t size() const { return v_.size(); }

    std::size_t index(std::size_t y, std::size_t x, std::size_t z) const {
        return (z * shape_.h + y) * shape_.w + x;
    }
    double& at(std::size_t y, std::size_t x, std::size_t z) { return v_[index(y, x, z)]; }
    double at(std::size_t y, std::size_t x, std::size_t z) const { return v_[index(y, x, z)]; }

    std::span<double> values() { return v_; }
    std::span<const double> values() const { return v_; }

    double sum() const;
    bool is_binary() const;
    bool within_unit_range() const;

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    Shape3 shape_;
    std::vector<double> v_;
};

}  // namespace dml
