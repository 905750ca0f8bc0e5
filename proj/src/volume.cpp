#include "dml/volume.hpp"

#include <algorithm>
#include <stdexcept>

namespace dml {

std::string Shape3::str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(d);
}

Volume::Volume(Shape3 shape, std::vector<double> values) : shape_(shape), v_(std::move(values)) {
    if (v_.size() != shape_.voxels()) {
        throw std::invalid_argument("Volume: " + std::to_string(v_.size()) + " values for shape " +
                                    shape_.str());
    }
}

double Volume::sum() const {
    double s = 0.0;
    for (double v : v_) s += v;
    return s;
}

bool Volume::is_binary() const {
    return std::all_of(v_.begin(), v_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

bool Volume::within_unit_range() const {
    return std::all_of(v_.begin(), v_.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

}  // namespace dml
