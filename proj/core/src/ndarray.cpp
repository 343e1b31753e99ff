#include "vegecast/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vegecast {

int64_t NDArray::shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("NDArray: negative dimension");
        n *= d;
    }
    return n;
}

std::string NDArray::shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

NDArray::NDArray(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_size(shape_)), 0.0) {}

NDArray::NDArray(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_size(shape_)), fill) {}

NDArray::NDArray(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_size(shape_))
        throw std::invalid_argument("NDArray: data length does not match shape " + shape_str(shape_));
}

NDArray NDArray::from_float(const std::vector<int>& shape, const std::vector<float>& data) {
    std::vector<double> d(data.begin(), data.end());
    return NDArray(shape, std::move(d));
}

NDArray NDArray::reshaped(std::vector<int> new_shape) const {
    if (shape_size(new_shape) != size())
        throw std::invalid_argument("NDArray::reshaped: size mismatch " + shape_str(shape_) +
                                    " -> " + shape_str(new_shape));
    NDArray out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
}

bool NDArray::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double NDArray::min() const {
    return *std::min_element(data_.begin(), data_.end());
}

double NDArray::max() const {
    return *std::max_element(data_.begin(), data_.end());
}

double NDArray::mean() const {
    if (data_.empty()) return 0.0;
    double s = std::accumulate(data_.begin(), data_.end(), 0.0);
    return s / static_cast<double>(data_.size());
}

std::vector<float> NDArray::to_float() const {
    std::vector<float> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<float>(data_[i]);
    return out;
}

} // namespace vegecast
