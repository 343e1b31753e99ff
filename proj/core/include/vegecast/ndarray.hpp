#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vegecast {

/// Dense row-major double tensor. The single numeric container used by the
/// model code; disk formats convert to/from float32 at the boundary.
class NDArray {
public:
    NDArray() = default;
    explicit NDArray(std::vector<int> shape);
    NDArray(std::vector<int> shape, double fill);
    NDArray(std::vector<int> shape, std::vector<double> data);

    static NDArray zeros(std::vector<int> shape) { return NDArray(std::move(shape)); }
    static NDArray full(std::vector<int> shape, double v) { return NDArray(std::move(shape), v); }
    static NDArray scalar(double v) { return NDArray({1}, std::vector<double>{v}); }
    static NDArray from_float(const std::vector<int>& shape, const std::vector<float>& data);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Index helpers for up to 4 dims; unchecked in release builds.
    double& at(int a, int b) { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    double at(int a, int b) const { return data_[static_cast<size_t>(a) * shape_[1] + b]; }
    double& at(int a, int b, int c) {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    double at(int a, int b, int c) const {
        return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    double& at(int a, int b, int c, int d) {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    double at(int a, int b, int c, int d) const {
        return data_[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    NDArray reshaped(std::vector<int> new_shape) const;

    bool same_shape(const NDArray& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    double min() const;
    double max() const;
    double mean() const;

    std::vector<float> to_float() const;

    static int64_t shape_size(const std::vector<int>& shape);
    static std::string shape_str(const std::vector<int>& shape);

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

} // namespace vegecast
