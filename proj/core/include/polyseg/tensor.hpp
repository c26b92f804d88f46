#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace polyseg {

/// Dense row-major tensor of doubles. Feature maps use NCHW order, masks H x W.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data);

    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Unchecked element access; callers validate shapes at op boundaries.
    double& at(int i0, int i1) { return data_[idx2(i0, i1)]; }
    double at(int i0, int i1) const { return data_[idx2(i0, i1)]; }
    double& at(int i0, int i1, int i2) { return data_[idx3(i0, i1, i2)]; }
    double at(int i0, int i1, int i2) const { return data_[idx3(i0, i1, i2)]; }
    double& at(int i0, int i1, int i2, int i3) { return data_[idx4(i0, i1, i2, i3)]; }
    double at(int i0, int i1, int i2, int i3) const { return data_[idx4(i0, i1, i2, i3)]; }

    void fill(double v);

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    std::size_t idx2(int i0, int i1) const {
        return static_cast<std::size_t>(i0) * shape_[1] + i1;
    }
    std::size_t idx3(int i0, int i1, int i2) const {
        return (static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2;
    }
    std::size_t idx4(int i0, int i1, int i2, int i3) const {
        return ((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

/// True when every entry is exactly 0.0 or 1.0.
bool is_binary(const Tensor& t);

} // namespace polyseg
