#include "polyseg/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "polyseg/errors.hpp"

namespace polyseg {

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
    if (checked_numel(shape) != data.size())
        throw ShapeError("tensor data size does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

void Tensor::fill(double v) {
    std::fill(data_.begin(), data_.end(), v);
}

bool is_binary(const Tensor& t) {
    const double* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (p[i] != 0.0 && p[i] != 1.0) return false;
    return true;
}

} // namespace polyseg
