#include "kohscan/nn/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "kohscan/util/error.hpp"

namespace kohscan::nn {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_)) {
        throw PreconditionError("tensor values do not match shape " + to_string(shape_));
    }
}

void Tensor::reshape(Shape shape) {
    if (element_count(shape) != data_.size()) {
        throw PreconditionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::size_t Tensor::sample_size() const {
    if (shape_.empty()) return 1;
    return shape_[0] == 0 ? element_count(Shape(shape_.begin() + 1, shape_.end())) : data_.size() / shape_[0];
}

Tensor Tensor::slice(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) throw PreconditionError("tensor slice out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t stride = sample_size();
    std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          data_.begin() + static_cast<std::ptrdiff_t>(end * stride));
    return Tensor(std::move(s), std::move(v));
}

}  // namespace kohscan::nn
