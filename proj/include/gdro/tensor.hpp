#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdro {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i > 0) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(s));
        n *= e;
    }
    return n;
}

/// Dense row-major tensor of 64-bit floats. Rank 0 (empty shape) is a scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Multi-index access, for tests and small fixtures.
    double& at(std::initializer_list<int> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
    double at(std::initializer_list<int> idx) const { return data_[static_cast<std::size_t>(offset(idx))]; }

    /// Value of a one-element tensor.
    double item() const {
        if (numel() != 1) throw std::logic_error("item() on non-scalar tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    std::int64_t offset(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw std::logic_error("index rank mismatch for shape " + shape_str(shape_));
        }
        std::int64_t off = 0;
        int axis = 0;
        for (int i : idx) {
            off = off * shape_[static_cast<std::size_t>(axis)] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_{};
    std::vector<double> data_{};
};

}  // namespace gdro
