#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "multinet/errors.hpp"

namespace multinet {

// Dense row-major f64 array; the universal carrier for images, activations,
// parameters and gradients.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (std::size_t d : shape_) {
            if (d == 0) throw DataError("Tensor: zero-sized dimension");
            n *= d;
        }
        data_.assign(n, 0.0);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        std::size_t n = 1;
        for (std::size_t d : shape_) n *= d;
        if (n != data_.size())
            throw DataError("Tensor: shape/product mismatch (" + std::to_string(n) + " vs " +
                            std::to_string(data_.size()) + " values)");
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // CHW / (OC,IC,KH,KW) indexing helpers.
    double& at3(std::size_t c, std::size_t h, std::size_t w) {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double at3(std::size_t c, std::size_t h, std::size_t w) const {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    double at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const char* context) const {
        if (!all_finite()) throw TrainError(std::string(context) + ": non-finite value in tensor");
    }

    void fill(double v) { data_.assign(data_.size(), v); }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

} // namespace multinet
