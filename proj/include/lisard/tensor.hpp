#pragma once
// Dense row-major float tensor with Eigen matrix views. Deliberately small:
// shape bookkeeping, elementwise helpers and GEMM-ready 2-D maps.

#include <Eigen/Core>
#include <initializer_list>
#include <numeric>
#include <sstream>

#include "lisard/common.hpp"

namespace lisard {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<MatrixF>;
using ConstMapF = Eigen::Map<const MatrixF>;
using VecMapF = Eigen::Map<Eigen::VectorXf>;
using ConstVecMapF = Eigen::Map<const Eigen::VectorXf>;

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0f);
    }

    Tensor(std::initializer_list<long> shape) : Tensor(std::vector<long>(shape)) {}

    static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<long> shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor from_vector(std::vector<long> shape, std::vector<float> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        require(static_cast<long>(values.size()) == numel_of(t.shape_),
                "tensor data size does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    bool empty() const { return data_.empty(); }
    long numel() const { return static_cast<long>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    long dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    const std::vector<long>& shape() const { return shape_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

    // 4-D accessor for B,C,H,W tensors.
    float& at(long b, long c, long h, long w) {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    float at(long b, long c, long h, long w) const {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    // 2-D accessor for B,E tensors.
    float& at(long r, long c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    float at(long r, long c) const { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0f); }

    // View the flat buffer as a rows x cols row-major matrix.
    MapF mat(long rows, long cols) {
        require(rows * cols == numel(), "matrix view does not cover tensor");
        return MapF(data_.data(), rows, cols);
    }
    ConstMapF mat(long rows, long cols) const {
        require(rows * cols == numel(), "matrix view does not cover tensor");
        return ConstMapF(data_.data(), rows, cols);
    }

    VecMapF vec() { return VecMapF(data_.data(), numel()); }
    ConstVecMapF vec() const { return ConstVecMapF(data_.data(), numel()); }

    bool all_finite() const {
        for (float v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << ',';
            os << shape_[i];
        }
        os << ')';
        return os.str();
    }

    static long numel_of(const std::vector<long>& shape) {
        long n = 1;
        for (long d : shape) {
            require(d >= 0, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<long> shape_;
    std::vector<float> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "shape mismatch in max_abs_diff");
    float m = 0.0f;
    for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace lisard
