#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace comepress {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised for malformed user input (token ids, flags, files).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a training or evaluation step produces non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when reading or writing files fails.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename T>
constexpr std::string_view dtype_name();
template <>
constexpr std::string_view dtype_name<float>() {
    return "f32";
}
template <>
constexpr std::string_view dtype_name<double>() {
    return "f64";
}

/// Dense row-major array. Value type; copies are deep.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {}
    Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_to_string(shape_));
        }
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// 2-D accessor; the tensor must be rank 2.
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    /// Rows and columns when viewed as a matrix whose last axis is the column axis.
    std::size_t rows() const { return shape_.empty() ? 1 : data_.size() / shape_.back(); }
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

    T item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                             shape_to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

// Dense kernels on raw tensors. These do not participate in autodiff.

/// C = op(A) * op(B) (+ C if accumulate). A and B are viewed as matrices.
template <typename T>
void gemm(const Tensor<T>& a, bool transpose_a, const Tensor<T>& b, bool transpose_b,
          Tensor<T>& c, bool accumulate);

/// Matrix product of rank-2 tensors; throws ShapeError on inner-dimension mismatch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

/// Strided 2-D matrix product helpers used by the attention kernel.
/// Operands are column blocks of row-major matrices with explicit row strides.
template <typename T>
struct MatrixView {
    T* data;
    std::size_t rows;
    std::size_t cols;
    std::size_t stride;
};

template <typename T>
void gemm_view(MatrixView<const T> a, bool transpose_a, MatrixView<const T> b, bool transpose_b,
               MatrixView<T> c, T alpha, bool accumulate);

template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace comepress
