#include "comepress/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace comepress {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
ConstStridedMap<T> map(MatrixView<const T> v) {
    return ConstStridedMap<T>(v.data, static_cast<Eigen::Index>(v.rows),
                              static_cast<Eigen::Index>(v.cols),
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(v.stride)));
}

template <typename T>
StridedMap<T> map(MatrixView<T> v) {
    return StridedMap<T>(v.data, static_cast<Eigen::Index>(v.rows),
                         static_cast<Eigen::Index>(v.cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(v.stride)));
}

}  // namespace

template <typename T>
void gemm_view(MatrixView<const T> a, bool transpose_a, MatrixView<const T> b, bool transpose_b,
               MatrixView<T> c, T alpha, bool accumulate) {
    const std::size_t m = transpose_a ? a.cols : a.rows;
    const std::size_t k = transpose_a ? a.rows : a.cols;
    const std::size_t kb = transpose_b ? b.cols : b.rows;
    const std::size_t n = transpose_b ? b.rows : b.cols;
    if (k != kb || c.rows != m || c.cols != n) {
        throw ShapeError("gemm: incompatible operands (" + std::to_string(m) + "x" +
                         std::to_string(k) + ") * (" + std::to_string(kb) + "x" +
                         std::to_string(n) + ") -> (" + std::to_string(c.rows) + "x" +
                         std::to_string(c.cols) + ")");
    }
    auto am = map(a);
    auto bm = map(b);
    auto cm = map(c);
    if (!accumulate) cm.setZero();
    if (m == 0 || n == 0 || k == 0) return;
    if (!transpose_a && !transpose_b) {
        cm.noalias() += alpha * (am * bm);
    } else if (!transpose_a && transpose_b) {
        cm.noalias() += alpha * (am * bm.transpose());
    } else if (transpose_a && !transpose_b) {
        cm.noalias() += alpha * (am.transpose() * bm);
    } else {
        cm.noalias() += alpha * (am.transpose() * bm.transpose());
    }
}

template <typename T>
void gemm(const Tensor<T>& a, bool transpose_a, const Tensor<T>& b, bool transpose_b, Tensor<T>& c,
          bool accumulate) {
    MatrixView<const T> av{a.data(), a.rows(), a.cols(), a.cols()};
    MatrixView<const T> bv{b.data(), b.rows(), b.cols(), b.cols()};
    MatrixView<T> cv{c.data(), c.rows(), c.cols(), c.cols()};
    gemm_view(av, transpose_a, bv, transpose_b, cv, T{1}, accumulate);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects rank-2 operands, got " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
    }
    Tensor<T> c(Shape{a.dim(0), b.dim(1)});
    gemm(a, false, b, false, c, false);
    return c;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.values().begin(), t.values().end(),
                       [](T v) { return std::isfinite(v); });
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

#define COMEPRESS_INSTANTIATE(T)                                                              \
    template void gemm_view<T>(MatrixView<const T>, bool, MatrixView<const T>, bool,          \
                               MatrixView<T>, T, bool);                                       \
    template void gemm<T>(const Tensor<T>&, bool, const Tensor<T>&, bool, Tensor<T>&, bool); \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> transpose2d<T>(const Tensor<T>&);                                      \
    template bool all_finite<T>(const Tensor<T>&);                                            \
    template double max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);

COMEPRESS_INSTANTIATE(float)
COMEPRESS_INSTANTIATE(double)
#undef COMEPRESS_INSTANTIATE

}  // namespace comepress
