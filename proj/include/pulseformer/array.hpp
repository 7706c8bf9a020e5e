#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>

#include "pulseformer/error.hpp"

namespace pulseformer {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using TokenMatrix = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Extents of a rank 1..3 array, outermost first (batch x sequence x feature).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims);

  int rank() const { return rank_; }
  Index operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  Index size() const;
  /// Product of every extent except the last.
  Index rows() const;
  Index cols() const { return rank_ == 0 ? 0 : dims_[static_cast<std::size_t>(rank_ - 1)]; }

  bool operator==(const Shape& other) const;
  bool operator!=(const Shape& other) const { return !(*this == other); }
  std::string str() const;

 private:
  std::array<Index, 3> dims_{0, 0, 0};
  int rank_ = 0;
};

/// Dense row-major storage. Rank-3 arrays are viewed per batch item as
/// row-major matrices; any array can be viewed as rows() x cols().
template <typename Scalar>
class Array {
 public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Array() = default;
  explicit Array(const Shape& shape, Scalar fill = Scalar(0))
      : shape_(shape), data_(Vector<Scalar>::Constant(shape.size(), fill)) {}

  static Array from_matrix(const RowMatrix<Scalar>& m) {
    Array out(Shape{m.rows(), m.cols()});
    out.matrix() = m;
    return out;
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector<Scalar>& flat() { return data_; }
  const Vector<Scalar>& flat() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  MatrixMap matrix() { return MatrixMap(data_.data(), shape_.rows(), shape_.cols()); }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), shape_.rows(), shape_.cols());
  }

  /// Batch item `b` of a rank-3 array (or the whole array for rank <= 2).
  MatrixMap item(Index b) {
    const Index r = item_rows(), c = shape_.cols();
    return MatrixMap(data_.data() + b * r * c, r, c);
  }
  ConstMatrixMap item(Index b) const {
    const Index r = item_rows(), c = shape_.cols();
    return ConstMatrixMap(data_.data() + b * r * c, r, c);
  }
  Index batch() const { return shape_.rank() == 3 ? shape_[0] : 1; }
  Index item_rows() const {
    if (shape_.rank() == 3) return shape_[1];
    if (shape_.rank() == 2) return shape_[0];
    return 1;
  }

  void reshape(const Shape& shape) {
    if (shape.size() != shape_.size()) {
      throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    shape_ = shape;
  }
  void set_zero() { data_.setZero(); }
  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_;
  Vector<Scalar> data_;
};

}  // namespace pulseformer
