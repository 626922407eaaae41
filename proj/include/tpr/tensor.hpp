#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tpr/error.hpp"

namespace tpr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;
template <typename S>
using VectorMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Resolves a possibly negative axis against `rank`; throws ShapeError if out of range.
Index normalize_axis(Index axis, Index rank, const char* op);

/// Dense row-major array. `numel() == data().size()` always holds.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (static_cast<Index>(data_.size()) != shape_numel(shape_)) {
      throw ShapeError("Tensor: shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), S(1)); }
  static Tensor scalar(S value) { return Tensor(Shape{}, std::vector<S>{value}); }
  static Tensor identity(Index n) {
    Tensor t({n, n});
    for (Index i = 0; i < n; ++i) t.data_[static_cast<std::size_t>(i * n + i)] = S(1);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))]; }
  Index numel() const noexcept { return static_cast<Index>(data_.size()); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  S& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  S item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  /// Row-major view collapsing all leading axes: [prod(shape[:-1]), shape[-1]].
  MatrixMap<S> matrix() { return MatrixMap<S>(data(), leading(), trailing()); }
  ConstMatrixMap<S> matrix() const { return ConstMatrixMap<S>(data(), leading(), trailing()); }
  VectorMap<S> vector() { return VectorMap<S>(data(), numel()); }
  ConstVectorMap<S> vector() const { return ConstVectorMap<S>(data(), numel()); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_shape() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("Tensor: negative dimension in " + shape_str(shape_));
    }
  }
  Index trailing() const { return shape_.empty() ? 1 : shape_.back(); }
  Index leading() const {
    const Index t = trailing();
    return t == 0 ? 0 : numel() / t;
  }

  Shape shape_;
  std::vector<S> data_;
};

}  // namespace tpr
