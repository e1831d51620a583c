#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dal/errors.hpp"

namespace dal {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using FlatVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("invalid-shape: non-positive dimension in " + shape_string(shape));
    n *= d;
  }
  return n;
}

// Dense row-major array with an explicit shape. Rank 0 is a scalar, rank 1 is
// viewed as a 1 x n row, rank 2 as an m x n matrix. Higher ranks are storable
// but only flat access is offered for them.
template <typename Scalar>
class BasicTensor {
 public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  BasicTensor() : shape_{}, data_(FlatVector<Scalar>::Zero(1)) {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    data_ = FlatVector<Scalar>::Zero(shape_numel(shape_));
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values) : BasicTensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size())
      throw ShapeError("invalid-shape: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  BasicTensor(Shape shape, const std::vector<Scalar>& values) : BasicTensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size())
      throw ShapeError("invalid-shape: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    BasicTensor t(Shape{m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  template <typename Derived>
  static BasicTensor from_vector(const Eigen::MatrixBase<Derived>& v) {
    BasicTensor t(Shape{v.size()});
    for (Index i = 0; i < v.size(); ++i) t.data_[i] = v.derived().coeff(i);
    return t;
  }

  static BasicTensor scalar(Scalar value) {
    BasicTensor t;
    t.data_[0] = value;
    return t;
  }

  // Contents unspecified; for outputs that are fully overwritten.
  static BasicTensor uninitialized(Shape shape) {
    BasicTensor t;
    t.data_.resize(shape_numel(shape));
    t.shape_ = std::move(shape);
    return t;
  }

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }

  Index rows() const {
    require_matrix_view();
    return shape_.size() == 2 ? shape_[0] : 1;
  }
  Index cols() const {
    require_matrix_view();
    if (shape_.empty()) return 1;
    return shape_.size() == 2 ? shape_[1] : shape_[0];
  }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  FlatVector<Scalar>& flat() { return data_; }
  const FlatVector<Scalar>& flat() const { return data_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index r, Index c) { return data_[r * cols() + c]; }
  Scalar at(Index r, Index c) const { return data_[r * cols() + c]; }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void set_zero() { data_.setZero(); }

  void reshape(Shape shape) {
    if (shape_numel(shape) != numel())
      throw ShapeError("invalid-shape: cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    shape_ = std::move(shape);
  }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  std::vector<Scalar> to_vector() const { return {data_.data(), data_.data() + data_.size()}; }

 private:
  void require_matrix_view() const {
    if (shape_.size() > 2)
      throw ShapeError("matrix view requires rank <= 2, got " + shape_string(shape_));
  }

  Shape shape_;
  FlatVector<Scalar> data_;
};

using Tensor = BasicTensor<double>;

// SplitMix64 finalizer; used to derive independent child seeds from a root
// seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Named component streams. Each component draws from its own generator so
// that e.g. changing the shuffle order never perturbs parameter init.
enum class Stream : std::uint64_t { init = 1, data = 2, shuffle = 3, shuffle_disc = 4, misc = 5 };

// Seedable 64-bit generator (std::mt19937_64).
class Rng {
 public:
  static constexpr const char* algorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng derive(std::uint64_t seed, Stream stream) {
    return Rng(mix_seed(seed, static_cast<std::uint64_t>(stream)));
  }
  static Rng derive(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) built from the top 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

enum class InitScheme { zeros, uniform, xavier };

struct Init {
  InitScheme scheme = InitScheme::zeros;
  double bound = 0.0;

  static Init zeros() { return {InitScheme::zeros, 0.0}; }
  static Init uniform(double a) { return {InitScheme::uniform, a}; }
  static Init xavier() { return {InitScheme::xavier, 0.0}; }
};

// Glorot bound sqrt(6 / (fan_in + fan_out)); rank-1 shapes use fan_in = 1.
inline double xavier_bound(const Shape& shape) {
  const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[0]) : 1.0;
  const double fan_out = static_cast<double>(shape.empty() ? 1 : shape.back());
  return std::sqrt(6.0 / (fan_in + fan_out));
}

inline Tensor tensor_init(const Shape& shape, Init init, Rng& rng) {
  Tensor t(shape);
  double a = init.bound;
  switch (init.scheme) {
    case InitScheme::zeros:
      return t;
    case InitScheme::uniform:
      if (!(a > 0.0)) throw ValidationError("uniform init requires a > 0");
      break;
    case InitScheme::xavier:
      a = xavier_bound(shape);
      break;
  }
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

}  // namespace dal
