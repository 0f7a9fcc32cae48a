#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace w4a4 {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major single-precision tensor. Rank 0 (shape {}) is a scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  /// Builds a 2-D tensor from nested literals; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows/cols of a rank-2 tensor. Rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  float item() const;
  void fill(float v);
  Tensor reshaped(Shape shape) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Dense kernels. All reductions accumulate in double and store float.
namespace kernels {

/// out[m x n] = a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// out[m x n] = a[m x k] * b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// out[k x n] = a[m x k]^T * b[m x n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row-wise softmax over the first `valid` entries of `row`, zero elsewhere.
void softmax_prefix(std::span<float> row, std::size_t valid);

double sum(std::span<const float> x);
double max_abs(std::span<const float> x);

}  // namespace kernels

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_rank2(const Tensor& a, const char* what);

}  // namespace w4a4
