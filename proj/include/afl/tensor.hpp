#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace afl {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major array of doubles with 1 to 4 dimensions.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(int64_t rows, int64_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Number of elements per leading (batch) index.
  int64_t row_size() const { return shape_.empty() ? 0 : static_cast<int64_t>(data_.size()) / shape_[0]; }

  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int64_t r, int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }

  // Value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  // Rows [begin, end) along the leading dimension.
  Tensor rows(int64_t begin, int64_t end) const;
  Tensor row(int64_t i) const { return rows(i, i + 1); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  // Bitwise equality of shape and data.
  bool bit_equal(const Tensor& other) const;
  bool all_finite() const;

  // Optional gradient slot for leaves handed to optimizers.
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Row-wise concatenation along the leading dimension.
Tensor concat_rows(std::span<const Tensor> parts);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace afl
