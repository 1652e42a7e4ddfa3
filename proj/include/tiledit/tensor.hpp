#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tiledit {

class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles (last axis fastest).
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  /// 2D literal, e.g. Tensor::from_rows({{1, 2}, {3, 4}}).
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Matrix view helpers; valid for rank 2 only.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Tensor reshaped(std::vector<std::size_t> shape) const;
  void fill(double v);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ·b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row-wise stable softmax. Disallowed entries are excluded from the
/// reduction and come out exactly 0.
Tensor softmax_rows(const Tensor& x, const std::optional<std::vector<bool>>& allowed = std::nullopt);

/// Normalizes over the last axis, then applies gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

struct LayerNormGrads {
  Tensor dx;
  Tensor dgain;
  Tensor dbias;
};
LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy,
                                   double eps = 1e-5);

double gelu(double u);
double gelu_grad(double u);

// Elementwise helpers. Shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& a, const Tensor& b);
void axpy_inplace(Tensor& a, double alpha, const Tensor& b);
/// Adds a length-cols vector to every row of a 2D tensor.
void add_row_broadcast(Tensor& a, const Tensor& bias);
/// Column sums of a 2D tensor.
Tensor sum_rows(const Tensor& a);

double mean_squared_error(const Tensor& a, const Tensor& b);
double sum_squares(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace tiledit
