#include "tiledit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace tiledit {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  if (data_.size() != product(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

std::size_t Tensor::rows() const { return shape_.at(0); }
std::size_t Tensor::cols() const { return shape_.at(1); }

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = shape_.back();
  return {data_.data() + i * n, n};
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = shape_.back();
  return {data_.data() + i * n, n};
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  // i-p-j order: each c[i][j] still accumulates over ascending p.
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.storage().data() + i * n;
    const double* ai = a.storage().data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.storage().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner dimensions disagree, " + shape_string(a.shape()) +
                         "^T x " + shape_string(b.shape()));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.storage().data() + p * m;
    const double* bp = b.storage().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = ap[i];
      double* ci = c.storage().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.storage().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.storage().data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c(i, j) = acc;
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& x, const std::optional<std::vector<bool>>& allowed) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (allowed && allowed->size() != m * n) {
    throw DimensionError("softmax_rows: mask has " + std::to_string(allowed->size()) +
                         " entries, expected " + std::to_string(m * n));
  }
  auto ok = [&](std::size_t i, std::size_t j) { return !allowed || (*allowed)[i * n + j]; };
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!ok(i, j)) continue;
      any = true;
      mx = std::max(mx, x(i, j));
    }
    if (!any) throw std::domain_error("softmax_rows: empty attention row " + std::to_string(i));
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!ok(i, j)) continue;
      const double e = std::exp(x(i, j) - mx);
      y(i, j) = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) y(i, j) *= inv;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: affine size does not match last axis of " +
                         shape_string(x.shape()));
  }
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be nonnegative");
  Tensor y(x.shape());
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.storage().data() + r * d;
    double* yr = y.storage().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      // Zero variance with eps = 0 leaves 0/0; a constant row normalizes to 0.
      const double centered = xr[j] - mean;
      const double xhat = denom > 0.0 ? centered / denom : 0.0;
      yr[j] = gain[j] * xhat + bias[j];
    }
  }
  return y;
}

LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy,
                                   double eps) {
  require_same_shape(x, dy, "layer_norm_backward");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  LayerNormGrads g{Tensor(x.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.storage().data() + r * d;
    const double* dyr = dy.storage().data() + r * d;
    double* dxr = g.dx.storage().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * inv;
      dxhat[j] = dyr[j] * gain[j];
      g.dgain[j] += dyr[j] * xhat[j];
      g.dbias[j] += dyr[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return g;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

double gelu_grad(double u) {
  const double cdf = 0.5 * (1.0 + std::erf(u * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * u * u) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + u * pdf;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor c = a;
  add_inplace(c, b);
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (auto& v : c.values()) v *= s;
  return c;
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void axpy_inplace(Tensor& a, double alpha, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
}

void add_row_broadcast(Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_row_broadcast");
  if (bias.size() != a.cols()) {
    throw DimensionError("add_row_broadcast: bias " + shape_string(bias.shape()) +
                         " vs matrix " + shape_string(a.shape()));
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

Tensor sum_rows(const Tensor& a) {
  require_matrix(a, "sum_rows");
  Tensor s({a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_squared_error");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double sum_squares(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace tiledit
