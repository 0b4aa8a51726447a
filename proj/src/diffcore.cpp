#include "mmrobust/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "mmrobust/errors.hpp"

namespace mmrobust {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    std::ostringstream msg;
    msg << op << ": length mismatch (" << a.size() << " vs " << b.size() << ")";
    throw DimensionError(msg.str());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not equal " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

DualValue::DualValue(Matrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}

DualValue::DualValue(Matrix v, Matrix g) : value(std::move(v)), grad(std::move(g)) {
  if (!value.same_shape(grad)) {
    throw DimensionError("DualValue: value " + value.shape_string() + " vs grad " +
                         grad.shape_string());
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix affine_forward(const Matrix& x, const Matrix& w, std::span<const double> b) {
  if (x.cols() != w.rows() || w.cols() != b.size()) {
    throw DimensionError("affine_forward: x " + x.shape_string() + ", W " + w.shape_string() +
                         ", b " + std::to_string(b.size()));
  }
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto out_row = out.row(i);
    std::copy(b.begin(), b.end(), out_row.begin());
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xik = x(i, k);
      auto w_row = w.row(k);
      for (std::size_t j = 0; j < w.cols(); ++j) out_row[j] += xik * w_row[j];
    }
  }
  return out;
}

AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& grad_out) {
  if (x.cols() != w.rows() || grad_out.rows() != x.rows() || grad_out.cols() != w.cols()) {
    throw DimensionError("affine_backward: x " + x.shape_string() + ", W " + w.shape_string() +
                         ", grad_out " + grad_out.shape_string());
  }
  AffineGrads g{Matrix(x.rows(), x.cols()), Matrix(w.rows(), w.cols()), Vector(w.cols(), 0.0)};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto go = grad_out.row(i);
    for (std::size_t k = 0; k < w.rows(); ++k) {
      auto w_row = w.row(k);
      double acc = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) acc += go[j] * w_row[j];
      g.x(i, k) = acc;
      const double xik = x(i, k);
      auto gw_row = g.w.row(k);
      for (std::size_t j = 0; j < w.cols(); ++j) gw_row[j] += xik * go[j];
    }
    for (std::size_t j = 0; j < w.cols(); ++j) g.b[j] += go[j];
  }
  return g;
}

Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.flat()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix relu_backward(const Matrix& x, const Matrix& grad_out) {
  if (!x.same_shape(grad_out)) {
    throw DimensionError("relu_backward: " + x.shape_string() + " vs " + grad_out.shape_string());
  }
  Matrix out = grad_out;
  auto xs = x.flat();
  auto os = out.flat();
  for (std::size_t i = 0; i < os.size(); ++i)
    if (!(xs[i] > 0.0)) os[i] = 0.0;
  return out;
}

Vector sigmoid(std::span<const double> x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Split by sign so exp never overflows.
    if (x[i] >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x[i]));
    } else {
      const double e = std::exp(x[i]);
      out[i] = e / (1.0 + e);
    }
  }
  return out;
}

Vector sigmoid_backward(std::span<const double> s, std::span<const double> grad_out) {
  require_same_length(s, grad_out, "sigmoid_backward");
  Vector out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = grad_out[i] * s[i] * (1.0 - s[i]);
  return out;
}

Vector hadamard(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "hadamard");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

std::pair<Vector, Vector> hadamard_backward(std::span<const double> a, std::span<const double> b,
                                            std::span<const double> grad_out) {
  require_same_length(a, b, "hadamard_backward");
  require_same_length(a, grad_out, "hadamard_backward");
  return {hadamard(grad_out, b), hadamard(grad_out, a)};
}

Vector add(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "add");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

std::pair<Vector, Vector> add_backward(std::span<const double> grad_out) {
  return {Vector(grad_out.begin(), grad_out.end()), Vector(grad_out.begin(), grad_out.end())};
}

Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::pair<Vector, Vector> concat_backward(std::span<const double> grad_out,
                                          std::size_t first_len) {
  if (first_len > grad_out.size()) {
    throw DimensionError("concat_backward: split " + std::to_string(first_len) +
                         " exceeds length " + std::to_string(grad_out.size()));
  }
  return {Vector(grad_out.begin(), grad_out.begin() + static_cast<std::ptrdiff_t>(first_len)),
          Vector(grad_out.begin() + static_cast<std::ptrdiff_t>(first_len), grad_out.end())};
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(std::span<const double> x) { return std::sqrt(dot(x, x)); }

Vector l2_norm_backward(std::span<const double> x, double grad_out) {
  const double n = l2_norm(x);
  Vector out(x.size(), 0.0);
  if (n == 0.0) return out;  // subgradient 0 at the origin
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grad_out * x[i] / n;
  return out;
}

MaxPool max_pool_rows(const Matrix& x) {
  if (x.rows() == 0) throw DimensionError("max_pool_rows: empty input");
  MaxPool out{Vector(x.row(0).begin(), x.row(0).end()), std::vector<std::size_t>(x.cols(), 0)};
  for (std::size_t i = 1; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      if (r[j] > out.value[j]) {
        out.value[j] = r[j];
        out.argmax[j] = i;
      }
    }
  }
  return out;
}

Matrix max_pool_rows_backward(std::size_t rows, std::span<const std::size_t> argmax,
                              std::span<const double> grad_out) {
  if (argmax.size() != grad_out.size()) {
    throw DimensionError("max_pool_rows_backward: argmax/grad length mismatch");
  }
  Matrix out(rows, grad_out.size());
  for (std::size_t j = 0; j < grad_out.size(); ++j) out(argmax[j], j) += grad_out[j];
  return out;
}

Vector softmax(std::span<const double> z) {
  if (z.empty()) throw DimensionError("softmax: empty input");
  const double m = *std::max_element(z.begin(), z.end());
  Vector out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Vector softmax_backward(std::span<const double> p, std::span<const double> grad_out) {
  require_same_length(p, grad_out, "softmax_backward");
  const double inner = dot(p, grad_out);
  Vector out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] * (grad_out[i] - inner);
  return out;
}

double cross_entropy(std::span<const double> p, std::size_t label) {
  if (label >= p.size()) {
    throw SpecError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                    std::to_string(p.size()) + " classes");
  }
  return -std::log(std::max(p[label], kProbabilityFloor));
}

Vector cross_entropy_logit_grad(std::span<const double> p, std::size_t label) {
  if (label >= p.size()) {
    throw SpecError("cross_entropy_logit_grad: label " + std::to_string(label) +
                    " out of range for " + std::to_string(p.size()) + " classes");
  }
  Vector g(p.begin(), p.end());
  g[label] -= 1.0;
  return g;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "cosine_similarity");
  return dot(a, b) / std::max(l2_norm(a) * l2_norm(b), kCosineEta);
}

std::pair<Vector, Vector> cosine_similarity_backward(std::span<const double> a,
                                                     std::span<const double> b,
                                                     double grad_out) {
  require_same_length(a, b, "cosine_similarity_backward");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  const double prod = na * nb;
  Vector ga(a.size());
  Vector gb(b.size());
  if (prod > kCosineEta) {
    const double s = dot(a, b) / prod;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ga[i] = grad_out * (b[i] / prod - s * a[i] / (na * na));
      gb[i] = grad_out * (a[i] / prod - s * b[i] / (nb * nb));
    }
  } else {
    // Clamped denominator is constant.
    for (std::size_t i = 0; i < a.size(); ++i) {
      ga[i] = grad_out * b[i] / kCosineEta;
      gb[i] = grad_out * a[i] / kCosineEta;
    }
  }
  return {ga, gb};
}

}  // namespace mmrobust
