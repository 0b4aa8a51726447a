#pragma once

// Differentiable building blocks with hand-written backward passes.
//
// Every forward op has a matching *_backward that maps the gradient of a
// scalar loss w.r.t. the op's output to gradients w.r.t. its inputs. All
// functions are pure and deterministic.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "mmrobust/matrix.hpp"

namespace mmrobust {

/// Probability floor used by cross_entropy.
inline constexpr double kProbabilityFloor = 1e-12;
/// Denominator clamp used by cosine_similarity.
inline constexpr double kCosineEta = 1e-8;

/// A value together with the gradient of some scalar w.r.t. it.
struct DualValue {
  DualValue() = default;
  explicit DualValue(Matrix v);
  DualValue(Matrix v, Matrix g);

  Matrix value;
  Matrix grad;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// out = x * w + b (b broadcast over rows).
Matrix affine_forward(const Matrix& x, const Matrix& w, std::span<const double> b);

struct AffineGrads {
  Matrix x;
  Matrix w;
  Vector b;
};

AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& grad_out);

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& x, const Matrix& grad_out);

Vector sigmoid(std::span<const double> x);
/// Takes the forward *output* s = sigmoid(x).
Vector sigmoid_backward(std::span<const double> s, std::span<const double> grad_out);

Vector hadamard(std::span<const double> a, std::span<const double> b);
std::pair<Vector, Vector> hadamard_backward(std::span<const double> a, std::span<const double> b,
                                            std::span<const double> grad_out);

Vector add(std::span<const double> a, std::span<const double> b);
std::pair<Vector, Vector> add_backward(std::span<const double> grad_out);

Vector concat(std::span<const double> a, std::span<const double> b);
/// Splits grad_out into the parts belonging to the first `first_len` and remaining entries.
std::pair<Vector, Vector> concat_backward(std::span<const double> grad_out, std::size_t first_len);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> x);
Vector l2_norm_backward(std::span<const double> x, double grad_out);

/// Column-wise max over the rows of x; argmax records the first winning row.
struct MaxPool {
  Vector value;
  std::vector<std::size_t> argmax;
};

MaxPool max_pool_rows(const Matrix& x);
Matrix max_pool_rows_backward(std::size_t rows, std::span<const std::size_t> argmax,
                              std::span<const double> grad_out);

Vector softmax(std::span<const double> z);
/// Vector-Jacobian product of softmax given its output p.
Vector softmax_backward(std::span<const double> p, std::span<const double> grad_out);

/// -log(max(p[label], kProbabilityFloor)).
double cross_entropy(std::span<const double> p, std::size_t label);
/// Gradient of cross_entropy(softmax(z), label) w.r.t. z, i.e. p - onehot(label).
Vector cross_entropy_logit_grad(std::span<const double> p, std::size_t label);

/// a.b / max(|a| |b|, kCosineEta).
double cosine_similarity(std::span<const double> a, std::span<const double> b);
std::pair<Vector, Vector> cosine_similarity_backward(std::span<const double> a,
                                                     std::span<const double> b, double grad_out);

}  // namespace mmrobust
