#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the code under test except to evaluate a loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmrobust/attacks.hpp"
#include "mmrobust/dataset.hpp"
#include "mmrobust/model.hpp"
#include "mmrobust/random.hpp"

namespace oracle {

using mmrobust::Matrix;
using mmrobust::Vector;

inline constexpr double kFdStep = 1e-5;

/// Central differences of f at x, one coordinate at a time (x is restored).
inline Vector central_difference(const std::function<double()>& f, std::span<double> x,
                                 double h = kFdStep) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// |a - n| / max(|a| + |n|, 1e-7) over whole vectors.
inline double relative_error(std::span<const double> a, std::span<const double> n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-7);
}

/// True when no relu input sits within `margin` of zero and every max-pool
/// column has a winner ahead of the runner-up by more than `margin`, so a
/// finite-difference probe cannot cross a kink.
inline bool smooth_instance(const mmrobust::ForwardTrace& t, const mmrobust::ArchSpec& arch,
                            double margin) {
  for (const Matrix* pre : {&t.audio_pre, &t.visual_pre})
    for (double v : pre->flat())
      if (std::abs(v) < margin) return false;
  if (arch.pooling == mmrobust::Pooling::Max && !t.patch_features.empty()) {
    const Matrix& f = t.patch_features;
    for (std::size_t j = 0; j < f.cols(); ++j) {
      double best = -std::numeric_limits<double>::infinity(), second = best;
      for (std::size_t i = 0; i < f.rows(); ++i) {
        const double v = f(i, j);
        if (v > best) {
          second = best;
          best = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (f.rows() > 1 && best - second < margin) return false;
    }
  }
  return true;
}

/// Random model with every parameter shifted by U(-spread, spread), so biases
/// are nonzero and gates/attention are away from their symmetric points.
inline mmrobust::ModelState random_model(const mmrobust::ArchSpec& arch, std::uint64_t seed,
                                         double spread = 0.5) {
  mmrobust::ModelState m = mmrobust::init_model(arch, seed);
  mmrobust::Rng rng(mmrobust::derive_seed(seed, 99));
  for (Matrix* t : m.params.tensors())
    for (double& v : t->flat()) v += rng.uniform(-spread, spread);
  return m;
}

struct RandomInput {
  Vector audio;
  Matrix visual;
  std::size_t label = 0;
};

inline RandomInput random_input(const mmrobust::ArchSpec& arch, mmrobust::Rng& rng) {
  RandomInput in;
  in.audio.resize(arch.audio_dim);
  for (double& v : in.audio) v = rng.uniform(-1.0, 1.0);
  in.visual = Matrix(arch.num_patches(), arch.patch_dim);
  for (double& v : in.visual.flat()) v = rng.uniform(0.0, 1.0);
  in.label = rng.index(arch.num_classes);
  return in;
}

struct GradientCheck {
  double worst = 0.0;  ///< largest per-tensor relative error
  std::string worst_tensor;
};

/// Compares every parameter tensor and both input gradients against central
/// differences of the scalar loss.
inline GradientCheck check_gradients(mmrobust::ModelState m, const RandomInput& in,
                                     mmrobust::LossMode mode) {
  const mmrobust::Gradients g = mmrobust::gradients(m, in.audio, in.visual, in.label, mode);
  Vector audio = in.audio;
  Matrix visual = in.visual;
  auto f = [&] { return mmrobust::loss(m, audio, visual, in.label, mode).value; };

  static const char* kNames[] = {"audio_w1", "audio_b1", "audio_w2", "audio_b2",
                                 "visual_w1", "visual_b1", "visual_w2", "visual_b2",
                                 "film_w", "film_b", "head_w", "head_b"};
  GradientCheck out;
  auto record = [&](double err, const std::string& name) {
    if (err > out.worst || out.worst_tensor.empty()) {
      out.worst = std::max(out.worst, err);
      out.worst_tensor = name;
    }
  };
  auto tensors = m.params.tensors();
  const auto analytic = g.params.tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    if (tensors[k]->empty()) continue;
    const Vector numeric = central_difference(f, tensors[k]->flat());
    record(relative_error(analytic[k]->flat(), numeric), kNames[k]);
  }
  record(relative_error(g.inputs.audio, central_difference(f, audio)), "input_audio");
  record(relative_error(g.inputs.visual.flat(), central_difference(f, visual.flat())),
         "input_visual");
  return out;
}

/// Lasso min |f - M a|^2 + lambda |a|_1 by cyclic coordinate descent:
/// a_k <- S(m_k^T r_k, lambda/2) / |m_k|^2 with r_k the residual without k.
inline Vector coordinate_descent_lasso(const Matrix& m, std::span<const double> f, double lambda,
                                       std::size_t max_sweeps = 200000, double tol = 1e-15) {
  const std::size_t d = m.rows(), k_count = m.cols();
  Vector alpha(k_count, 0.0);
  Vector residual(f.begin(), f.end());
  Vector col_sq(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k)
    for (std::size_t i = 0; i < d; ++i) col_sq[k] += m(i, k) * m(i, k);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double biggest = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (col_sq[k] == 0.0) continue;
      double rho = 0.0;
      for (std::size_t i = 0; i < d; ++i) rho += m(i, k) * (residual[i] + m(i, k) * alpha[k]);
      const double shrunk = std::max(std::abs(rho) - lambda / 2.0, 0.0);
      const double next = (rho < 0.0 ? -shrunk : shrunk) / col_sq[k];
      const double delta = next - alpha[k];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < d; ++i) residual[i] -= m(i, k) * delta;
        alpha[k] = next;
      }
      biggest = std::max(biggest, std::abs(delta));
    }
    if (biggest < tol) break;
  }
  return alpha;
}

inline double lasso_value(const Matrix& m, std::span<const double> f, std::span<const double> a,
                          double lambda) {
  double fit = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double r = f[i];
    for (std::size_t k = 0; k < m.cols(); ++k) r -= m(i, k) * a[k];
    fit += r * r;
  }
  for (double v : a) l1 += std::abs(v);
  return fit + lambda * l1;
}

/// Brute force: the class whose audio prototype plus best-matching patch is
/// closest in squared distance.
inline std::size_t nearest_prototype(const mmrobust::BimodalSample& s, const Matrix& audio_protos,
                                     const Matrix& visual_protos) {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < audio_protos.rows(); ++c) {
    double dist = 0.0;
    for (std::size_t i = 0; i < s.audio.size(); ++i)
      dist += (s.audio[i] - audio_protos(c, i)) * (s.audio[i] - audio_protos(c, i));
    double patch = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < s.visual.rows(); ++p) {
      double dp = 0.0;
      for (std::size_t i = 0; i < s.visual.cols(); ++i)
        dp += (s.visual(p, i) - visual_protos(c, i)) * (s.visual(p, i) - visual_protos(c, i));
      patch = std::min(patch, dp);
    }
    dist += patch;
    if (dist < best_dist) {
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

/// Loss = w_a . x_a + w_v . vec(x_v); predicts 0 when the loss is negative.
class LinearTarget final : public mmrobust::AttackTarget {
 public:
  LinearTarget(Vector w_a, Matrix w_v) : w_a_(std::move(w_a)), w_v_(std::move(w_v)) {}

  double value(std::span<const double> audio, const Matrix& visual) const {
    double s = 0.0;
    for (std::size_t i = 0; i < audio.size(); ++i) s += w_a_[i] * audio[i];
    for (std::size_t i = 0; i < visual.size(); ++i) s += w_v_.flat()[i] * visual.flat()[i];
    return s;
  }
  mmrobust::ObjectiveEval evaluate(std::span<const double> audio, const Matrix& visual,
                                   std::size_t) const override {
    return {value(audio, visual), w_a_, w_v_};
  }
  std::size_t predict(std::span<const double> audio, const Matrix& visual) const override {
    return value(audio, visual) < 0.0 ? 0 : 1;
  }

 private:
  Vector w_a_;
  Matrix w_v_;
};

/// Loss = -|x_a - c_a|^2 - |x_v - c_v|^2, maximized at the target point.
class QuadraticTarget final : public mmrobust::AttackTarget {
 public:
  QuadraticTarget(Vector c_a, Matrix c_v) : c_a_(std::move(c_a)), c_v_(std::move(c_v)) {}

  mmrobust::ObjectiveEval evaluate(std::span<const double> audio, const Matrix& visual,
                                   std::size_t) const override {
    mmrobust::ObjectiveEval ev;
    ev.audio.resize(audio.size());
    ev.visual = Matrix(visual.rows(), visual.cols());
    for (std::size_t i = 0; i < audio.size(); ++i) {
      ev.audio[i] = -2.0 * (audio[i] - c_a_[i]);
      ev.loss -= (audio[i] - c_a_[i]) * (audio[i] - c_a_[i]);
    }
    for (std::size_t i = 0; i < visual.size(); ++i) {
      const double r = visual.flat()[i] - c_v_.flat()[i];
      ev.visual.flat()[i] = -2.0 * r;
      ev.loss -= r * r;
    }
    return ev;
  }
  std::size_t predict(std::span<const double>, const Matrix&) const override { return 0; }

 private:
  Vector c_a_;
  Matrix c_v_;
};

}  // namespace oracle
