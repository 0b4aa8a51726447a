#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mmrobust/defense.hpp"
#include "mmrobust/diffcore.hpp"
#include "mmrobust/errors.hpp"
#include "oracles.hpp"

using namespace mmrobust;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = rng.gaussian();
  return m;
}

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.gaussian();
  return v;
}

IstaConfig tight() {
  IstaConfig c;
  c.max_iters = 200000;
  c.tol = 1e-20;
  return c;
}

// 2 M^T (M alpha - f), the gradient of the smooth term.
Vector smooth_gradient(const Matrix& m, std::span<const double> f, std::span<const double> alpha) {
  Vector g(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double r = -f[i];
    for (std::size_t k = 0; k < m.cols(); ++k) r += m(i, k) * alpha[k];
    for (std::size_t k = 0; k < m.cols(); ++k) g[k] += 2.0 * m(i, k) * r;
  }
  return g;
}

ArchSpec small_arch() {
  ArchSpec a;
  a.audio_dim = 6;
  a.patch_dim = 4;
  a.grid_side = 2;
  a.hidden_dim = 8;
  a.embed_dim = 5;
  a.num_classes = 3;
  return a;
}

DatasetSpec matching_data() {
  DatasetSpec s;
  s.audio_dim = 6;
  s.patch_dim = 4;
  s.grid_side = 2;
  s.num_classes = 3;
  s.samples_per_class = 8;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mmrobust_test_defense_" + name);
}

}  // namespace

TEST(SoftThreshold, Examples) {
  EXPECT_EQ(soft_threshold(Vector{0.3, -0.3, 0.05, -0.05, 0.0}, 0.1),
            (Vector{0.3 - 0.1, -(0.3 - 0.1), 0.0, 0.0, 0.0}));
  EXPECT_EQ(soft_threshold(Vector{1.5, -2.0}, 0.0), (Vector{1.5, -2.0}));
  EXPECT_THROW(soft_threshold(Vector{1.0}, -0.1), SpecError);
}

TEST(Ista, MatchesCoordinateDescent) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_matrix(8, 16, rng);
    const Vector f = random_vector(8, rng);
    const double lambda = 0.1;
    const LassoResult ista = ista_lasso(m, f, lambda, tight());
    const Vector cd = oracle::coordinate_descent_lasso(m, f, lambda);
    const double want = oracle::lasso_value(m, f, cd, lambda);
    const double got = oracle::lasso_value(m, f, ista.alpha, lambda);
    EXPECT_NEAR(got, want, 1e-3 * std::abs(want)) << "trial " << trial;
    EXPECT_EQ(ista.objective_trace.back(), lasso_objective(m, f, ista.alpha, lambda));
  }
}

TEST(Ista, ObjectiveTraceIsMonotone) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = random_matrix(8, 16, rng);
    const Vector f = random_vector(8, rng);
    IstaConfig c;
    c.max_iters = 500;
    c.tol = 0.0;
    const LassoResult r = ista_lasso(m, f, 0.2, c);
    ASSERT_EQ(r.objective_trace.size(), r.iterations + 1);
    EXPECT_EQ(r.objective_trace.front(), lasso_objective(m, f, Vector(16, 0.0), 0.2));
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
      EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1]);
  }
}

TEST(Ista, OversizedStepIsHalvedUntilDescent) {
  Rng rng(3);
  const Matrix m = random_matrix(8, 16, rng);
  const Vector f = random_vector(8, rng);
  IstaConfig c;
  c.step = 10.0;
  c.max_iters = 2000;
  const LassoResult r = ista_lasso(m, f, 0.1, c);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
    EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1]);
  EXPECT_LT(r.objective_trace.back(), r.objective_trace.front());
}

TEST(Ista, SatisfiesSubgradientConditions) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = random_matrix(8, 16, rng);
    const Vector f = random_vector(8, rng);
    const double lambda = 0.1 + 0.1 * trial;
    const LassoResult r = ista_lasso(m, f, lambda, tight());
    const Vector g = smooth_gradient(m, f, r.alpha);
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (r.alpha[k] != 0.0)
        EXPECT_NEAR(g[k] + lambda * (r.alpha[k] > 0.0 ? 1.0 : -1.0), 0.0, 1e-4);
      else
        EXPECT_LE(std::abs(g[k]), lambda + 1e-4);
    }
  }
}

TEST(Ista, LargeLambdaGivesZeroCode) {
  Rng rng(5);
  const Matrix m = random_matrix(8, 16, rng);
  const Vector f = random_vector(8, rng);
  const Vector g = smooth_gradient(m, f, Vector(16, 0.0));  // -2 M^T f
  double bound = 0.0;
  for (double v : g) bound = std::max(bound, std::abs(v));
  const LassoResult r = ista_lasso(m, f, bound, IstaConfig{});
  EXPECT_EQ(r.alpha, Vector(16, 0.0));
  EXPECT_GT(l2_norm(ista_lasso(m, f, 0.9 * bound, tight()).alpha), 0.0);
}

TEST(Ista, RejectsBadInputs) {
  Matrix m(4, 3, 1.0);
  EXPECT_THROW(ista_lasso(m, Vector(5, 0.0), 0.1, IstaConfig{}), DimensionError);
  EXPECT_THROW(ista_lasso(m, Vector(4, 0.0), -0.1, IstaConfig{}), SpecError);
  EXPECT_THROW(ista_lasso(Matrix{}, Vector{}, 0.1, IstaConfig{}), SpecError);
}

TEST(Ista, SpectralNormOfDiagonal) {
  Matrix m(3, 3);
  m(0, 0) = 1.0;
  m(1, 1) = 3.0;
  m(2, 2) = 2.0;
  EXPECT_NEAR(spectral_norm_squared(m, 200), 9.0, 1e-9);
}

TEST(Denoise, AveragesWithInput) {
  Rng rng(6);
  MemoryBank bank{random_matrix(5, 12, rng), random_matrix(5, 12, rng), std::vector<std::uint32_t>(12)};
  const Vector f_a = random_vector(5, rng);
  const Vector f_v = random_vector(5, rng);
  IstaConfig c;
  c.lambda_a = 0.05;
  c.lambda_v = 0.3;
  const DenoisedPair d = denoise(bank, f_a, f_v, c);
  EXPECT_EQ(d.audio.alpha, ista_lasso(bank.audio, f_a, 0.05, c).alpha);
  EXPECT_EQ(d.visual.alpha, ista_lasso(bank.visual, f_v, 0.3, c).alpha);
  for (std::size_t i = 0; i < 5; ++i) {
    double recon = 0.0;
    for (std::size_t k = 0; k < 12; ++k) recon += bank.audio(i, k) * d.audio.alpha[k];
    EXPECT_NEAR(d.audio.f_star[i], recon, 1e-12);
    EXPECT_NEAR(d.audio.f_used[i], 0.5 * (recon + f_a[i]), 1e-12);
  }
  c.average_with_input = false;
  const DenoisedPair raw = denoise(bank, f_a, f_v, c);
  EXPECT_EQ(raw.visual.f_used, raw.visual.f_star);
  EXPECT_THROW(denoise(bank, Vector(4, 0.0), f_v, c), DimensionError);
}

TEST(Bank, BuildSamplesDistinctTrainingItems) {
  Dataset d = generate(matching_data());
  ModelState m = oracle::random_model(small_arch(), 7);
  MemoryBank bank = build_bank(m, d.train, 10, 3);
  ASSERT_EQ(bank.size(), 10u);
  EXPECT_EQ(bank.dim(), m.arch.embed_dim);
  EXPECT_EQ(std::set<std::uint32_t>(bank.source_ids.begin(), bank.source_ids.end()).size(), 10u);
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const auto& s = d.train.samples.at(bank.source_ids[k]);
    const ForwardTrace t = forward(m, s.audio, s.visual);
    for (std::size_t i = 0; i < bank.dim(); ++i) {
      EXPECT_EQ(bank.audio(i, k), t.f_a[i]);
      EXPECT_EQ(bank.visual(i, k), t.f_v[i]);
    }
  }
  EXPECT_EQ(build_bank(m, d.train, 10, 3, 3), bank);
  EXPECT_NE(build_bank(m, d.train, 10, 4).source_ids, bank.source_ids);
  EXPECT_EQ(build_bank(m, d.train, d.train.size(), 3).size(), d.train.size());
  EXPECT_THROW(build_bank(m, d.train, d.train.size() + 1, 3), SpecError);
  EXPECT_THROW(build_bank(m, d.train, 0, 3), SpecError);
}

TEST(Bank, NormalizeColumns) {
  Matrix a(2, 3);
  a(0, 0) = 3.0;
  a(1, 0) = 4.0;
  a(0, 2) = -2.0;
  MemoryBank bank{a, a, {0, 1, 2}};
  MemoryBank n = normalize_columns(bank);
  EXPECT_DOUBLE_EQ(n.audio(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(n.audio(1, 0), 0.8);
  EXPECT_EQ(n.audio(0, 1), 0.0);  // zero column kept
  EXPECT_EQ(n.visual(0, 2), -1.0);
  EXPECT_EQ(n.source_ids, bank.source_ids);
}

TEST(Bank, FileRoundTripAndCorruption) {
  Rng rng(8);
  MemoryBank bank{random_matrix(5, 7, rng), random_matrix(5, 7, rng), {4, 8, 15, 16, 23, 42, 1}};
  const auto path = temp_file("bank.bin");
  save(bank, path);
  EXPECT_EQ(load_bank(path), bank);
  EXPECT_EQ(std::filesystem::file_size(path), 4 + 2 + 4 + 4 + 7 * (2 * 5 * 8) + 7 * 4u);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  EXPECT_THROW(load_bank(path), FormatError);
  save(bank, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 2);
  EXPECT_THROW(load_bank(path), FormatError);
  EXPECT_THROW(load_bank(temp_file("missing.bin")), IoError);
  std::filesystem::remove(path);

  MemoryBank broken = bank;
  broken.source_ids.pop_back();
  EXPECT_THROW(broken.validate(), DimensionError);
}

TEST(DefendedTarget, GradientsFromModelPredictionsThroughDenoiser) {
  Dataset d = generate(matching_data());
  ModelState m = oracle::random_model(small_arch(), 9);
  MemoryBank bank = build_bank(m, d.train, 12, 1);
  IstaConfig c;
  DefendedTarget defended(m, bank, c, LossMode::CE);
  ModelTarget plain(m, LossMode::CE);
  for (const auto& s : d.test.samples) {
    const ObjectiveEval a = defended.evaluate(s.audio, s.visual, s.label);
    const ObjectiveEval b = plain.evaluate(s.audio, s.visual, s.label);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.audio, b.audio);
    EXPECT_EQ(a.visual, b.visual);
    EXPECT_EQ(defended.predict(s.audio, s.visual),
              argmax(defended_predict(m, bank, s.audio, s.visual, c)));
  }

  // With lambda = 0 and the input inside the bank's span the reconstruction
  // is exact, so the defended and plain models agree.
  const auto& s = d.train.samples.at(bank.source_ids[0]);
  IstaConfig exact = tight();
  exact.lambda_a = exact.lambda_v = 0.0;
  const Vector p = defended_predict(m, bank, s.audio, s.visual, exact);
  const Vector q = forward(m, s.audio, s.visual).probs;
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-5);
}

TEST(SoftThreshold, HandArithmeticAndContraction) {
  const Vector out = soft_threshold(Vector{0.5, -0.2}, 0.3);
  EXPECT_DOUBLE_EQ(out[0], 0.2);
  EXPECT_EQ(out[1], 0.0);
  Rng rng(10);
  const Vector x = random_vector(50, rng);
  const Vector y = soft_threshold(x, 0.4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
}

TEST(Ista, RecoversScaledBankColumn) {
  Rng rng(11);
  const Matrix m = random_matrix(8, 16, rng);
  Vector f(8);
  for (std::size_t i = 0; i < 8; ++i) f[i] = 50.0 * m(i, 5);
  IstaConfig c = tight();
  const LassoResult r = ista_lasso(m, f, 1e-6, c);
  Vector residual = f;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 16; ++k) residual[i] -= m(i, k) * r.alpha[k];
  EXPECT_LT(l2_norm(residual) / l2_norm(f), 1e-3);
}

TEST(Ista, SingleColumnClosedForm) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = random_matrix(6, 1, rng);
    const Vector f = random_vector(6, rng);
    const double lambda = 0.3 * trial;
    double mf = 0.0, mm = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      mf += m(i, 0) * f[i];
      mm += m(i, 0) * m(i, 0);
    }
    // argmin |f - m a|^2 + lambda |a| = S(m.f, lambda/2) / |m|^2
    const double want = soft_threshold(Vector{mf}, lambda / 2.0)[0] / mm;
    // Objective-decrease stopping resolves alpha to about sqrt(machine eps).
    EXPECT_NEAR(ista_lasso(m, f, lambda, tight()).alpha[0], want, 1e-8);
  }
}

TEST(Denoise, ZeroInputAndSaturatedLambda) {
  Rng rng(13);
  MemoryBank bank{random_matrix(5, 9, rng), random_matrix(5, 9, rng), std::vector<std::uint32_t>(9)};
  const DenoisedPair zero = denoise(bank, Vector(5, 0.0), Vector(5, 0.0), IstaConfig{});
  EXPECT_EQ(zero.audio.alpha, Vector(9, 0.0));
  EXPECT_EQ(zero.visual.f_used, Vector(5, 0.0));

  const Vector f_a = random_vector(5, rng);
  const Vector f_v = random_vector(5, rng);
  IstaConfig huge;
  huge.lambda_a = huge.lambda_v = 1e9;
  const DenoisedPair d = denoise(bank, f_a, f_v, huge);
  EXPECT_EQ(d.audio.f_star, Vector(5, 0.0));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(d.audio.f_used[i], 0.5 * f_a[i]);
    EXPECT_EQ(d.visual.f_used[i], 0.5 * f_v[i]);
  }
}

TEST(Denoise, InSpanFeatureIsPreserved) {
  Rng rng(14);
  MemoryBank bank{random_matrix(5, 9, rng), random_matrix(5, 9, rng), std::vector<std::uint32_t>(9)};
  Vector f_a(5), f_v(5);
  for (std::size_t i = 0; i < 5; ++i) {
    f_a[i] = bank.audio(i, 2);
    f_v[i] = bank.visual(i, 7);
  }
  IstaConfig c = tight();
  c.lambda_a = c.lambda_v = 1e-6;
  const DenoisedPair d = denoise(bank, f_a, f_v, c);
  Vector diff(5);
  for (std::size_t i = 0; i < 5; ++i) diff[i] = d.audio.f_used[i] - f_a[i];
  EXPECT_LT(l2_norm(diff) / l2_norm(f_a), 1e-3);
  for (std::size_t i = 0; i < 5; ++i) diff[i] = d.visual.f_used[i] - f_v[i];
  EXPECT_LT(l2_norm(diff) / l2_norm(f_v), 1e-3);
}

TEST(DefendedPredict, SaturatedLambdaHalvesFeatures) {
  Dataset d = generate(matching_data());
  ModelState m = oracle::random_model(small_arch(), 15);
  MemoryBank bank = build_bank(m, d.train, 6, 2);
  IstaConfig huge;
  huge.lambda_a = huge.lambda_v = 1e9;
  for (const auto& s : d.test.samples) {
    const ForwardTrace t = forward(m, s.audio, s.visual);
    Vector half_a = t.f_a, half_v = t.f_v;
    for (double& v : half_a) v *= 0.5;
    for (double& v : half_v) v *= 0.5;
    EXPECT_EQ(defended_predict(m, bank, s.audio, s.visual, huge),
              forward_from_features(m, half_a, half_v).probs);
  }
}
