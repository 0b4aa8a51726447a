#include "mmrobust/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmrobust/binary_io.hpp"
#include "mmrobust/diffcore.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/parallel.hpp"
#include "mmrobust/random.hpp"

namespace mmrobust {

namespace {

// M alpha
Vector multiply(const Matrix& m, std::span<const double> alpha) {
  Vector out(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), alpha);
  return out;
}

// M^T r
Vector multiply_transpose(const Matrix& m, std::span<const double> r) {
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t k = 0; k < m.cols(); ++k) out[k] += row[k] * r[i];
  }
  return out;
}

DenoiseResult denoise_one(const Matrix& bank, std::span<const double> f, double lambda,
                          const IstaConfig& cfg) {
  LassoResult lasso = ista_lasso(bank, f, lambda, cfg);
  DenoiseResult out;
  out.f_star = multiply(bank, lasso.alpha);
  out.f_used = out.f_star;
  if (cfg.average_with_input) {
    for (std::size_t i = 0; i < f.size(); ++i) out.f_used[i] = 0.5 * (out.f_star[i] + f[i]);
  }
  out.alpha = std::move(lasso.alpha);
  out.objective_trace = std::move(lasso.objective_trace);
  return out;
}

}  // namespace

void MemoryBank::validate() const {
  if (source_ids.empty()) throw SpecError("memory bank: K must be >= 1");
  if (audio.cols() != source_ids.size() || visual.cols() != source_ids.size() ||
      audio.rows() != visual.rows()) {
    throw DimensionError("memory bank: audio " + audio.shape_string() + ", visual " +
                         visual.shape_string() + ", " + std::to_string(source_ids.size()) +
                         " source ids");
  }
  for (const Matrix* m : {&audio, &visual})
    for (double v : m->flat())
      if (!std::isfinite(v)) throw SpecError("memory bank: non-finite entry");
}

MemoryBank build_bank(const ModelState& m, const DatasetSplit& train, std::size_t k,
                      std::uint64_t seed, std::size_t threads) {
  if (k == 0) throw SpecError("build_bank: K must be >= 1");
  if (k > train.size()) {
    throw SpecError("build_bank: K = " + std::to_string(k) + " exceeds training size " +
                    std::to_string(train.size()));
  }
  std::vector<std::uint32_t> ids(train.size());
  std::iota(ids.begin(), ids.end(), std::uint32_t{0});
  Rng rng(derive_seed(seed, 0x42414E4B));
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.index(ids.size() - i)]);
  ids.resize(k);

  const std::size_t d = m.arch.embed_dim;
  MemoryBank bank{Matrix(d, k), Matrix(d, k), ids};
  parallel_for(k, threads, [&](std::size_t col) {
    const auto& s = train.samples[ids[col]];
    const ForwardTrace t = forward(m, s.audio, s.visual);
    for (std::size_t i = 0; i < d; ++i) {
      bank.audio(i, col) = t.f_a[i];
      bank.visual(i, col) = t.f_v[i];
    }
  });
  return bank;
}

MemoryBank normalize_columns(MemoryBank bank) {
  for (Matrix* m : {&bank.audio, &bank.visual}) {
    for (std::size_t k = 0; k < m->cols(); ++k) {
      double norm = 0.0;
      for (std::size_t i = 0; i < m->rows(); ++i) norm += (*m)(i, k) * (*m)(i, k);
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (std::size_t i = 0; i < m->rows(); ++i) (*m)(i, k) /= norm;
    }
  }
  return bank;
}

Vector soft_threshold(std::span<const double> x, double threshold) {
  if (!(threshold >= 0.0)) throw SpecError("soft_threshold: threshold must be >= 0");
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mag = std::max(std::abs(x[i]) - threshold, 0.0);
    out[i] = x[i] < 0.0 ? -mag : mag;
  }
  return out;
}

double lasso_objective(const Matrix& bank, std::span<const double> f, std::span<const double> alpha,
                       double lambda) {
  const Vector recon = multiply(bank, alpha);
  double fit = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) fit += (f[i] - recon[i]) * (f[i] - recon[i]);
  double l1 = 0.0;
  for (double a : alpha) l1 += std::abs(a);
  return fit + lambda * l1;
}

double spectral_norm_squared(const Matrix& bank, std::size_t iterations) {
  // Iterate on M M^T (d x d), which shares its top eigenvalue with M^T M.
  Vector v(bank.rows(), 1.0 / std::sqrt(static_cast<double>(bank.rows())));
  double estimate = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    Vector w = multiply(bank, multiply_transpose(bank, v));
    const double norm = l2_norm(w);
    if (norm == 0.0) return 0.0;
    estimate = dot(v, w);
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / norm;
  }
  return std::max(estimate, dot(v, multiply(bank, multiply_transpose(bank, v))));
}

LassoResult ista_lasso(const Matrix& bank, std::span<const double> f, double lambda,
                       const IstaConfig& cfg) {
  if (bank.empty()) throw SpecError("ista_lasso: empty bank");
  if (f.size() != bank.rows()) {
    throw DimensionError("ista_lasso: feature has " + std::to_string(f.size()) +
                         " entries, bank is " + bank.shape_string());
  }
  if (!(lambda >= 0.0)) throw SpecError("ista_lasso: lambda must be >= 0");

  double step;
  if (cfg.step) {
    step = *cfg.step;
  } else {
    // The smooth term |f - M a|^2 has a 2 sigma_max^2 Lipschitz gradient. The
    // power-iteration estimate approaches sigma_max^2 from below, hence 1.05.
    const double lipschitz = 2.0 * 1.05 * spectral_norm_squared(bank);
    step = lipschitz > 0.0 ? 1.0 / lipschitz : 1.0;
  }
  if (!(step > 0.0)) throw SpecError("ista_lasso: step must be > 0");

  LassoResult out;
  out.alpha.assign(bank.cols(), 0.0);
  double objective = lasso_objective(bank, f, out.alpha, lambda);
  out.objective_trace.push_back(objective);

  Vector candidate(bank.cols());
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    out.iterations = it + 1;
    Vector residual = multiply(bank, out.alpha);
    for (std::size_t i = 0; i < f.size(); ++i) residual[i] -= f[i];
    const Vector grad = multiply_transpose(bank, residual);
    for (std::size_t k = 0; k < candidate.size(); ++k)
      candidate[k] = out.alpha[k] - step * 2.0 * grad[k];
    candidate = soft_threshold(candidate, step * lambda);

    const double next = lasso_objective(bank, f, candidate, lambda);
    if (next > objective) {
      // Step exceeded 1/L (only possible with a user step or a poor estimate).
      step *= 0.5;
      continue;
    }
    out.alpha = candidate;
    out.objective_trace.push_back(next);
    const double decrease = objective - next;
    objective = next;
    if (decrease < cfg.tol) break;
  }
  return out;
}

DenoisedPair denoise(const MemoryBank& bank, std::span<const double> f_a,
                     std::span<const double> f_v, const IstaConfig& cfg) {
  if (f_a.size() != bank.dim() || f_v.size() != bank.dim()) {
    throw DimensionError("denoise: features of width " + std::to_string(f_a.size()) + "/" +
                         std::to_string(f_v.size()) + " vs bank dimension " +
                         std::to_string(bank.dim()));
  }
  return {denoise_one(bank.audio, f_a, cfg.lambda_a, cfg),
          denoise_one(bank.visual, f_v, cfg.lambda_v, cfg)};
}

Vector defended_predict(const ModelState& m, const MemoryBank& bank, std::span<const double> audio,
                        const Matrix& visual, const IstaConfig& cfg) {
  const ForwardTrace t = forward(m, audio, visual);
  const DenoisedPair d = denoise(bank, t.f_a, t.f_v, cfg);
  return forward_from_features(m, d.audio.f_used, d.visual.f_used).probs;
}

ObjectiveEval DefendedTarget::evaluate(std::span<const double> audio, const Matrix& visual,
                                       std::size_t label) const {
  InputGradients g = input_gradients(model_, audio, visual, label, mode_);
  return ObjectiveEval{g.loss, std::move(g.audio), std::move(g.visual)};
}

std::size_t DefendedTarget::predict(std::span<const double> audio, const Matrix& visual) const {
  return argmax(defended_predict(model_, bank_, audio, visual, cfg_));
}

void save(const MemoryBank& bank, const std::filesystem::path& path) {
  bank.validate();
  io::Writer w;
  w.magic(std::string_view(kBankMagic, 4));
  w.u16(kBankVersion);
  w.u32(io::checked_u32(bank.dim(), "bank dimension"));
  w.u32(io::checked_u32(bank.size(), "bank size"));
  for (std::size_t k = 0; k < bank.size(); ++k) {
    for (std::size_t i = 0; i < bank.dim(); ++i) w.f64(bank.audio(i, k));
    for (std::size_t i = 0; i < bank.dim(); ++i) w.f64(bank.visual(i, k));
  }
  for (auto id : bank.source_ids) w.u32(id);
  w.save(path);
}

MemoryBank load_bank(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, "memory bank " + path.string());
  r.expect_magic(std::string_view(kBankMagic, 4));
  const auto version = r.u16();
  if (version != kBankVersion)
    throw FormatError("memory bank " + path.string() + ": unsupported version " +
                      std::to_string(version));
  const std::size_t d = r.u32();
  const std::size_t k = r.u32();
  if (d == 0 || k == 0) throw FormatError("memory bank " + path.string() + ": empty bank");
  MemoryBank bank{Matrix(d, k), Matrix(d, k), std::vector<std::uint32_t>(k)};
  for (std::size_t col = 0; col < k; ++col) {
    for (std::size_t i = 0; i < d; ++i) bank.audio(i, col) = r.f64();
    for (std::size_t i = 0; i < d; ++i) bank.visual(i, col) = r.f64();
  }
  for (auto& id : bank.source_ids) id = r.u32();
  r.expect_end();
  return bank;
}

}  // namespace mmrobust
