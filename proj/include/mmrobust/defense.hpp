#pragma once

// Feature denoising with external memory banks.
//
// A possibly corrupted feature f is re-expressed as a sparse combination of
// clean training features: alpha = argmin |f - M alpha|^2 + lambda |alpha|_1,
// solved by ISTA, and f* = M alpha. By default the feature passed on is the
// average of f* and f.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mmrobust/attacks.hpp"
#include "mmrobust/dataset.hpp"
#include "mmrobust/matrix.hpp"
#include "mmrobust/model.hpp"

namespace mmrobust {

struct MemoryBank {
  Matrix audio;   ///< d x K, column k from training sample source_ids[k]
  Matrix visual;  ///< d x K, paired with `audio` column-by-column
  std::vector<std::uint32_t> source_ids;

  std::size_t size() const { return source_ids.size(); }
  std::size_t dim() const { return audio.rows(); }
  void validate() const;

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;
};

struct IstaConfig {
  double lambda_a = 0.1;
  double lambda_v = 0.1;
  std::size_t max_iters = 200;
  /// Unset = 1 / Lipschitz constant of the smooth term's gradient.
  std::optional<double> step;
  /// Stop once the objective decreases by less than this.
  double tol = 1e-6;
  /// Pass (f* + f)/2 on instead of f*.
  bool average_with_input = true;
};

struct LassoResult {
  Vector alpha;
  std::vector<double> objective_trace;  ///< objective at alpha_0 = 0, then after each step
  std::size_t iterations = 0;
};

struct DenoiseResult {
  Vector alpha;
  Vector f_star;  ///< M alpha
  Vector f_used;  ///< (f_star + f_in)/2, or f_star when averaging is off
  std::vector<double> objective_trace;
};

/// Samples k training items without replacement and stores their clean
/// features as paired columns. Throws SpecError if k exceeds the split size.
MemoryBank build_bank(const ModelState& m, const DatasetSplit& train, std::size_t k,
                      std::uint64_t seed, std::size_t threads = 1);

/// Scales every column of both banks to unit l2 norm (zero columns kept).
MemoryBank normalize_columns(MemoryBank bank);

Vector soft_threshold(std::span<const double> x, double threshold);

/// |f - M alpha|^2 + lambda |alpha|_1
double lasso_objective(const Matrix& bank, std::span<const double> f, std::span<const double> alpha,
                       double lambda);

/// Largest eigenvalue of M^T M by power iteration.
double spectral_norm_squared(const Matrix& bank, std::size_t iterations = 30);

LassoResult ista_lasso(const Matrix& bank, std::span<const double> f, double lambda,
                       const IstaConfig& cfg);

struct DenoisedPair {
  DenoiseResult audio;
  DenoiseResult visual;
};

DenoisedPair denoise(const MemoryBank& bank, std::span<const double> f_a,
                     std::span<const double> f_v, const IstaConfig& cfg);

/// Encoders, then denoising of both features, then fusion and head.
/// Returns class probabilities.
Vector defended_predict(const ModelState& m, const MemoryBank& bank, std::span<const double> audio,
                        const Matrix& visual, const IstaConfig& cfg);

/// Gradients come from the undefended model (the denoiser sits outside the
/// attacker's gradient path); predictions go through the denoiser.
class DefendedTarget final : public AttackTarget {
 public:
  DefendedTarget(const ModelState& model, const MemoryBank& bank, const IstaConfig& cfg,
                 LossMode mode)
      : model_(model), bank_(bank), cfg_(cfg), mode_(mode) {}
  ObjectiveEval evaluate(std::span<const double> audio, const Matrix& visual,
                         std::size_t label) const override;
  std::size_t predict(std::span<const double> audio, const Matrix& visual) const override;

 private:
  const ModelState& model_;
  const MemoryBank& bank_;
  IstaConfig cfg_;
  LossMode mode_;
};

inline constexpr char kBankMagic[] = "MMRK";
inline constexpr std::uint16_t kBankVersion = 1;

void save(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);

}  // namespace mmrobust
