#pragma once

// White-box l-infinity attacks on both input modalities.
//
// Every attack ascends one joint objective L(x_a, x_v, y). A modality whose
// budget is zero is never touched. After each step the iterate is projected
// onto the eps-ball around the clean input and clamped to the modality's
// valid range, so the budget holds exactly in floating point.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmrobust/dataset.hpp"
#include "mmrobust/matrix.hpp"
#include "mmrobust/model.hpp"

namespace mmrobust {

enum class AttackMethod : std::uint8_t { FGSM = 0, PGD = 1, MIM = 2 };

std::string to_string(AttackMethod method);
AttackMethod parse_attack_method(const std::string& text);

struct AttackSpec {
  AttackMethod method = AttackMethod::FGSM;
  double eps_a = 0.06;
  double eps_v = 0.06;
  std::size_t steps = 10;
  /// Per-step size; unset means 2.5 * max(eps_a, eps_v) / steps.
  std::optional<double> step_size;
  double momentum = 1.0;
  bool random_start = false;
  LossMode loss_mode = LossMode::CE;
  std::uint64_t seed = 7;

  double resolved_step_size() const;
  void validate() const;

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

/// Loss and input gradients of the objective being ascended.
struct ObjectiveEval {
  double loss = 0.0;
  Vector audio;
  Matrix visual;
};

/// What an attacker needs from a classifier.
class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  virtual ObjectiveEval evaluate(std::span<const double> audio, const Matrix& visual,
                                 std::size_t label) const = 0;
  virtual std::size_t predict(std::span<const double> audio, const Matrix& visual) const = 0;
};

/// Adapts a ModelState and loss mode.
class ModelTarget final : public AttackTarget {
 public:
  ModelTarget(const ModelState& model, LossMode mode) : model_(model), mode_(mode) {}
  ObjectiveEval evaluate(std::span<const double> audio, const Matrix& visual,
                         std::size_t label) const override;
  std::size_t predict(std::span<const double> audio, const Matrix& visual) const override;

 private:
  const ModelState& model_;
  LossMode mode_;
};

struct AdversarialPair {
  Vector audio;
  Matrix visual;
  double achieved_loss = 0.0;
  double linf_audio = 0.0;
  double linf_visual = 0.0;
};

/// Moves x toward x + step*sign(direction), then projects onto the eps-ball
/// around `center` and into `range`. Entries with sign 0 stay put.
void signed_step(std::span<double> x, std::span<const double> direction,
                 std::span<const double> center, double step, double eps, ValueRange range);

/// Largest |a - b|, computed the same way budget checks compute it.
double linf_distance(std::span<const double> a, std::span<const double> b);

AdversarialPair fgsm(const AttackTarget& target, std::span<const double> audio,
                     const Matrix& visual, std::size_t label, const AttackSpec& spec);
AdversarialPair pgd(const AttackTarget& target, std::span<const double> audio,
                    const Matrix& visual, std::size_t label, const AttackSpec& spec,
                    std::uint64_t stream = 0);
AdversarialPair mim(const AttackTarget& target, std::span<const double> audio,
                    const Matrix& visual, std::size_t label, const AttackSpec& spec,
                    std::uint64_t stream = 0);

/// Dispatches on spec.method. `stream` selects the random-start stream.
AdversarialPair run_attack(const AttackTarget& target, std::span<const double> audio,
                           const Matrix& visual, std::size_t label, const AttackSpec& spec,
                           std::uint64_t stream = 0);

/// Convenience overloads attacking a model under spec.loss_mode.
AdversarialPair run_attack(const ModelState& model, const BimodalSample& sample,
                           const AttackSpec& spec, std::uint64_t stream = 0);

struct BatchAttackResult {
  std::vector<AdversarialPair> pairs;
  std::vector<std::size_t> predictions;
  double accuracy = 0.0;  ///< percent, unrounded
};

/// Attacks every sample (sample index = random-start stream) and scores the
/// target on the adversarial inputs.
BatchAttackResult attack_batch(const AttackTarget& target, const DatasetSplit& split,
                               const AttackSpec& spec, std::size_t threads = 1);
BatchAttackResult attack_batch(const ModelState& model, const DatasetSplit& split,
                               const AttackSpec& spec, std::size_t threads = 1);

}  // namespace mmrobust
