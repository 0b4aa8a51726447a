#pragma once

// Robustness evaluation: clean and attacked accuracy, Avg and RI, the
// unimodal dead-branch check, attention localization, and feature export.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mmrobust/attacks.hpp"
#include "mmrobust/dataset.hpp"
#include "mmrobust/defense.hpp"
#include "mmrobust/model.hpp"

namespace mmrobust {

/// Per-slot budgets for the three attacked columns.
struct BudgetPlan {
  double audio_only = 0.06;    ///< eps_a when only audio is attacked
  double visual_only = 0.06;   ///< eps_v when only visual is attacked
  double joint_audio = 0.06;   ///< eps_a of the joint attack
  double joint_visual = 0.06;  ///< eps_v of the joint attack

  static BudgetPlan uniform(double eps) { return {eps, eps, eps, eps}; }
  /// 0.12 for single-modality attacks, 0.06 for the joint attack.
  static BudgetPlan table1() { return {0.12, 0.12, 0.06, 0.06}; }
  static BudgetPlan table4() { return uniform(0.06); }

  friend bool operator==(const BudgetPlan&, const BudgetPlan&) = default;
};

struct DefenseConfig {
  std::string tag = "none";
  /// Inference-time denoiser; null means predictions use the plain model.
  const MemoryBank* bank = nullptr;
  IstaConfig ista;
};

struct EvalReport {
  std::string model_tag = "model";
  std::string defense_tag = "none";
  AttackMethod method = AttackMethod::FGSM;
  BudgetPlan budgets;
  std::size_t steps = 10;
  double momentum = 1.0;
  std::optional<double> step_size;
  LossMode loss_mode = LossMode::CE;
  std::uint64_t seed = 7;

  double acc_clean_av = 0.0;  ///< percent, 2 decimals
  double acc_attack_a = 0.0;
  double acc_attack_v = 0.0;
  double acc_attack_av = 0.0;
  double avg = 0.0;
  std::optional<double> ri;
  std::optional<double> localization_acc;

  /// True when two reports were produced under the same attack settings.
  bool same_attack(const EvalReport& other) const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Half-up rounding to 2 decimals.
double round2(double percent);

/// (a + v + av) / 3 rounded to 2 decimals. Inputs must lie in [0, 100].
double avg_metric(double a, double v, double av);

/// (clean_m + Avg_m) - (clean_n + Avg_n), rounded to 2 decimals. Throws
/// SpecError when the reports were produced under different attacks.
double ri_metric(const EvalReport& defense, const EvalReport& base);

/// Clean accuracy plus accuracy under audio-only, visual-only and joint
/// attacks. Attack gradients always come from the undefended model.
EvalReport evaluate(const ModelState& m, const DefenseConfig& defense, const DatasetSplit& test,
                    const AttackSpec& attack, const BudgetPlan& budgets,
                    const EvalReport* base = nullptr, std::size_t threads = 1,
                    std::string model_tag = "model");

/// For unimodal models, attacks on the severed modality must leave accuracy
/// exactly at the clean value. Throws InvariantViolation otherwise; no-op
/// for audio-visual models.
void check_unimodal_invariance(const ModelState& m, const EvalReport& report);

/// Accuracy (percent, unrounded) under joint attacks with eps_a = eps_v = eps
/// for each eps in the grid.
std::vector<double> accuracy_sweep(const ModelState& m, const DefenseConfig& defense,
                                   const DatasetSplit& test, const AttackSpec& attack,
                                   const std::vector<double>& eps_grid, std::size_t threads = 1);

/// Attack strengths in the per-mille style of accuracy-vs-strength plots.
std::vector<double> default_eps_grid();

/// Percent of samples whose attention argmax is the sounding patch; with an
/// attack spec, measured on the adversarial inputs. Requires attention pooling.
double localization_eval(const ModelState& m, const DatasetSplit& split,
                         const std::optional<AttackSpec>& attack = std::nullopt,
                         std::size_t threads = 1);

/// CSV of per-sample audio and visual embeddings (two rows per sample).
void export_features(const ModelState& m, const DatasetSplit& split,
                     const std::filesystem::path& path,
                     const std::optional<AttackSpec>& attack = std::nullopt,
                     std::size_t threads = 1);

std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);
void write_report_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
std::vector<EvalReport> read_report_csv(const std::filesystem::path& path);
/// Aligned plain-text table.
std::string format_report_table(const std::vector<EvalReport>& reports);

struct SeedSummary {
  std::size_t runs = 0;
  double clean_mean = 0.0, clean_sd = 0.0;
  double avg_mean = 0.0, avg_sd = 0.0;
};

/// Mean and sample standard deviation across per-seed reports.
SeedSummary summarize(const std::vector<EvalReport>& reports);

}  // namespace mmrobust
