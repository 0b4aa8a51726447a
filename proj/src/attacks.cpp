#include "mmrobust/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmrobust/errors.hpp"
#include "mmrobust/parallel.hpp"
#include "mmrobust/random.hpp"

namespace mmrobust {

namespace {

constexpr double kL1Floor = 1e-12;

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Tightest representable [lo, hi] around c whose distances to c, as computed
// in floating point, do not exceed eps.
std::pair<double, double> ball_bounds(double c, double eps) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  double lo = c - eps;
  double hi = c + eps;
  while (c - lo > eps) lo = std::nextafter(lo, kInf);
  while (hi - c > eps) hi = std::nextafter(hi, -kInf);
  return {lo, hi};
}

void project(std::span<double> x, std::span<const double> center, double eps, ValueRange range) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto [lo, hi] = ball_bounds(center[i], eps);
    x[i] = std::clamp(std::clamp(x[i], lo, hi), range.lo, range.hi);
  }
}

void random_start(std::span<double> x, std::span<const double> center, double eps,
                  ValueRange range, Rng& rng) {
  for (double& v : x) v += rng.uniform(-eps, eps);
  project(x, center, eps, range);
}

void check_shapes(std::span<const double> audio, const Matrix& visual, const ObjectiveEval& ev) {
  if (ev.audio.size() != audio.size() || !ev.visual.same_shape(visual))
    throw DimensionError("attack: objective gradient shape does not match the inputs");
}

AdversarialPair finish(const AttackTarget& target, std::span<const double> audio,
                       const Matrix& visual, std::size_t label, Vector adv_audio,
                       Matrix adv_visual) {
  AdversarialPair out;
  out.achieved_loss = target.evaluate(adv_audio, adv_visual, label).loss;
  out.linf_audio = linf_distance(adv_audio, audio);
  out.linf_visual = linf_distance(adv_visual.flat(), visual.flat());
  out.audio = std::move(adv_audio);
  out.visual = std::move(adv_visual);
  return out;
}

// Shared driver for PGD (momentum unused) and MIM.
AdversarialPair iterate(const AttackTarget& target, std::span<const double> audio,
                        const Matrix& visual, std::size_t label, const AttackSpec& spec,
                        std::uint64_t stream, bool use_momentum) {
  spec.validate();
  Vector x_a(audio.begin(), audio.end());
  Matrix x_v = visual;
  const bool attack_a = spec.eps_a > 0.0;
  const bool attack_v = spec.eps_v > 0.0;
  const double step = spec.resolved_step_size();

  if (spec.random_start) {
    Rng rng(derive_seed(spec.seed, stream));
    if (attack_a) random_start(x_a, audio, spec.eps_a, kAudioRange, rng);
    if (attack_v) random_start(x_v.flat(), visual.flat(), spec.eps_v, kVisualRange, rng);
  }

  Vector g_a(audio.size(), 0.0);
  Vector g_v(visual.size(), 0.0);
  auto accumulate = [&](Vector& g, std::span<const double> grad) {
    double l1 = 0.0;
    for (double v : grad) l1 += std::abs(v);
    l1 = std::max(l1, kL1Floor);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = spec.momentum * g[i] + grad[i] / l1;
  };

  for (std::size_t t = 0; t < spec.steps && (attack_a || attack_v); ++t) {
    const ObjectiveEval ev = target.evaluate(x_a, x_v, label);
    check_shapes(audio, visual, ev);
    if (attack_a) {
      std::span<const double> dir = ev.audio;
      if (use_momentum) {
        accumulate(g_a, ev.audio);
        dir = g_a;
      }
      signed_step(x_a, dir, audio, step, spec.eps_a, kAudioRange);
    }
    if (attack_v) {
      std::span<const double> dir = ev.visual.flat();
      if (use_momentum) {
        accumulate(g_v, ev.visual.flat());
        dir = g_v;
      }
      signed_step(x_v.flat(), dir, visual.flat(), step, spec.eps_v, kVisualRange);
    }
  }
  return finish(target, audio, visual, label, std::move(x_a), std::move(x_v));
}

}  // namespace

std::string to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::FGSM: return "fgsm";
    case AttackMethod::PGD: return "pgd";
    case AttackMethod::MIM: return "mim";
  }
  return "?";
}

AttackMethod parse_attack_method(const std::string& text) {
  for (auto m : {AttackMethod::FGSM, AttackMethod::PGD, AttackMethod::MIM})
    if (to_string(m) == text) return m;
  throw SpecError("unknown attack method '" + text + "'");
}

double AttackSpec::resolved_step_size() const {
  if (step_size) return *step_size;
  return 2.5 * std::max(eps_a, eps_v) / static_cast<double>(std::max<std::size_t>(steps, 1));
}

void AttackSpec::validate() const {
  if (!(eps_a >= 0.0) || !(eps_v >= 0.0) || !std::isfinite(eps_a) || !std::isfinite(eps_v))
    throw SpecError("attack: budgets must be finite and >= 0");
  if (method != AttackMethod::FGSM && steps == 0) throw SpecError("attack: steps must be >= 1");
  if (step_size && !(*step_size > 0.0)) throw SpecError("attack: step_size must be > 0");
  if (!(momentum >= 0.0)) throw SpecError("attack: momentum decay must be >= 0");
}

ObjectiveEval ModelTarget::evaluate(std::span<const double> audio, const Matrix& visual,
                                    std::size_t label) const {
  InputGradients g = input_gradients(model_, audio, visual, label, mode_);
  return ObjectiveEval{g.loss, std::move(g.audio), std::move(g.visual)};
}

std::size_t ModelTarget::predict(std::span<const double> audio, const Matrix& visual) const {
  return mmrobust::predict(model_, audio, visual);
}

void signed_step(std::span<double> x, std::span<const double> direction,
                 std::span<const double> center, double step, double eps, ValueRange range) {
  if (x.size() != direction.size() || x.size() != center.size())
    throw DimensionError("signed_step: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += step * sign_of(direction[i]);
  project(x, center, eps, range);
}

double linf_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("linf_distance: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

AdversarialPair fgsm(const AttackTarget& target, std::span<const double> audio,
                     const Matrix& visual, std::size_t label, const AttackSpec& spec) {
  spec.validate();
  Vector x_a(audio.begin(), audio.end());
  Matrix x_v = visual;
  if (spec.eps_a > 0.0 || spec.eps_v > 0.0) {
    const ObjectiveEval ev = target.evaluate(audio, visual, label);
    check_shapes(audio, visual, ev);
    if (spec.eps_a > 0.0) signed_step(x_a, ev.audio, audio, spec.eps_a, spec.eps_a, kAudioRange);
    if (spec.eps_v > 0.0)
      signed_step(x_v.flat(), ev.visual.flat(), visual.flat(), spec.eps_v, spec.eps_v,
                  kVisualRange);
  }
  return finish(target, audio, visual, label, std::move(x_a), std::move(x_v));
}

AdversarialPair pgd(const AttackTarget& target, std::span<const double> audio,
                    const Matrix& visual, std::size_t label, const AttackSpec& spec,
                    std::uint64_t stream) {
  return iterate(target, audio, visual, label, spec, stream, false);
}

AdversarialPair mim(const AttackTarget& target, std::span<const double> audio,
                    const Matrix& visual, std::size_t label, const AttackSpec& spec,
                    std::uint64_t stream) {
  return iterate(target, audio, visual, label, spec, stream, true);
}

AdversarialPair run_attack(const AttackTarget& target, std::span<const double> audio,
                           const Matrix& visual, std::size_t label, const AttackSpec& spec,
                           std::uint64_t stream) {
  switch (spec.method) {
    case AttackMethod::FGSM: return fgsm(target, audio, visual, label, spec);
    case AttackMethod::PGD: return pgd(target, audio, visual, label, spec, stream);
    case AttackMethod::MIM: return mim(target, audio, visual, label, spec, stream);
  }
  throw SpecError("run_attack: bad method");
}

AdversarialPair run_attack(const ModelState& model, const BimodalSample& sample,
                           const AttackSpec& spec, std::uint64_t stream) {
  return run_attack(ModelTarget(model, spec.loss_mode), sample.audio, sample.visual, sample.label,
                    spec, stream);
}

BatchAttackResult attack_batch(const AttackTarget& target, const DatasetSplit& split,
                               const AttackSpec& spec, std::size_t threads) {
  if (split.empty()) throw SpecError("attack_batch: empty split");
  spec.validate();
  BatchAttackResult out;
  out.pairs.resize(split.size());
  out.predictions.resize(split.size());
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    out.pairs[i] = run_attack(target, s.audio, s.visual, s.label, spec, i);
    out.predictions[i] = target.predict(out.pairs[i].audio, out.pairs[i].visual);
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) correct += out.predictions[i] == split.samples[i].label;
  out.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(split.size());
  return out;
}

BatchAttackResult attack_batch(const ModelState& model, const DatasetSplit& split,
                               const AttackSpec& spec, std::size_t threads) {
  return attack_batch(ModelTarget(model, spec.loss_mode), split, spec, threads);
}

}  // namespace mmrobust
