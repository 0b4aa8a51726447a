#include "mmrobust/train.hpp"

#include <algorithm>
#include <numeric>

#include "mmrobust/errors.hpp"
#include "mmrobust/parallel.hpp"
#include "mmrobust/random.hpp"

namespace mmrobust {

namespace {

void check_compatible(const ArchSpec& a, const DatasetSpec& s) {
  if (a.audio_dim != s.audio_dim || a.patch_dim != s.patch_dim || a.grid_side != s.grid_side ||
      a.num_classes != s.num_classes) {
    throw DimensionError("dataset dimensions do not match the model architecture");
  }
}

}  // namespace

double accuracy(const ModelState& m, const DatasetSplit& split, std::size_t threads) {
  if (split.empty()) throw SpecError("accuracy: empty split");
  std::vector<char> hit(split.size(), 0);
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    hit[i] = predict(m, s.audio, s.visual) == s.label;
  });
  const auto correct = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.size());
}

double mean_loss(const ModelState& m, const DatasetSplit& split, LossMode mode,
                 std::size_t threads) {
  if (split.empty()) throw SpecError("mean_loss: empty split");
  Vector values(split.size());
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    values[i] = loss(m, s.audio, s.visual, s.label, mode).value;
  });
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

TrainResult train(ModelState model, const DatasetSplit& train_split, const DatasetSplit& val_split,
                  const TrainOptions& opts) {
  if (train_split.empty() || val_split.empty()) throw SpecError("train: empty split");
  if (opts.batch_size == 0) throw SpecError("train: batch_size must be >= 1");
  if (opts.learning_rate < 0.0 || opts.momentum < 0.0) throw SpecError("train: negative rate");
  check_compatible(model.arch, train_split.spec);
  check_compatible(model.arch, val_split.spec);

  TrainResult result;
  result.model = model;
  double best_val = -1.0;

  ParameterSet velocity = model.params.zeros_like();
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(opts.seed, 0x5348));
  double lr = opts.learning_rate;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    if (epoch > 0 && opts.decay_every > 0 && epoch % opts.decay_every == 0) lr *= opts.lr_decay;
    // Fisher-Yates with the portable index draw.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const std::size_t n = end - start;
      std::vector<Gradients> per_sample(n);
      parallel_for(n, opts.threads, [&](std::size_t k) {
        const auto& s = train_split.samples[order[start + k]];
        per_sample[k] = gradients(model, s.audio, s.visual, s.label, opts.loss);
      });
      // Reduce in sample order so the sum is thread-count independent.
      const double scale = 1.0 / static_cast<double>(n);
      std::vector<std::vector<const Matrix*>> grads;
      grads.reserve(n);
      for (const Gradients& g : per_sample) grads.push_back(g.params.tensors());
      auto params = model.params.tensors();
      auto vel = velocity.tensors();
      for (std::size_t t = 0; t < params.size(); ++t) {
        auto pv = params[t]->flat();
        auto vv = vel[t]->flat();
        for (std::size_t j = 0; j < pv.size(); ++j) {
          double grad = 0.0;
          for (const auto& g : grads) grad += g[t]->flat()[j];
          vv[j] = opts.momentum * vv[j] + grad * scale;
          pv[j] -= lr * vv[j];
        }
      }
      for (const Gradients& g : per_sample) epoch_loss += g.inputs.loss;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));

    const double val_acc = accuracy(model, val_split, opts.threads);
    result.val_accuracy.push_back(val_acc);
    if (val_acc >= best_val) {
      best_val = val_acc;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace mmrobust
