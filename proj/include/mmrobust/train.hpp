#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mmrobust/dataset.hpp"
#include "mmrobust/model.hpp"

namespace mmrobust {

struct TrainOptions {
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr_decay = 0.1;
  std::size_t decay_every = 20;
  LossMode loss = LossMode::CE;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
};

struct TrainResult {
  ModelState model;                 ///< parameters from the best validation epoch
  std::vector<double> epoch_loss;   ///< mean training loss per epoch
  std::vector<double> val_accuracy; ///< percent, per epoch
  std::size_t best_epoch = 0;
};

/// Minibatch SGD with momentum and step learning-rate decay. The shuffle
/// stream is seeded from opts.seed, so results are reproducible for any
/// thread count.
TrainResult train(ModelState init, const DatasetSplit& train_split, const DatasetSplit& val_split,
                  const TrainOptions& opts);

/// Clean accuracy in percent (unrounded).
double accuracy(const ModelState& m, const DatasetSplit& split, std::size_t threads = 1);

/// Mean loss over a split.
double mean_loss(const ModelState& m, const DatasetSplit& split, LossMode mode,
                 std::size_t threads = 1);

}  // namespace mmrobust
