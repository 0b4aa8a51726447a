#include <gtest/gtest.h>

#include "mmrobust/dataset.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/model.hpp"
#include "mmrobust/train.hpp"

using namespace mmrobust;

namespace {

DatasetSpec toy_spec(double sigma) {
  DatasetSpec s;
  s.audio_dim = 16;
  s.patch_dim = 8;
  s.grid_side = 2;
  s.samples_per_class = 12;
  s.noise_sigma = sigma;
  return s;
}

ArchSpec arch_for(const DatasetSpec& s) {
  ArchSpec a;
  a.audio_dim = s.audio_dim;
  a.patch_dim = s.patch_dim;
  a.grid_side = s.grid_side;
  a.num_classes = s.num_classes;
  a.hidden_dim = 16;
  a.embed_dim = 8;
  return a;
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParameters) {
  DatasetSpec s = toy_spec(0.05);
  Dataset d = generate(s);
  ModelState init = init_model(arch_for(s), 1);
  TrainOptions o;
  o.learning_rate = 0.0;
  o.epochs = 3;
  EXPECT_EQ(train(init, d.train, d.val, o).model, init);
}

TEST(Train, NoiselessDataIsFitAndLossDecreases) {
  DatasetSpec s;
  s.noise_sigma = 0.0;
  Dataset d = generate(s);
  TrainOptions o;
  o.epochs = 30;
  TrainResult r = train(init_model(ArchSpec{}, 2), d.train, d.val, o);
  EXPECT_EQ(accuracy(r.model, d.train), 100.0);
  ASSERT_EQ(r.epoch_loss.size(), 30u);
  for (std::size_t e = 1; e < r.epoch_loss.size(); ++e)
    EXPECT_LE(r.epoch_loss[e], r.epoch_loss[e - 1] + 1e-6) << "epoch " << e;
}

TEST(Train, BestValidationCheckpointIsReturned) {
  DatasetSpec s = toy_spec(0.05);
  Dataset d = generate(s);
  TrainOptions o;
  o.epochs = 8;
  TrainResult r = train(init_model(arch_for(s), 3), d.train, d.val, o);
  ASSERT_EQ(r.val_accuracy.size(), 8u);
  const double best = *std::max_element(r.val_accuracy.begin(), r.val_accuracy.end());
  EXPECT_EQ(r.val_accuracy[r.best_epoch], best);
  for (std::size_t e = r.best_epoch + 1; e < r.val_accuracy.size(); ++e) EXPECT_LT(r.val_accuracy[e], best);
  EXPECT_EQ(accuracy(r.model, d.val), best);
}

TEST(Train, DeterministicAcrossRunsAndThreadCounts) {
  DatasetSpec s = toy_spec(0.05);
  Dataset d = generate(s);
  TrainOptions o;
  o.epochs = 4;
  o.batch_size = 7;
  ArchSpec a = arch_for(s);
  a.pooling = Pooling::Attention;
  a.fusion = FusionKind::FiLM;
  TrainResult one = train(init_model(a, 4), d.train, d.val, o);
  o.threads = 3;
  TrainResult three = train(init_model(a, 4), d.train, d.val, o);
  EXPECT_EQ(one.model, three.model);
  EXPECT_EQ(one.epoch_loss, three.epoch_loss);
  o.seed = 8;
  EXPECT_NE(train(init_model(a, 4), d.train, d.val, o).model, one.model);
}

TEST(Train, UnimodalAudioBeatsUnimodalVisualWhenVisualIsNoise) {
  DatasetSpec s;
  s.cross_modal_corruption = 1.0;  // visual class drawn independently of the label
  Dataset d = generate(s);
  TrainOptions o;
  o.epochs = 20;
  ArchSpec a;
  TrainResult ua = train(unimodal_variant(a, Modalities::AudioOnly, 5), d.train, d.val, o);
  TrainResult uv = train(unimodal_variant(a, Modalities::VisualOnly, 5), d.train, d.val, o);
  EXPECT_GT(accuracy(ua.model, d.test), accuracy(uv.model, d.test));
}

TEST(Train, RejectsBadInputs) {
  DatasetSpec s = toy_spec(0.05);
  Dataset d = generate(s);
  ModelState m = init_model(arch_for(s), 6);
  TrainOptions o;
  DatasetSplit empty = d.val;
  empty.samples.clear();
  EXPECT_THROW(train(m, empty, d.val, o), SpecError);
  EXPECT_THROW(train(m, d.train, empty, o), SpecError);
  o.batch_size = 0;
  EXPECT_THROW(train(m, d.train, d.val, o), SpecError);

  ArchSpec wrong = arch_for(s);
  wrong.audio_dim = 17;
  EXPECT_THROW(train(init_model(wrong, 1), d.train, d.val, TrainOptions{}), DimensionError);
}
