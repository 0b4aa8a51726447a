#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mmrobust/dataset.hpp"
#include "mmrobust/errors.hpp"
#include "oracles.hpp"

using namespace mmrobust;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mmrobust_test_dataset_" + name);
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DatasetSpec small_spec() {
  DatasetSpec s;
  s.audio_dim = 12;
  s.patch_dim = 6;
  s.samples_per_class = 10;
  return s;
}

}  // namespace

TEST(Generate, Deterministic) {
  Dataset a = generate(small_spec());
  Dataset b = generate(small_spec());
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
  DatasetSpec other = small_spec();
  other.seed = 8;
  EXPECT_NE(generate(other).train, a.train);
}

TEST(Generate, NoiselessSamplesAreCopiesOfPrototypes) {
  DatasetSpec s = small_spec();
  s.noise_sigma = 0.0;
  Dataset d = generate(s);
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& x : split->samples) {
      for (std::size_t i = 0; i < s.audio_dim; ++i) EXPECT_EQ(x.audio[i], d.audio_prototypes(x.label, i));
      for (std::size_t p = 0; p < s.num_patches(); ++p)
        for (std::size_t i = 0; i < s.patch_dim; ++i)
          EXPECT_EQ(x.visual(p, i), p == x.sounding_patch ? d.visual_prototypes(x.label, i) : 0.0);
      EXPECT_EQ(oracle::nearest_prototype(x, d.audio_prototypes, d.visual_prototypes), x.label);
    }
  }
}

TEST(Generate, NearestPrototypeOracleOnNoisyData) {
  DatasetSpec s;  // 4 classes, sigma 0.05
  Dataset d = generate(s);
  std::size_t correct = 0;
  for (const auto& x : d.test.samples)
    correct += oracle::nearest_prototype(x, d.audio_prototypes, d.visual_prototypes) == x.label;
  EXPECT_GE(100.0 * static_cast<double>(correct) / static_cast<double>(d.test.size()), 99.0);
}

TEST(Generate, RangesLabelsAndPatches) {
  DatasetSpec s = small_spec();
  s.noise_sigma = 0.8;  // large enough to exercise both clamps
  Dataset d = generate(s);
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    ASSERT_EQ(split->size(), s.num_classes * s.samples_per_class);
    std::vector<std::size_t> per_class(s.num_classes, 0);
    bool hit_audio_clamp = false;
    for (const auto& x : split->samples) {
      ++per_class[x.label];
      EXPECT_LT(x.sounding_patch, s.num_patches());
      for (double v : x.audio) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
        hit_audio_clamp |= v == -1.0 || v == 1.0;
      }
      for (double v : x.visual.flat()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
    EXPECT_TRUE(hit_audio_clamp);
    for (std::size_t c : per_class) EXPECT_EQ(c, s.samples_per_class);
  }
}

TEST(Generate, PrototypesRespectSeparationFloor) {
  for (std::size_t dim : {4u, 8u, 32u}) {
    DatasetSpec s = small_spec();
    s.audio_dim = dim;
    s.patch_dim = dim;
    s.num_classes = 6;
    Dataset d = generate(s);
    const double floor = 0.5 * std::sqrt(static_cast<double>(dim)) * 0.3;
    for (const Matrix* protos : {&d.audio_prototypes, &d.visual_prototypes}) {
      for (std::size_t a = 0; a < protos->rows(); ++a) {
        for (std::size_t b = 0; b < a; ++b) {
          double dist = 0.0;
          for (std::size_t i = 0; i < dim; ++i)
            dist += (protos->row(a)[i] - protos->row(b)[i]) * (protos->row(a)[i] - protos->row(b)[i]);
          EXPECT_GE(std::sqrt(dist), floor);
        }
      }
    }
  }
}

TEST(Generate, CorruptionKeepsAudioLabel) {
  DatasetSpec s = small_spec();
  s.noise_sigma = 0.0;
  s.cross_modal_corruption = 1.0;
  s.samples_per_class = 40;
  Dataset d = generate(s);
  std::size_t mismatched = 0;
  for (const auto& x : d.train.samples) {
    for (std::size_t i = 0; i < s.audio_dim; ++i) ASSERT_EQ(x.audio[i], d.audio_prototypes(x.label, i));
    bool same = true;
    for (std::size_t i = 0; i < s.patch_dim; ++i)
      same &= x.visual(x.sounding_patch, i) == d.visual_prototypes(x.label, i);
    mismatched += !same;
  }
  // Resampling uniformly over 4 classes disagrees about 3/4 of the time.
  EXPECT_GT(mismatched, d.train.size() / 2);
  EXPECT_LT(mismatched, d.train.size());
}

TEST(Generate, InvalidSpecs) {
  auto bad = [](auto mutate) {
    DatasetSpec s = small_spec();
    mutate(s);
    EXPECT_THROW(generate(s), SpecError);
  };
  bad([](DatasetSpec& s) { s.num_classes = 1; });
  bad([](DatasetSpec& s) { s.audio_dim = 0; });
  bad([](DatasetSpec& s) { s.patch_dim = 0; });
  bad([](DatasetSpec& s) { s.grid_side = 0; });
  bad([](DatasetSpec& s) { s.samples_per_class = 0; });
  bad([](DatasetSpec& s) { s.noise_sigma = -0.1; });
  bad([](DatasetSpec& s) { s.cross_modal_corruption = 1.5; });
}

TEST(DatasetFile, RoundTripIsExact) {
  Dataset d = generate(small_spec());
  const auto path = temp_file("rt.bin");
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    save(*split, path);
    EXPECT_EQ(load_split(path), *split);
  }
  std::filesystem::remove(path);
}

TEST(DatasetFile, HeaderLayout) {
  DatasetSpec s = small_spec();
  s.grid_side = 3;
  s.patch_dim = 8;
  Dataset d = generate(s);
  const auto path = temp_file("hdr.bin");
  save(d.test, path);
  const auto bytes = read_bytes(path);
  ASSERT_GE(bytes.size(), 6u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MMRB");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version, little-endian u16
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);

  // Header: magic 4, version 2, five u32 fields 20, sigma and corruption 16,
  // seed 8, split tag 1, count 4.
  const std::size_t header = 4 + 2 + 20 + 16 + 8 + 1 + 4;
  const std::size_t per_sample = 8 * (s.audio_dim + 9 * 8) + 4 + 4;
  EXPECT_EQ(bytes.size(), header + d.test.size() * per_sample);

  DatasetSplit loaded = load_split(path);
  EXPECT_EQ(loaded.samples.front().visual.rows(), 9u);
  EXPECT_EQ(loaded.samples.front().visual.cols(), 8u);
  EXPECT_EQ(loaded.tag, SplitTag::Test);
  std::filesystem::remove(path);
}

TEST(DatasetFile, CorruptMagicAndTruncation) {
  Dataset d = generate(small_spec());
  const auto path = temp_file("bad.bin");
  save(d.val, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(1);
    f.put('Z');
  }
  EXPECT_THROW(load_split(path), FormatError);

  save(d.val, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  EXPECT_THROW(load_split(path), FormatError);

  save(d.val, path);
  {
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f.put('\0');
  }
  EXPECT_THROW(load_split(path), FormatError);

  EXPECT_THROW(load_split(temp_file("does_not_exist.bin")), IoError);
  std::filesystem::remove(path);
}
