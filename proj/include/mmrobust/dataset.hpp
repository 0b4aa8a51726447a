#pragma once

// Seeded synthetic bimodal classification data.
//
// Each sample pairs an audio vector with a G x G grid of visual patches. One
// patch (the "sounding" patch) carries the class's visual prototype; the rest
// hold background noise, clamp(N(0, sigma^2)) per entry. The sounding patch index is ground truth for
// localization and is never used for training.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmrobust/matrix.hpp"

namespace mmrobust {

struct ValueRange {
  double lo;
  double hi;
};

inline constexpr ValueRange kAudioRange{-1.0, 1.0};
inline constexpr ValueRange kVisualRange{0.0, 1.0};
/// Prototype coordinates are drawn uniformly within this distance of the
/// middle of their modality's range.
inline constexpr double kPrototypeHalfWidth = 0.3;

struct DatasetSpec {
  std::size_t num_classes = 4;
  std::size_t audio_dim = 64;
  std::size_t grid_side = 3;
  std::size_t patch_dim = 16;
  std::size_t samples_per_class = 48;
  double noise_sigma = 0.05;
  double cross_modal_corruption = 0.0;
  std::uint64_t seed = 7;

  std::size_t num_patches() const { return grid_side * grid_side; }
  /// Throws SpecError on an invalid field.
  void validate() const;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct BimodalSample {
  Vector audio;          ///< audio_dim entries in kAudioRange
  Matrix visual;         ///< num_patches x patch_dim entries in kVisualRange
  std::uint32_t label = 0;
  std::uint32_t sounding_patch = 0;

  friend bool operator==(const BimodalSample&, const BimodalSample&) = default;
};

enum class SplitTag : std::uint8_t { Train = 0, Val = 1, Test = 2 };

std::string to_string(SplitTag tag);

struct DatasetSplit {
  DatasetSpec spec;
  SplitTag tag = SplitTag::Train;
  std::vector<BimodalSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

struct Dataset {
  DatasetSplit train;
  DatasetSplit val;
  DatasetSplit test;
  /// Class prototypes, row c = class c.
  Matrix audio_prototypes;
  Matrix visual_prototypes;
};

/// Deterministic in spec.seed.
Dataset generate(const DatasetSpec& spec);

inline constexpr char kDatasetMagic[] = "MMRB";
inline constexpr std::uint16_t kDatasetVersion = 1;

void save(const DatasetSplit& split, const std::filesystem::path& path);
/// Throws FormatError on bad magic/version or a truncated file.
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace mmrobust
