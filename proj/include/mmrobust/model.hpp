#pragma once

// Two-branch audio-visual classifier.
//
//   audio  x_a --MLP--> f_a ----------------------.
//                                                 fuse --> head --> softmax
//   visual X_v --per-patch MLP--> F_v --pool--> f_v
//
// Pooling is either an element-wise max over patches or audio-guided
// attention w = softmax(F_v f_a), f_v = sum_i w_i F_v[i].

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmrobust/matrix.hpp"

namespace mmrobust {

enum class FusionKind : std::uint8_t { Sum = 0, Concat = 1, FiLM = 2, GatedSum = 3, GatedConcat = 4 };
enum class Pooling : std::uint8_t { Max = 0, Attention = 1 };
/// Which branches feed the fusion. A severed branch contributes a zero vector.
enum class Modalities : std::uint8_t { AudioVisual = 0, AudioOnly = 1, VisualOnly = 2 };
enum class LossMode : std::uint8_t { CE = 0, CEPlusMinSim = 1, CEPlusMaxSim = 2 };

std::string to_string(FusionKind kind);
std::string to_string(Pooling pooling);
std::string to_string(Modalities modalities);
std::string to_string(LossMode mode);
FusionKind parse_fusion(const std::string& text);
Pooling parse_pooling(const std::string& text);
Modalities parse_modalities(const std::string& text);
LossMode parse_loss_mode(const std::string& text);

inline constexpr FusionKind kAllFusions[] = {FusionKind::Sum, FusionKind::Concat, FusionKind::FiLM,
                                             FusionKind::GatedSum, FusionKind::GatedConcat};

struct ArchSpec {
  std::size_t audio_dim = 64;
  std::size_t patch_dim = 16;
  std::size_t grid_side = 3;
  std::size_t hidden_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t num_classes = 4;
  FusionKind fusion = FusionKind::Concat;
  Pooling pooling = Pooling::Max;
  Modalities modalities = Modalities::AudioVisual;

  std::size_t num_patches() const { return grid_side * grid_side; }
  /// embed_dim for Sum/FiLM/GatedSum, 2*embed_dim for Concat/GatedConcat.
  std::size_t fused_dim() const;
  void validate() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// All trainable tensors. Biases are 1 x n matrices; the FiLM pair is empty
/// unless fusion == FiLM.
struct ParameterSet {
  Matrix audio_w1, audio_b1, audio_w2, audio_b2;
  Matrix visual_w1, visual_b1, visual_w2, visual_b2;
  Matrix film_w, film_b;
  Matrix head_w, head_b;

  /// Every tensor in checkpoint order.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
  /// Total scalar count.
  std::size_t count() const;

  /// Same shapes, all zeros.
  ParameterSet zeros_like() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

/// Expected parameter shapes for an architecture.
ParameterSet parameter_shapes(const ArchSpec& arch);

struct ModelState {
  ArchSpec arch;
  ParameterSet params;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Uniform +-1/sqrt(fan_in) initialization, deterministic in seed.
ModelState init_model(const ArchSpec& arch, std::uint64_t seed);
/// Wraps existing parameters; throws DimensionError on any shape mismatch
/// (including a head whose input width disagrees with the fusion).
ModelState make_model(const ArchSpec& arch, ParameterSet params);

/// Unimodal baseline: same architecture with one branch severed.
ModelState unimodal_variant(ArchSpec arch, Modalities keep, std::uint64_t seed);

struct ForwardTrace {
  Matrix audio_pre;        ///< 1 x hidden, before relu
  Matrix audio_hidden;     ///< 1 x hidden
  Vector f_a;              ///< d
  Matrix visual_pre;       ///< patches x hidden
  Matrix visual_hidden;    ///< patches x hidden
  Matrix patch_features;   ///< patches x d
  Vector f_v;              ///< pooled/attended, d
  std::vector<std::size_t> pool_argmax;  ///< max pooling only
  Vector attention_logits; ///< attention pooling only
  Vector attention;        ///< attention pooling only
  Vector film_scale;       ///< FiLM only
  Vector gate_a, gate_v;   ///< sigmoid(f_a), sigmoid(f_v); gated fusions only
  Vector fused;
  Vector logits;
  Vector probs;
};

/// Fuses two d-dimensional features. film_w/film_b are required iff kind == FiLM.
Vector fuse(FusionKind kind, std::span<const double> f_a, std::span<const double> f_v,
            const Matrix* film_w = nullptr, const Matrix* film_b = nullptr);

ForwardTrace forward(const ModelState& m, std::span<const double> audio, const Matrix& visual);

/// Runs fusion and head on given features (used after feature denoising).
ForwardTrace forward_from_features(const ModelState& m, std::span<const double> f_a,
                                   std::span<const double> f_v);

std::size_t argmax(std::span<const double> v);
std::size_t predict(const ModelState& m, std::span<const double> audio, const Matrix& visual);

struct LossValue {
  double value = 0.0;
  double cross_entropy = 0.0;
  double similarity = 0.0;  ///< cos(f_a, f_v)
  ForwardTrace trace;
};

LossValue loss(const ModelState& m, std::span<const double> audio, const Matrix& visual,
               std::size_t label, LossMode mode);

struct InputGradients {
  Vector audio;
  Matrix visual;
  double loss = 0.0;
};

struct Gradients {
  ParameterSet params;
  InputGradients inputs;
};

/// Gradient of the loss w.r.t. both raw inputs in one backward pass.
InputGradients input_gradients(const ModelState& m, std::span<const double> audio,
                               const Matrix& visual, std::size_t label, LossMode mode);

/// Gradients w.r.t. parameters and inputs.
Gradients gradients(const ModelState& m, std::span<const double> audio, const Matrix& visual,
                    std::size_t label, LossMode mode);

inline constexpr char kCheckpointMagic[] = "MMRM";
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save(const ModelState& m, const std::filesystem::path& path);
ModelState load_model(const std::filesystem::path& path);

}  // namespace mmrobust
