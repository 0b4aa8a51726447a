#include "mmrobust/model.hpp"

#include <algorithm>
#include <cmath>

#include "mmrobust/binary_io.hpp"
#include "mmrobust/diffcore.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/random.hpp"

namespace mmrobust {

namespace {

bool has_audio(const ArchSpec& a) { return a.modalities != Modalities::VisualOnly; }
bool has_visual(const ArchSpec& a) { return a.modalities != Modalities::AudioOnly; }
bool is_gated(FusionKind k) { return k == FusionKind::GatedSum || k == FusionKind::GatedConcat; }

void add_into(Vector& acc, std::span<const double> v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

void check_inputs(const ArchSpec& arch, std::span<const double> audio, const Matrix& visual) {
  if (audio.size() != arch.audio_dim || visual.rows() != arch.num_patches() ||
      visual.cols() != arch.patch_dim) {
    throw DimensionError("model input: audio " + std::to_string(audio.size()) + ", visual " +
                         visual.shape_string() + " but architecture expects audio " +
                         std::to_string(arch.audio_dim) + ", visual " +
                         std::to_string(arch.num_patches()) + "x" +
                         std::to_string(arch.patch_dim));
  }
}

template <class E>
E parse_enum(const std::string& text, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (to_string(v) == text) return v;
  throw SpecError(std::string("unknown ") + what + " '" + text + "'");
}

// Fusion + head, filling the corresponding trace fields.
void run_head(const ModelState& m, ForwardTrace& t) {
  const auto& p = m.params;
  const FusionKind kind = m.arch.fusion;
  if (kind == FusionKind::FiLM) {
    t.film_scale = affine_forward(Matrix::row_vector(t.f_a), p.film_w, p.film_b.flat()).data();
  }
  if (is_gated(kind)) {
    t.gate_a = sigmoid(t.f_a);
    t.gate_v = sigmoid(t.f_v);
  }
  switch (kind) {
    case FusionKind::Sum: t.fused = add(t.f_a, t.f_v); break;
    case FusionKind::Concat: t.fused = concat(t.f_a, t.f_v); break;
    case FusionKind::FiLM: t.fused = add(hadamard(t.film_scale, t.f_v), t.f_a); break;
    case FusionKind::GatedSum:
      t.fused = add(hadamard(t.gate_a, t.f_v), hadamard(t.gate_v, t.f_a));
      break;
    case FusionKind::GatedConcat:
      t.fused = concat(hadamard(t.gate_a, t.f_v), hadamard(t.gate_v, t.f_a));
      break;
  }
  t.logits = affine_forward(Matrix::row_vector(t.fused), p.head_w, p.head_b.flat()).data();
  t.probs = softmax(t.logits);
}

void init_uniform(Matrix& m, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : m.flat()) v = rng.uniform(-bound, bound);
}

}  // namespace

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::Sum: return "sum";
    case FusionKind::Concat: return "concat";
    case FusionKind::FiLM: return "film";
    case FusionKind::GatedSum: return "gated-sum";
    case FusionKind::GatedConcat: return "gated-concat";
  }
  return "?";
}

std::string to_string(Pooling pooling) { return pooling == Pooling::Max ? "max" : "attention"; }

std::string to_string(Modalities modalities) {
  switch (modalities) {
    case Modalities::AudioVisual: return "av";
    case Modalities::AudioOnly: return "a";
    case Modalities::VisualOnly: return "v";
  }
  return "?";
}

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::CE: return "ce";
    case LossMode::CEPlusMinSim: return "ce+minsim";
    case LossMode::CEPlusMaxSim: return "ce+maxsim";
  }
  return "?";
}

FusionKind parse_fusion(const std::string& text) {
  return parse_enum(text,
                    {FusionKind::Sum, FusionKind::Concat, FusionKind::FiLM, FusionKind::GatedSum,
                     FusionKind::GatedConcat},
                    "fusion");
}

Pooling parse_pooling(const std::string& text) {
  return parse_enum(text, {Pooling::Max, Pooling::Attention}, "pooling");
}

Modalities parse_modalities(const std::string& text) {
  return parse_enum(text, {Modalities::AudioVisual, Modalities::AudioOnly, Modalities::VisualOnly},
                    "modalities");
}

LossMode parse_loss_mode(const std::string& text) {
  return parse_enum(text, {LossMode::CE, LossMode::CEPlusMinSim, LossMode::CEPlusMaxSim},
                    "loss mode");
}

std::size_t ArchSpec::fused_dim() const {
  return (fusion == FusionKind::Concat || fusion == FusionKind::GatedConcat) ? 2 * embed_dim
                                                                              : embed_dim;
}

void ArchSpec::validate() const {
  if (audio_dim == 0 || patch_dim == 0 || grid_side == 0 || hidden_dim == 0 || embed_dim == 0)
    throw SpecError("architecture: all dimensions must be positive");
  if (num_classes < 2) throw SpecError("architecture: num_classes must be >= 2");
}

std::vector<Matrix*> ParameterSet::tensors() {
  return {&audio_w1,  &audio_b1,  &audio_w2,  &audio_b2, &visual_w1, &visual_b1,
          &visual_w2, &visual_b2, &film_w,    &film_b,   &head_w,    &head_b};
}

std::vector<const Matrix*> ParameterSet::tensors() const {
  return {&audio_w1,  &audio_b1,  &audio_w2,  &audio_b2, &visual_w1, &visual_b1,
          &visual_w2, &visual_b2, &film_w,    &film_b,   &head_w,    &head_b};
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const Matrix* t : tensors()) n += t->size();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet z = *this;
  for (Matrix* t : z.tensors()) std::fill(t->flat().begin(), t->flat().end(), 0.0);
  return z;
}

ParameterSet parameter_shapes(const ArchSpec& a) {
  ParameterSet p;
  p.audio_w1 = Matrix(a.audio_dim, a.hidden_dim);
  p.audio_b1 = Matrix(1, a.hidden_dim);
  p.audio_w2 = Matrix(a.hidden_dim, a.embed_dim);
  p.audio_b2 = Matrix(1, a.embed_dim);
  p.visual_w1 = Matrix(a.patch_dim, a.hidden_dim);
  p.visual_b1 = Matrix(1, a.hidden_dim);
  p.visual_w2 = Matrix(a.hidden_dim, a.embed_dim);
  p.visual_b2 = Matrix(1, a.embed_dim);
  if (a.fusion == FusionKind::FiLM) {
    p.film_w = Matrix(a.embed_dim, a.embed_dim);
    p.film_b = Matrix(1, a.embed_dim);
  }
  p.head_w = Matrix(a.fused_dim(), a.num_classes);
  p.head_b = Matrix(1, a.num_classes);
  return p;
}

ModelState make_model(const ArchSpec& arch, ParameterSet params) {
  arch.validate();
  const ParameterSet expected = parameter_shapes(arch);
  const auto want = expected.tensors();
  const auto have = params.tensors();
  static const char* names[] = {"audio_w1",  "audio_b1",  "audio_w2", "audio_b2",
                                "visual_w1", "visual_b1", "visual_w2", "visual_b2",
                                "film_w",    "film_b",    "head_w",   "head_b"};
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (!want[i]->same_shape(*have[i])) {
      throw DimensionError(std::string("parameter ") + names[i] + " has shape " +
                           have[i]->shape_string() + ", architecture (fusion " +
                           to_string(arch.fusion) + ") requires " + want[i]->shape_string());
    }
  }
  return ModelState{arch, std::move(params)};
}

ModelState init_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  ParameterSet p = parameter_shapes(arch);
  Rng rng(seed);
  init_uniform(p.audio_w1, arch.audio_dim, rng);
  init_uniform(p.audio_b1, arch.audio_dim, rng);
  init_uniform(p.audio_w2, arch.hidden_dim, rng);
  init_uniform(p.audio_b2, arch.hidden_dim, rng);
  init_uniform(p.visual_w1, arch.patch_dim, rng);
  init_uniform(p.visual_b1, arch.patch_dim, rng);
  init_uniform(p.visual_w2, arch.hidden_dim, rng);
  init_uniform(p.visual_b2, arch.hidden_dim, rng);
  if (arch.fusion == FusionKind::FiLM) {
    init_uniform(p.film_w, arch.embed_dim, rng);
    init_uniform(p.film_b, arch.embed_dim, rng);
  }
  init_uniform(p.head_w, arch.fused_dim(), rng);
  init_uniform(p.head_b, arch.fused_dim(), rng);
  return ModelState{arch, std::move(p)};
}

ModelState unimodal_variant(ArchSpec arch, Modalities keep, std::uint64_t seed) {
  if (keep == Modalities::AudioVisual) throw SpecError("unimodal_variant: choose a or v");
  arch.modalities = keep;
  return init_model(arch, seed);
}

Vector fuse(FusionKind kind, std::span<const double> f_a, std::span<const double> f_v,
            const Matrix* film_w, const Matrix* film_b) {
  if (f_a.size() != f_v.size()) {
    throw DimensionError("fuse: f_a has " + std::to_string(f_a.size()) + " entries, f_v has " +
                         std::to_string(f_v.size()));
  }
  if (kind == FusionKind::FiLM && (film_w == nullptr || film_b == nullptr))
    throw SpecError("fuse: FiLM fusion requires its transform parameters");
  switch (kind) {
    case FusionKind::Sum: return add(f_a, f_v);
    case FusionKind::Concat: return concat(f_a, f_v);
    case FusionKind::FiLM: {
      const Vector scale = affine_forward(Matrix::row_vector(f_a), *film_w, film_b->flat()).data();
      return add(hadamard(scale, f_v), f_a);
    }
    case FusionKind::GatedSum:
      return add(hadamard(sigmoid(f_a), f_v), hadamard(sigmoid(f_v), f_a));
    case FusionKind::GatedConcat:
      return concat(hadamard(sigmoid(f_a), f_v), hadamard(sigmoid(f_v), f_a));
  }
  return {};
}

ForwardTrace forward(const ModelState& m, std::span<const double> audio, const Matrix& visual) {
  const ArchSpec& a = m.arch;
  const ParameterSet& p = m.params;
  check_inputs(a, audio, visual);
  ForwardTrace t;

  if (has_audio(a)) {
    t.audio_pre = affine_forward(Matrix::row_vector(audio), p.audio_w1, p.audio_b1.flat());
    t.audio_hidden = relu(t.audio_pre);
    t.f_a = affine_forward(t.audio_hidden, p.audio_w2, p.audio_b2.flat()).data();
  } else {
    t.f_a.assign(a.embed_dim, 0.0);
  }

  if (has_visual(a)) {
    t.visual_pre = affine_forward(visual, p.visual_w1, p.visual_b1.flat());
    t.visual_hidden = relu(t.visual_pre);
    t.patch_features = affine_forward(t.visual_hidden, p.visual_w2, p.visual_b2.flat());
    if (a.pooling == Pooling::Max) {
      MaxPool pooled = max_pool_rows(t.patch_features);
      t.f_v = std::move(pooled.value);
      t.pool_argmax = std::move(pooled.argmax);
    } else {
      const std::size_t n = t.patch_features.rows();
      t.attention_logits.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.attention_logits[i] = dot(t.f_a, t.patch_features.row(i));
      t.attention = softmax(t.attention_logits);
      t.f_v.assign(a.embed_dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = t.patch_features.row(i);
        for (std::size_t j = 0; j < a.embed_dim; ++j) t.f_v[j] += t.attention[i] * row[j];
      }
    }
  } else {
    t.f_v.assign(a.embed_dim, 0.0);
  }

  run_head(m, t);
  return t;
}

ForwardTrace forward_from_features(const ModelState& m, std::span<const double> f_a,
                                   std::span<const double> f_v) {
  if (f_a.size() != m.arch.embed_dim || f_v.size() != m.arch.embed_dim)
    throw DimensionError("forward_from_features: feature width does not match embed_dim");
  ForwardTrace t;
  t.f_a.assign(f_a.begin(), f_a.end());
  t.f_v.assign(f_v.begin(), f_v.end());
  run_head(m, t);
  return t;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::size_t predict(const ModelState& m, std::span<const double> audio, const Matrix& visual) {
  return argmax(forward(m, audio, visual).logits);
}

LossValue loss(const ModelState& m, std::span<const double> audio, const Matrix& visual,
               std::size_t label, LossMode mode) {
  if (label >= m.arch.num_classes) {
    throw SpecError("loss: label " + std::to_string(label) + " out of range for " +
                    std::to_string(m.arch.num_classes) + " classes");
  }
  LossValue out;
  out.trace = forward(m, audio, visual);
  out.cross_entropy = cross_entropy(out.trace.probs, label);
  out.similarity = cosine_similarity(out.trace.f_a, out.trace.f_v);
  out.value = out.cross_entropy;
  if (mode == LossMode::CEPlusMinSim) out.value += out.similarity;
  if (mode == LossMode::CEPlusMaxSim) out.value += 1.0 - out.similarity;
  return out;
}

Gradients gradients(const ModelState& m, std::span<const double> audio, const Matrix& visual,
                    std::size_t label, LossMode mode) {
  const ArchSpec& a = m.arch;
  const ParameterSet& p = m.params;
  const LossValue lv = loss(m, audio, visual, label, mode);
  const ForwardTrace& t = lv.trace;
  const std::size_t d = a.embed_dim;

  Gradients g;
  g.params = p.zeros_like();
  g.inputs.loss = lv.value;
  g.inputs.audio.assign(audio.size(), 0.0);
  g.inputs.visual = Matrix(visual.rows(), visual.cols());

  // Head.
  const Vector d_logits = cross_entropy_logit_grad(t.probs, label);
  AffineGrads head = affine_backward(Matrix::row_vector(t.fused), p.head_w,
                                     Matrix::row_vector(d_logits));
  g.params.head_w = std::move(head.w);
  g.params.head_b = Matrix::row_vector(head.b);
  const Vector d_fused = head.x.data();

  // Fusion.
  Vector d_fa(d, 0.0);
  Vector d_fv(d, 0.0);
  switch (a.fusion) {
    case FusionKind::Sum: {
      auto [ga, gv] = add_backward(d_fused);
      d_fa = ga;
      d_fv = gv;
      break;
    }
    case FusionKind::Concat: {
      auto [ga, gv] = concat_backward(d_fused, d);
      d_fa = ga;
      d_fv = gv;
      break;
    }
    case FusionKind::FiLM: {
      auto [d_scale, gv] = hadamard_backward(t.film_scale, t.f_v, d_fused);
      d_fv = gv;
      AffineGrads film = affine_backward(Matrix::row_vector(t.f_a), p.film_w,
                                         Matrix::row_vector(d_scale));
      g.params.film_w = std::move(film.w);
      g.params.film_b = Matrix::row_vector(film.b);
      d_fa = add(d_fused, film.x.flat());
      break;
    }
    case FusionKind::GatedSum:
    case FusionKind::GatedConcat: {
      Vector d_f1, d_f2;
      if (a.fusion == FusionKind::GatedSum) {
        std::tie(d_f1, d_f2) = add_backward(d_fused);
      } else {
        std::tie(d_f1, d_f2) = concat_backward(d_fused, d);
      }
      // f1 = sigmoid(f_a) * f_v, f2 = sigmoid(f_v) * f_a
      auto [d_gate_a, dv1] = hadamard_backward(t.gate_a, t.f_v, d_f1);
      auto [d_gate_v, da2] = hadamard_backward(t.gate_v, t.f_a, d_f2);
      d_fa = add(da2, sigmoid_backward(t.gate_a, d_gate_a));
      d_fv = add(dv1, sigmoid_backward(t.gate_v, d_gate_v));
      break;
    }
  }

  // Similarity term.
  if (mode != LossMode::CE) {
    const double sign = mode == LossMode::CEPlusMinSim ? 1.0 : -1.0;
    auto [ga, gv] = cosine_similarity_backward(t.f_a, t.f_v, sign);
    add_into(d_fa, ga);
    add_into(d_fv, gv);
  }

  // Visual pooling and encoder.
  if (has_visual(a)) {
    Matrix d_patches;
    if (a.pooling == Pooling::Max) {
      d_patches = max_pool_rows_backward(t.patch_features.rows(), t.pool_argmax, d_fv);
    } else {
      const std::size_t n = t.patch_features.rows();
      d_patches = Matrix(n, d);
      Vector d_weights(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = t.patch_features.row(i);
        d_weights[i] = dot(d_fv, row);
        for (std::size_t j = 0; j < d; ++j) d_patches(i, j) += t.attention[i] * d_fv[j];
      }
      const Vector d_logits_att = softmax_backward(t.attention, d_weights);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = t.patch_features.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          d_fa[j] += d_logits_att[i] * row[j];
          d_patches(i, j) += d_logits_att[i] * t.f_a[j];
        }
      }
    }
    AffineGrads l2 = affine_backward(t.visual_hidden, p.visual_w2, d_patches);
    AffineGrads l1 = affine_backward(visual, p.visual_w1, relu_backward(t.visual_pre, l2.x));
    g.params.visual_w2 = std::move(l2.w);
    g.params.visual_b2 = Matrix::row_vector(l2.b);
    g.params.visual_w1 = std::move(l1.w);
    g.params.visual_b1 = Matrix::row_vector(l1.b);
    g.inputs.visual = std::move(l1.x);
  }

  // Audio encoder.
  if (has_audio(a)) {
    AffineGrads l2 = affine_backward(t.audio_hidden, p.audio_w2, Matrix::row_vector(d_fa));
    const Matrix x = Matrix::row_vector(audio);
    AffineGrads l1 = affine_backward(x, p.audio_w1, relu_backward(t.audio_pre, l2.x));
    g.params.audio_w2 = std::move(l2.w);
    g.params.audio_b2 = Matrix::row_vector(l2.b);
    g.params.audio_w1 = std::move(l1.w);
    g.params.audio_b1 = Matrix::row_vector(l1.b);
    g.inputs.audio = l1.x.data();
  }
  return g;
}

InputGradients input_gradients(const ModelState& m, std::span<const double> audio,
                               const Matrix& visual, std::size_t label, LossMode mode) {
  return gradients(m, audio, visual, label, mode).inputs;
}

void save(const ModelState& m, const std::filesystem::path& path) {
  const ArchSpec& a = m.arch;
  io::Writer w;
  w.magic(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u32(io::checked_u32(a.audio_dim, "audio_dim"));
  w.u32(io::checked_u32(a.patch_dim, "patch_dim"));
  w.u32(io::checked_u32(a.grid_side, "grid_side"));
  w.u32(io::checked_u32(a.hidden_dim, "hidden_dim"));
  w.u32(io::checked_u32(a.embed_dim, "embed_dim"));
  w.u32(io::checked_u32(a.num_classes, "num_classes"));
  w.u8(static_cast<std::uint8_t>(a.fusion));
  w.u8(static_cast<std::uint8_t>(a.pooling));
  w.u8(static_cast<std::uint8_t>(a.modalities));
  for (const Matrix* t : m.params.tensors()) w.f64s(t->flat());
  w.save(path);
}

ModelState load_model(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, "checkpoint " + path.string());
  r.expect_magic(std::string_view(kCheckpointMagic, 4));
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + path.string() + ": unsupported version " +
                      std::to_string(version));
  ArchSpec a;
  a.audio_dim = r.u32();
  a.patch_dim = r.u32();
  a.grid_side = r.u32();
  a.hidden_dim = r.u32();
  a.embed_dim = r.u32();
  a.num_classes = r.u32();
  const auto fusion = r.u8();
  const auto pooling = r.u8();
  const auto modalities = r.u8();
  if (fusion > 4 || pooling > 1 || modalities > 2)
    throw FormatError("checkpoint " + path.string() + ": bad enum field");
  a.fusion = static_cast<FusionKind>(fusion);
  a.pooling = static_cast<Pooling>(pooling);
  a.modalities = static_cast<Modalities>(modalities);
  try {
    a.validate();
  } catch (const SpecError& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
  ParameterSet p = parameter_shapes(a);
  for (Matrix* t : p.tensors()) r.f64s(t->flat());
  r.expect_end();
  return ModelState{a, std::move(p)};
}

}  // namespace mmrobust
