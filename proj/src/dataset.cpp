#include "mmrobust/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "mmrobust/binary_io.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/random.hpp"

namespace mmrobust {

namespace {

double clamp_to(double v, ValueRange r) { return std::clamp(v, r.lo, r.hi); }

double distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

// Draws one prototype per class, coordinates uniform within
// kPrototypeHalfWidth of the range midpoint, redrawing any that lands closer
// than 0.5 * sqrt(dim) * 0.3 to an earlier prototype of the same modality.
Matrix draw_prototypes(Rng& rng, std::size_t classes, std::size_t dim, ValueRange range) {
  constexpr int kMaxRedraws = 1000;
  const double min_gap = 0.5 * std::sqrt(static_cast<double>(dim)) * 0.3;
  const double mid = 0.5 * (range.lo + range.hi);
  const double half = std::min(kPrototypeHalfWidth, 0.5 * (range.hi - range.lo));
  Matrix protos(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      for (double& v : protos.row(c)) v = rng.uniform(mid - half, mid + half);
      bool separated = true;
      for (std::size_t prev = 0; prev < c && separated; ++prev)
        separated = distance(protos.row(c), protos.row(prev)) >= min_gap;
      if (separated) break;
      if (attempt == kMaxRedraws) {
        throw SpecError("generate: cannot place " + std::to_string(classes) +
                        " separated prototypes in dimension " + std::to_string(dim));
      }
    }
  }
  return protos;
}

DatasetSplit draw_split(Rng& rng, const DatasetSpec& spec, SplitTag tag, const Matrix& audio_protos,
                        const Matrix& visual_protos) {
  DatasetSplit split{spec, tag, {}};
  split.samples.reserve(spec.num_classes * spec.samples_per_class);
  const std::size_t patches = spec.num_patches();
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t n = 0; n < spec.samples_per_class; ++n) {
      BimodalSample s;
      s.label = static_cast<std::uint32_t>(c);
      s.sounding_patch = static_cast<std::uint32_t>(rng.index(patches));
      std::size_t visual_class = c;
      if (rng.uniform() < spec.cross_modal_corruption) visual_class = rng.index(spec.num_classes);

      s.audio.resize(spec.audio_dim);
      auto proto_a = audio_protos.row(c);
      for (std::size_t i = 0; i < spec.audio_dim; ++i)
        s.audio[i] = clamp_to(proto_a[i] + spec.noise_sigma * rng.gaussian(), kAudioRange);

      s.visual = Matrix(patches, spec.patch_dim);
      auto proto_v = visual_protos.row(visual_class);
      for (std::size_t p = 0; p < patches; ++p) {
        auto row = s.visual.row(p);
        if (p == s.sounding_patch) {
          for (std::size_t i = 0; i < spec.patch_dim; ++i)
            row[i] = clamp_to(proto_v[i] + spec.noise_sigma * rng.gaussian(), kVisualRange);
        } else {
          for (double& v : row) v = clamp_to(spec.noise_sigma * rng.gaussian(), kVisualRange);
        }
      }
      split.samples.push_back(std::move(s));
    }
  }
  return split;
}

}  // namespace

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
  }
  return "unknown";
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw SpecError("dataset: num_classes must be >= 2");
  if (audio_dim == 0 || patch_dim == 0) throw SpecError("dataset: zero feature dimension");
  if (grid_side == 0) throw SpecError("dataset: grid_side must be >= 1");
  if (samples_per_class == 0) throw SpecError("dataset: samples_per_class must be >= 1");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
    throw SpecError("dataset: noise_sigma must be finite and >= 0");
  if (!(cross_modal_corruption >= 0.0 && cross_modal_corruption <= 1.0))
    throw SpecError("dataset: cross_modal_corruption must lie in [0,1]");
}

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset data;
  data.audio_prototypes = draw_prototypes(rng, spec.num_classes, spec.audio_dim, kAudioRange);
  data.visual_prototypes = draw_prototypes(rng, spec.num_classes, spec.patch_dim, kVisualRange);
  data.train = draw_split(rng, spec, SplitTag::Train, data.audio_prototypes, data.visual_prototypes);
  data.val = draw_split(rng, spec, SplitTag::Val, data.audio_prototypes, data.visual_prototypes);
  data.test = draw_split(rng, spec, SplitTag::Test, data.audio_prototypes, data.visual_prototypes);
  return data;
}

void save(const DatasetSplit& split, const std::filesystem::path& path) {
  const DatasetSpec& s = split.spec;
  io::Writer w;
  w.magic(std::string_view(kDatasetMagic, 4));
  w.u16(kDatasetVersion);
  w.u32(io::checked_u32(s.num_classes, "num_classes"));
  w.u32(io::checked_u32(s.audio_dim, "audio_dim"));
  w.u32(io::checked_u32(s.grid_side, "grid_side"));
  w.u32(io::checked_u32(s.patch_dim, "patch_dim"));
  w.u32(io::checked_u32(s.samples_per_class, "samples_per_class"));
  w.f64(s.noise_sigma);
  w.f64(s.cross_modal_corruption);
  w.u64(s.seed);
  w.u8(static_cast<std::uint8_t>(split.tag));
  w.u32(io::checked_u32(split.samples.size(), "sample count"));
  for (const auto& sample : split.samples) {
    if (sample.audio.size() != s.audio_dim || sample.visual.rows() != s.num_patches() ||
        sample.visual.cols() != s.patch_dim) {
      throw DimensionError("save: sample does not conform to dataset spec");
    }
    w.f64s(sample.audio);
    w.f64s(sample.visual.flat());
    w.u32(sample.label);
    w.u32(sample.sounding_patch);
  }
  w.save(path);
}

DatasetSplit load_split(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, "dataset " + path.string());
  r.expect_magic(std::string_view(kDatasetMagic, 4));
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError("dataset " + path.string() + ": unsupported version " +
                      std::to_string(version));
  }
  DatasetSplit split;
  DatasetSpec& s = split.spec;
  s.num_classes = r.u32();
  s.audio_dim = r.u32();
  s.grid_side = r.u32();
  s.patch_dim = r.u32();
  s.samples_per_class = r.u32();
  s.noise_sigma = r.f64();
  s.cross_modal_corruption = r.f64();
  s.seed = r.u64();
  const auto tag = r.u8();
  if (tag > static_cast<std::uint8_t>(SplitTag::Test))
    throw FormatError("dataset " + path.string() + ": bad split tag");
  split.tag = static_cast<SplitTag>(tag);
  try {
    s.validate();
  } catch (const SpecError& e) {
    throw FormatError("dataset " + path.string() + ": " + e.what());
  }
  const std::uint32_t count = r.u32();
  split.samples.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    BimodalSample sample;
    sample.audio.resize(s.audio_dim);
    r.f64s(sample.audio);
    sample.visual = Matrix(s.num_patches(), s.patch_dim);
    r.f64s(sample.visual.flat());
    sample.label = r.u32();
    sample.sounding_patch = r.u32();
    if (sample.label >= s.num_classes || sample.sounding_patch >= s.num_patches())
      throw FormatError("dataset " + path.string() + ": label or patch index out of range");
    split.samples.push_back(std::move(sample));
  }
  r.expect_end();
  return split;
}

}  // namespace mmrobust
