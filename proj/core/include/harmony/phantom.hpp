#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "harmony/patches.hpp"
#include "harmony/volume.hpp"

namespace harmony {

enum class PhantomLayout {
  brain,   // head, CSF, folded cortex, white matter and ventricles, plus n_shapes nuclei in white matter
  shapes,  // a centred ball followed by n_shapes - 1 random ellipsoids inside it
};

// Labels of the brain layout.
namespace tissue {
inline constexpr std::int64_t scalp = 1;
inline constexpr std::int64_t csf = 2;
inline constexpr std::int64_t grey = 3;
inline constexpr std::int64_t white = 4;
inline constexpr std::int64_t lesion = 5;
inline constexpr std::int64_t first_nucleus = 6;  // nucleus i has label first_nucleus + i
}  // namespace tissue

struct PhantomSpec {
  Dims dims{64, 64, 64};
  Spacing spacing{};
  PhantomLayout layout = PhantomLayout::brain;
  std::int64_t n_shapes = 30;
  // Brain layout: scalp, CSF, grey and white matter levels followed by one
  // level per nucleus. Shapes layout: one level per shape. Empty selects the
  // defaults (nuclei spread evenly between grey and white matter).
  std::vector<double> tissue_levels;
  double head_scale = 0.95;      // head radii relative to the default template
  double nucleus_radius = 0.05;  // fraction of each dim
  double smoothing_sigma = 0.0;  // partial-volume blur of the clean rendering, voxels
  double fold_amplitude = 0.12;  // relative radial modulation of the cortex
  // Amplitude of a smooth plane-wave modulation of the grey-matter level, so
  // that grey/white contrast varies across the brain.
  double grey_variation = 0.1;
  bool lesion = false;           // adds a hyperintense white-matter blob
  double lesion_level = 1.0;
  double lesion_radius = 0.07;   // fraction of the smallest dim
  std::uint64_t rng_seed = 0;

  void validate() const;
  std::vector<double> levels() const;  // tissue_levels or the defaults
};

struct Structure {
  Volume3D labels;     // integer labels, 0 is background
  Volume3D piecewise;  // label intensities before smoothing
  Volume3D clean;      // smoothed intensities
  std::optional<Mask> lesion;
};

// Monotone piecewise-linear intensity map with a multiplicative bias field
// exp(polynomial of degree 2) whose coefficients are drawn uniformly in
// [-bias_amplitude, bias_amplitude], plus additive Gaussian noise.
struct ContrastFunction {
  std::vector<std::pair<double, double>> points{{0.0, 0.0}, {1.0, 1.0}};
  double bias_amplitude = 0.0;
  double noise_sigma = 0.0;

  void validate() const;
  double map(double x) const;
};

ContrastFunction identity_contrast();
// The contrast the corpus treats as the target domain.
ContrastFunction target_contrast();
// Source-domain contrasts of increasing distance from the target.
std::vector<ContrastFunction> source_contrasts();

Structure generate_structure(const PhantomSpec& spec, Rng& rng);

// Monotone map, bias field, noise, then an affine map of
// [min(0, min), max(1, max)] onto [0, 1].
Volume3D render_domain(const Structure& structure, const ContrastFunction& c, Rng& rng);

struct CorpusSubject {
  Structure structure;
  Volume3D target;
  std::vector<Volume3D> sources;
};

struct Corpus {
  std::vector<CorpusSubject> subjects;
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
};

// Subject s uses its own generator seeded from (spec.rng_seed, s); the split
// follows a seeded shuffle of the subject indices.
Corpus generate_corpus(const PhantomSpec& spec, std::int64_t n_subjects, const ContrastFunction& c_target,
                       const std::vector<ContrastFunction>& c_sources, const SplitFractions& split = {});

// subject_<sss>/{labels,target,source_<k>}.hvol plus manifest.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

struct CorpusManifest {
  struct Entry {
    std::filesystem::path labels;
    std::filesystem::path target;
    std::vector<std::filesystem::path> sources;
  };
  std::vector<Entry> subjects;
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;
};

// Paths in the result are absolute (resolved against dir).
CorpusManifest read_corpus_manifest(const std::filesystem::path& dir);

}  // namespace harmony
