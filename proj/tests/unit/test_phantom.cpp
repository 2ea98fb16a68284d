#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "harmony/error.hpp"
#include "harmony/io.hpp"
#include "harmony/metrics.hpp"
#include "harmony/phantom.hpp"
#include "support.hpp"

using namespace harmony;
using harmony::test::TempDir;

namespace {

PhantomSpec small_brain(std::uint64_t seed = 1) {
  PhantomSpec s;
  s.dims = {32, 32, 32};
  s.n_shapes = 4;
  s.rng_seed = seed;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  const auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

}  // namespace

TEST_SUITE("phantom") {
  TEST_CASE("structures are a pure function of the seed") {
    Rng a(3), b(3), c(4);
    const auto s1 = generate_structure(small_brain(), a);
    const auto s2 = generate_structure(small_brain(), b);
    const auto s3 = generate_structure(small_brain(), c);
    CHECK(s1.labels == s2.labels);
    CHECK(s1.clean == s2.clean);
    CHECK(!(s1.labels == s3.labels));
  }

  TEST_CASE("one shape is the centred ball of radius 0.35") {
    PhantomSpec spec;
    spec.dims = {20, 24, 16};
    spec.layout = PhantomLayout::shapes;
    spec.n_shapes = 1;
    Rng rng(5);
    const auto s = generate_structure(spec, rng);
    for (std::int64_t z = 0; z < 16; ++z)
      for (std::int64_t y = 0; y < 24; ++y)
        for (std::int64_t x = 0; x < 20; ++x) {
          const double u = ((x + 0.5) / 20 - 0.5) / 0.35, v = ((y + 0.5) / 24 - 0.5) / 0.35,
                       w = ((z + 0.5) / 16 - 0.5) / 0.35;
          const bool inside = u * u + v * v + w * w < 1.0;
          REQUIRE(s.labels(x, y, z) == (inside ? 1.0 : 0.0));
          REQUIRE(s.piecewise(x, y, z) == (inside ? spec.levels()[0] : 0.0));
        }
  }

  TEST_CASE("without smoothing or grey variation, intensity jumps coincide with label boundaries") {
    auto spec = small_brain(7);
    spec.grey_variation = 0.0;
    Rng rng(7);
    const auto s = generate_structure(spec, rng);
    const auto levels = spec.levels();
    CHECK(std::set<double>(levels.begin(), levels.end()).size() == levels.size());
    const Dims d = spec.dims;
    std::int64_t boundaries = 0;
    for (std::int64_t z = 0; z < d.nz; ++z)
      for (std::int64_t y = 0; y < d.ny; ++y)
        for (std::int64_t x = 0; x + 1 < d.nx; ++x) {
          const bool label_change = s.labels(x, y, z) != s.labels(x + 1, y, z);
          const bool jump = s.piecewise(x, y, z) != s.piecewise(x + 1, y, z);
          REQUIRE(label_change == jump);
          boundaries += label_change;
        }
    CHECK(boundaries > 100);
    std::set<std::int64_t> present;
    for (double l : s.labels.values()) present.insert(std::llround(l));
    for (auto l : {tissue::scalp, tissue::grey, tissue::white}) CHECK(present.count(l) == 1);
  }

  TEST_CASE("noise-free rendering preserves intensity order") {
    Rng rng(9);
    const auto s = generate_structure(small_brain(9), rng);
    for (const auto& c : source_contrasts()) {
      auto clean = c;
      clean.noise_sigma = 0.0;
      clean.bias_amplitude = 0.0;
      Rng r(10);
      const auto out = render_domain(s, clean, r);
      for (double v : out.values()) REQUIRE((v >= 0.0 && v <= 1.0));
      const auto cv = s.clean.values();
      for (std::size_t i = 0; i < cv.size(); i += 7)
        for (std::size_t j = 0; j < cv.size(); j += 997) {
          if (cv[i] < cv[j]) REQUIRE(out.values()[i] < out.values()[j]);
          if (cv[i] == cv[j]) REQUIRE(out.values()[i] == out.values()[j]);
        }
    }
  }

  TEST_CASE("contrast function validation and interpolation") {
    ContrastFunction c{{{0.0, 0.0}, {0.5, 0.8}, {1.0, 1.0}}, 0.0, 0.0};
    CHECK(c.map(0.25) == doctest::Approx(0.4));
    CHECK(c.map(0.75) == doctest::Approx(0.9));
    ContrastFunction bad{{{0.0, 0.0}, {0.5, 0.6}, {0.6, 0.5}, {1.0, 1.0}}, 0.0, 0.0};
    CHECK_THROWS_AS(bad.validate(), UsageError);
    PhantomSpec spec;
    spec.tissue_levels = {0.5};
    CHECK_THROWS_AS(spec.validate(), UsageError);
  }

  TEST_CASE("source domains are increasingly far from the target") {
    const auto corpus = generate_corpus(small_brain(11), 3, target_contrast(), source_contrasts());
    for (const auto& subj : corpus.subjects) {
      REQUIRE(subj.sources.size() == 3);
      MetricsConfig mc;
      std::vector<double> gap;
      for (const auto& src : subj.sources) gap.push_back(evaluate(src, subj.target, mc).psnr);
      for (double g : gap) CHECK(g < 30.0);
      CHECK(gap[0] > gap[2]);
    }
  }

  TEST_CASE("lesion phantoms carry a white-matter lesion mask") {
    auto spec = small_brain(12);
    spec.lesion = true;
    Rng rng(12);
    const auto s = generate_structure(spec, rng);
    REQUIRE(s.lesion.has_value());
    CHECK(count(*s.lesion) > 0);
    for (std::size_t i = 0; i < s.lesion->size(); ++i) {
      if ((*s.lesion)[i]) CHECK(s.piecewise.values()[i] == spec.lesion_level);
    }
    spec.layout = PhantomLayout::shapes;
    CHECK_THROWS_AS(spec.validate(), UsageError);
  }

  TEST_CASE("corpus split, files and manifest are reproducible") {
    auto spec = small_brain(13);
    spec.dims = {16, 16, 16};
    const auto corpus = generate_corpus(spec, 10, target_contrast(), source_contrasts());
    CHECK(corpus.train.size() == 6);
    CHECK(corpus.val.size() == 2);
    CHECK(corpus.test.size() == 2);
    std::set<std::int64_t> all(corpus.train.begin(), corpus.train.end());
    all.insert(corpus.val.begin(), corpus.val.end());
    all.insert(corpus.test.begin(), corpus.test.end());
    CHECK(all.size() == 10);

    TempDir a("corpus"), b("corpus");
    write_corpus(corpus, a.path());
    write_corpus(generate_corpus(spec, 10, target_contrast(), source_contrasts()), b.path());
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
      if (!entry.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(entry.path(), a.path());
      REQUIRE(std::filesystem::exists(b.path() / rel));
      CHECK(slurp(entry.path()) == slurp(b.path() / rel));
    }
    const auto m = read_corpus_manifest(a.path());
    REQUIRE(m.subjects.size() == 10);
    CHECK(m.train == corpus.train);
    CHECK(m.subjects[3].sources.size() == 3);
    CHECK(load_volume(m.subjects[3].target) == corpus.subjects[3].target);
    CHECK(m.subjects[0].target.is_absolute());
  }
}
