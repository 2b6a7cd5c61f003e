#include <doctest.h>

#include <cmath>

#include "dar/data_model.hpp"
#include "dar/error.hpp"
#include "dar/synthetic.hpp"
#include "test_util.hpp"

using namespace dar;

namespace {

struct SubsetFractions {
  double cr = 0, ic = 0, lr = 0;
};

// Exact expectation under the model: a record is LR with one rater, CR when
// n >= 2 raters all give the same score, IC otherwise.
SubsetFractions expected_fractions(const AnnotatorModel& m, const std::vector<double>& prior) {
  SubsetFractions f;
  for (std::size_t t = 0; t < prior.size(); ++t) {
    for (std::size_t n = 1; n <= m.count_dist.size(); ++n) {
      const double pn = prior[t] * m.count_dist[n - 1];
      if (n == 1) {
        f.lr += pn;
        continue;
      }
      double agree = 0.0;
      for (double p : m.confusion[t]) agree += std::pow(p, static_cast<double>(n));
      f.cr += pn * agree;
      f.ic += pn * (1.0 - agree);
    }
  }
  return f;
}

}  // namespace

TEST_CASE("annotator model factories") {
  const auto d = AnnotatorModel::defaults(5);
  const std::vector<double> mid{0.0, 0.15, 0.7, 0.15, 0.0};
  for (std::size_t i = 0; i < mid.size(); ++i) CHECK(d.confusion[2][i] == doctest::Approx(mid[i]).epsilon(1e-15));
  CHECK(d.confusion[0][0] == doctest::Approx(0.7));
  CHECK(d.confusion[0][1] == doctest::Approx(0.3));
  CHECK(d.confusion[4][3] == doctest::Approx(0.3));
  CHECK_THROWS_AS(AnnotatorModel::tridiagonal(5, 0.7, {0.5, 0.6, 0.0, 0.0}), ConfigError);
}

TEST_CASE("annotators: identity and deterministic rows") {
  std::mt19937_64 rng(1);
  const auto id = AnnotatorModel::identity(5, {0.25, 0.25, 0.25, 0.25});
  for (int i = 0; i < 100; ++i) {
    for (int s : simulate_annotators(4, id, rng)) REQUIRE(s == 4);
  }
  auto m = AnnotatorModel::identity(5, {0, 0, 0, 1});
  m.confusion[2] = {0, 1, 0, 0, 0};
  for (int i = 0; i < 50; ++i) CHECK(simulate_annotators(3, m, rng) == std::vector<int>{2, 2, 2, 2});
}

TEST_CASE("annotators: four uniform raters agree with probability 1/125") {
  const int q = 5;
  int agree = 0, total = 0;
  for (int a = 0; a < q; ++a) {
    for (int b = 0; b < q; ++b) {
      for (int c = 0; c < q; ++c) {
        for (int d = 0; d < q; ++d) {
          ++total;
          if (a == b && b == c && c == d) ++agree;
        }
      }
    }
  }
  const double exact = static_cast<double>(agree) / total;
  CHECK(exact == doctest::Approx(1.0 / 125.0).epsilon(1e-15));

  AnnotatorModel m;
  m.confusion.assign(q, std::vector<double>(q, 1.0 / q));
  m.count_dist = {0, 0, 0, 1};
  std::mt19937_64 rng(42);
  const int draws = 200000;
  int hits = 0;
  for (int i = 0; i < draws; ++i) {
    const auto s = simulate_annotators(1 + i % q, m, rng);
    if (s[0] == s[1] && s[1] == s[2] && s[2] == s[3]) ++hits;
  }
  const double sd = std::sqrt(exact * (1 - exact) / draws);
  CHECK(std::abs(static_cast<double>(hits) / draws - exact) < 5 * sd);
}

TEST_CASE("annotations: rater count extremes") {
  SyntheticSpec spec;
  spec.n_samples = 100;
  auto to_records = [](const std::vector<SyntheticSample>& s) {
    std::vector<AnnotationRecord> r;
    for (const auto& x : s) r.push_back(x.record);
    return r;
  };
  const auto three = to_records(gen_annotations(spec, AnnotatorModel::identity(5, {0, 0, 1, 0})));
  auto p = partition_dataset(three, 5);
  CHECK(p.n1() == 100);
  CHECK(p.n2() == 0);
  CHECK(p.n3() == 0);
  const auto one = to_records(gen_annotations(spec, AnnotatorModel::tridiagonal(5, 0.7, {1, 0, 0, 0})));
  p = partition_dataset(one, 5);
  CHECK(p.n3() == 100);
}

TEST_CASE("annotations: default model subset fractions") {
  const auto m = AnnotatorModel::defaults(5);
  const SubsetFractions exact = expected_fractions(m, std::vector<double>(5, 0.2));
  CHECK(exact.cr + exact.ic + exact.lr == doctest::Approx(1.0));
  // The configured mix sits near the 15 / 55 / 30 target.
  CHECK(std::abs(exact.cr - 0.15) < 0.05);
  CHECK(std::abs(exact.ic - 0.55) < 0.05);
  CHECK(exact.lr == doctest::Approx(0.30));

  SyntheticSpec spec;
  spec.n_samples = 2000;
  spec.seed = 7;
  std::vector<AnnotationRecord> recs;
  for (const auto& s : gen_annotations(spec, m)) recs.push_back(s.record);
  const auto p = partition_dataset(recs, 5);
  CHECK(std::abs(p.n1() / 2000.0 - exact.cr) < 0.05);
  CHECK(std::abs(p.n2() / 2000.0 - exact.ic) < 0.05);
  CHECK(std::abs(p.n3() / 2000.0 - exact.lr) < 0.05);
}

TEST_CASE("volumes: determinism, ordering and background") {
  SyntheticSpec spec;
  spec.cube_side = 32;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const auto v1 = gen_volume(1, spec, a);
    const auto v5 = gen_volume(5, spec, b);
    REQUIRE(v5.radius > v1.radius);
  }
  std::mt19937_64 a(3), b(3);
  CHECK(gen_volume(2, spec, a).volume.voxels() == gen_volume(2, spec, b).volume.voxels());

  const auto geo = spec.classes();
  std::mt19937_64 r(8);
  const auto v = gen_volume(5, spec, r);
  const double reach = v.radius * (1.0 + geo[4].roughness) + 1.0;
  const int s = spec.cube_side;
  for (int z = 0; z < s; ++z) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double d = std::hypot(x - v.center.x, y - v.center.y, z - v.center.z);
        if (d > reach) REQUIRE(std::abs(v.volume.at(x, y, z)) <= spec.noise_amplitude);
      }
    }
  }
}

TEST_CASE("dataset files") {
  test::TempDir dir("synth");
  SyntheticSpec spec;
  spec.n_samples = 12;
  spec.cube_side = 16;
  const auto manifest = gen_dataset(spec, AnnotatorModel::defaults(5), dir.path());
  const auto recs = load_manifest(manifest);
  REQUIRE(recs.size() == 12);
  const auto truth = read_ground_truth(dir / "ground_truth.json");
  CHECK(truth.size() == 12);
  for (const auto& r : recs) {
    CHECK(truth.count(r.id) == 1);
    const Volume v = read_volume(r.volume_ref);
    CHECK(v.dims() == Volume::Dims{16, 16, 16});
    CHECK(v.contains(r.center));
  }
  const auto again = gen_annotations(spec, AnnotatorModel::defaults(5));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(again[i].record.scores == recs[i].scores);
    CHECK(again[i].true_class == truth.at(recs[i].id));
  }
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.class_prior = {0.5, 0.5};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.class_prior.clear();
  spec.n_samples = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
