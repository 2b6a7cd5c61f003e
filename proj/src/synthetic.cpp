#include "dar/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dar/error.hpp"
#include "dar/rng.hpp"

namespace dar {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void check_distribution(const std::vector<double>& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string(what) + " is empty");
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError(std::string(what) + " has a negative entry");
  }
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError(std::string(what) + " does not sum to 1");
}

int draw_index(const std::vector<double>& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (x < acc) return static_cast<int>(i);
  }
  // Round-off at the top end: last index with nonzero mass.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

}  // namespace

void AnnotatorModel::validate() const {
  const int q = classes();
  if (q < 2) throw ConfigError("annotator model needs at least two classes");
  for (const auto& row : confusion) {
    if (static_cast<int>(row.size()) != q) throw ConfigError("confusion matrix must be square");
    check_distribution(row, "confusion row");
  }
  if (count_dist.size() != 4) throw ConfigError("annotator count distribution must cover 1..4 raters");
  check_distribution(count_dist, "annotator count distribution");
}

AnnotatorModel AnnotatorModel::tridiagonal(int q, double diag, std::vector<double> count_dist) {
  AnnotatorModel m;
  m.confusion.assign(static_cast<std::size_t>(q), std::vector<double>(static_cast<std::size_t>(q), 0.0));
  for (int t = 0; t < q; ++t) {
    std::vector<int> nb;
    if (t > 0) nb.push_back(t - 1);
    if (t + 1 < q) nb.push_back(t + 1);
    m.confusion[t][t] = nb.empty() ? 1.0 : diag;
    for (int n : nb) m.confusion[t][n] = (1.0 - diag) / static_cast<double>(nb.size());
  }
  m.count_dist = std::move(count_dist);
  m.validate();
  return m;
}

AnnotatorModel AnnotatorModel::identity(int q, std::vector<double> count_dist) {
  return tridiagonal(q, 1.0, std::move(count_dist));
}

AnnotatorModel AnnotatorModel::defaults(int q) { return tridiagonal(q, 0.7, {0.3, 0.0, 0.0, 0.7}); }

std::vector<ClassGeometry> default_geometry(int q, int cube_side) {
  std::vector<ClassGeometry> g(static_cast<std::size_t>(q));
  const double r_lo = 0.08 * cube_side, r_hi = 0.26 * cube_side;
  const double step = (r_hi - r_lo) / std::max(1, q);
  for (int c = 0; c < q; ++c) {
    const double t = q > 1 ? static_cast<double>(c) / (q - 1) : 0.0;
    g[c].radius_min = r_lo + step * c;
    g[c].radius_max = r_lo + step * (c + 1.6);  // overlaps the next class
    g[c].intensity_min = 0.45 + 0.25 * t;
    g[c].intensity_max = 0.60 + 0.25 * t;
    g[c].roughness = 0.35 * t;
  }
  return g;
}

void SyntheticSpec::validate() const {
  if (q < 2) throw ConfigError("synthetic spec needs q >= 2");
  if (n_samples < 1) throw ConfigError("synthetic spec needs n_samples >= 1");
  if (cube_side < 4) throw ConfigError("cube side too small");
  if (noise_amplitude < 0.0) throw ConfigError("noise amplitude must be non-negative");
  if (center_jitter < 0) throw ConfigError("centre jitter must be non-negative");
  check_distribution(prior(), "class prior");
  if (static_cast<int>(prior().size()) != q) throw ConfigError("class prior length must equal q");
  const auto geo = classes();
  if (static_cast<int>(geo.size()) != q) throw ConfigError("geometry must list one entry per class");
  for (int c = 0; c < q; ++c) {
    if (!(geo[c].radius_min > 0.0) || geo[c].radius_max < geo[c].radius_min) {
      throw ConfigError("class geometry needs 0 < radius_min <= radius_max");
    }
    if (c > 0 && (geo[c].radius_min < geo[c - 1].radius_min || geo[c].radius_max < geo[c - 1].radius_max)) {
      throw ConfigError("radius ranges must be monotone in the class index");
    }
  }
}

std::vector<double> SyntheticSpec::prior() const {
  if (!class_prior.empty()) return class_prior;
  return std::vector<double>(static_cast<std::size_t>(q), 1.0 / q);
}

std::vector<ClassGeometry> SyntheticSpec::classes() const {
  return geometry.empty() ? default_geometry(q, cube_side) : geometry;
}

SyntheticVolume gen_volume(int cls, const SyntheticSpec& spec, std::mt19937_64& rng) {
  if (cls < 1 || cls > spec.q) throw DataError("class " + std::to_string(cls) + " out of range");
  const ClassGeometry g = spec.classes()[static_cast<std::size_t>(cls - 1)];
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-spec.center_jitter, spec.center_jitter);

  const int s = spec.cube_side;
  const VoxelCoord center{s / 2 + jitter(rng), s / 2 + jitter(rng), s / 2 + jitter(rng)};
  const double radius = g.radius_min + (g.radius_max - g.radius_min) * u01(rng);
  const double intensity = g.intensity_min + (g.intensity_max - g.intensity_min) * u01(rng);
  // Lobulation: two angular harmonics with random phases, |shape| <= 1.
  const double p1 = 2.0 * std::numbers::pi * u01(rng);
  const double p2 = 2.0 * std::numbers::pi * u01(rng);
  const int lobes = 3 + static_cast<int>(u01(rng) * 3.0);

  Volume vol({s, s, s}, spec.spacing);
  const double a = spec.noise_amplitude;
  std::uniform_real_distribution<double> noise(-a, a);
  for (int z = 0; z < s; ++z) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double dx = x - center.x, dy = y - center.y, dz = z - center.z;
        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        double v = a > 0.0 ? noise(rng) : 0.0;
        if (d <= radius * (1.0 + g.roughness)) {
          const double phi = std::atan2(dy, dx);
          const double theta = d > 0.0 ? std::acos(std::clamp(dz / d, -1.0, 1.0)) : 0.0;
          const double shape = 0.5 * (std::cos(lobes * phi + p1) * std::sin(theta) + std::cos(2.0 * theta + p2));
          const double r_local = radius * (1.0 + g.roughness * shape);
          if (d <= r_local) {
            const double rel = d / r_local;
            v += intensity * (1.0 - 0.3 * rel * rel);
          }
        }
        vol.at(x, y, z) = static_cast<float>(v);
      }
    }
  }
  return {std::move(vol), center, radius};
}

std::vector<int> simulate_annotators(int true_class, const AnnotatorModel& model, std::mt19937_64& rng) {
  if (true_class < 1 || true_class > model.classes()) throw DataError("true class out of range");
  const int n = draw_index(model.count_dist, rng) + 1;
  const auto& row = model.confusion[static_cast<std::size_t>(true_class - 1)];
  std::vector<int> scores;
  scores.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) scores.push_back(draw_index(row, rng) + 1);
  return scores;
}

namespace {

std::string sample_id(const SyntheticSpec& spec, int i) {
  std::string digits = std::to_string(i);
  const std::string width = std::to_string(std::max(1, spec.n_samples - 1));
  if (digits.size() < width.size()) digits.insert(0, width.size() - digits.size(), '0');
  return spec.id_prefix + digits;
}

int draw_class(const SyntheticSpec& spec, int i) {
  auto rng = make_rng(spec.seed, {tag(Stream::volume), static_cast<std::uint64_t>(i), 0});
  return draw_index(spec.prior(), rng) + 1;
}

}  // namespace

std::vector<SyntheticSample> gen_annotations(const SyntheticSpec& spec, const AnnotatorModel& model) {
  spec.validate();
  model.validate();
  if (model.classes() != spec.q) throw ConfigError("annotator model and synthetic spec disagree on q");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    SyntheticSample s;
    s.true_class = draw_class(spec, i);
    auto arng = make_rng(spec.seed, {tag(Stream::annotators), static_cast<std::uint64_t>(i)});
    s.record.id = sample_id(spec, i);
    s.record.scores = simulate_annotators(s.true_class, model, arng);
    out.push_back(std::move(s));
  }
  return out;
}

fs::path gen_dataset(const SyntheticSpec& spec, const AnnotatorModel& model, const fs::path& out_dir) {
  auto samples = gen_annotations(spec, model);
  std::error_code ec;
  fs::create_directories(out_dir / "volumes", ec);
  if (ec) throw DataError("cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  GroundTruth truth;
  std::vector<AnnotationRecord> records;
  records.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    auto vrng = make_rng(spec.seed, {tag(Stream::volume), static_cast<std::uint64_t>(i), 1});
    auto sv = gen_volume(s.true_class, spec, vrng);
    const fs::path vol_path = out_dir / "volumes" / (s.record.id + ".nvol");
    write_volume(sv.volume, vol_path);
    s.record.volume_ref = vol_path.string();
    s.record.center = sv.center;
    truth[s.record.id] = s.true_class;
    records.push_back(s.record);
  }
  const fs::path manifest = out_dir / "manifest.jsonl";
  write_manifest(manifest, records);
  write_ground_truth(truth, out_dir / "ground_truth.json");
  return manifest;
}

GroundTruth read_ground_truth(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ground truth " + path.string());
  try {
    return json::parse(in).get<GroundTruth>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_ground_truth(const GroundTruth& truth, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << json(truth).dump(1) << '\n';
}

void to_json(json& j, const AnnotatorModel& m) {
  j = json{{"confusion", m.confusion}, {"count_dist", m.count_dist}};
}

void from_json(const json& j, AnnotatorModel& m) {
  j.at("confusion").get_to(m.confusion);
  j.at("count_dist").get_to(m.count_dist);
}

void to_json(json& j, const ClassGeometry& g) {
  j = json{{"radius_min", g.radius_min},       {"radius_max", g.radius_max}, {"intensity_min", g.intensity_min},
           {"intensity_max", g.intensity_max}, {"roughness", g.roughness}};
}

void from_json(const json& j, ClassGeometry& g) {
  j.at("radius_min").get_to(g.radius_min);
  j.at("radius_max").get_to(g.radius_max);
  g.intensity_min = j.value("intensity_min", g.intensity_min);
  g.intensity_max = j.value("intensity_max", g.intensity_max);
  g.roughness = j.value("roughness", g.roughness);
}

void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"q", s.q},
           {"n_samples", s.n_samples},
           {"cube_side", s.cube_side},
           {"spacing", s.spacing},
           {"class_prior", s.prior()},
           {"geometry", s.classes()},
           {"noise_amplitude", s.noise_amplitude},
           {"center_jitter", s.center_jitter},
           {"seed", s.seed},
           {"id_prefix", s.id_prefix}};
}

void from_json(const json& j, SyntheticSpec& s) {
  s.q = j.value("q", s.q);
  s.n_samples = j.value("n_samples", s.n_samples);
  s.cube_side = j.value("cube_side", s.cube_side);
  if (j.contains("spacing")) j.at("spacing").get_to(s.spacing);
  if (j.contains("class_prior")) j.at("class_prior").get_to(s.class_prior);
  if (j.contains("geometry")) j.at("geometry").get_to(s.geometry);
  s.noise_amplitude = j.value("noise_amplitude", s.noise_amplitude);
  s.center_jitter = j.value("center_jitter", s.center_jitter);
  s.seed = j.value("seed", s.seed);
  s.id_prefix = j.value("id_prefix", s.id_prefix);
}

}  // namespace dar
