#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dar/data_model.hpp"
#include "dar/volume.hpp"

namespace dar {

/// Emulated annotation process: how many raters see a nodule, and how each
/// rater's score relates to the true class.
struct AnnotatorModel {
  std::vector<std::vector<double>> confusion;  // Q x Q, row = true class
  std::vector<double> count_dist;              // P(1), P(2), P(3), P(4) raters

  int classes() const noexcept { return static_cast<int>(confusion.size()); }
  void validate() const;

  /// Tridiagonal: `diag` on the truth, the rest split evenly over the one or
  /// two ordinal neighbours.
  static AnnotatorModel tridiagonal(int q, double diag, std::vector<double> count_dist);
  static AnnotatorModel identity(int q, std::vector<double> count_dist);
  /// 0.7 / 0.15 / 0.15 tridiagonal with a rater-count mix giving roughly
  /// 15 / 55 / 30 % consistent / inconsistent / single-rater records.
  static AnnotatorModel defaults(int q = kDefaultClasses);
};

struct ClassGeometry {
  double radius_min = 2.0;
  double radius_max = 4.0;
  double intensity_min = 0.5;
  double intensity_max = 0.7;
  double roughness = 0.0;  // relative amplitude of boundary lobulation
};

struct SyntheticSpec {
  int q = kDefaultClasses;
  int n_samples = 100;
  int cube_side = 32;
  Volume::Spacing spacing{1.0f, 1.0f, 1.0f};
  std::vector<double> class_prior;      // empty -> uniform
  std::vector<ClassGeometry> geometry;  // empty -> default_geometry()
  double noise_amplitude = 0.08;
  int center_jitter = 2;
  std::uint64_t seed = 1;
  std::string id_prefix = "n";

  void validate() const;
  std::vector<double> prior() const;
  std::vector<ClassGeometry> classes() const;
};

/// Ordinal class geometry: radius, intensity and lobulation all grow with the
/// class index, adjacent classes overlapping in radius.
std::vector<ClassGeometry> default_geometry(int q, int cube_side);

struct SyntheticVolume {
  Volume volume;
  VoxelCoord center;
  double radius = 0.0;  // base radius actually drawn
};

SyntheticVolume gen_volume(int cls, const SyntheticSpec& spec, std::mt19937_64& rng);

std::vector<int> simulate_annotators(int true_class, const AnnotatorModel& model, std::mt19937_64& rng);

struct SyntheticSample {
  AnnotationRecord record;
  int true_class = 0;
};

/// In-memory variant of gen_dataset: same draws, no files. Volume refs are
/// left empty.
std::vector<SyntheticSample> gen_annotations(const SyntheticSpec& spec, const AnnotatorModel& model);

/// Writes <out_dir>/volumes/*.nvol, <out_dir>/manifest.jsonl and the
/// ground-truth sidecar <out_dir>/ground_truth.json. Returns the manifest path.
std::filesystem::path gen_dataset(const SyntheticSpec& spec, const AnnotatorModel& model,
                                  const std::filesystem::path& out_dir);

/// Sidecar {id: true_class}. Only evaluation code reads this.
using GroundTruth = std::map<std::string, int>;
GroundTruth read_ground_truth(const std::filesystem::path& path);
void write_ground_truth(const GroundTruth& truth, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const AnnotatorModel& m);
void from_json(const nlohmann::json& j, AnnotatorModel& m);
void to_json(nlohmann::json& j, const ClassGeometry& g);
void from_json(const nlohmann::json& j, ClassGeometry& g);
void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

}  // namespace dar
