#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dar/experiments.hpp"
#include "dar/synthetic.hpp"
#include "dar/train.hpp"
#include "dar/volume.hpp"

namespace dar {

/// Everything one CLI invocation needs. Relative paths are resolved when the
/// config is loaded, so a resolved config is self-contained.
struct ExperimentConfig {
  std::filesystem::path manifest;
  std::filesystem::path ground_truth;  // optional for training data
  std::filesystem::path test_manifest;  // empty: cross-validation over CR
  std::filesystem::path test_ground_truth;
  std::filesystem::path output = "runs";

  int q = kDefaultClasses;
  PrepConfig prep;
  TrainConfig train;
  SyntheticSpec synthetic;
  AnnotatorModel annotators = AnnotatorModel::defaults(kDefaultClasses);

  Method method = Method::mv_dar;
  int folds = 5;
  int repeats = 5;
  int seed_stride = 1;
  int seeds = 3;
  SweepGrid sweep;                // empty k: the resolved transfer start
  std::vector<double> fractions;  // robustness sweep points

  // Upstream artifacts for the staged commands.
  std::filesystem::path pretrained;  // directory of <role>_<view>.ckpt
  std::filesystem::path finetuned;   // directory of dar_<view>.ckpt
  std::filesystem::path model;       // mv.ckpt
  std::string sample;                // record id for dump-features
  View view = View::axial;
  int block = 0;  // 0: last block

  ExperimentConfig();

  SweepGrid resolved_sweep() const;
  /// Checks ranges and that the paths `command` reads exist.
  void validate(const std::string& command) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are a config error.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Applies "a.b.c=value" to a JSON object. The value is parsed as JSON when
/// possible and kept as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Makes the path-valued keys of a raw config absolute against `base`.
void resolve_paths(nlohmann::json& j, const std::filesystem::path& base);

/// FNV-1a of the compact resolved config, excluding the output root.
std::uint64_t config_hash(const ExperimentConfig& c);

/// <root>/<command>-<hash as 16 hex digits>-seed<seed>.
std::filesystem::path run_directory(const std::filesystem::path& root, const std::string& command,
                                    const ExperimentConfig& c);

}  // namespace dar
