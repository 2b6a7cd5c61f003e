#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dar/metrics.hpp"
#include "dar/network.hpp"
#include "dar/train.hpp"

namespace dar {

enum class Method { mv_dar, mv_prd, ave };
const char* to_string(Method m);
Method method_from_string(const std::string& name);

struct PretrainedViews {
  std::array<Backbone, 3> prd;
  std::array<Backbone, 3> cf;
  std::array<Backbone, 3> lr;
  bool has_siblings = false;
  std::vector<TrainLog> logs;
};

int input_size_of(const TrainingData& data);

/// Pretrains Prd on CR for each view and, with `siblings`, CF on IC and LR on LR.
PretrainedViews pretrain_views(const TrainingData& data, const TrainConfig& cfg, bool siblings);

struct PipelineResult {
  MvModel model;
  std::vector<TrainLog> logs;
};

struct FinetunedViews {
  std::array<DarModel, 3> models;
  std::vector<TrainLog> logs;
};

/// Second stage alone, per view, as used by finish_pipeline.
FinetunedViews finetune_views(const TrainingData& data, Method method, const TrainConfig& cfg,
                              const PretrainedViews& pre);

/// Second stage and fusion on top of pretrained views.
///  mv_dar: fine-tune DAR (transfer at k, loss_dar) per view, then fusion.
///  mv_prd / ave: continue Prd alone (no siblings, no attention), then fusion.
/// For ave, `data` and `pre` must already be the proxy-labelled versions.
PipelineResult finish_pipeline(const TrainingData& data, Method method, const TrainConfig& cfg,
                               const PretrainedViews& pre);
/// Full pipeline from scratch; ave relabels every record with its rounded mean first.
PipelineResult run_pipeline(const TrainingData& data, Method method, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation protocols

/// Stratified K-fold assignment: samples of each class are shuffled (seeded)
/// and the class-ordered sequence is dealt round-robin, so fold sizes differ
/// by at most one and each class is spread as evenly as possible.
std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> classes, int folds, std::uint64_t seed);

/// CR examples of `data` minus the held-out fold; IC and LR stay in training.
TrainingData without_fold(const TrainingData& data, std::span<const std::size_t> fold);
std::vector<Example> fold_test_set(const TrainingData& data, std::span<const std::size_t> fold);

/// Hold-out test set when `test` is non-empty, otherwise K-fold cross-validation
/// over the CR subset with pooled out-of-fold predictions.
struct Protocol {
  std::vector<Example> test;
  int folds = 5;

  bool holdout() const noexcept { return !test.empty(); }
};

/// One trained model per fold (fold = -1 for hold-out), scored by `protocol`.
using FoldTrainer = std::function<MvModel(const TrainingData& train, int fold)>;
MetricsReport assess(const TrainingData& data, const Protocol& protocol, std::uint64_t seed, const FoldTrainer& train);

struct RunSummary {
  std::map<std::string, Summary> metrics;  // accuracy, macro_recall, macro_f1, macro_auc
};
RunSummary summarize_runs(std::span<const MetricsReport> runs);

struct CrossvalResult {
  int folds = 5;
  int repeats = 5;
  int seed_stride = 1;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<std::vector<std::string>>> fold_ids;  // [repeat][fold] -> CR ids
  std::vector<MetricsReport> runs;                              // pooled out-of-fold, per repeat
  RunSummary summary;
};

/// Repeat r uses seed cfg.seed + r * seed_stride for folds and training.
CrossvalResult crossval(const TrainingData& data, Method method, const TrainConfig& cfg, int folds, int repeats,
                        int seed_stride = 1, int jobs = 1);

struct CompareResult {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<MetricsReport>> runs;  // method -> per seed
  std::map<std::string, RunSummary> summary;
  std::map<std::string, PairedTTest> ttests;  // "mv_dar_vs_<method>:<metric>"
};

CompareResult compare_methods(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg, int n_seeds,
                              int jobs = 1);

struct CurvePoint {
  double fraction = 0.0;
  std::vector<double> accuracy;  // per seed
  Summary summary;
};

struct RobustnessResult {
  std::vector<std::uint64_t> seeds;
  std::vector<CurvePoint> points;
};

/// Fraction 0 runs the Prd-only pipeline; other fractions subsample IC and LR
/// and run MV-DAR. Prd pretraining is shared across fractions of a seed.
RobustnessResult robustness_sweep(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg,
                                  std::span<const double> fractions, int n_seeds, int jobs = 1);

struct SweepGrid {
  std::vector<int> k;
  std::vector<double> mu;
  std::vector<double> delta;
};

struct SweepRow {
  int k = 0;
  double mu = 0.0;
  double delta = 0.0;
  std::vector<double> accuracy;  // per seed
  Summary summary;
};

/// Every (k, mu, delta) combination; pretraining is shared across the grid.
std::vector<SweepRow> grid_sweep(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg,
                                 const SweepGrid& grid, int n_seeds, int jobs = 1);

/// Runs fn(0..n-1) on up to `jobs` threads; the first exception is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

void to_json(nlohmann::json& j, const RunSummary& s);
void to_json(nlohmann::json& j, const CrossvalResult& r);
void to_json(nlohmann::json& j, const CompareResult& r);
void to_json(nlohmann::json& j, const RobustnessResult& r);
void to_json(nlohmann::json& j, const SweepRow& r);

// ---------------------------------------------------------------------------
// Report files

/// metrics.json plus roc_<class>.csv for every class with a defined ROC.
void write_metrics_report(const std::filesystem::path& dir, const MetricsReport& report);
/// One row per run: label, accuracy, macro_recall, macro_f1, macro_auc.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, MetricsReport>>& runs);
void write_curve_csv(const std::filesystem::path& path, const RobustnessResult& r);
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

}  // namespace dar
