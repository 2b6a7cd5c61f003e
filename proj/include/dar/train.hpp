#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dar/data_model.hpp"
#include "dar/metrics.hpp"
#include "dar/network.hpp"
#include "dar/objectives.hpp"
#include "dar/volume.hpp"

namespace dar {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 100;
  int fusion_epochs = 0;  // 0: same as epochs
  double lr_pretrain = 1e-4;
  double lr_finetune = 5e-5;
  double lr_fusion = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double poly_power = 0.9;
  LossConfig loss;
  int m = 6;
  int k = 0;  // 0: default_transfer_start(m)
  int base_channels = 8;
  int max_channels = 64;
  std::uint64_t seed = 0;
  int patience = 10;  // 0 disables early stopping
  double val_fraction = 0.1;
  bool augment = true;
  bool finetune_siblings = true;  // CF/LR weights also move during fine-tuning
  bool joint_fusion = false;      // back-propagate the fusion loss into the Prd streams

  int resolved_k() const { return k == 0 ? default_transfer_start(m) : k; }
  int resolved_fusion_epochs() const { return fusion_epochs == 0 ? epochs : fusion_epochs; }
  BackboneSpec backbone(int input_size, int q) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are a config error.
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Data

struct Example {
  std::string id;
  std::vector<int> scores;
  PatchTriplet patches;
  LabelVector label;
  int truth = 0;  // 1-based ground truth when known
};

struct TrainingData {
  int q = kDefaultClasses;
  std::vector<Example> cr;
  std::vector<Example> ic;
  std::vector<Example> lr;
};

/// Preprocesses every record's volume into a patch triplet.
std::vector<PatchTriplet> load_patches(std::span<const AnnotationRecord> records, const PrepConfig& prep);
/// Partitions the records and attaches patches. `truth` (by id) is optional.
TrainingData build_training_data(std::span<const AnnotationRecord> records, std::span<const PatchTriplet> patches,
                                 int q, const std::function<int(const std::string&)>& truth = {});
/// Test examples: onehot label from `truth`, patches attached.
std::vector<Example> build_test_set(std::span<const AnnotationRecord> records, std::span<const PatchTriplet> patches,
                                    int q, const std::function<int(const std::string&)>& truth);

/// All records relabelled with their rounded-mean proxy class, as one onehot set.
TrainingData proxy_label_data(const TrainingData& data);
/// Keeps round(fraction * n) of the IC and LR examples (seeded), in original order.
TrainingData subsample_ambiguous(const TrainingData& data, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  Adam(const ParamSet& layout, double beta1, double beta2, double eps);
  void step(ParamSet& params, const ParamSet& grads, double lr);
  long long steps() const noexcept { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  ParamSet m_, v_;
};

// ---------------------------------------------------------------------------
// Training loops

struct StepRecord {
  long long step = 0;
  double lr = 0.0;
  std::optional<double> l_prd;
  std::optional<double> l_cf;
  std::optional<double> l_lr;
  double l_total = 0.0;
};

struct EpochRecord {
  int epoch = 0;  // 0 is the evaluation before any update
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
};

struct TrainLog {
  std::string stage;
  long long planned_steps = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  int best_epoch = 0;
  std::optional<double> initial_val_loss;
  std::optional<double> best_val_loss;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

void to_json(nlohmann::json& j, const StepRecord& s);
void to_json(nlohmann::json& j, const EpochRecord& e);
/// One JSON object per line: {step, lr, L_prd, L_cf, L_lr, L_total}.
void write_step_log(const std::filesystem::path& path, const TrainLog& log);

/// Size of the validation split for n training candidates.
std::size_t validation_count(std::size_t n, double fraction);

// Seed domains for the stages, so continued training and degenerate
// fine-tuning draw the same splits and shuffles.
enum class Stage : std::uint64_t { pretrain_prd = 1, pretrain_cf = 2, pretrain_lr = 3, finetune = 4, fusion = 5 };
Stage pretrain_stage(Role role);

template <typename Model>
struct Trained {
  Model model;
  TrainLog log;
};

/// Trains one network with its role loss starting from `init`.
Trained<Backbone> train_single(Role role, Backbone init, View view, std::span<const Example> data,
                               const TrainConfig& cfg, double lr0, Stage stage);
/// Fresh initialization, lr_pretrain. prd and lr take onehot labels, cf candidate labels.
Trained<Backbone> pretrain(Role role, View view, std::span<const Example> data, const TrainConfig& cfg,
                           int input_size, int q);
/// Optimizes loss_dar on CR data at lr_finetune, starting from the three pretrained nets.
Trained<DarModel> finetune_dar(View view, const Backbone& prd, const Backbone& cf, const Backbone& lr,
                               std::span<const Example> cr, const TrainConfig& cfg, int k);
/// Trains the 3Q -> Q fusion map on CR data. Per-view weights stay frozen
/// unless cfg.joint_fusion is set.
Trained<MvModel> train_fusion(MvModel model, std::span<const Example> cr, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Prediction

std::vector<double> predict_view(const DarModel& model, const Image2D& patch);
std::vector<double> predict_mv(const MvModel& model, const PatchTriplet& patches);
MetricsReport evaluate(const MvModel& model, std::span<const Example> test);
/// Validation-style accuracy of a single Prd stream (no attention).
double view_accuracy(const Backbone& net, View view, std::span<const Example> data);

}  // namespace dar
