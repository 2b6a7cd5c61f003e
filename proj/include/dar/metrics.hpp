#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace dar {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct ClassMetrics {
  int cls = 0;  // 1-based
  long support = 0;
  bool present = false;  // appears in the ground truth
  double recall = 0.0;
  double precision = 0.0;  // 0 when the class is never predicted
  double f1 = 0.0;
  std::optional<double> auc;
  std::vector<RocPoint> roc;
};

struct MetricsReport {
  long n = 0;
  int q = 0;
  double accuracy = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> macro_auc;  // empty when no class has both positives and negatives
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<long>> confusion;  // [truth - 1][predicted - 1]
  std::vector<std::string> warnings;
};

/// Scores: one row of Q class scores per sample (probabilities or any
/// monotone transform). Truth: 1-based classes. Prediction is the first
/// argmax. Macro averages run over classes present in the truth.
MetricsReport evaluate_scores(std::span<const std::vector<double>> scores, std::span<const int> truth, int q);

/// One-vs-rest ROC with tied scores grouped into one step, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive);
double trapezoid_auc(std::span<const RocPoint> roc);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  std::vector<double> values;
};

Summary summarize(std::vector<double> values);

struct PairedTTest {
  double t = 0.0;  // NaN in the degenerate zero-variance case
  int df = 0;
  double p = 1.0;
  std::string convention;  // empty unless the degenerate branch applied
};

/// Two-sided paired t-test. When the paired differences have zero variance
/// the statistic is undefined; p is reported as 1 if every difference is 0
/// and as 0 otherwise.
PairedTTest paired_ttest(std::span<const double> a, std::span<const double> b);

void to_json(nlohmann::json& j, const MetricsReport& r);
void to_json(nlohmann::json& j, const Summary& s);
void to_json(nlohmann::json& j, const PairedTTest& t);

}  // namespace dar
