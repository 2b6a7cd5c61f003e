#include "dar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "dar/error.hpp"

namespace dar {

using json = nlohmann::json;

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw DataError("roc_curve: score/label length mismatch");
  const auto pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const double neg = static_cast<double>(positive.size()) - pos;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> roc{{0.0, 0.0}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? tp : fp) += 1.0;
      ++j;
    }
    roc.push_back({neg > 0 ? fp / neg : 0.0, pos > 0 ? tp / pos : 0.0});
    i = j;
  }
  return roc;
}

double trapezoid_auc(std::span<const RocPoint> roc) {
  double auc = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    auc += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  }
  return auc;
}

MetricsReport evaluate_scores(std::span<const std::vector<double>> scores, std::span<const int> truth, int q) {
  if (scores.empty()) throw DataError("evaluate: empty test set");
  if (scores.size() != truth.size()) throw DataError("evaluate: score/truth length mismatch");
  MetricsReport r;
  r.n = static_cast<long>(scores.size());
  r.q = q;
  r.confusion.assign(static_cast<std::size_t>(q), std::vector<long>(static_cast<std::size_t>(q), 0));

  long correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<int>(scores[i].size()) != q) throw DataError("evaluate: score row has the wrong length");
    if (truth[i] < 1 || truth[i] > q) throw DataError("evaluate: truth class out of range");
    const int pred = static_cast<int>(std::max_element(scores[i].begin(), scores[i].end()) - scores[i].begin()) + 1;
    ++r.confusion[static_cast<std::size_t>(truth[i] - 1)][static_cast<std::size_t>(pred - 1)];
    if (pred == truth[i]) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);

  double sum_recall = 0.0, sum_f1 = 0.0, sum_auc = 0.0;
  int n_present = 0, n_auc = 0;
  for (int c = 1; c <= q; ++c) {
    ClassMetrics cm;
    cm.cls = c;
    const auto ci = static_cast<std::size_t>(c - 1);
    long tp = r.confusion[ci][ci], fn = 0, fp = 0;
    for (int o = 0; o < q; ++o) {
      if (o == c - 1) continue;
      fn += r.confusion[ci][static_cast<std::size_t>(o)];
      fp += r.confusion[static_cast<std::size_t>(o)][ci];
    }
    cm.support = tp + fn;
    cm.present = cm.support > 0;
    cm.recall = cm.present ? static_cast<double>(tp) / static_cast<double>(cm.support) : 0.0;
    cm.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    cm.f1 = (2 * tp + fp + fn) > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;

    std::vector<double> col(scores.size());
    auto pos = std::make_unique<bool[]>(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col[i] = scores[i][ci];
      pos[i] = truth[i] == c;
    }
    const std::span<const bool> pos_span(pos.get(), scores.size());

    if (!cm.present) {
      r.warnings.push_back("class " + std::to_string(c) + " absent from ground truth; excluded from macro averages");
    } else {
      ++n_present;
      sum_recall += cm.recall;
      sum_f1 += cm.f1;
      if (cm.support < r.n) {
        cm.roc = roc_curve(col, pos_span);
        cm.auc = trapezoid_auc(cm.roc);
        sum_auc += *cm.auc;
        ++n_auc;
      } else {
        r.warnings.push_back("class " + std::to_string(c) + " has no negatives; AUC undefined and excluded");
      }
    }
    r.per_class.push_back(std::move(cm));
  }
  r.macro_recall = sum_recall / n_present;
  r.macro_f1 = sum_f1 / n_present;
  if (n_auc > 0) r.macro_auc = sum_auc / n_auc;
  return r;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  const double n = static_cast<double>(s.values.size());
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / n;
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

PairedTTest paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("paired_ttest: samples differ in length");
  if (a.size() < 2) throw DataError("paired_ttest: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  PairedTTest r;
  r.df = static_cast<int>(n) - 1;
  // Differences equal to each other up to round-off count as zero variance.
  const double scale = std::max(1.0, std::abs(mean));
  if (ss <= 1e-24 * scale * scale * static_cast<double>(n)) {
    r.t = std::numeric_limits<double>::quiet_NaN();
    const bool all_zero = std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
    r.p = all_zero ? 1.0 : 0.0;
    r.convention = all_zero ? "zero-variance differences, all zero: p = 1"
                            : "zero-variance differences, nonzero mean: p = 0";
    return r;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(r.df));
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

namespace {
json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
}  // namespace

void to_json(json& j, const MetricsReport& r) {
  json classes = json::array();
  for (const auto& c : r.per_class) {
    json roc = json::array();
    for (const auto& p : c.roc) roc.push_back({p.fpr, p.tpr});
    classes.push_back({{"class", c.cls},
                       {"support", c.support},
                       {"present", c.present},
                       {"recall", c.recall},
                       {"precision", c.precision},
                       {"f1", c.f1},
                       {"auc", optional_number(c.auc)},
                       {"roc", roc}});
  }
  j = json{{"n", r.n},
           {"q", r.q},
           {"accuracy", r.accuracy},
           {"macro_recall", r.macro_recall},
           {"macro_f1", r.macro_f1},
           {"macro_auc", optional_number(r.macro_auc)},
           {"confusion", r.confusion},
           {"per_class", classes},
           {"warnings", r.warnings}};
}

void to_json(json& j, const Summary& s) { j = json{{"mean", s.mean}, {"std", s.std}, {"values", s.values}}; }

void to_json(json& j, const PairedTTest& t) {
  j = json{{"t", std::isnan(t.t) ? json(nullptr) : json(t.t)}, {"df", t.df}, {"p", t.p}};
  if (!t.convention.empty()) j["convention"] = t.convention;
}

}  // namespace dar
