// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//   acceptance [--criteria 1,2,...] [--jobs N]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dar/attention.hpp"
#include "dar/data_model.hpp"
#include "dar/experiments.hpp"
#include "dar/metrics.hpp"
#include "dar/objectives.hpp"
#include "dar/synthetic.hpp"
#include "dar/train.hpp"
#include "dar/volume.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace dar;
namespace fs = std::filesystem;
using M = BatchMatrix<double>;
using FM = BasicFeatureMap<double>;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. Loss closed forms

Outcome loss_closed_forms() {
  Outcome o;
  std::vector<std::string> bad;
  const double eps = 1e-7;

  M uniform = M::Constant(1, 5, 0.2), y = M::Zero(1, 5);
  y(0, 2) = 1.0;
  const double lp = loss_prd(uniform, y, eps);
  if (std::abs(lp - std::log(5.0)) > 1e-9) bad.push_back("loss_prd(uniform)=" + fmt(lp, 17));

  M cand = M::Zero(1, 5), half = M::Constant(1, 5, 0.5);
  cand(0, 1) = cand(0, 2) = 1.0;
  const double lc = loss_cf(half, cand, eps);
  if (std::abs(lc - 3.0 * std::log(2.0)) > 1e-9) bad.push_back("loss_cf({2,3}, 0.5)=" + fmt(lc, 17));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  M sig(4, 5);
  for (Eigen::Index i = 0; i < sig.size(); ++i) sig.data()[i] = u(rng);
  const double full = loss_cf(sig, M(M::Ones(4, 5)), eps);
  if (full != 0.0) bad.push_back("loss_cf(full set)=" + fmt(full, 17));

  // L(mu, delta) must be affine: L(0,0) + mu (L(1,0) - L(0,0)) + delta (L(0,1) - L(0,0)).
  const int n = 6, q = 5;
  auto probs = [&](bool softmax) {
    M z(n, q);
    std::normal_distribution<double> nd(0.0, 1.5);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
    return softmax ? softmax_rows(z) : sigmoid_all(z);
  };
  const M yp = probs(true), yc = probs(false), yl = probs(true);
  M onehot = M::Zero(n, q);
  for (int i = 0; i < n; ++i) onehot(i, (i * 3) % q) = 1.0;
  auto total = [&](double mu, double delta) {
    LossConfig c;
    c.mu = mu;
    c.delta = delta;
    return loss_dar(yp, yc, yl, onehot, c).total;
  };
  const double l00 = total(0, 0), l10 = total(1, 0), l01 = total(0, 1);
  double worst = 0.0;
  for (auto [mu, delta] : std::vector<std::pair<double, double>>{{0.4, 0.6}, {0.45, 0.5}, {0.5, 0.5}, {0.55, 0.4}, {0.6, 0.6}}) {
    const double affine = l00 + mu * (l10 - l00) + delta * (l01 - l00);
    worst = std::max(worst, std::abs(total(mu, delta) - affine));
  }
  if (worst > 1e-12) bad.push_back("loss_dar affinity error " + fmt(worst));

  o.pass = bad.empty();
  o.detail = o.pass ? "ln5, 3ln2, exact 0, affinity error " + fmt(worst, 3) : bad.front();
  return o;
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

constexpr double kStep = 1e-3;
constexpr double kTol = 1e-4;

struct GradStats {
  double worst = 0.0;
  long checked = 0;
  long skipped = 0;   // |sigmoid(f_lr) - sigmoid(f_prd)| < 1e-6
  long straddle = 0;  // the +-step stencil changes the sign of that difference
  void add(double analytic, double numeric) {
    worst = std::max(worst, test::rel_error(analytic, numeric));
    ++checked;
  }
};

std::vector<double> flat(const M& m) { return {m.data(), m.data() + m.size()}; }
M unflat(const std::vector<double>& v, int n, int q) {
  M m(n, q);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

void check_loss_grads(GradStats& st) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 1.5);
  const double eps = 1e-7;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 5, q = 5;
    auto logits = [&] {
      M z(n, q);
      for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
      return z;
    };
    M onehot = M::Zero(n, q), cand = M::Zero(n, q);
    for (int i = 0; i < n; ++i) {
      onehot(i, static_cast<Eigen::Index>(rng() % q)) = 1.0;
      const auto a = static_cast<Eigen::Index>(rng() % (q - 1));
      cand(i, a) = cand(i, a + 1) = 1.0;
    }
    const M zp = logits(), zc = logits(), zl = logits();

    auto check = [&](const M& at, const M& analytic, const std::function<double(const M&)>& f) {
      const auto x = flat(at);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double num = test::central_diff([&](const std::vector<double>& v) { return f(unflat(v, n, q)); }, x, i, kStep);
        st.add(analytic.data()[i], num);
      }
    };
    check(zp, cross_entropy_grad_logits(softmax_rows(zp), onehot, eps),
          [&](const M& z) { return loss_prd(softmax_rows(z), onehot, eps); });
    check(zl, cross_entropy_grad_logits(softmax_rows(zl), onehot, eps),
          [&](const M& z) { return loss_lr(softmax_rows(z), onehot, eps); });
    check(zc, loss_cf_grad_logits(sigmoid_all(zc), cand, eps),
          [&](const M& z) { return loss_cf(sigmoid_all(z), cand, eps); });

    LossConfig cfg;
    const auto g = loss_dar_grad_logits(softmax_rows(zp), sigmoid_all(zc), softmax_rows(zl), onehot, cfg);
    auto dar_at = [&](const M& p, const M& c, const M& l) {
      return loss_dar(softmax_rows(p), sigmoid_all(c), softmax_rows(l), onehot, cfg).total;
    };
    check(zp, g.prd, [&](const M& z) { return dar_at(z, zc, zl); });
    check(zc, g.cf, [&](const M& z) { return dar_at(zp, z, zl); });
    check(zl, g.lr, [&](const M& z) { return dar_at(zp, zc, z); });
  }
}

FM random_map(std::mt19937_64& rng, double scale = 1.5) {
  std::normal_distribution<double> nd(0.0, scale);
  FM m(2, 3, 3);
  for (auto& v : m.values) v = nd(rng);
  return m;
}

double weighted_sum(const FM& out, const FM& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.values[i] * w.values[i];
  return s;
}

void check_module_grads(GradStats& st) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const FM fp = random_map(rng), fc = random_map(rng), fl = random_map(rng), w = random_map(rng, 1.0);
    // Perturb one input element, keeping the others fixed.
    auto probe = [&](const FM& base, const std::function<double(const FM&)>& f, const FM& analytic,
                     const std::function<bool(std::size_t)>& skip) {
      for (std::size_t i = 0; i < base.size(); ++i) {
        if (skip(i)) continue;
        const double num = test::central_diff(
            [&](const std::vector<double>& v) {
              FM m = base;
              m.values = v;
              return f(m);
            },
            base.values, i, kStep);
        st.add(analytic.values[i], num);
      }
    };
    // |.| kink of CA. `lr_side` says which argument the probe perturbs.
    auto near_kink = [&](const FM& l, const FM& p, bool lr_side) {
      return [&st, &l, &p, lr_side](std::size_t i) {
        const double d = sigmoid(l.values[i]) - sigmoid(p.values[i]);
        if (std::abs(d) < 1e-6) {
          ++st.skipped;
          return true;
        }
        auto diff_at = [&](double shift) {
          return lr_side ? sigmoid(l.values[i] + shift) - sigmoid(p.values[i])
                         : sigmoid(l.values[i]) - sigmoid(p.values[i] + shift);
        };
        if ((diff_at(kStep) > 0) != (diff_at(-kStep) > 0)) {
          ++st.straddle;
          return true;
        }
        return false;
      };
    };
    auto never = [](std::size_t) { return false; };

    const auto na = na_backward(fc, fp, w);
    probe(fc, [&](const FM& m) { return weighted_sum(na_module(m, fp), w); }, na.other, never);
    probe(fp, [&](const FM& m) { return weighted_sum(na_module(fc, m), w); }, na.prd, never);

    const auto ca = ca_backward(fl, fp, w);
    probe(fl, [&](const FM& m) { return weighted_sum(ca_module(m, fp), w); }, ca.other, near_kink(fl, fp, true));
    probe(fp, [&](const FM& m) { return weighted_sum(ca_module(fl, m), w); }, ca.prd, near_kink(fl, fp, false));

    const FM o_na = na_module(fc, fp), o_ca = ca_module(fl, fp);
    probe(fp, [&](const FM& m) { return weighted_sum(fuse_features(m, o_na, o_ca), w); }, w, never);
    probe(o_na, [&](const FM& m) { return weighted_sum(fuse_features(fp, m, o_ca), w); }, w, never);
    probe(o_ca, [&](const FM& m) { return weighted_sum(fuse_features(fp, o_na, m), w); }, w, never);

    const auto ag = augment_backward(fp, fc, fl, w);
    probe(fp, [&](const FM& m) { return weighted_sum(augment_features(m, fc, fl), w); }, ag.prd, near_kink(fl, fp, false));
    probe(fc, [&](const FM& m) { return weighted_sum(augment_features(fp, m, fl), w); }, ag.cf, never);
    probe(fl, [&](const FM& m) { return weighted_sum(augment_features(fp, fc, m), w); }, ag.lr, near_kink(fl, fp, true));
  }
}

Outcome gradient_checks() {
  GradStats losses, modules;
  check_loss_grads(losses);
  check_module_grads(modules);
  Outcome o;
  o.pass = losses.worst <= kTol && modules.worst <= kTol;
  o.detail = "losses: " + std::to_string(losses.checked) + " partials, max rel " + fmt(losses.worst, 3) +
             "; modules: " + std::to_string(modules.checked) + " partials, max rel " + fmt(modules.worst, 3) +
             " (skipped " + std::to_string(modules.skipped) + " kink points, " + std::to_string(modules.straddle) +
             " stencils across the kink)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Attention limits

Outcome attention_limits() {
  std::mt19937_64 rng(4);
  const FM f = random_map(rng);
  const FM pos(2, 3, 3, 40.0), neg(2, 3, 3, -40.0);
  double worst_off = 0.0, worst_on = 0.0, worst_twice = 0.0;
  bool ca_exact = true;
  const FM off = na_module(pos, f), on = na_module(neg, f), ca = ca_module(f, f);
  const FM twice = augment_features(f, pos, f);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = std::abs(f.values[i]);
    worst_off = std::max(worst_off, std::abs(off.values[i]) / a);
    worst_on = std::max(worst_on, std::abs(on.values[i] - f.values[i]) / a);
    worst_twice = std::max(worst_twice, std::abs(twice.values[i] - 2.0 * f.values[i]) / a);
    ca_exact = ca_exact && ca.values[i] == f.values[i];
  }
  Outcome o;
  o.pass = worst_off <= 1e-15 && worst_on <= 1e-15 && ca_exact && worst_twice <= 1e-15;
  o.detail = "NA(+40) rel " + fmt(worst_off, 3) + ", NA(-40) rel " + fmt(worst_on, 3) + ", CA(f,f)==f " +
             (ca_exact ? "exact" : "inexact") + ", f_hat=2f rel " + fmt(worst_twice, 3);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Partition properties

Outcome partition_properties() {
  std::mt19937_64 rng(5);
  long violations = 0, total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<AnnotationRecord> recs;
    for (int i = 0; i < 1000; ++i) {
      std::vector<int> s(static_cast<std::size_t>(1 + rng() % 4));
      const bool agree = rng() % 3 == 0;
      const int base = 1 + static_cast<int>(rng() % 5);
      for (auto& v : s) v = agree ? base : 1 + static_cast<int>(rng() % 5);
      recs.push_back({"r" + std::to_string(i), "", s, {}});
    }
    const auto p = partition_dataset(recs, 5);
    std::multiset<std::string> ids;
    for (const auto* set : {&p.cr, &p.ic, &p.lr}) {
      for (const auto& r : *set) ids.insert(r.record.id);
    }
    std::multiset<std::string> want;
    for (const auto& r : recs) want.insert(r.id);
    violations += ids != want;
    auto all_equal = [](const std::vector<int>& s) { return std::all_of(s.begin(), s.end(), [&](int v) { return v == s[0]; }); };
    for (const auto& r : p.cr) violations += !(r.record.scores.size() >= 2 && all_equal(r.record.scores) && r.label.hot_class() == r.record.scores[0]);
    for (const auto& r : p.ic) violations += !(r.record.scores.size() >= 2 && !all_equal(r.record.scores));
    for (const auto& r : p.lr) violations += !(r.record.scores.size() == 1 && r.label.hot_class() == r.record.scores[0]);
    total += static_cast<long>(recs.size());
  }
  return {violations == 0, "200 trials x 1000 records, " + std::to_string(violations) + " violations"};
}

// ---------------------------------------------------------------------------
// 5. Metric oracle

double mann_whitney(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / static_cast<double>(pairs);
}

Outcome metric_oracle() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  long mismatched_confusion = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int q = 2 + trial % 4;
    const int n = 10 + static_cast<int>(rng() % 60);
    std::vector<std::vector<double>> s(static_cast<std::size_t>(n));
    std::vector<int> truth(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < q; ++c) s[static_cast<std::size_t>(i)].push_back(static_cast<double>(rng() % 5) / 4.0);
      truth[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng() % static_cast<unsigned>(q));
    }
    const auto r = evaluate_scores(s, truth, q);

    std::vector<std::vector<long>> conf(static_cast<std::size_t>(q), std::vector<long>(static_cast<std::size_t>(q), 0));
    for (int i = 0; i < n; ++i) {
      const auto& row = s[static_cast<std::size_t>(i)];
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      ++conf[static_cast<std::size_t>(truth[static_cast<std::size_t>(i)] - 1)][best];
    }
    mismatched_confusion += r.confusion != conf;
    long correct = 0;
    double rec = 0.0, f1 = 0.0, auc = 0.0;
    int present = 0, auc_n = 0;
    for (int c = 0; c < q; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      correct += conf[cc][cc];
      long support = 0, predicted = 0;
      for (int k = 0; k < q; ++k) {
        support += conf[cc][static_cast<std::size_t>(k)];
        predicted += conf[static_cast<std::size_t>(k)][cc];
      }
      if (support == 0) continue;
      ++present;
      const double recall = static_cast<double>(conf[cc][cc]) / static_cast<double>(support);
      const double precision = predicted ? static_cast<double>(conf[cc][cc]) / static_cast<double>(predicted) : 0.0;
      rec += recall;
      f1 += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
      if (support == n) continue;
      std::vector<double> col;
      std::vector<bool> pos;
      for (int i = 0; i < n; ++i) {
        col.push_back(s[static_cast<std::size_t>(i)][cc]);
        pos.push_back(truth[static_cast<std::size_t>(i)] == c + 1);
      }
      auc += mann_whitney(col, pos);
      ++auc_n;
    }
    worst = std::max({worst, std::abs(r.accuracy - static_cast<double>(correct) / n), std::abs(r.macro_recall - rec / present),
                      std::abs(r.macro_f1 - f1 / present)});
    if (auc_n > 0) worst = std::max(worst, std::abs(r.macro_auc.value_or(NAN) - auc / auc_n));
  }
  return {mismatched_confusion == 0 && worst <= 1e-12,
          "200 prediction sets, confusion mismatches " + std::to_string(mismatched_confusion) + ", max |diff| " + fmt(worst, 3)};
}

// ---------------------------------------------------------------------------
// Shared synthetic setup for 6 to 8

struct Setup {
  TrainingData data;
  Protocol protocol;
  TrainConfig cfg;
};

Setup default_setup(const fs::path& root) {
  SyntheticSpec train_spec;
  train_spec.n_samples = 2000;
  train_spec.seed = 1;
  SyntheticSpec test_spec = train_spec;
  test_spec.n_samples = 600;
  test_spec.seed = 2;
  test_spec.id_prefix = "t";
  const auto annotators = AnnotatorModel::defaults();
  const fs::path train_manifest = gen_dataset(train_spec, annotators, root / "train");
  const fs::path test_manifest = gen_dataset(test_spec, annotators, root / "test");

  PrepConfig prep;
  prep.crop_side = 32;
  prep.patch_size = 32;
  const auto train_records = load_manifest(train_manifest);
  const auto test_records = load_manifest(test_manifest);
  const GroundTruth test_truth = read_ground_truth(root / "test" / "ground_truth.json");

  Setup s;
  s.data = build_training_data(train_records, load_patches(train_records, prep), 5);
  s.protocol.test = build_test_set(test_records, load_patches(test_records, prep), 5,
                                   [&](const std::string& id) { return test_truth.at(id); });
  s.cfg.epochs = 30;
  s.cfg.m = 6;
  s.cfg.lr_pretrain = 1e-3;
  s.cfg.lr_finetune = 5e-4;
  s.cfg.seed = 0;
  return s;
}

// ---------------------------------------------------------------------------
// 6. Directional ordering

Outcome directional_ordering(const Setup& s, int jobs) {
  const CompareResult r = compare_methods(s.data, s.protocol, s.cfg, 3, jobs);
  auto mean = [&](const char* m) { return r.summary.at(m).metrics.at("accuracy").mean; };
  auto values = [&](const char* m) {
    std::string v;
    for (double a : r.summary.at(m).metrics.at("accuracy").values) v += (v.empty() ? "" : "/") + fmt(a, 4);
    return v;
  };
  const double dar = mean("mv_dar"), prd = mean("mv_prd"), ave = mean("ave");
  Outcome o;
  o.pass = dar - prd >= 0.01 && dar - ave >= 0.01;
  o.detail = "mean accuracy MV-DAR " + fmt(dar) + " [" + values("mv_dar") + "], MV-Prd " + fmt(prd) + " [" +
             values("mv_prd") + "], AVE " + fmt(ave) + " [" + values("ave") + "]; margins " + fmt(100 * (dar - prd), 3) +
             " and " + fmt(100 * (dar - ave), 3) + " points (need >= 1)";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Robustness trend

Outcome robustness_trend(const Setup& s, int jobs) {
  const std::vector<double> fractions{0.2, 0.4, 0.6, 0.8, 1.0};
  const RobustnessResult r = robustness_sweep(s.data, s.protocol, s.cfg, fractions, 3, jobs);
  std::string curve;
  for (const auto& p : r.points) curve += (curve.empty() ? "" : ", ") + fmt(p.fraction, 2) + ":" + fmt(p.summary.mean);
  const double lo = r.points.front().summary.mean, hi = r.points.back().summary.mean;
  return {hi >= lo, "mean accuracy by fraction {" + curve + "}; 1.0 vs 0.2: " + fmt(hi) + " vs " + fmt(lo)};
}

// ---------------------------------------------------------------------------
// 8. Reproducibility and formats

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome reproducibility(const Setup& s, const fs::path& root) {
  std::vector<std::string> bad;

  // Same config and seed, two runs, byte-identical metrics.json.
  TrainingData small;
  small.q = s.data.q;
  small.cr.assign(s.data.cr.begin(), s.data.cr.begin() + 80);
  small.ic.assign(s.data.ic.begin(), s.data.ic.begin() + 80);
  small.lr.assign(s.data.lr.begin(), s.data.lr.begin() + 80);
  const std::vector<Example> test(s.protocol.test.begin(), s.protocol.test.begin() + 100);
  TrainConfig cfg = s.cfg;
  cfg.epochs = 2;
  cfg.m = 4;
  cfg.seed = 11;
  for (int run = 0; run < 2; ++run) {
    const auto model = run_pipeline(small, Method::mv_dar, cfg).model;
    write_metrics_report(root / ("repro" + std::to_string(run)), evaluate(model, test));
  }
  const bool same = slurp(root / "repro0" / "metrics.json") == slurp(root / "repro1" / "metrics.json");
  if (!same) bad.push_back("metrics.json differs between identical runs");

  // NVOL round trip with awkward values.
  std::mt19937_64 rng(8);
  std::vector<float> vox(7 * 5 * 3);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (auto& v : vox) v = u(rng);
  vox[0] = -0.0f;
  vox[1] = std::numeric_limits<float>::denorm_min();
  vox[2] = std::numeric_limits<float>::max();
  vox[3] = std::numeric_limits<float>::lowest();
  const Volume vol({7, 5, 3}, {0.7f, 1.1f, 2.5f}, vox);
  write_volume(vol, root / "rt.nvol");
  const Volume back = read_volume(root / "rt.nvol");
  const bool nvol_ok = back.dims() == vol.dims() &&
                       std::memcmp(back.spacing().data(), vol.spacing().data(), sizeof(float) * 3) == 0 &&
                       back.voxels().size() == vox.size() &&
                       std::memcmp(back.voxels().data(), vox.data(), sizeof(float) * vox.size()) == 0;
  if (!nvol_ok) bad.push_back("NVOL round trip is not bit-exact");

  // Cross-validation folds over the CR subset.
  std::vector<int> classes;
  std::set<std::string> cr_ids, external;
  for (const auto& e : s.data.cr) {
    classes.push_back(e.label.hot_class());
    cr_ids.insert(e.id);
  }
  for (const auto* set : {&s.data.ic, &s.data.lr}) {
    for (const auto& e : *set) external.insert(e.id);
  }
  long fold_problems = 0;
  for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
    const auto folds = stratified_folds(classes, 5, seed);
    std::multiset<std::string> seen;
    for (const auto& f : folds) {
      for (const auto& e : fold_test_set(s.data, f)) {
        seen.insert(e.id);
        fold_problems += external.count(e.id) > 0;
      }
      const TrainingData tr = without_fold(s.data, f);
      fold_problems += tr.ic.size() != s.data.ic.size() || tr.lr.size() != s.data.lr.size();
      fold_problems += tr.cr.size() + f.size() != s.data.cr.size();
    }
    fold_problems += std::multiset<std::string>(cr_ids.begin(), cr_ids.end()) != seen;
  }
  if (fold_problems) bad.push_back(std::to_string(fold_problems) + " fold violations");

  return {bad.empty(), bad.empty() ? "metrics.json identical, NVOL bit-exact, 3 x 5 folds disjoint and exhaustive over " +
                                         std::to_string(cr_ids.size()) + " CR ids with no IC/LR in test folds"
                                   : bad.front()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8};
  int jobs = 1;
  app.add_option("--criteria", selected, "Criteria to run")->delimiter(',');
  app.add_option("--jobs", jobs, "Worker threads for 6 and 7")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return std::find(selected.begin(), selected.end(), c) != selected.end(); };

  bool all_pass = true;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& run) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all_pass = all_pass && o.pass;
    std::cout << "Criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << name << " (" << fmt(sec, 3)
              << " s) - " << o.detail << std::endl;
  };

  report(1, "loss closed forms", loss_closed_forms);
  report(2, "gradient checks", gradient_checks);
  report(3, "attention limits", attention_limits);
  report(4, "partition properties", partition_properties);
  report(5, "metric oracle", metric_oracle);

  if (wanted(6) || wanted(7) || wanted(8)) {
    test::TempDir root("acceptance");
    std::optional<Setup> setup;
    std::string setup_error;
    try {
      setup = default_setup(root.path());
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    auto with_setup = [&](const std::function<Outcome(const Setup&)>& f) {
      return [&, f]() -> Outcome {
        if (!setup) return {false, "synthetic setup failed: " + setup_error};
        return f(*setup);
      };
    };
    report(6, "directional ordering", with_setup([&](const Setup& s) { return directional_ordering(s, jobs); }));
    report(7, "robustness trend", with_setup([&](const Setup& s) { return robustness_trend(s, jobs); }));
    report(8, "reproducibility and formats", with_setup([&](const Setup& s) { return reproducibility(s, root.path()); }));
  }
  return all_pass ? 0 : 1;
}
