#include "dar/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "dar/error.hpp"
#include "dar/rng.hpp"

namespace dar {

using json = nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(Method m) {
  switch (m) {
    case Method::mv_dar: return "mv_dar";
    case Method::mv_prd: return "mv_prd";
    case Method::ave: return "ave";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  if (name == "mv_dar") return Method::mv_dar;
  if (name == "mv_prd") return Method::mv_prd;
  if (name == "ave") return Method::ave;
  throw ConfigError("unknown method '" + name + "' (expected mv_dar, mv_prd or ave)");
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Pipelines

int input_size_of(const TrainingData& data) {
  for (const auto* set : {&data.cr, &data.ic, &data.lr}) {
    if (!set->empty()) return set->front().patches.axial.rows;
  }
  throw DataError("training data is empty");
}

namespace {

void tag_log(TrainLog& log, View v) { log.stage += std::string("/") + to_string(v); }

PretrainedViews pretrain_views_impl(const TrainingData& data, const TrainConfig& cfg, bool siblings,
                                    const PretrainedViews* reuse_prd) {
  const int s = input_size_of(data);
  PretrainedViews out;
  out.has_siblings = siblings;
  for (View v : kViews) {
    const auto vi = static_cast<std::size_t>(v);
    if (reuse_prd) {
      out.prd[vi] = reuse_prd->prd[vi];
    } else {
      auto r = pretrain(Role::prd, v, data.cr, cfg, s, data.q);
      out.prd[vi] = std::move(r.model);
      tag_log(r.log, v);
      out.logs.push_back(std::move(r.log));
    }
    if (!siblings) continue;
    for (Role role : {Role::cf, Role::lr}) {
      auto r = pretrain(role, v, role == Role::cf ? data.ic : data.lr, cfg, s, data.q);
      (role == Role::cf ? out.cf : out.lr)[vi] = std::move(r.model);
      tag_log(r.log, v);
      out.logs.push_back(std::move(r.log));
    }
  }
  return out;
}

}  // namespace

PretrainedViews pretrain_views(const TrainingData& data, const TrainConfig& cfg, bool siblings) {
  return pretrain_views_impl(data, cfg, siblings, nullptr);
}

FinetunedViews finetune_views(const TrainingData& data, Method method, const TrainConfig& cfg,
                              const PretrainedViews& pre) {
  if (method == Method::mv_dar && !pre.has_siblings) throw RuntimeError("MV-DAR needs pretrained CF and LR networks");
  FinetunedViews out;
  for (View v : kViews) {
    const auto vi = static_cast<std::size_t>(v);
    Trained<DarModel> ft;
    if (method == Method::mv_dar) {
      ft = finetune_dar(v, pre.prd[vi], pre.cf[vi], pre.lr[vi], data.cr, cfg, cfg.resolved_k());
    } else {
      TrainConfig plain = cfg;
      plain.loss.mu = 0.0;
      plain.loss.delta = 0.0;
      const Backbone& p = pre.prd[vi];
      ft = finetune_dar(v, p, p, p, data.cr, plain, p.spec().m() + 1);
    }
    out.models[vi] = std::move(ft.model);
    tag_log(ft.log, v);
    out.logs.push_back(std::move(ft.log));
  }
  return out;
}

PipelineResult finish_pipeline(const TrainingData& data, Method method, const TrainConfig& cfg,
                               const PretrainedViews& pre) {
  FinetunedViews ft = finetune_views(data, method, cfg, pre);
  PipelineResult out;
  out.logs = std::move(ft.logs);
  MvModel mv;
  mv.views = std::move(ft.models);
  mv.init_fusion_average();
  auto fused = train_fusion(std::move(mv), data.cr, cfg);
  out.model = std::move(fused.model);
  out.logs.push_back(std::move(fused.log));
  return out;
}

PipelineResult run_pipeline(const TrainingData& data, Method method, const TrainConfig& cfg) {
  const TrainingData proxy = method == Method::ave ? proxy_label_data(data) : TrainingData{};
  const TrainingData& d = method == Method::ave ? proxy : data;
  const PretrainedViews pre = pretrain_views(d, cfg, method == Method::mv_dar);
  PipelineResult out = finish_pipeline(d, method, cfg, pre);
  out.logs.insert(out.logs.begin(), pre.logs.begin(), pre.logs.end());
  return out;
}

// ---------------------------------------------------------------------------
// Folds

std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> classes, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  if (classes.size() < static_cast<std::size_t>(folds)) {
    throw DataError("CR subset has " + std::to_string(classes.size()) + " samples, fewer than " +
                    std::to_string(folds) + " folds");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < classes.size(); ++i) by_class[classes[i]].push_back(i);
  std::vector<std::size_t> sequence;
  for (auto& [cls, members] : by_class) {
    auto rng = make_rng(seed, {tag(Stream::folds), static_cast<std::uint64_t>(cls)});
    std::shuffle(members.begin(), members.end(), rng);
    sequence.insert(sequence.end(), members.begin(), members.end());
  }
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < sequence.size(); ++i) out[i % static_cast<std::size_t>(folds)].push_back(sequence[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

TrainingData without_fold(const TrainingData& data, std::span<const std::size_t> fold) {
  std::vector<bool> held(data.cr.size(), false);
  for (auto i : fold) held.at(i) = true;
  TrainingData out;
  out.q = data.q;
  out.ic = data.ic;
  out.lr = data.lr;
  for (std::size_t i = 0; i < data.cr.size(); ++i) {
    if (!held[i]) out.cr.push_back(data.cr[i]);
  }
  return out;
}

std::vector<Example> fold_test_set(const TrainingData& data, std::span<const std::size_t> fold) {
  std::vector<Example> out;
  out.reserve(fold.size());
  for (auto i : fold) {
    Example e = data.cr.at(i);
    e.truth = e.label.hot_class();
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::vector<int> cr_classes(const TrainingData& data) {
  std::vector<int> c;
  c.reserve(data.cr.size());
  for (const auto& ex : data.cr) c.push_back(ex.label.hot_class());
  return c;
}

// Training sets per fold: a single entry (the full data) for hold-out.
struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;
  std::vector<TrainingData> train;
};

FoldPlan plan_folds(const TrainingData& data, const Protocol& protocol, std::uint64_t seed) {
  FoldPlan plan;
  if (protocol.holdout()) {
    plan.train.push_back(data);
    return plan;
  }
  const auto classes = cr_classes(data);
  plan.folds = stratified_folds(classes, protocol.folds, seed);
  for (const auto& f : plan.folds) plan.train.push_back(without_fold(data, f));
  return plan;
}

MetricsReport score(const TrainingData& data, const Protocol& protocol, const FoldPlan& plan,
                    const std::vector<MvModel>& models) {
  if (protocol.holdout()) return evaluate(models.at(0), protocol.test);
  std::vector<std::vector<double>> scores(data.cr.size());
  std::vector<int> truth(data.cr.size());
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    for (auto i : plan.folds[f]) {
      scores[i] = predict_mv(models[f], data.cr[i].patches);
      truth[i] = data.cr[i].label.hot_class();
    }
  }
  return evaluate_scores(scores, truth, data.q);
}

TrainConfig with_seed(const TrainConfig& cfg, std::uint64_t seed) {
  TrainConfig c = cfg;
  c.seed = seed;
  return c;
}

}  // namespace

MetricsReport assess(const TrainingData& data, const Protocol& protocol, std::uint64_t seed, const FoldTrainer& train) {
  const FoldPlan plan = plan_folds(data, protocol, seed);
  std::vector<MvModel> models;
  for (std::size_t f = 0; f < plan.train.size(); ++f) {
    models.push_back(train(plan.train[f], protocol.holdout() ? -1 : static_cast<int>(f)));
  }
  return score(data, protocol, plan, models);
}

RunSummary summarize_runs(std::span<const MetricsReport> runs) {
  RunSummary s;
  std::vector<double> acc, rec, f1, auc;
  bool all_auc = !runs.empty();
  for (const auto& r : runs) {
    acc.push_back(r.accuracy);
    rec.push_back(r.macro_recall);
    f1.push_back(r.macro_f1);
    if (r.macro_auc) auc.push_back(*r.macro_auc);
    else all_auc = false;
  }
  s.metrics["accuracy"] = summarize(acc);
  s.metrics["macro_recall"] = summarize(rec);
  s.metrics["macro_f1"] = summarize(f1);
  if (all_auc) s.metrics["macro_auc"] = summarize(auc);
  return s;
}

// ---------------------------------------------------------------------------
// Cross-validation

CrossvalResult crossval(const TrainingData& data, Method method, const TrainConfig& cfg, int folds, int repeats,
                        int seed_stride, int jobs) {
  if (repeats < 1) throw ConfigError("repeats must be at least 1");
  if (seed_stride < 0) throw ConfigError("seed stride must be non-negative");
  CrossvalResult out;
  out.folds = folds;
  out.repeats = repeats;
  out.seed_stride = seed_stride;
  const Protocol protocol{{}, folds};
  std::vector<FoldPlan> plans;
  for (int r = 0; r < repeats; ++r) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(seed_stride);
    out.seeds.push_back(seed);
    plans.push_back(plan_folds(data, protocol, seed));
    auto& ids = out.fold_ids.emplace_back();
    for (const auto& f : plans.back().folds) {
      auto& fi = ids.emplace_back();
      for (auto i : f) fi.push_back(data.cr[i].id);
    }
  }
  const auto nf = static_cast<std::size_t>(folds);
  std::vector<std::vector<MvModel>> models(static_cast<std::size_t>(repeats), std::vector<MvModel>(nf));
  parallel_for(static_cast<std::size_t>(repeats) * nf, jobs, [&](std::size_t task) {
    const std::size_t r = task / nf, f = task % nf;
    models[r][f] = run_pipeline(plans[r].train[f], method, with_seed(cfg, out.seeds[r])).model;
  });
  for (std::size_t r = 0; r < plans.size(); ++r) out.runs.push_back(score(data, protocol, plans[r], models[r]));
  out.summary = summarize_runs(out.runs);
  return out;
}

// ---------------------------------------------------------------------------
// Method comparison

CompareResult compare_methods(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg, int n_seeds,
                              int jobs) {
  if (n_seeds < 1) throw ConfigError("need at least one seed");
  constexpr std::array<Method, 3> methods{Method::mv_dar, Method::mv_prd, Method::ave};
  CompareResult out;
  for (int s = 0; s < n_seeds; ++s) out.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(s));
  const auto ns = static_cast<std::size_t>(n_seeds);
  std::vector<MetricsReport> reports(methods.size() * ns);
  parallel_for(reports.size(), jobs, [&](std::size_t task) {
    const Method m = methods[task / ns];
    const std::uint64_t seed = out.seeds[task % ns];
    reports[task] = assess(data, protocol, seed, [&](const TrainingData& train, int) {
      return run_pipeline(train, m, with_seed(cfg, seed)).model;
    });
  });
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    auto& runs = out.runs[to_string(methods[mi])];
    runs.assign(reports.begin() + static_cast<std::ptrdiff_t>(mi * ns),
                reports.begin() + static_cast<std::ptrdiff_t>((mi + 1) * ns));
    out.summary[to_string(methods[mi])] = summarize_runs(runs);
  }
  if (n_seeds >= 2) {
    const auto& base = out.summary.at("mv_dar").metrics;
    for (Method other : {Method::mv_prd, Method::ave}) {
      const auto& theirs = out.summary.at(to_string(other)).metrics;
      for (const auto& [metric, summary] : base) {
        if (!theirs.count(metric)) continue;
        out.ttests[std::string("mv_dar_vs_") + to_string(other) + ":" + metric] =
            paired_ttest(summary.values, theirs.at(metric).values);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robustness and grid sweeps

RobustnessResult robustness_sweep(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg,
                                  std::span<const double> fractions, int n_seeds, int jobs) {
  if (n_seeds < 1) throw ConfigError("need at least one seed");
  if (fractions.empty()) throw ConfigError("robustness sweep needs at least one fraction");
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("ambiguous-data fractions must lie in [0, 1]");
  }
  RobustnessResult out;
  for (int s = 0; s < n_seeds; ++s) out.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(s));
  const auto ns = static_cast<std::size_t>(n_seeds);

  std::vector<FoldPlan> plans;
  for (auto seed : out.seeds) plans.push_back(plan_folds(data, protocol, seed));
  // Prd pretraining depends only on the CR data, so it is shared across fractions.
  std::vector<std::size_t> offsets;
  std::size_t n_pre = 0;
  for (const auto& p : plans) {
    offsets.push_back(n_pre);
    n_pre += p.train.size();
  }
  std::vector<PretrainedViews> prd(n_pre);
  parallel_for(n_pre, jobs, [&](std::size_t task) {
    const std::size_t s = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), task) - offsets.begin()) - 1;
    prd[task] = pretrain_views(plans[s].train[task - offsets[s]], with_seed(cfg, out.seeds[s]), false);
  });

  std::vector<MetricsReport> reports(fractions.size() * ns);
  parallel_for(reports.size(), jobs, [&](std::size_t task) {
    const std::size_t fi = task / ns, s = task % ns;
    const double fraction = fractions[fi];
    const TrainConfig c = with_seed(cfg, out.seeds[s]);
    std::vector<MvModel> models;
    for (std::size_t f = 0; f < plans[s].train.size(); ++f) {
      const PretrainedViews& base = prd[offsets[s] + f];
      if (fraction == 0.0) {
        models.push_back(finish_pipeline(plans[s].train[f], Method::mv_prd, c, base).model);
      } else {
        const TrainingData sub = subsample_ambiguous(plans[s].train[f], fraction, out.seeds[s]);
        const PretrainedViews pre = pretrain_views_impl(sub, c, true, &base);
        models.push_back(finish_pipeline(sub, Method::mv_dar, c, pre).model);
      }
    }
    reports[task] = score(data, protocol, plans[s], models);
  });

  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    CurvePoint p;
    p.fraction = fractions[fi];
    for (std::size_t s = 0; s < ns; ++s) p.accuracy.push_back(reports[fi * ns + s].accuracy);
    p.summary = summarize(p.accuracy);
    out.points.push_back(std::move(p));
  }
  return out;
}

std::vector<SweepRow> grid_sweep(const TrainingData& data, const Protocol& protocol, const TrainConfig& cfg,
                                 const SweepGrid& grid, int n_seeds, int jobs) {
  if (n_seeds < 1) throw ConfigError("need at least one seed");
  if (grid.k.empty() || grid.mu.empty() || grid.delta.empty()) throw ConfigError("sweep grid axes must be non-empty");
  for (int k : grid.k) {
    if (k < 1 || k > cfg.m + 1) throw ConfigError("sweep k=" + std::to_string(k) + " outside 1.." + std::to_string(cfg.m + 1));
  }
  for (double v : grid.mu) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep mu values must lie in [0, 1]");
  }
  for (double v : grid.delta) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep delta values must lie in [0, 1]");
  }
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < n_seeds; ++s) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(s));
  const auto ns = static_cast<std::size_t>(n_seeds);

  std::vector<FoldPlan> plans;
  for (auto seed : seeds) plans.push_back(plan_folds(data, protocol, seed));
  std::vector<std::size_t> offsets;
  std::size_t n_pre = 0;
  for (const auto& p : plans) {
    offsets.push_back(n_pre);
    n_pre += p.train.size();
  }
  std::vector<PretrainedViews> pre(n_pre);
  parallel_for(n_pre, jobs, [&](std::size_t task) {
    const std::size_t s = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), task) - offsets.begin()) - 1;
    pre[task] = pretrain_views(plans[s].train[task - offsets[s]], with_seed(cfg, seeds[s]), true);
  });

  std::vector<SweepRow> rows;
  for (int k : grid.k) {
    for (double mu : grid.mu) {
      for (double delta : grid.delta) rows.push_back({k, mu, delta, {}, {}});
    }
  }
  std::vector<double> acc(rows.size() * ns);
  parallel_for(acc.size(), jobs, [&](std::size_t task) {
    const std::size_t ri = task / ns, s = task % ns;
    TrainConfig c = with_seed(cfg, seeds[s]);
    c.k = rows[ri].k;
    c.loss.mu = rows[ri].mu;
    c.loss.delta = rows[ri].delta;
    std::vector<MvModel> models;
    for (std::size_t f = 0; f < plans[s].train.size(); ++f) {
      models.push_back(finish_pipeline(plans[s].train[f], Method::mv_dar, c, pre[offsets[s] + f]).model);
    }
    acc[task] = score(data, protocol, plans[s], models).accuracy;
  });
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t s = 0; s < ns; ++s) rows[ri].accuracy.push_back(acc[ri * ns + s]);
    rows[ri].summary = summarize(rows[ri].accuracy);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(json& j, const RunSummary& s) {
  j = json::object();
  for (const auto& [k, v] : s.metrics) j[k] = v;
}

void to_json(json& j, const CrossvalResult& r) {
  j = json{{"folds", r.folds},
           {"repeats", r.repeats},
           {"seed_stride", r.seed_stride},
           {"seeds", r.seeds},
           {"fold_ids", r.fold_ids},
           {"runs", r.runs},
           {"summary", r.summary}};
}

void to_json(json& j, const CompareResult& r) {
  j = json{{"seeds", r.seeds}, {"summary", r.summary}, {"ttests", r.ttests}};
  json runs = json::object();
  for (const auto& [m, reports] : r.runs) runs[m] = reports;
  j["runs"] = runs;
}

void to_json(json& j, const RobustnessResult& r) {
  json pts = json::array();
  for (const auto& p : r.points) pts.push_back({{"fraction", p.fraction}, {"accuracy", p.accuracy}, {"summary", p.summary}});
  j = json{{"seeds", r.seeds}, {"points", pts}};
}

void to_json(json& j, const SweepRow& r) {
  j = json{{"k", r.k}, {"mu", r.mu}, {"delta", r.delta}, {"accuracy", r.accuracy}, {"summary", r.summary}};
}

// ---------------------------------------------------------------------------
// Report files

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

// Shortest text that reads back to the same double.
std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

}  // namespace

void write_metrics_report(const fs::path& dir, const MetricsReport& report) {
  fs::create_directories(dir);
  open_out(dir / "metrics.json") << json(report).dump(2) << '\n';
  for (const auto& c : report.per_class) {
    if (c.roc.empty()) continue;
    auto out = open_out(dir / ("roc_" + std::to_string(c.cls) + ".csv"));
    out << "fpr,tpr\n";
    for (const auto& p : c.roc) out << num(p.fpr) << ',' << num(p.tpr) << '\n';
  }
}

void write_metrics_csv(const fs::path& path, const std::vector<std::pair<std::string, MetricsReport>>& runs) {
  auto out = open_out(path);
  out << "run,accuracy,macro_recall,macro_f1,macro_auc\n";
  for (const auto& [label, r] : runs) {
    out << label << ',' << num(r.accuracy) << ',' << num(r.macro_recall) << ',' << num(r.macro_f1) << ',' << num(r.macro_auc)
        << '\n';
  }
}

void write_curve_csv(const fs::path& path, const RobustnessResult& r) {
  auto out = open_out(path);
  out << "fraction,seed,accuracy\n";
  for (const auto& p : r.points) {
    for (std::size_t s = 0; s < p.accuracy.size(); ++s) out << num(p.fraction) << ',' << r.seeds[s] << ',' << num(p.accuracy[s]) << '\n';
  }
}

void write_sweep_csv(const fs::path& path, std::span<const SweepRow> rows) {
  auto out = open_out(path);
  out << "k,mu,delta,accuracy_mean,accuracy_std\n";
  for (const auto& r : rows) {
    out << r.k << ',' << num(r.mu) << ',' << num(r.delta) << ',' << num(r.summary.mean) << ',' << num(r.summary.std)
        << '\n';
  }
}

}  // namespace dar
